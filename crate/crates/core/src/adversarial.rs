//! Domain-adversarial training: a label predictor and a domain
//! discriminator share the encoder, joined through a gradient reversal
//! layer so that one backward pass minimizes the label loss while the
//! encoder maximizes the discriminator's loss.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nnet::{self, GradBuffer, Network};
use crate::training::{
    fit, pad_rows, supervised_pass, AdaptationData, Batch, Classifier, EvalSet, Objective, RunResult,
    StepSeeds, TrainConfig, Trainable,
};
use crate::rng;

/// Identity going forward; multiplies gradients by `-lambda` going back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlLayer {
    pub lambda: f64,
}

impl GrlLayer {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be finite and ≥ 0, got {lambda}")));
        }
        Ok(GrlLayer { lambda })
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        x.clone()
    }

    pub fn backward(&self, g: &Matrix) -> Matrix {
        g.map(|v| -self.lambda * v)
    }
}

/// `-lambda * g` elementwise.
pub fn grl_backward(g: &[f64], lambda: f64) -> Vec<f64> {
    g.iter().map(|v| -lambda * v).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UdaModel {
    /// Encoder and label predictor.
    pub classifier: Classifier,
    pub domain_head: Network,
    pub grl: GrlLayer,
    /// Encoder layer whose output feeds the discriminator.
    pub tap_layer: usize,
}

impl UdaModel {
    /// Encoder and label head are initialized exactly as the baseline
    /// [`Classifier`] for the same config; the discriminator gets its own seed.
    pub fn new(input_dim: usize, cfg: &TrainConfig, lambda: f64, tap_layer: Option<usize>) -> Result<Self> {
        let classifier = Classifier::new(input_dim, cfg)?;
        let n_layers = classifier.encoder.layers.len();
        let tap_layer = tap_layer.unwrap_or(n_layers - 1);
        if tap_layer >= n_layers {
            return Err(Error::config(
                "tap_layer",
                format!("encoder has {n_layers} layers, tap {tap_layer} out of range"),
            ));
        }
        let tap_dim = classifier.encoder.layers[tap_layer].output_dim();
        let domain_head = Network::head(
            tap_dim,
            cfg.head_hidden,
            2,
            cfg.dropout,
            rng::derive(cfg.seed, "domain_head", &[]),
        )?;
        Ok(UdaModel {
            classifier,
            domain_head,
            grl: GrlLayer::new(lambda)?,
            tap_layer,
        })
    }

    pub fn encoder(&self) -> &Network {
        &self.classifier.encoder
    }
}

impl Trainable for UdaModel {
    fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    fn networks(&self) -> Vec<&Network> {
        vec![&self.classifier.encoder, &self.classifier.label_head, &self.domain_head]
    }

    fn networks_mut(&mut self) -> Vec<&mut Network> {
        vec![
            &mut self.classifier.encoder,
            &mut self.classifier.label_head,
            &mut self.domain_head,
        ]
    }
}

/// Labeled source rows, unlabeled target rows, and a domain id per row
/// (source rows first).
#[derive(Debug, Clone)]
pub struct UdaBatch {
    pub source: Matrix,
    pub labels: Vec<usize>,
    pub target: Matrix,
    pub domains: Vec<usize>,
}

impl UdaBatch {
    /// Domain 0 for source rows, 1 for target rows.
    pub fn new(source: Matrix, labels: Vec<usize>, target: Matrix) -> Self {
        let domains = std::iter::repeat_n(0, source.rows())
            .chain(std::iter::repeat_n(1, target.rows()))
            .collect();
        UdaBatch {
            source,
            labels,
            target,
            domains,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UdaLoss {
    /// `L_y - lambda * L_d`.
    pub total: f64,
    pub label_loss: f64,
    pub domain_loss: f64,
    /// Encoder, label head, domain head.
    pub grads: [GradBuffer; 3],
}

fn uda_loss_rows(model: &UdaModel, x: &Matrix, labels: &[usize], domains: &[usize], seeds: StepSeeds) -> Result<UdaLoss> {
    if labels.is_empty() {
        return Err(Error::invalid("batch has zero source rows"));
    }
    if domains.len() != x.rows() {
        return Err(Error::shape(
            format!("{} domain ids", x.rows()),
            format!("{}", domains.len()),
        ));
    }
    let pass = supervised_pass(&model.classifier, x, labels, seeds)?;
    let tapped = model.grl.forward(pass.encoder_cache.layer_output(model.tap_layer));
    let dom_cache = model.domain_head.forward(&tapped, true, seeds.domain_head)?;
    let (domain_loss, d_dom_logits) = nnet::xent_loss(dom_cache.output(), domains)?;
    let dom_back = model.domain_head.backward(&dom_cache, &d_dom_logits)?;

    let d_features = pad_rows(&pass.source_feature_grad, x.rows());
    let reversed;
    let mut taps = Vec::new();
    // lambda = 0 detaches the encoder from L_d entirely
    if model.grl.lambda != 0.0 {
        reversed = model.grl.backward(&dom_back.input_grad);
        taps.push((model.tap_layer, &reversed));
    }
    let enc = model
        .encoder()
        .backward_with_taps(&pass.encoder_cache, &d_features, &taps)?;
    Ok(UdaLoss {
        total: pass.label_loss - model.grl.lambda * domain_loss,
        label_loss: pass.label_loss,
        domain_loss,
        grads: [enc.grads, pass.label_grads, dom_back.grads],
    })
}

/// Combined loss of a batch and the gradients that realize the minimax:
/// label head and encoder descend `L_y`, the discriminator descends `L_d`,
/// and the encoder receives `-lambda * dL_d` through the reversal layer.
pub fn uda_loss(model: &UdaModel, batch: &UdaBatch, seeds: StepSeeds) -> Result<UdaLoss> {
    let x = batch.source.vstack(&batch.target)?;
    uda_loss_rows(model, &x, &batch.labels, &batch.domains, seeds)
}

struct Adversarial;

impl Objective for Adversarial {
    type Model = UdaModel;

    fn batch_loss(&mut self, model: &UdaModel, batch: &Batch, seeds: StepSeeds) -> Result<(f64, Vec<GradBuffer>)> {
        let domains: Vec<usize> = std::iter::repeat_n(0, batch.n_source())
            .chain(std::iter::repeat_n(1, batch.n_target()))
            .collect();
        let loss = uda_loss_rows(model, &batch.x, &batch.source_labels, &domains, seeds)?;
        Ok((loss.total, loss.grads.into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UdaConfig {
    pub lambda: f64,
    pub tap_layer: Option<usize>,
}

/// Adversarial adaptation from the labeled source to the unlabeled target.
pub fn train_uda(data: &AdaptationData, cfg: &TrainConfig, uda: UdaConfig) -> Result<(UdaModel, RunResult)> {
    let model = UdaModel::new(data.input_dim(), cfg, uda.lambda, uda.tap_layer)?;
    fit(&mut Adversarial, model, data, cfg)
}

/// Every ordered pair of distinct domain ids present in `domain_labels`.
pub fn ordered_pairs(domain_labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let ids: BTreeSet<usize> = domain_labels.iter().copied().collect();
    if ids.len() < 2 {
        return Err(Error::DegenerateDomainSplit(
            "fewer than two distinct domain labels".into(),
        ));
    }
    Ok(ids
        .iter()
        .flat_map(|&a| ids.iter().filter(move |&&b| b != a).map(move |&b| (a, b)))
        .collect())
}

/// A pooled training set whose domains come from a clustering or topic model.
#[derive(Debug, Clone)]
pub struct PooledData {
    pub features: Matrix,
    /// `Some` only for documents whose labels may be trained on.
    pub labels: Vec<Option<usize>>,
    pub source_val: EvalSet,
    pub target_val: EvalSet,
    pub source_test: EvalSet,
    pub target_test: EvalSet,
}

/// Adversarial training where documents of domain `from` act as the labeled
/// source and documents of domain `to` as the unlabeled target.
pub fn train_uda_with_domain_labels(
    data: &PooledData,
    domain_labels: &[usize],
    pair: (usize, usize),
    cfg: &TrainConfig,
    uda: UdaConfig,
) -> Result<(UdaModel, RunResult)> {
    let (from, to) = pair;
    if from == to {
        return Err(Error::DegenerateDomainSplit(format!("pair {from}→{to} maps a domain onto itself")));
    }
    if domain_labels.len() != data.features.rows() {
        return Err(Error::shape(
            format!("{} domain labels", data.features.rows()),
            format!("{}", domain_labels.len()),
        ));
    }
    let mut src_idx = Vec::new();
    let mut src_labels = Vec::new();
    let mut tgt_idx = Vec::new();
    for (i, (&d, label)) in domain_labels.iter().zip(&data.labels).enumerate() {
        if d == from {
            if let Some(y) = label {
                src_idx.push(i);
                src_labels.push(*y);
            }
        } else if d == to {
            tgt_idx.push(i);
        }
    }
    if src_idx.len() < 2 {
        return Err(Error::DegenerateDomainSplit(format!(
            "domain {from} has {} labeled examples",
            src_idx.len()
        )));
    }
    if tgt_idx.is_empty() {
        return Err(Error::DegenerateDomainSplit(format!("domain {to} is empty")));
    }
    let adaptation = AdaptationData {
        source_train: data.features.select_rows(&src_idx),
        source_labels: src_labels,
        target_train: data.features.select_rows(&tgt_idx),
        target_train_labels: None,
        target_train_ids: Vec::new(),
        source_val: data.source_val.clone(),
        target_val: data.target_val.clone(),
        source_test: data.source_test.clone(),
        target_test: data.target_test.clone(),
    };
    train_uda(&adaptation, cfg, uda)
}

#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub pair: (usize, usize),
    pub result: std::result::Result<RunResult, String>,
}

#[derive(Debug, Clone)]
pub struct PairSweep {
    pub outcomes: Vec<PairOutcome>,
    /// Index into `outcomes` and the model of the best pair.
    pub best: Option<(usize, UdaModel)>,
}

/// Trains every ordered pair and keeps the one with the best selection score
/// (first wins ties). Failed pairs are recorded and skipped.
pub fn sweep_domain_pairs(
    data: &PooledData,
    domain_labels: &[usize],
    cfg: &TrainConfig,
    uda: UdaConfig,
) -> Result<PairSweep> {
    let mut outcomes = Vec::new();
    let mut best: Option<(f64, usize, UdaModel)> = None;
    for pair in ordered_pairs(domain_labels)? {
        let result = match train_uda_with_domain_labels(data, domain_labels, pair, cfg, uda) {
            Ok((model, r)) => {
                let score = r.selection_score(cfg.selection).unwrap_or(0.0);
                if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                    best = Some((score, outcomes.len(), model));
                }
                Ok(r)
            }
            Err(e) => {
                log::warn!("pair {}->{} failed: {e}", pair.0, pair.1);
                Err(e.to_string())
            }
        };
        outcomes.push(PairOutcome { pair, result });
    }
    Ok(PairSweep {
        outcomes,
        best: best.map(|(_, i, m)| (i, m)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grl_examples() {
        assert_eq!(grl_backward(&[2.0, -3.0], 1.0), vec![-2.0, 3.0]);
        assert!(grl_backward(&[2.0, -3.0], 0.0).iter().all(|&v| v == 0.0));
        assert_eq!(grl_backward(&[1.0], 0.1), vec![-0.1]);
    }

    #[test]
    fn double_reversal_scales_by_lambda_squared() {
        let g = [0.3, -1.7, 2.5];
        for lambda in [0.0, 0.1, 1.0, 5.0] {
            let twice = grl_backward(&grl_backward(&g, lambda), lambda);
            for (a, b) in twice.iter().zip(&g) {
                assert!((a - lambda * lambda * b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pairs_over_three_domains() {
        let pairs = ordered_pairs(&[0, 1, 2, 1, 0]).unwrap();
        assert_eq!(pairs.len(), 6);
        for p in [(0, 1), (1, 0), (2, 0), (0, 2), (1, 2), (2, 1)] {
            assert!(pairs.contains(&p));
        }
        assert!(matches!(
            ordered_pairs(&[4, 4, 4]),
            Err(Error::DegenerateDomainSplit(_))
        ));
    }

    fn tiny_model(lambda: f64) -> UdaModel {
        let cfg = TrainConfig {
            encoder_dims: vec![5, 3],
            head_hidden: 4,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        UdaModel::new(6, &cfg, lambda, None).unwrap()
    }

    fn tiny_batch() -> UdaBatch {
        let src = Matrix::from_vec(3, 6, (0..18).map(|i| ((i * 7 % 11) as f64) / 11.0).collect()).unwrap();
        let tgt = Matrix::from_vec(2, 6, (0..12).map(|i| ((i * 5 % 13) as f64) / 13.0).collect()).unwrap();
        UdaBatch::new(src, vec![0, 1, 1], tgt)
    }

    #[test]
    fn lambda_zero_leaves_encoder_untouched_by_domain_loss() {
        let model = tiny_model(0.0);
        let seeds = StepSeeds::new(1, 1, 0);
        let loss = uda_loss(&model, &tiny_batch(), seeds).unwrap();
        assert_eq!(loss.total, loss.label_loss);
        assert!(!loss.grads[2].is_zero());

        let clf = model.classifier.clone();
        let (xs, _) = tiny_batch().source.split_rows(3);
        let pass = supervised_pass(&clf, &xs, &[0, 1, 1], seeds).unwrap();
        let enc = clf.encoder.backward(&pass.encoder_cache, &pass.source_feature_grad).unwrap();
        for (a, b) in loss.grads[0].iter().zip(enc.grads.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn confused_discriminator_contributes_ln2() {
        let mut model = tiny_model(0.7);
        let last = model.domain_head.layers.last_mut().unwrap();
        last.weights.data_mut().fill(0.0);
        last.bias.fill(0.0);
        let loss = uda_loss(&model, &tiny_batch(), StepSeeds::new(1, 1, 0)).unwrap();
        assert!((loss.domain_loss - 2f64.ln()).abs() < 1e-12);
        assert!((loss.total - (loss.label_loss - 0.7 * 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn zero_source_rows_rejected() {
        let model = tiny_model(0.1);
        let batch = UdaBatch::new(Matrix::zeros(0, 6), vec![], Matrix::zeros(2, 6));
        assert!(uda_loss(&model, &batch, StepSeeds::new(0, 0, 0)).is_err());
    }

    #[test]
    fn bad_tap_layer_rejected() {
        let cfg = TrainConfig::default();
        assert!(UdaModel::new(10, &cfg, 0.1, Some(2)).is_err());
        assert_eq!(UdaModel::new(10, &cfg, 0.1, Some(0)).unwrap().domain_head.input_dim(), 256);
    }
}
