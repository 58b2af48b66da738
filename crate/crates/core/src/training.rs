//! Training loop shared by the baseline and every adaptation method: batch
//! scheduling, optimizer bookkeeping, per-epoch evaluation and checkpoint
//! selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::expcli::metrics::{metrics, Metrics};
use crate::matrix::{argmax, Matrix};
use crate::nnet::{self, GradBuffer, Network, Optimizer, OptimizerConfig};
use crate::rng;

/// Which validation accuracy picks the retained checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    SourceValidation,
    /// Needs withheld target labels (synthetic mode).
    TargetValidation,
}

/// Dataset whose size defines one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EpochBasis {
    #[default]
    Larger,
    Smaller,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub encoder_dims: Vec<usize>,
    pub head_hidden: usize,
    pub seed: u64,
    pub selection: Selection,
    pub epoch_basis: EpochBasis,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 64,
            learning_rate: 1e-4,
            warmup_fraction: 0.05,
            weight_decay: 1e-3,
            dropout: 0.1,
            encoder_dims: nnet::DEFAULT_ENCODER_DIMS.to_vec(),
            head_hidden: nnet::DEFAULT_HEAD_HIDDEN,
            seed: 0,
            selection: Selection::SourceValidation,
            epoch_basis: EpochBasis::Larger,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::config("batch_size", "must be even and at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..=0.5).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 0.5]"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction", "must lie in [0, 1)"));
        }
        if self.encoder_dims.is_empty() {
            return Err(Error::config("encoder_dims", "needs at least one layer"));
        }
        Ok(())
    }

    fn optimizer_config(&self, total_steps: usize) -> OptimizerConfig {
        let mut c = OptimizerConfig::new(self.learning_rate, total_steps);
        c.warmup_fraction = self.warmup_fraction;
        c.weight_decay = self.weight_decay;
        c
    }
}

/// Feature encoder followed by the label predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub encoder: Network,
    pub label_head: Network,
}

impl Classifier {
    pub fn new(input_dim: usize, cfg: &TrainConfig) -> Result<Self> {
        let encoder = Network::encoder(
            input_dim,
            &cfg.encoder_dims,
            cfg.dropout,
            rng::derive(cfg.seed, "encoder", &[]),
        )?;
        let label_head = Network::head(
            encoder.output_dim(),
            cfg.head_hidden,
            2,
            cfg.dropout,
            rng::derive(cfg.seed, "label_head", &[]),
        )?;
        Ok(Classifier { encoder, label_head })
    }

    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        self.encoder.predict(x)
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.label_head.predict(&self.features(x)?)
    }

    pub fn probabilities(&self, x: &Matrix) -> Result<Matrix> {
        Ok(nnet::softmax_rows(&self.logits(x)?))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.iter_rows().map(argmax).collect())
    }

    pub fn evaluate(&self, x: &Matrix, labels: &[usize]) -> Result<Metrics> {
        metrics(&self.predict(x)?, labels)
    }
}

/// Dropout seeds for one optimization step, one per network role.
#[derive(Debug, Clone, Copy)]
pub struct StepSeeds {
    pub encoder: u64,
    pub label_head: u64,
    pub domain_head: u64,
}

impl StepSeeds {
    pub fn new(seed: u64, epoch: usize, step: usize) -> Self {
        let c = [epoch as u64, step as u64];
        StepSeeds {
            encoder: rng::derive(seed, "step/encoder", &c),
            label_head: rng::derive(seed, "step/label_head", &c),
            domain_head: rng::derive(seed, "step/domain_head", &c),
        }
    }
}

/// Output of the supervised part of a step: the encoder pass over the whole
/// batch (source rows first) and the label-loss gradients.
pub struct SupervisedPass {
    pub encoder_cache: nnet::ForwardCache,
    pub label_loss: f64,
    pub label_grads: GradBuffer,
    /// dL_y/d features for the source rows.
    pub source_feature_grad: Matrix,
}

/// Runs the encoder on `x` (source rows first) and the label head on the
/// first `source_labels.len()` feature rows.
pub fn supervised_pass(
    model: &Classifier,
    x: &Matrix,
    source_labels: &[usize],
    seeds: StepSeeds,
) -> Result<SupervisedPass> {
    let ns = source_labels.len();
    if ns == 0 || ns > x.rows() {
        return Err(Error::invalid("batch has no labeled source rows"));
    }
    let encoder_cache = model.encoder.forward(x, true, seeds.encoder)?;
    let (fs, _) = encoder_cache.output().split_rows(ns);
    let head_cache = model.label_head.forward(&fs, true, seeds.label_head)?;
    let (label_loss, dlogits) = nnet::xent_loss(head_cache.output(), source_labels)?;
    let back = model.label_head.backward(&head_cache, &dlogits)?;
    Ok(SupervisedPass {
        encoder_cache,
        label_loss,
        label_grads: back.grads,
        source_feature_grad: back.input_grad,
    })
}

/// Pads a source-rows gradient with zero rows for the target part of the batch.
pub fn pad_rows(grad: &Matrix, total_rows: usize) -> Matrix {
    let mut full = Matrix::zeros(total_rows, grad.cols());
    full.data_mut()[..grad.data().len()].copy_from_slice(grad.data());
    full
}

/// A model trained by [`fit`]: a classifier plus any auxiliary networks.
pub trait Trainable: Clone {
    fn classifier(&self) -> &Classifier;
    fn networks(&self) -> Vec<&Network>;
    fn networks_mut(&mut self) -> Vec<&mut Network>;
}

impl Trainable for Classifier {
    fn classifier(&self) -> &Classifier {
        self
    }

    fn networks(&self) -> Vec<&Network> {
        vec![&self.encoder, &self.label_head]
    }

    fn networks_mut(&mut self) -> Vec<&mut Network> {
        vec![&mut self.encoder, &mut self.label_head]
    }
}

/// Rows of one training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub source_idx: Vec<usize>,
    pub target_idx: Vec<usize>,
    /// Source rows followed by target rows.
    pub x: Matrix,
    pub source_labels: Vec<usize>,
}

impl Batch {
    pub fn n_source(&self) -> usize {
        self.source_idx.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_idx.len()
    }
}

#[derive(Debug, Clone)]
pub struct EvalSet {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
}

/// Vectorized source and target splits. Target training labels, when
/// present, are withheld from every loss and only feed diagnostics.
#[derive(Debug, Clone)]
pub struct AdaptationData {
    pub source_train: Matrix,
    pub source_labels: Vec<usize>,
    pub target_train: Matrix,
    pub target_train_labels: Option<Vec<usize>>,
    pub target_train_ids: Vec<String>,
    pub source_val: EvalSet,
    pub target_val: EvalSet,
    pub source_test: EvalSet,
    pub target_test: EvalSet,
}

impl AdaptationData {
    pub fn input_dim(&self) -> usize {
        self.source_train.cols()
    }

    fn validate(&self) -> Result<()> {
        if self.source_train.rows() == 0 {
            return Err(Error::invalid("no labeled source rows"));
        }
        if self.target_train.rows() == 0 {
            return Err(Error::invalid("no target rows"));
        }
        if self.source_train.rows() != self.source_labels.len() {
            return Err(Error::shape(
                format!("{} source labels", self.source_train.rows()),
                format!("{}", self.source_labels.len()),
            ));
        }
        if self.source_train.cols() != self.target_train.cols() {
            return Err(Error::shape(
                format!("{} target columns", self.source_train.cols()),
                format!("{}", self.target_train.cols()),
            ));
        }
        Ok(())
    }
}

/// Per-side batch sizes: ⌈B/2⌉ source and ⌊B/2⌋ target rows.
pub fn batch_halves(batch_size: usize) -> (usize, usize) {
    (batch_size.div_ceil(2), batch_size / 2)
}

pub fn steps_per_epoch(n_source: usize, n_target: usize, batch_size: usize, basis: EpochBasis) -> usize {
    let (bs, bt) = batch_halves(batch_size);
    let s = n_source.div_ceil(bs);
    let t = n_target.div_ceil(bt);
    match basis {
        EpochBasis::Larger => s.max(t),
        EpochBasis::Smaller => s.min(t),
    }
    .max(1)
}

fn cycled_permutation(n: usize, count: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        out.extend(perm.into_iter().take(count - out.len()));
    }
    out
}

/// Row indices for every batch of one epoch. The side that defines the
/// epoch walks a fresh permutation (wrapping into a new one to fill the
/// last batch); with the larger-dataset basis the other side is resampled
/// with replacement.
pub fn epoch_plan(
    n_source: usize,
    n_target: usize,
    batch_size: usize,
    basis: EpochBasis,
    seed: u64,
    epoch: usize,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let (bs, bt) = batch_halves(batch_size);
    let steps = steps_per_epoch(n_source, n_target, batch_size, basis);
    let src_steps = n_source.div_ceil(bs);
    let tgt_steps = n_target.div_ceil(bt);
    let mut src_rng = rng::derived(seed, "batches/source", &[epoch as u64]);
    let mut tgt_rng = rng::derived(seed, "batches/target", &[epoch as u64]);
    let resample = |n: usize, count: usize, rng: &mut rng::Rng| -> Vec<usize> {
        (0..count).map(|_| rng.gen_range(0..n)).collect()
    };
    let (src, tgt) = match basis {
        EpochBasis::Larger if src_steps > tgt_steps => (
            cycled_permutation(n_source, steps * bs, &mut src_rng),
            resample(n_target, steps * bt, &mut tgt_rng),
        ),
        EpochBasis::Larger if tgt_steps > src_steps => (
            resample(n_source, steps * bs, &mut src_rng),
            cycled_permutation(n_target, steps * bt, &mut tgt_rng),
        ),
        _ => (
            cycled_permutation(n_source, steps * bs, &mut src_rng),
            cycled_permutation(n_target, steps * bt, &mut tgt_rng),
        ),
    };
    src.chunks(bs)
        .zip(tgt.chunks(bt.max(1)))
        .map(|(s, t)| (s.to_vec(), if bt == 0 { Vec::new() } else { t.to_vec() }))
        .collect()
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: Split,
    pub domain: String,
    pub acc: f64,
    pub f1: f64,
    pub pseudo_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub rows: Vec<MetricRow>,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub source_test: Option<Metrics>,
    pub target_test: Option<Metrics>,
    pub warnings: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunResult {
    pub fn target_test_accuracy(&self) -> Option<f64> {
        self.target_test.map(|m| m.accuracy)
    }

    /// Validation accuracy used for model selection at the best epoch.
    pub fn selection_score(&self, selection: Selection) -> Option<f64> {
        let domain = match selection {
            Selection::SourceValidation => "source",
            Selection::TargetValidation => "target",
        };
        self.rows
            .iter()
            .find(|r| r.epoch == self.best_epoch && r.split == Split::Validation && r.domain == domain)
            .map(|r| r.acc)
    }

    /// CSV with columns `epoch,split,domain,acc,f1,pseudo_acc`.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,split,domain,acc,f1,pseudo_acc\n");
        for r in &self.rows {
            let split = match r.split {
                Split::Train => "train",
                Split::Validation => "validation",
                Split::Test => "test",
            };
            let pseudo = r.pseudo_acc.map(|p| format!("{p:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{}\n",
                r.epoch, split, r.domain, r.acc, r.f1, pseudo
            ));
        }
        out
    }
}

/// Method-specific parts of the training loop.
pub trait Objective {
    type Model: Trainable;

    /// Called before the batches of `epoch` (1-based). Returns pseudo-label
    /// agreement with withheld target labels when the method has one.
    fn begin_epoch(&mut self, _epoch: usize, _model: &Self::Model, _data: &AdaptationData) -> Result<Option<f64>> {
        Ok(None)
    }

    /// Loss and per-network gradients (order of [`Trainable::networks`]).
    fn batch_loss(&mut self, model: &Self::Model, batch: &Batch, seeds: StepSeeds) -> Result<(f64, Vec<GradBuffer>)>;

    fn end_epoch(&mut self, _epoch: usize, _model: &Self::Model, _data: &AdaptationData) -> Result<()> {
        Ok(())
    }

    fn warnings(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Plain supervised training on the source rows of each batch.
#[derive(Debug, Clone, Default)]
pub struct Supervised;

impl Objective for Supervised {
    type Model = Classifier;

    fn batch_loss(&mut self, model: &Classifier, batch: &Batch, seeds: StepSeeds) -> Result<(f64, Vec<GradBuffer>)> {
        let (xs, _) = batch.x.split_rows(batch.n_source());
        let pass = supervised_pass(model, &xs, &batch.source_labels, seeds)?;
        let enc = model.encoder.backward(&pass.encoder_cache, &pass.source_feature_grad)?;
        Ok((pass.label_loss, vec![enc.grads, pass.label_grads]))
    }
}

fn eval_row(model: &Classifier, set: &EvalSet, epoch: usize, split: Split, domain: &str) -> Result<Option<(MetricRow, Metrics)>> {
    let Some(labels) = &set.labels else {
        return Ok(None);
    };
    if labels.is_empty() {
        return Ok(None);
    }
    let m = model.evaluate(&set.features, labels)?;
    Ok(Some((
        MetricRow {
            epoch,
            split,
            domain: domain.to_string(),
            acc: m.accuracy,
            f1: m.f1,
            pseudo_acc: None,
        },
        m,
    )))
}

/// Trains `model` with `objective`, evaluates on both validation sets after
/// every epoch, keeps the best checkpoint by the configured validation
/// accuracy (ties keep the earlier epoch) and reports test metrics for it.
pub fn fit<O: Objective>(
    objective: &mut O,
    mut model: O::Model,
    data: &AdaptationData,
    cfg: &TrainConfig,
) -> Result<(O::Model, RunResult)> {
    cfg.validate()?;
    data.validate()?;
    if cfg.selection == Selection::TargetValidation && data.target_val.labels.is_none() {
        return Err(Error::config(
            "selection",
            "target_validation needs withheld target labels",
        ));
    }
    let started = Instant::now();
    let n_s = data.source_train.rows();
    let n_t = data.target_train.rows();
    let steps = steps_per_epoch(n_s, n_t, cfg.batch_size, cfg.epoch_basis);
    let opt_cfg = cfg.optimizer_config(steps * cfg.epochs);
    let mut optimizers: Vec<Optimizer> = model
        .networks()
        .into_iter()
        .map(|n| Optimizer::new(opt_cfg, n))
        .collect();

    let mut rows = Vec::new();
    let mut train_loss = Vec::new();
    let mut best: Option<(f64, usize, O::Model)> = None;
    for epoch in 1..=cfg.epochs {
        let pseudo_acc = objective.begin_epoch(epoch, &model, data)?;
        let plan = epoch_plan(n_s, n_t, cfg.batch_size, cfg.epoch_basis, cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for (step, (source_idx, target_idx)) in plan.into_iter().enumerate() {
            let x = data
                .source_train
                .select_rows(&source_idx)
                .vstack(&data.target_train.select_rows(&target_idx))?;
            let source_labels = source_idx.iter().map(|&i| data.source_labels[i]).collect();
            let batch = Batch {
                source_idx,
                target_idx,
                x,
                source_labels,
            };
            let (loss, grads) = objective.batch_loss(&model, &batch, StepSeeds::new(cfg.seed, epoch, step))?;
            loss_sum += loss;
            for ((net, opt), g) in model.networks_mut().into_iter().zip(&mut optimizers).zip(&grads) {
                opt.step(net, g)?;
            }
        }
        train_loss.push(loss_sum / steps as f64);
        objective.end_epoch(epoch, &model, data)?;

        let clf = model.classifier();
        let src = eval_row(clf, &data.source_val, epoch, Split::Validation, "source")?;
        let mut tgt = eval_row(clf, &data.target_val, epoch, Split::Validation, "target")?;
        if let Some((row, _)) = tgt.as_mut() {
            row.pseudo_acc = pseudo_acc;
        }
        let score = match cfg.selection {
            Selection::SourceValidation => src.as_ref().map(|(_, m)| m.accuracy),
            Selection::TargetValidation => tgt.as_ref().map(|(_, m)| m.accuracy),
        }
        .unwrap_or(0.0);
        rows.extend(src.map(|(r, _)| r));
        rows.extend(tgt.map(|(r, _)| r));
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    let clf = best_model.classifier();
    let source_test = eval_row(clf, &data.source_test, best_epoch, Split::Test, "source")?;
    let target_test = eval_row(clf, &data.target_test, best_epoch, Split::Test, "target")?;
    let result = RunResult {
        rows: rows
            .into_iter()
            .chain(source_test.as_ref().map(|(r, _)| r.clone()))
            .chain(target_test.as_ref().map(|(r, _)| r.clone()))
            .collect(),
        best_epoch,
        train_loss,
        source_test: source_test.map(|(_, m)| m),
        target_test: target_test.map(|(_, m)| m),
        warnings: objective.warnings(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((best_model, result))
}

pub fn train_baseline(data: &AdaptationData, cfg: &TrainConfig) -> Result<(Classifier, RunResult)> {
    let model = Classifier::new(data.input_dim(), cfg)?;
    fit(&mut Supervised, model, data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halves_and_steps() {
        assert_eq!(batch_halves(64), (32, 32));
        assert_eq!(batch_halves(7), (4, 3));
        assert_eq!(steps_per_epoch(100, 10, 64, EpochBasis::Larger), 4);
        assert_eq!(steps_per_epoch(100, 10, 64, EpochBasis::Smaller), 1);
    }

    #[test]
    fn plan_has_exact_halves_and_covers_larger_side() {
        for (ns, nt) in [(100, 37), (20, 90), (64, 64)] {
            let plan = epoch_plan(ns, nt, 16, EpochBasis::Larger, 3, 1);
            for (s, t) in &plan {
                assert_eq!(s.len(), 8);
                assert_eq!(t.len(), 8);
                assert!(s.iter().all(|&i| i < ns) && t.iter().all(|&i| i < nt));
            }
            let mut seen: Vec<usize> = if ns >= nt {
                plan.iter().flat_map(|(s, _)| s.clone()).collect()
            } else {
                plan.iter().flat_map(|(_, t)| t.clone()).collect()
            };
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), ns.max(nt));
        }
    }

    #[test]
    fn plan_is_deterministic() {
        assert_eq!(
            epoch_plan(50, 30, 8, EpochBasis::Smaller, 1, 2),
            epoch_plan(50, 30, 8, EpochBasis::Smaller, 1, 2)
        );
        assert_ne!(
            epoch_plan(50, 30, 8, EpochBasis::Smaller, 1, 2),
            epoch_plan(50, 30, 8, EpochBasis::Smaller, 1, 3)
        );
    }

    #[test]
    fn odd_batch_rejected() {
        let cfg = TrainConfig {
            batch_size: 63,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
