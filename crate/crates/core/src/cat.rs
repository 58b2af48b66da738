//! Cluster alignment with a teacher: a contrastive clustering loss inside
//! each domain, squared-distance alignment of per-class centroids across
//! domains, and pseudo-labels for the target from an ensemble of earlier
//! student snapshots.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{argmax, squared_distance, Matrix};
use crate::nnet::GradBuffer;
use crate::training::{
    fit, pad_rows, supervised_pass, AdaptationData, Batch, Classifier, EpochBasis, Objective, RunResult,
    StepSeeds, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatConfig {
    pub alpha: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    #[serde(default = "default_accumulation")]
    pub accumulation: f64,
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
}

fn default_margin() -> f64 {
    2.0
}
fn default_ensemble() -> usize {
    3
}
fn default_accumulation() -> f64 {
    0.8
}
fn default_threshold() -> f64 {
    0.9
}

impl Default for CatConfig {
    fn default() -> Self {
        CatConfig {
            alpha: 0.1,
            margin: default_margin(),
            ensemble_size: default_ensemble(),
            accumulation: default_accumulation(),
            confidence_threshold: default_threshold(),
        }
    }
}

impl CatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::config("cat.margin", "must be positive"));
        }
        if !(self.accumulation > 0.0 && self.accumulation < 1.0) {
            return Err(Error::config("cat.accumulation", "must lie in (0, 1)"));
        }
        if self.ensemble_size == 0 {
            return Err(Error::config("cat.ensemble_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::config("cat.confidence_threshold", "must lie in [0, 1]"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("cat.alpha", "must be ≥ 0"));
        }
        Ok(())
    }
}

/// Mean over all ordered pairs (diagonal included) of the squared distance
/// for same-label pairs and the hinge `max(0, m - d)` for the others, with its
/// gradient with respect to every feature row.
pub fn clustering_loss(features: &Matrix, labels: &[usize], margin: f64) -> Result<(f64, Matrix)> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} labels"), format!("{}", labels.len())));
    }
    if n < 2 {
        return Err(Error::TooFewSamples);
    }
    let scale = 1.0 / (n * n) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, features.cols());
    for i in 0..n {
        for j in (i + 1)..n {
            let (fi, fj) = (features.row(i), features.row(j));
            let d = squared_distance(fi, fj);
            // each unordered pair appears twice in the double sum
            let coef = if labels[i] == labels[j] {
                loss += 2.0 * d;
                2.0
            } else if d < margin {
                loss += 2.0 * (margin - d);
                -2.0
            } else {
                continue;
            };
            // d/dfi of d = 2 (fi - fj)
            let w = coef * 2.0 * scale;
            for c in 0..features.cols() {
                let diff = features[(i, c)] - features[(j, c)];
                grad[(i, c)] += w * diff;
                grad[(j, c)] -= w * diff;
            }
        }
    }
    Ok((loss * scale, grad))
}

/// Per-class mean feature; `None` for classes without rows.
pub fn centroids(features: &Matrix, labels: &[usize], k: usize) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0; features.cols()]; k];
    let mut counts = vec![0usize; k];
    for (row, &y) in features.iter_rows().zip(labels) {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(row) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect()
}

/// Mean squared distance between matching centroids over the classes
/// present on both sides, with gradients for each centroid (zero for
/// excluded classes).
pub fn alignment_loss(
    source: &[Option<Vec<f64>>],
    target: &[Option<Vec<f64>>],
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if source.len() != target.len() {
        return Err(Error::shape(
            format!("{} classes", source.len()),
            format!("{}", target.len()),
        ));
    }
    let shared: Vec<usize> = (0..source.len())
        .filter(|&k| source[k].is_some() && target[k].is_some())
        .collect();
    if shared.is_empty() {
        return Err(Error::invalid("no class has a centroid on both sides"));
    }
    let kk = shared.len() as f64;
    let dim = |c: &[Option<Vec<f64>>]| c.iter().flatten().next().map_or(0, Vec::len);
    let d = dim(source).max(dim(target));
    let mut gs = vec![vec![0.0; d]; source.len()];
    let mut gt = vec![vec![0.0; d]; source.len()];
    let mut loss = 0.0;
    for &k in &shared {
        let (s, t) = (source[k].as_ref().unwrap(), target[k].as_ref().unwrap());
        loss += squared_distance(s, t);
        for c in 0..d {
            let g = 2.0 * (s[c] - t[c]) / kk;
            gs[k][c] = g;
            gt[k][c] = -g;
        }
    }
    Ok((loss / kk, gs, gt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub accepted: Vec<bool>,
}

impl PseudoLabels {
    /// Agreement of accepted pseudo-labels with reference labels (None if
    /// nothing is accepted).
    pub fn accuracy(&self, truth: &[usize]) -> Option<f64> {
        let (hit, n) = self
            .labels
            .iter()
            .zip(&self.accepted)
            .zip(truth)
            .filter(|((_, &a), _)| a)
            .fold((0usize, 0usize), |(h, n), ((p, _), t)| (h + usize::from(p == t), n + 1));
        (n > 0).then(|| hit as f64 / n as f64)
    }

    /// `id,label,confidence,accepted` lines for `pseudo_epochN.csv`.
    pub fn to_csv(&self, ids: &[String]) -> String {
        let mut out = String::from("id,label,confidence,accepted\n");
        for (i, id) in ids.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{:.6},{}\n",
                id, self.labels[i], self.confidence[i], self.accepted[i]
            ));
        }
        out
    }
}

/// Ensemble of recent student snapshots and an exponential moving average
/// of their soft predictions on the target set, initialized uniform.
#[derive(Debug, Clone)]
pub struct Teacher {
    snapshots: VecDeque<Classifier>,
    accumulated: Matrix,
    ensemble_size: usize,
    accumulation: f64,
    threshold: f64,
}

impl Teacher {
    pub fn new(n_target: usize, classes: usize, cfg: &CatConfig) -> Self {
        let mut accumulated = Matrix::zeros(n_target, classes);
        accumulated.data_mut().fill(1.0 / classes as f64);
        Teacher {
            snapshots: VecDeque::with_capacity(cfg.ensemble_size),
            accumulated,
            ensemble_size: cfg.ensemble_size,
            accumulation: cfg.accumulation,
            threshold: cfg.confidence_threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn accumulated(&self) -> &Matrix {
        &self.accumulated
    }

    /// Pseudo-labels from the current accumulated predictions.
    pub fn pseudo_labels(&self) -> PseudoLabels {
        let labels: Vec<usize> = self.accumulated.iter_rows().map(argmax).collect();
        let confidence: Vec<f64> = self
            .accumulated
            .iter_rows()
            .zip(&labels)
            .map(|(r, &y)| r[y])
            .collect();
        let accepted = confidence.iter().map(|&c| c >= self.threshold).collect();
        PseudoLabels {
            labels,
            confidence,
            accepted,
        }
    }

    /// Pushes a snapshot and folds the ensemble's mean softmax over
    /// `target` into the moving average.
    pub fn update(&mut self, snapshot: Classifier, target: &Matrix) -> Result<PseudoLabels> {
        if self.snapshots.len() == self.ensemble_size {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(snapshot);
        let mut mean = Matrix::zeros(self.accumulated.rows(), self.accumulated.cols());
        for s in &self.snapshots {
            mean.add_assign(&s.probabilities(target)?)?;
        }
        mean.scale(1.0 / self.snapshots.len() as f64);
        self.blend(&mean)
    }

    /// EMA step with externally computed ensemble probabilities.
    pub fn blend(&mut self, ensemble_probs: &Matrix) -> Result<PseudoLabels> {
        if ensemble_probs.shape() != self.accumulated.shape() {
            return Err(Error::shape(
                format!("{}x{}", self.accumulated.rows(), self.accumulated.cols()),
                format!("{}x{}", ensemble_probs.rows(), ensemble_probs.cols()),
            ));
        }
        let a = self.accumulation;
        for (acc, p) in self.accumulated.data_mut().iter_mut().zip(ensemble_probs.data()) {
            *acc = a * *acc + (1.0 - a) * p;
        }
        Ok(self.pseudo_labels())
    }
}

pub fn teacher_update(teacher: &mut Teacher, snapshot: Classifier, target_features: &Matrix) -> Result<PseudoLabels> {
    teacher.update(snapshot, target_features)
}

#[derive(Debug, Clone)]
pub struct CatLoss {
    pub total: f64,
    pub label_loss: f64,
    pub source_clustering: f64,
    pub target_clustering: f64,
    pub alignment: f64,
    /// True when no target row had an accepted pseudo-label.
    pub target_skipped: bool,
    pub grads: [GradBuffer; 2],
}

/// `L_y + alpha * (L_c(source) + L_c(target) + L_a)` on encoder features of
/// `x` (source rows first). `target_pseudo` holds `(label, accepted)` for the
/// target rows.
pub fn cat_loss(
    model: &Classifier,
    x: &Matrix,
    source_labels: &[usize],
    target_pseudo: &[(usize, bool)],
    cfg: &CatConfig,
    seeds: StepSeeds,
) -> Result<CatLoss> {
    let ns = source_labels.len();
    if ns + target_pseudo.len() != x.rows() {
        return Err(Error::shape(
            format!("{} rows", ns + target_pseudo.len()),
            format!("{}", x.rows()),
        ));
    }
    let pass = supervised_pass(model, x, source_labels, seeds)?;
    let mut d_feat = pad_rows(&pass.source_feature_grad, x.rows());
    let mut out = CatLoss {
        total: pass.label_loss,
        label_loss: pass.label_loss,
        source_clustering: 0.0,
        target_clustering: 0.0,
        alignment: 0.0,
        target_skipped: !target_pseudo.iter().any(|&(_, a)| a),
        grads: [GradBuffer::zeros_like(&model.encoder), pass.label_grads],
    };
    if cfg.alpha != 0.0 {
        let feats = pass.encoder_cache.output();
        let classes = model.label_head.output_dim();
        let add_rows = |d: &mut Matrix, rows: &[usize], g: &Matrix, w: f64| {
            for (gi, &r) in rows.iter().enumerate() {
                for (dv, gv) in d.row_mut(r).iter_mut().zip(g.row(gi)) {
                    *dv += w * gv;
                }
            }
        };

        let src_rows: Vec<usize> = (0..ns).collect();
        let fs = feats.select_rows(&src_rows);
        if ns >= 2 {
            let (l, g) = clustering_loss(&fs, source_labels, cfg.margin)?;
            out.source_clustering = l;
            add_rows(&mut d_feat, &src_rows, &g, cfg.alpha);
        }

        let tgt_rows: Vec<usize> = target_pseudo
            .iter()
            .enumerate()
            .filter(|(_, &(_, a))| a)
            .map(|(i, _)| ns + i)
            .collect();
        let tgt_labels: Vec<usize> = target_pseudo.iter().filter(|&&(_, a)| a).map(|&(y, _)| y).collect();
        if !tgt_rows.is_empty() {
            let ft = feats.select_rows(&tgt_rows);
            if tgt_rows.len() >= 2 {
                let (l, g) = clustering_loss(&ft, &tgt_labels, cfg.margin)?;
                out.target_clustering = l;
                add_rows(&mut d_feat, &tgt_rows, &g, cfg.alpha);
            }
            let cs = centroids(&fs, source_labels, classes);
            let ct = centroids(&ft, &tgt_labels, classes);
            if let Ok((l, gs, gt)) = alignment_loss(&cs, &ct) {
                out.alignment = l;
                // centroid k is the mean of its rows
                let count = |labels: &[usize], k: usize| labels.iter().filter(|&&y| y == k).count() as f64;
                for (i, &y) in source_labels.iter().enumerate() {
                    let n = count(source_labels, y);
                    for (dv, gv) in d_feat.row_mut(i).iter_mut().zip(&gs[y]) {
                        *dv += cfg.alpha * gv / n;
                    }
                }
                for (&r, &y) in tgt_rows.iter().zip(&tgt_labels) {
                    let n = count(&tgt_labels, y);
                    for (dv, gv) in d_feat.row_mut(r).iter_mut().zip(&gt[y]) {
                        *dv += cfg.alpha * gv / n;
                    }
                }
            }
        }
        out.total += cfg.alpha * (out.source_clustering + out.target_clustering + out.alignment);
    }
    out.grads[0] = model.encoder.backward(&pass.encoder_cache, &d_feat)?.grads;
    Ok(out)
}

struct CatObjective {
    cfg: CatConfig,
    teacher: Teacher,
    pseudo: PseudoLabels,
    dumps: Vec<(usize, String)>,
    skipped_batches: usize,
}

impl Objective for CatObjective {
    type Model = Classifier;

    fn begin_epoch(&mut self, _epoch: usize, _model: &Classifier, data: &AdaptationData) -> Result<Option<f64>> {
        Ok(data
            .target_train_labels
            .as_ref()
            .and_then(|t| self.pseudo.accuracy(t)))
    }

    fn batch_loss(&mut self, model: &Classifier, batch: &Batch, seeds: StepSeeds) -> Result<(f64, Vec<GradBuffer>)> {
        let pseudo: Vec<(usize, bool)> = batch
            .target_idx
            .iter()
            .map(|&i| (self.pseudo.labels[i], self.pseudo.accepted[i]))
            .collect();
        let loss = cat_loss(model, &batch.x, &batch.source_labels, &pseudo, &self.cfg, seeds)?;
        if loss.target_skipped {
            self.skipped_batches += 1;
        }
        Ok((loss.total, loss.grads.into()))
    }

    fn end_epoch(&mut self, epoch: usize, model: &Classifier, data: &AdaptationData) -> Result<()> {
        self.pseudo = self.teacher.update(model.clone(), &data.target_train)?;
        self.dumps.push((epoch, self.pseudo.to_csv(&data.target_train_ids)));
        Ok(())
    }

    fn warnings(&self) -> Vec<String> {
        if self.skipped_batches > 0 && self.cfg.alpha != 0.0 {
            vec![format!(
                "{} batches had no accepted target pseudo-labels; target clustering and alignment skipped",
                self.skipped_batches
            )]
        } else {
            Vec::new()
        }
    }
}

/// Output of [`train_cat`]: the retained model, metrics, and one
/// `(epoch, csv)` pseudo-label dump per epoch.
pub struct CatRun {
    pub model: Classifier,
    pub result: RunResult,
    pub pseudo_dumps: Vec<(usize, String)>,
}

/// Trains with the CAT objective. An epoch is one pass over the smaller
/// dataset; the teacher absorbs a student snapshot at the end of each.
pub fn train_cat(data: &AdaptationData, cfg: &TrainConfig, cat: &CatConfig) -> Result<CatRun> {
    cat.validate()?;
    let cfg = TrainConfig {
        epoch_basis: EpochBasis::Smaller,
        ..cfg.clone()
    };
    let model = Classifier::new(data.input_dim(), &cfg)?;
    let teacher = Teacher::new(data.target_train.rows(), 2, cat);
    let mut objective = CatObjective {
        cfg: *cat,
        pseudo: teacher.pseudo_labels(),
        teacher,
        dumps: Vec::new(),
        skipped_batches: 0,
    };
    let (model, result) = fit(&mut objective, model, data, &cfg)?;
    if let Some(w) = objective.warnings().first() {
        log::warn!("{w}");
    }
    Ok(CatRun {
        model,
        result,
        pseudo_dumps: objective.dumps,
    })
}
