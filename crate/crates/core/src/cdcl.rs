//! Cross-domain contrastive learning: a softmax-contrastive loss between
//! L2-normalized source and target features, with target pseudo-labels from
//! K-Means seeded at the source class centroids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, log_sum_exp, norm, squared_distance, Matrix};
use crate::nnet::GradBuffer;
use crate::training::{
    fit, supervised_pass, AdaptationData, Batch, Classifier, Objective, RunResult, StepSeeds, Supervised,
    TrainConfig,
};

pub const PSEUDO_LABEL_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdclConfig {
    pub tau: f64,
    pub gamma: f64,
}

impl Default for CdclConfig {
    fn default() -> Self {
        CdclConfig { tau: 0.5, gamma: 0.1 }
    }
}

impl CdclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("cdcl.tau", "must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("cdcl.gamma", "must be ≥ 0"));
        }
        Ok(())
    }
}

/// Unit-norm rows together with the norms they were divided by.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFeatures {
    pub z: Matrix,
    pub norms: Vec<f64>,
}

impl NormalizedFeatures {
    /// Maps a gradient with respect to `z` back to the unnormalized rows.
    pub fn backward(&self, dz: &Matrix) -> Result<Matrix> {
        if dz.shape() != self.z.shape() {
            return Err(Error::shape(
                format!("{}x{}", self.z.rows(), self.z.cols()),
                format!("{}x{}", dz.rows(), dz.cols()),
            ));
        }
        let mut out = Matrix::zeros(dz.rows(), dz.cols());
        for i in 0..dz.rows() {
            let z = self.z.row(i);
            let g = dz.row(i);
            let zg = dot(z, g);
            for (o, (gv, zv)) in out.row_mut(i).iter_mut().zip(g.iter().zip(z)) {
                *o = (gv - zv * zg) / self.norms[i];
            }
        }
        Ok(out)
    }
}

pub fn l2_normalize(features: &Matrix) -> Result<NormalizedFeatures> {
    let mut z = features.clone();
    let mut norms = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let n = norm(features.row(i));
        if n == 0.0 {
            return Err(Error::ZeroFeatureVector);
        }
        z.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok(NormalizedFeatures { z, norms })
}

/// Loss of one anchor against the opposite side, with gradients for the
/// anchor and for every opposite row. `None` when no opposite row shares
/// the anchor's label.
pub fn cdc_anchor_loss(
    anchor: &[f64],
    anchor_label: usize,
    opposite: &Matrix,
    opposite_labels: &[usize],
    tau: f64,
) -> Result<Option<(f64, Vec<f64>, Matrix)>> {
    if opposite.rows() == 0 {
        return Err(Error::invalid("opposite side is empty"));
    }
    if opposite_labels.len() != opposite.rows() {
        return Err(Error::shape(
            format!("{} labels", opposite.rows()),
            format!("{}", opposite_labels.len()),
        ));
    }
    let positives = opposite_labels.iter().filter(|&&y| y == anchor_label).count();
    if positives == 0 {
        return Ok(None);
    }
    let s: Vec<f64> = opposite.iter_rows().map(|z| dot(anchor, z) / tau).collect();
    let lse = log_sum_exp(&s);
    let mean_pos = s
        .iter()
        .zip(opposite_labels)
        .filter(|(_, &y)| y == anchor_label)
        .map(|(v, _)| v)
        .sum::<f64>()
        / positives as f64;
    // dL/ds_j = softmax_j - [j positive] / |P|
    let coef: Vec<f64> = s
        .iter()
        .zip(opposite_labels)
        .map(|(v, &y)| (v - lse).exp() - if y == anchor_label { 1.0 / positives as f64 } else { 0.0 })
        .collect();
    let mut d_anchor = vec![0.0; anchor.len()];
    let mut d_opp = Matrix::zeros(opposite.rows(), opposite.cols());
    for (j, c) in coef.iter().enumerate() {
        let w = c / tau;
        for (k, (da, zj)) in d_anchor.iter_mut().zip(opposite.row(j)).enumerate() {
            *da += w * zj;
            d_opp[(j, k)] = w * anchor[k];
        }
    }
    Ok(Some((lse - mean_pos, d_anchor, d_opp)))
}

/// Result of [`cdc_loss`]: value, gradients for both normalized sides, and
/// the number of anchors skipped on each side for lack of positives.
#[derive(Debug, Clone)]
pub struct CdcLoss {
    pub loss: f64,
    pub d_source: Matrix,
    pub d_target: Matrix,
    pub skipped: (usize, usize),
}

/// Mean anchor loss of one side, gradients for the anchor and opposite
/// rows, and the skipped-anchor count.
fn side_loss(
    anchors: &Matrix,
    labels: &[usize],
    opposite: &Matrix,
    opposite_labels: &[usize],
    tau: f64,
) -> Result<(f64, Matrix, Matrix, usize)> {
    let mut parts = Vec::with_capacity(anchors.rows());
    for (a, &y) in anchors.iter_rows().zip(labels) {
        parts.push(cdc_anchor_loss(a, y, opposite, opposite_labels, tau)?);
    }
    let used = parts.iter().filter(|p| p.is_some()).count();
    let mut da = Matrix::zeros(anchors.rows(), anchors.cols());
    let mut dopp = Matrix::zeros(opposite.rows(), opposite.cols());
    let mut loss = 0.0;
    if used > 0 {
        let w = 1.0 / used as f64;
        for (i, p) in parts.into_iter().enumerate() {
            let Some((l, g_a, g_o)) = p else { continue };
            loss += w * l;
            for (d, g) in da.row_mut(i).iter_mut().zip(&g_a) {
                *d += w * g;
            }
            for (d, g) in dopp.data_mut().iter_mut().zip(g_o.data()) {
                *d += w * g;
            }
        }
    }
    Ok((loss, da, dopp, anchors.rows() - used))
}

/// Source anchors against the target side plus target anchors against the
/// source side, each averaged over its non-skipped anchors.
pub fn cdc_loss(zs: &Matrix, ys: &[usize], zt: &Matrix, yt: &[usize], tau: f64) -> Result<CdcLoss> {
    if zs.rows() == 0 || zt.rows() == 0 {
        return Err(Error::invalid("cdc loss needs rows on both sides"));
    }
    if ys.len() != zs.rows() || yt.len() != zt.rows() {
        return Err(Error::shape(
            format!("{} and {} labels", zs.rows(), zt.rows()),
            format!("{} and {}", ys.len(), yt.len()),
        ));
    }
    let (ls, mut d_source, d_t_from_s, skip_s) = side_loss(zs, ys, zt, yt, tau)?;
    let (lt, mut d_target, d_s_from_t, skip_t) = side_loss(zt, yt, zs, ys, tau)?;
    d_source.add_assign(&d_s_from_t)?;
    d_target.add_assign(&d_t_from_s)?;
    Ok(CdcLoss {
        loss: ls + lt,
        d_source,
        d_target,
        skipped: (skip_s, skip_t),
    })
}

/// Per-class means of the source rows, then Lloyd iterations on the target
/// rows starting from them. A centroid that loses every point stays where
/// it was. Cluster `k` keeps class `k`.
pub fn pseudo_label_kmeans(zs: &Matrix, ys: &[usize], zt: &Matrix) -> Result<Vec<usize>> {
    let classes = ys.iter().max().map_or(0, |m| m + 1).max(2);
    let mut centroids = vec![vec![0.0; zs.cols()]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &y) in zs.iter_rows().zip(ys) {
        counts[y] += 1;
        for (c, v) in centroids[y].iter_mut().zip(row) {
            *c += v;
        }
    }
    if counts.contains(&0) {
        return Err(Error::invalid("every class must be present in the source features"));
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        zt.iter_rows()
            .map(|z| {
                let d: Vec<f64> = centroids.iter().map(|c| squared_distance(z, c)).collect();
                let mut best = 0;
                for (k, &v) in d.iter().enumerate() {
                    if v < d[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    };
    let mut labels = assign(&centroids);
    for _ in 0..PSEUDO_LABEL_MAX_ITER {
        let mut sums = vec![vec![0.0; zt.cols()]; classes];
        let mut n = vec![0usize; classes];
        for (row, &k) in zt.iter_rows().zip(&labels) {
            n[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(row) {
                *s += v;
            }
        }
        for k in 0..classes {
            if n[k] > 0 {
                centroids[k] = sums[k].iter().map(|v| v / n[k] as f64).collect();
            }
        }
        let next = assign(&centroids);
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(labels)
}

#[derive(Debug, Clone)]
pub struct CdclLoss {
    pub total: f64,
    pub label_loss: f64,
    pub cdc: f64,
    pub grads: [GradBuffer; 2],
}

/// `L_y + gamma * L_CDC` for a batch whose first `source_labels.len()` rows
/// are source rows; `target_pseudo` labels the remaining rows.
pub fn cdcl_loss(
    model: &Classifier,
    x: &Matrix,
    source_labels: &[usize],
    target_pseudo: &[usize],
    cfg: &CdclConfig,
    seeds: StepSeeds,
) -> Result<CdclLoss> {
    let ns = source_labels.len();
    if ns + target_pseudo.len() != x.rows() {
        return Err(Error::shape(
            format!("{} rows", ns + target_pseudo.len()),
            format!("{}", x.rows()),
        ));
    }
    let pass = supervised_pass(model, x, source_labels, seeds)?;
    let (fs, ft) = pass.encoder_cache.output().split_rows(ns);
    let ns_norm = l2_normalize(&fs)?;
    let nt_norm = l2_normalize(&ft)?;
    let cdc = cdc_loss(&ns_norm.z, source_labels, &nt_norm.z, target_pseudo, cfg.tau)?;
    let mut ds = ns_norm.backward(&cdc.d_source)?;
    ds.scale(cfg.gamma);
    ds.add_assign(&pass.source_feature_grad)?;
    let mut dt = nt_norm.backward(&cdc.d_target)?;
    dt.scale(cfg.gamma);
    let d_feat = ds.vstack(&dt)?;
    let enc = model.encoder.backward(&pass.encoder_cache, &d_feat)?;
    Ok(CdclLoss {
        total: pass.label_loss + cfg.gamma * cdc.loss,
        label_loss: pass.label_loss,
        cdc: cdc.loss,
        grads: [enc.grads, pass.label_grads],
    })
}

struct Contrastive {
    cfg: CdclConfig,
    pseudo: Vec<usize>,
}

impl Objective for Contrastive {
    type Model = Classifier;

    fn begin_epoch(&mut self, _epoch: usize, model: &Classifier, data: &AdaptationData) -> Result<Option<f64>> {
        let zs = l2_normalize(&model.features(&data.source_train)?)?.z;
        let zt = l2_normalize(&model.features(&data.target_train)?)?.z;
        self.pseudo = pseudo_label_kmeans(&zs, &data.source_labels, &zt)?;
        Ok(data.target_train_labels.as_ref().map(|truth| {
            let hits = truth.iter().zip(&self.pseudo).filter(|(a, b)| a == b).count();
            hits as f64 / truth.len() as f64
        }))
    }

    fn batch_loss(&mut self, model: &Classifier, batch: &Batch, seeds: StepSeeds) -> Result<(f64, Vec<GradBuffer>)> {
        if self.cfg.gamma == 0.0 {
            return Supervised.batch_loss(model, batch, seeds);
        }
        let pseudo: Vec<usize> = batch.target_idx.iter().map(|&i| self.pseudo[i]).collect();
        let loss = cdcl_loss(model, &batch.x, &batch.source_labels, &pseudo, &self.cfg, seeds)?;
        Ok((loss.total, loss.grads.into()))
    }
}

/// Trains with `L_y + gamma * L_CDC`, recomputing target pseudo-labels at
/// the start of every epoch.
pub fn train_cdcl(data: &AdaptationData, cfg: &TrainConfig, cdcl: &CdclConfig) -> Result<(Classifier, RunResult)> {
    cdcl.validate()?;
    let model = Classifier::new(data.input_dim(), cfg)?;
    let mut objective = Contrastive {
        cfg: *cdcl,
        pseudo: Vec::new(),
    };
    fit(&mut objective, model, data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = norm(v);
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&Matrix::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
        assert!((n.z[(0, 0)] - 0.6).abs() < 1e-15 && (n.z[(0, 1)] - 0.8).abs() < 1e-15);
        let again = l2_normalize(&n.z).unwrap();
        assert_eq!(again.z, n.z);
        let err = l2_normalize(&Matrix::from_rows(&[[0.0, 0.0]]).unwrap()).unwrap_err();
        assert_eq!(err.to_string(), "zero feature vector");
    }

    #[test]
    fn anchor_examples() {
        let a = [1.0, 0.0];
        let single = Matrix::from_rows(&[[0.6, 0.8]]).unwrap();
        let (l, _, _) = cdc_anchor_loss(&a, 1, &single, &[1], 1.0).unwrap().unwrap();
        assert!(l.abs() < 1e-15);

        let opp = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let (l, _, _) = cdc_anchor_loss(&a, 0, &opp, &[0, 1], 1.0).unwrap().unwrap();
        let e = 1f64.exp();
        assert!((l - -(e / (e + 1.0 / e)).ln()).abs() < 1e-12);
        assert!((l - 0.1269).abs() < 1e-4);

        assert!(cdc_anchor_loss(&a, 2, &opp, &[0, 1], 1.0).unwrap().is_none());
    }

    #[test]
    fn all_skipped_side_contributes_zero() {
        let zs = Matrix::from_rows(&[unit(&[1.0, 1.0])]).unwrap();
        let zt = Matrix::from_rows(&[unit(&[1.0, -1.0])]).unwrap();
        let l = cdc_loss(&zs, &[0], &zt, &[1], 0.5).unwrap();
        assert_eq!(l.loss, 0.0);
        assert_eq!(l.skipped, (1, 1));
    }

    #[test]
    fn kmeans_from_class_means() {
        let zs = Matrix::from_rows(&[[0.0, 0.0], [0.0, 2.0], [10.0, 0.0], [10.0, 2.0]]).unwrap();
        let ys = [0, 0, 1, 1];
        let zt = Matrix::from_rows(&[[10.0, 1.0], [0.0, 1.0]]).unwrap();
        assert_eq!(pseudo_label_kmeans(&zs, &ys, &zt).unwrap(), vec![1, 0]);

        // 4 hand-placed points: initial centroids (0,0) and (4,0)
        let zs = Matrix::from_rows(&[[0.0, 0.0], [4.0, 0.0]]).unwrap();
        let zt = Matrix::from_rows(&[[1.0, 0.0], [1.9, 0.0], [2.1, 0.0], [5.0, 0.0]]).unwrap();
        // first assignment {1, 1.9} | {2.1, 5}, means 1.45 and 3.55, so 2.1
        // moves to cluster 0; means 5/3 and 5 then leave it there
        assert_eq!(pseudo_label_kmeans(&zs, &[0, 1], &zt).unwrap(), vec![0, 0, 0, 1]);
    }

    #[test]
    fn empty_cluster_keeps_its_centroid() {
        let zs = Matrix::from_rows(&[[0.0], [100.0]]).unwrap();
        let zt = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        assert_eq!(pseudo_label_kmeans(&zs, &[0, 1], &zt).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn missing_source_class_is_an_error() {
        let zs = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(pseudo_label_kmeans(&zs, &[1, 1], &zs).is_err());
    }
}
