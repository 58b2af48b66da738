//! Clustering algorithms that turn feature rows into domain labels:
//! K-Means (euclidean and spherical), K-Medoids, diagonal Gaussian mixtures,
//! HDBSCAN, and elbow selection of k.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{euclidean, log_sum_exp, norm, squared_distance, Matrix};
use crate::rng;

pub const NOISE: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterAlgorithm {
    KmeansEuclidean,
    KmeansCosine,
    Kmedoids,
    Gmm,
    Hdbscan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Matrix,
    pub variances: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClusterParams {
    Centroids(Matrix),
    Medoids(Vec<usize>),
    Gmm(GmmParams),
    /// Member means of the extracted HDBSCAN clusters and the nearest of
    /// them for every row (empty when there are no clusters).
    Density { centers: Matrix, nearest: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub algorithm: ClusterAlgorithm,
    pub k: usize,
    /// Cluster id per row; [`NOISE`] only for HDBSCAN.
    pub assignment: Vec<i64>,
    pub params: ClusterParams,
    /// Objective after every iteration: distortion for K-Means, total
    /// dissimilarity for K-Medoids, log-likelihood for GMM.
    pub trace: Vec<f64>,
    pub warnings: Vec<String>,
}

impl ClusterModel {
    /// Representative point of every cluster, in the input feature space.
    pub fn centers(&self, features: &Matrix) -> Matrix {
        match &self.params {
            ClusterParams::Centroids(c) | ClusterParams::Density { centers: c, .. } => c.clone(),
            ClusterParams::Medoids(m) => features.select_rows(m),
            ClusterParams::Gmm(g) => g.means.clone(),
        }
    }

    /// Sum of squared distances from each assigned row to its cluster center
    /// (on normalized rows for cosine K-Means).
    pub fn distortion(&self, features: &Matrix) -> f64 {
        let normalized;
        let features = if self.algorithm == ClusterAlgorithm::KmeansCosine {
            normalized = normalize_rows(features);
            &normalized
        } else {
            features
        };
        let centers = self.centers(features);
        features
            .iter_rows()
            .zip(&self.assignment)
            .filter(|(_, &a)| a >= 0)
            .map(|(row, &a)| squared_distance(row, centers.row(a as usize)))
            .sum()
    }

    pub fn n_noise(&self) -> usize {
        self.assignment.iter().filter(|&&a| a == NOISE).count()
    }
}

fn check_k(features: &Matrix, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k > features.rows() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the number of rows ({})",
            features.rows()
        )));
    }
    Ok(())
}

fn nearest(row: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter_rows().enumerate() {
        let d = squared_distance(row, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn normalize_rows(features: &Matrix) -> Matrix {
    let mut out = features.clone();
    for i in 0..out.rows() {
        let n = norm(out.row(i));
        if n > 0.0 {
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// k-means++ seeding: first center uniform, the rest with probability
/// proportional to squared distance from the nearest chosen center.
fn kmeans_pp(features: &Matrix, k: usize, rng: &mut rng::Rng) -> Matrix {
    let n = features.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = features
        .iter_rows()
        .map(|r| squared_distance(r, features.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            // rounding can leave u past the last positive weight
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, r) in features.iter_rows().enumerate() {
            d2[i] = d2[i].min(squared_distance(r, features.row(next)));
        }
    }
    features.select_rows(&chosen)
}

/// Lloyd iterations from k-means++ seeds. In cosine mode rows are
/// normalized first and centroids are renormalized after every update.
pub fn kmeans(features: &Matrix, k: usize, metric: Metric, seed: u64, max_iter: usize) -> Result<ClusterModel> {
    check_k(features, k)?;
    let x = match metric {
        Metric::Euclidean => features.clone(),
        Metric::Cosine => normalize_rows(features),
    };
    let mut rng = rng::derived(seed, "kmeans++", &[]);
    let mut centroids = kmeans_pp(&x, k, &mut rng);
    if metric == Metric::Cosine {
        centroids = normalize_rows(&centroids);
    }
    let mut assignment: Vec<usize> = x.iter_rows().map(|r| nearest(r, &centroids).0).collect();
    let mut trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut sums = Matrix::zeros(k, x.cols());
        let mut counts = vec![0usize; k];
        for (r, &a) in x.iter_rows().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(r) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mut mean: Vec<f64> = sums.row(c).iter().map(|v| v / counts[c] as f64).collect();
            if metric == Metric::Cosine {
                let n = norm(&mean);
                if n == 0.0 {
                    continue;
                }
                mean.iter_mut().for_each(|v| *v /= n);
            }
            centroids.row_mut(c).copy_from_slice(&mean);
        }
        trace.push(
            x.iter_rows()
                .zip(&assignment)
                .map(|(r, &a)| squared_distance(r, centroids.row(a)))
                .sum(),
        );
        let next: Vec<usize> = x
            .iter_rows()
            .zip(&assignment)
            .map(|(r, &a)| {
                // keep the current cluster on exact ties
                let (b, d) = nearest(r, &centroids);
                if d < squared_distance(r, centroids.row(a)) {
                    b
                } else {
                    a
                }
            })
            .collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(ClusterModel {
        algorithm: match metric {
            Metric::Euclidean => ClusterAlgorithm::KmeansEuclidean,
            Metric::Cosine => ClusterAlgorithm::KmeansCosine,
        },
        k,
        assignment: assignment.into_iter().map(|a| a as i64).collect(),
        params: ClusterParams::Centroids(centroids),
        trace,
        warnings: Vec::new(),
    })
}

fn pairwise_distances(features: &Matrix) -> Vec<Vec<f64>> {
    let n = features.rows();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = euclidean(features.row(i), features.row(j));
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

fn medoid_cost(d: &[Vec<f64>], medoids: &[usize]) -> f64 {
    d.iter()
        .map(|row| medoids.iter().map(|&m| row[m]).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Inputs with at most this many medoid sets are solved exactly.
pub const EXACT_MEDOID_SETS: usize = 5000;

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: usize = 1;
    for i in 0..k {
        c = match c.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return usize::MAX,
        };
    }
    c
}

/// Lowest-cost medoid set by enumeration in lexicographic order (first wins
/// ties).
fn best_medoid_set(d: &[Vec<f64>], k: usize) -> Option<(Vec<usize>, f64)> {
    let n = d.len();
    if k == 0 || k > n {
        return None;
    }
    let mut set: Vec<usize> = (0..k).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let c = medoid_cost(d, &set);
        if best.as_ref().is_none_or(|b| c < b.1) {
            best = Some((set.clone(), c));
        }
        // advance to the next k-subset
        let Some(i) = (0..k).rev().find(|&i| set[i] < n - k + i) else {
            return best;
        };
        set[i] += 1;
        for j in i + 1..k {
            set[j] = set[j - 1] + 1;
        }
    }
}

/// PAM: greedy build, then the best improving medoid/non-medoid swap until
/// none is left. When there are at most [`EXACT_MEDOID_SETS`] candidate
/// medoid sets the result is replaced by the exact optimum if that is
/// better. Deterministic; ties go to the lowest index. The seed is accepted
/// for interface symmetry and unused.
pub fn kmedoids(features: &Matrix, k: usize, _seed: u64, max_iter: usize) -> Result<ClusterModel> {
    check_k(features, k)?;
    let n = features.rows();
    let d = pairwise_distances(features);
    let mut medoids: Vec<usize> = Vec::with_capacity(k);
    while medoids.len() < k {
        let mut best = (usize::MAX, f64::INFINITY);
        for c in 0..n {
            if medoids.contains(&c) {
                continue;
            }
            medoids.push(c);
            let cost = medoid_cost(&d, &medoids);
            medoids.pop();
            if cost < best.1 {
                best = (c, cost);
            }
        }
        medoids.push(best.0);
    }
    let mut cost = medoid_cost(&d, &medoids);
    let mut trace = vec![cost];
    for _ in 0..max_iter {
        let mut best: Option<(usize, usize, f64)> = None;
        for slot in 0..k {
            for o in 0..n {
                if medoids.contains(&o) {
                    continue;
                }
                let old = medoids[slot];
                medoids[slot] = o;
                let c = medoid_cost(&d, &medoids);
                medoids[slot] = old;
                if c < best.map_or(cost, |b| b.2) - 1e-12 {
                    best = Some((slot, o, c));
                }
            }
        }
        let Some((slot, o, c)) = best else { break };
        medoids[slot] = o;
        cost = c;
        trace.push(cost);
    }
    // single swaps can stall in a local optimum; small problems are finished
    // by enumerating every medoid set
    if binomial(n, k) <= EXACT_MEDOID_SETS {
        if let Some((set, c)) = best_medoid_set(&d, k) {
            if c < cost - 1e-12 {
                medoids = set;
                cost = c;
                trace.push(cost);
            }
        }
    }
    let assignment = (0..n)
        .map(|i| {
            let mut b = 0;
            for (s, &m) in medoids.iter().enumerate() {
                if d[i][m] < d[i][medoids[b]] {
                    b = s;
                }
            }
            b as i64
        })
        .collect();
    Ok(ClusterModel {
        algorithm: ClusterAlgorithm::Kmedoids,
        k,
        assignment,
        params: ClusterParams::Medoids(medoids),
        trace,
        warnings: Vec::new(),
    })
}

pub const VARIANCE_FLOOR: f64 = 1e-6;

fn gmm_log_resp(x: &Matrix, p: &GmmParams) -> (Matrix, f64) {
    let k = p.weights.len();
    let mut log_r = Matrix::zeros(x.rows(), k);
    let mut ll = 0.0;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    for (i, row) in x.iter_rows().enumerate() {
        for c in 0..k {
            let mut lp = p.weights[c].ln();
            for ((v, m), s2) in row.iter().zip(p.means.row(c)).zip(p.variances.row(c)) {
                lp -= 0.5 * (ln2pi + s2.ln() + (v - m) * (v - m) / s2);
            }
            log_r[(i, c)] = lp;
        }
        let lse = log_sum_exp(log_r.row(i));
        ll += lse;
        log_r.row_mut(i).iter_mut().for_each(|v| *v -= lse);
    }
    (log_r, ll)
}

/// Diagonal-covariance EM initialized from K-Means. Stops once the
/// log-likelihood gains less than `tol`.
pub fn gmm_em(features: &Matrix, k: usize, seed: u64, tol: f64, max_iter: usize) -> Result<ClusterModel> {
    check_k(features, k)?;
    if features.cols() == 0 {
        return Err(Error::invalid("features need at least one column"));
    }
    let (n, dim) = features.shape();
    let init = kmeans(features, k, Metric::Euclidean, seed, 300)?;
    let ClusterParams::Centroids(means) = init.params else {
        unreachable!("kmeans returns centroids")
    };
    let mut floored = false;
    let mut resp = Matrix::zeros(n, k);
    for (i, &a) in init.assignment.iter().enumerate() {
        resp[(i, a as usize)] = 1.0;
    }
    let mut params = GmmParams {
        weights: vec![1.0 / k as f64; k],
        means,
        variances: Matrix::zeros(k, dim),
    };
    m_step(features, &resp, &mut params, &mut floored);

    let mut trace = Vec::new();
    let mut log_r;
    loop {
        let (lr, ll) = gmm_log_resp(features, &params);
        log_r = lr;
        let done = trace.last().is_some_and(|&prev: &f64| ll - prev < tol) || trace.len() >= max_iter;
        trace.push(ll);
        if done {
            break;
        }
        let resp = log_r.map(f64::exp);
        m_step(features, &resp, &mut params, &mut floored);
    }
    let assignment = log_r
        .iter_rows()
        .map(|r| crate::matrix::argmax(r) as i64)
        .collect();
    let mut warnings = Vec::new();
    if floored {
        warnings.push(format!("gmm: variance floored at {VARIANCE_FLOOR:e}"));
    }
    Ok(ClusterModel {
        algorithm: ClusterAlgorithm::Gmm,
        k,
        assignment,
        params: ClusterParams::Gmm(params),
        trace,
        warnings,
    })
}

fn m_step(x: &Matrix, resp: &Matrix, p: &mut GmmParams, floored: &mut bool) {
    let (n, dim) = x.shape();
    for c in 0..resp.cols() {
        let nk: f64 = (0..n).map(|i| resp[(i, c)]).sum();
        p.weights[c] = nk / n as f64;
        if nk <= 0.0 {
            continue;
        }
        let mut mean = vec![0.0; dim];
        for (i, row) in x.iter_rows().enumerate() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += resp[(i, c)] * v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        let mut var = vec![0.0; dim];
        for (i, row) in x.iter_rows().enumerate() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += resp[(i, c)] * (v - m) * (v - m);
            }
        }
        for s in var.iter_mut() {
            *s /= nk;
            if *s < VARIANCE_FLOOR {
                *s = VARIANCE_FLOOR;
                *floored = true;
            }
        }
        p.means.row_mut(c).copy_from_slice(&mean);
        p.variances.row_mut(c).copy_from_slice(&var);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    pub min_samples: usize,
}

impl HdbscanParams {
    pub fn defaults_for(n: usize) -> Self {
        HdbscanParams {
            min_cluster_size: (n / 50).max(5),
            min_samples: 5,
        }
    }
}

/// One edge of the condensed tree: `child` is a point when `< n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CondensedEdge {
    pub parent: usize,
    pub child: usize,
    pub lambda: f64,
    pub size: usize,
}

const MIN_DISTANCE: f64 = 1e-12;

fn lambda_of(d: f64) -> f64 {
    1.0 / d.max(MIN_DISTANCE)
}

/// Single-linkage merges `(a, b, distance, size)` over the minimum spanning
/// tree of mutual-reachability distances; merge `i` creates node `n + i`.
fn single_linkage(features: &Matrix, min_samples: usize) -> Vec<(usize, usize, f64, usize)> {
    let n = features.rows();
    let d = pairwise_distances(features);
    let kth = min_samples.clamp(1, n);
    // the point itself counts as its first neighbor
    let core: Vec<f64> = d
        .iter()
        .map(|row| {
            let mut r = row.clone();
            r.sort_by(f64::total_cmp);
            r[kth - 1]
        })
        .collect();
    // mutual reachability ties are common (a core distance often dominates),
    // so the raw distance breaks them and the tree does not depend on row order
    let key = |i: usize, j: usize| (d[i][j].max(core[i]).max(core[j]), d[i][j]);
    let less = |a: (f64, f64), b: (f64, f64)| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).is_lt();

    let mut in_tree = vec![false; n];
    let mut best = vec![(f64::INFINITY, f64::INFINITY); n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let w = key(current, j);
            if less(w, best[j]) {
                best[j] = w;
                from[j] = current;
            }
            if next == usize::MAX || less(best[j], best[next]) {
                next = j;
            }
        }
        edges.push((from[next], next, best[next]));
        in_tree[next] = true;
        current = next;
    }
    edges.sort_by(|a, b| a.2 .0.total_cmp(&b.2 .0).then(a.2 .1.total_cmp(&b.2 .1)));

    let mut parent: Vec<usize> = (0..2 * n).collect();
    let mut size = vec![1usize; 2 * n];
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut merges = Vec::with_capacity(edges.len());
    for (i, (a, b, w)) in edges.into_iter().enumerate() {
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, b);
        let node = n + i;
        parent[ra] = node;
        parent[rb] = node;
        size[node] = size[ra] + size[rb];
        merges.push((ra, rb, w.0, size[node]));
    }
    merges
}

/// Condensed cluster tree; cluster labels start at `n` (the root).
pub fn condense_tree(merges: &[(usize, usize, f64, usize)], n: usize, min_cluster_size: usize) -> Vec<CondensedEdge> {
    if n < 2 {
        return Vec::new();
    }
    let root = n + merges.len() - 1;
    let node_size = |x: usize| if x < n { 1 } else { merges[x - n].3 };
    let leaves = |x: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![x];
        while let Some(y) = stack.pop() {
            if y < n {
                out.push(y);
            } else {
                let (a, b, _, _) = merges[y - n];
                stack.push(b);
                stack.push(a);
            }
        }
        out
    };
    let mut relabel = vec![0usize; root + 1];
    relabel[root] = n;
    let mut next_label = n + 1;
    let mut edges = Vec::new();
    let mut queue = VecDeque::from([root]);
    while let Some(node) = queue.pop_front() {
        if node < n {
            continue;
        }
        let (left, right, dist, _) = merges[node - n];
        let lambda = lambda_of(dist);
        let parent = relabel[node];
        let (ls, rs) = (node_size(left), node_size(right));
        let big_l = ls >= min_cluster_size;
        let big_r = rs >= min_cluster_size;
        let fall_out = |x: usize, edges: &mut Vec<CondensedEdge>| {
            for p in leaves(x) {
                edges.push(CondensedEdge {
                    parent,
                    child: p,
                    lambda,
                    size: 1,
                });
            }
        };
        match (big_l, big_r) {
            (true, true) => {
                for (x, s) in [(left, ls), (right, rs)] {
                    relabel[x] = next_label;
                    edges.push(CondensedEdge {
                        parent,
                        child: next_label,
                        lambda,
                        size: s,
                    });
                    next_label += 1;
                    queue.push_back(x);
                }
            }
            (false, false) => {
                fall_out(left, &mut edges);
                fall_out(right, &mut edges);
            }
            (true, false) => {
                relabel[left] = parent;
                fall_out(right, &mut edges);
                queue.push_back(left);
            }
            (false, true) => {
                relabel[right] = parent;
                fall_out(left, &mut edges);
                queue.push_back(right);
            }
        }
    }
    edges
}

/// Excess-of-mass selection over the condensed tree (the root is never
/// selected). Returns the selected cluster labels in increasing order.
pub fn select_clusters(tree: &[CondensedEdge], n: usize) -> Vec<usize> {
    let Some(max_label) = tree.iter().map(|e| e.child.max(e.parent)).filter(|&c| c >= n).max() else {
        return Vec::new();
    };
    let m = max_label - n + 1;
    let mut birth = vec![0.0; m];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); m];
    for e in tree.iter().filter(|e| e.child >= n) {
        birth[e.child - n] = e.lambda;
        children[e.parent - n].push(e.child);
    }
    let mut stability = vec![0.0; m];
    for e in tree {
        let p = e.parent - n;
        stability[p] += (e.lambda - birth[p]) * e.size as f64;
    }
    let mut selected = vec![false; m];
    // children always carry larger labels than their parents
    for c in (1..m).rev() {
        let child_sum: f64 = children[c].iter().map(|&x| stability[x - n]).sum();
        if children[c].is_empty() || stability[c] >= child_sum {
            selected[c] = true;
            let mut stack = children[c].clone();
            while let Some(x) = stack.pop() {
                selected[x - n] = false;
                stack.extend(children[x - n].iter().copied());
            }
        } else {
            stability[c] = child_sum;
        }
    }
    (1..m).filter(|&c| selected[c]).map(|c| c + n).collect()
}

/// HDBSCAN over euclidean distances. Points outside every selected cluster
/// are labeled [`NOISE`]; cluster ids are ordered by their lowest member row.
pub fn hdbscan(features: &Matrix, params: HdbscanParams) -> Result<ClusterModel> {
    let n = features.rows();
    if params.min_cluster_size < 2 {
        return Err(Error::invalid("min_cluster_size must be at least 2"));
    }
    if params.min_samples == 0 {
        return Err(Error::invalid("min_samples must be positive"));
    }
    if n < params.min_cluster_size {
        return Err(Error::invalid(format!(
            "{n} rows is fewer than min_cluster_size = {}",
            params.min_cluster_size
        )));
    }
    let merges = single_linkage(features, params.min_samples);
    let tree = condense_tree(&merges, n, params.min_cluster_size);
    let selected = select_clusters(&tree, n);

    let mut parent_of = vec![usize::MAX; n + tree.len() + 1];
    for e in &tree {
        parent_of[e.child] = e.parent;
    }
    let mut raw = vec![NOISE; n];
    for (p, slot) in raw.iter_mut().enumerate() {
        let mut c = parent_of[p];
        while c != usize::MAX {
            if let Some(pos) = selected.iter().position(|&s| s == c) {
                *slot = pos as i64;
                break;
            }
            c = parent_of[c];
        }
    }
    // dense ids ordered by first member
    let mut order: Vec<i64> = Vec::new();
    for &r in &raw {
        if r >= 0 && !order.contains(&r) {
            order.push(r);
        }
    }
    let assignment: Vec<i64> = raw
        .iter()
        .map(|&r| if r < 0 { NOISE } else { order.iter().position(|&o| o == r).unwrap() as i64 })
        .collect();
    let k = order.len();
    let mut centers = Matrix::zeros(k, features.cols());
    let mut counts = vec![0usize; k];
    for (row, &a) in features.iter_rows().zip(&assignment) {
        if a >= 0 {
            counts[a as usize] += 1;
            for (c, v) in centers.row_mut(a as usize).iter_mut().zip(row) {
                *c += v;
            }
        }
    }
    for (c, &cnt) in counts.iter().enumerate() {
        centers.row_mut(c).iter_mut().for_each(|v| *v /= cnt as f64);
    }
    let nearest = if k == 0 {
        Vec::new()
    } else {
        features.iter_rows().map(|r| self::nearest(r, &centers).0).collect()
    };
    let mut warnings = Vec::new();
    if k == 0 {
        warnings.push("hdbscan: every point is noise".to_string());
    }
    Ok(ClusterModel {
        algorithm: ClusterAlgorithm::Hdbscan,
        k,
        assignment,
        params: ClusterParams::Density { centers, nearest },
        trace: Vec::new(),
        warnings,
    })
}

/// Fits `algorithm` with its default settings. `k` is ignored by HDBSCAN.
pub fn fit(features: &Matrix, algorithm: ClusterAlgorithm, k: usize, seed: u64) -> Result<ClusterModel> {
    match algorithm {
        ClusterAlgorithm::KmeansEuclidean => kmeans(features, k, Metric::Euclidean, seed, 300),
        ClusterAlgorithm::KmeansCosine => kmeans(features, k, Metric::Cosine, seed, 300),
        ClusterAlgorithm::Kmedoids => kmedoids(features, k, seed, 100),
        ClusterAlgorithm::Gmm => gmm_em(features, k, seed, 1e-6, 200),
        ClusterAlgorithm::Hdbscan => hdbscan(features, HdbscanParams::defaults_for(features.rows())),
    }
}

/// Like [`fit`], but K-Means is restarted `n_init` times from derived seeds
/// and the fit with the lowest distortion kept (first wins ties). The other
/// algorithms are fitted once.
pub fn fit_restarts(
    features: &Matrix,
    algorithm: ClusterAlgorithm,
    k: usize,
    seed: u64,
    n_init: usize,
) -> Result<ClusterModel> {
    let restartable = matches!(algorithm, ClusterAlgorithm::KmeansEuclidean | ClusterAlgorithm::KmeansCosine);
    if !restartable || n_init <= 1 {
        return fit(features, algorithm, k, seed);
    }
    let mut best: Option<(f64, ClusterModel)> = None;
    for r in 0..n_init {
        let model = fit(features, algorithm, k, crate::rng::derive(seed, "restart", &[r as u64]))?;
        let d = model.distortion(features);
        if best.as_ref().is_none_or(|(b, _)| d < *b) {
            best = Some((d, model));
        }
    }
    Ok(best.expect("n_init > 1").1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElbowResult {
    pub k: usize,
    pub distortions: Vec<(usize, f64)>,
    pub warning: Option<String>,
}

/// Knee of a distortion curve: the interior k with the largest second
/// difference, ties to the smaller k. Curves without curvature fall back to
/// the smallest k with a warning.
pub fn elbow_from_distortions(ks: &[usize], distortions: &[f64]) -> Result<(usize, Option<String>)> {
    if ks.len() < 3 || ks.len() != distortions.len() {
        return Err(Error::invalid("elbow needs at least 3 values of k"));
    }
    let hi = distortions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = distortions.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-6 * (hi - lo).abs().max(hi.abs() * 1e-9);
    let mut best: Option<(usize, f64)> = None;
    for i in 1..ks.len() - 1 {
        let second = distortions[i - 1] - 2.0 * distortions[i] + distortions[i + 1];
        if best.is_none_or(|(_, b)| second > b) {
            best = Some((i, second));
        }
    }
    let (i, curvature) = best.expect("interior point");
    if !(curvature > tol) {
        return Ok((
            ks[0],
            Some("elbow: distortion curve has no knee, using the smallest k".to_string()),
        ));
    }
    Ok((ks[i], None))
}

pub fn elbow_k(features: &Matrix, algorithm: ClusterAlgorithm, ks: &[usize], seed: u64) -> Result<ElbowResult> {
    if algorithm == ClusterAlgorithm::Hdbscan {
        return Err(Error::invalid("hdbscan chooses its own number of clusters"));
    }
    let mut distortions = Vec::with_capacity(ks.len());
    for &k in ks {
        distortions.push(fit(features, algorithm, k, seed)?.distortion(features));
    }
    let (k, warning) = elbow_from_distortions(ks, &distortions)?;
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(ElbowResult {
        k,
        distortions: ks.iter().copied().zip(distortions).collect(),
        warning,
    })
}

/// `domains.csv` body: one `id,cluster` line per row.
pub fn domains_csv(ids: &[String], assignment: &[i64]) -> String {
    let mut out = String::from("id,cluster\n");
    for (id, a) in ids.iter().zip(assignment) {
        out.push_str(&format!("{id},{a}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut rng::Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn blobs(centers: &[[f64; 2]], per: usize, spread: f64, seed: u64) -> Matrix {
        let mut rng = rng::rng(seed);
        let mut rows = Vec::new();
        for c in centers {
            for _ in 0..per {
                rows.push(vec![c[0] + spread * gaussian(&mut rng), c[1] + spread * gaussian(&mut rng)]);
            }
        }
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn kmeans_on_distinct_points_is_exact() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [5.0, 5.0], [9.0, 1.0]]).unwrap();
        let m = kmeans(&x, 3, Metric::Euclidean, 1, 300).unwrap();
        assert_eq!(m.distortion(&x), 0.0);
        let mut a = m.assignment.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn k_above_rows_is_an_error() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(kmeans(&x, 3, Metric::Euclidean, 0, 10).is_err());
        assert!(kmedoids(&x, 3, 0, 10).is_err());
        assert!(gmm_em(&x, 3, 0, 1e-6, 10).is_err());
    }

    #[test]
    fn cosine_ignores_row_scale() {
        let x = blobs(&[[1.0, 0.1], [0.1, 1.0]], 10, 0.05, 2);
        let mut y = x.clone();
        for i in 0..y.rows() {
            let s = 1.0 + i as f64;
            y.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        let a = kmeans(&x, 2, Metric::Cosine, 4, 300).unwrap();
        let b = kmeans(&y, 2, Metric::Cosine, 4, 300).unwrap();
        assert_eq!(a.assignment, b.assignment);
    }

    #[test]
    fn kmedoids_with_k_equal_rows() {
        let x = Matrix::from_rows(&[[0.0], [3.0], [7.0]]).unwrap();
        let m = kmedoids(&x, 3, 0, 100).unwrap();
        assert_eq!(*m.trace.last().unwrap(), 0.0);
    }

    #[test]
    fn medoid_set_enumeration() {
        assert_eq!(binomial(7, 2), 21);
        assert_eq!(binomial(5, 0), 1);
        assert_eq!(binomial(2, 3), 0);
        assert_eq!(binomial(200, 100), usize::MAX);
        let x = Matrix::from_rows(&[[0.0], [1.0], [10.0], [11.0], [12.0]]).unwrap();
        let (set, cost) = best_medoid_set(&pairwise_distances(&x), 2).unwrap();
        assert_eq!(set, vec![0, 3]);
        assert_eq!(cost, 3.0);
    }

    #[test]
    fn gmm_single_component_matches_sample_statistics() {
        let x = blobs(&[[1.0, -2.0]], 30, 0.7, 9);
        let m = gmm_em(&x, 1, 0, 1e-6, 200).unwrap();
        let ClusterParams::Gmm(p) = &m.params else { panic!() };
        for c in 0..2 {
            let col: Vec<f64> = (0..x.rows()).map(|i| x[(i, c)]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!((p.means[(0, c)] - mean).abs() < 1e-9);
            assert!((p.variances[(0, c)] - var).abs() < 1e-9);
        }
        assert!((p.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gmm_separated_blobs_are_one_hot() {
        let x = blobs(&[[0.0, 0.0], [20.0, 20.0]], 25, 1.0, 3);
        let m = gmm_em(&x, 2, 1, 1e-6, 200).unwrap();
        let ClusterParams::Gmm(p) = &m.params else { panic!() };
        let (log_r, _) = gmm_log_resp(&x, p);
        for r in log_r.iter_rows() {
            assert!(r.iter().any(|v| v.exp() > 0.99));
        }
        for w in m.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn hdbscan_three_blobs() {
        let x = blobs(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], 20, 0.3, 11);
        let m = hdbscan(&x, HdbscanParams::defaults_for(x.rows())).unwrap();
        assert_eq!(m.k, 3);
        assert_eq!(m.n_noise(), 0);
        for b in 0..3 {
            let ids: Vec<i64> = m.assignment[b * 20..(b + 1) * 20].to_vec();
            assert!(ids.iter().all(|&i| i == ids[0]));
        }
    }

    #[test]
    fn hdbscan_scatter_is_noise() {
        let mut rng = rng::rng(4);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let m = hdbscan(
            &x,
            HdbscanParams {
                min_cluster_size: 40,
                min_samples: 5,
            },
        )
        .unwrap();
        assert_eq!(m.k, 0);
        assert_eq!(m.n_noise(), 60);
    }

    #[test]
    fn hdbscan_duplicates() {
        let mut rows = vec![vec![0.0, 0.0]; 8];
        rows.extend(vec![vec![50.0, 50.0]; 8]);
        let x = Matrix::from_rows(&rows).unwrap();
        let m = hdbscan(
            &x,
            HdbscanParams {
                min_cluster_size: 5,
                min_samples: 3,
            },
        )
        .unwrap();
        assert_eq!(m.k, 2);
        assert!(m.assignment[..8].iter().all(|&a| a == m.assignment[0]));
        assert!(m.assignment[8..].iter().all(|&a| a == m.assignment[8]));
        assert_ne!(m.assignment[0], m.assignment[8]);
    }

    #[test]
    fn elbow_examples() {
        let x = blobs(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], 20, 0.5, 5);
        let ks = [2, 3, 4, 5, 6];
        let r = elbow_k(&x, ClusterAlgorithm::KmeansEuclidean, &ks, 1).unwrap();
        assert_eq!(r.k, 3);
        assert_eq!(r, elbow_k(&x, ClusterAlgorithm::KmeansEuclidean, &ks, 1).unwrap());

        let (k, w) = elbow_from_distortions(&ks, &[10.0, 8.0, 6.0, 4.0, 2.0]).unwrap();
        assert_eq!(k, 2);
        assert!(w.is_some());
        let (k, w) = elbow_from_distortions(&ks, &[5.0; 5]).unwrap();
        assert_eq!(k, 2);
        assert!(w.is_some());
        // equal curvature at 3 and 5
        let (k, _) = elbow_from_distortions(&ks, &[10.0, 6.0, 4.0, 2.0, 2.0]).unwrap();
        assert_eq!(k, 3);
    }

    #[test]
    fn domains_csv_lines() {
        let csv = domains_csv(&["a".into(), "b".into()], &[1, -1]);
        assert_eq!(csv, "id,cluster\na,1\nb,-1\n");
    }
}
