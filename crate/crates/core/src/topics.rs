//! Topic models whose dominant topic per document serves as a domain label:
//! LDA (collapsed Gibbs), NMF (multiplicative updates), LSA (truncated SVD)
//! and pLSA (EM).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterModel, ClusterParams, NOISE};
use crate::corpus::{tokenize, Corpus, Vocabulary, UNK_ID};
use crate::error::{Error, Result};
use crate::matrix::{argmax, dot, Matrix};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicAlgorithm {
    Lda,
    Nmf,
    Lsa,
    Plsa,
}

/// Sparse term counts: per document, `(term id, count)` pairs sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    pub n_terms: usize,
    pub docs: Vec<Vec<(usize, u32)>>,
}

impl CountMatrix {
    /// Counts of in-vocabulary tokens (out-of-vocabulary tokens are dropped).
    pub fn from_corpus(corpus: &Corpus, vocab: &Vocabulary) -> Self {
        let docs = corpus
            .documents
            .iter()
            .map(|d| {
                let mut ids: Vec<usize> = tokenize(&d.text, vocab)
                    .tokens
                    .into_iter()
                    .filter(|&t| t != UNK_ID)
                    .collect();
                ids.sort_unstable();
                let mut row: Vec<(usize, u32)> = Vec::new();
                for id in ids {
                    match row.last_mut() {
                        Some((t, c)) if *t == id => *c += 1,
                        _ => row.push((id, 1)),
                    }
                }
                row
            })
            .collect();
        CountMatrix {
            n_terms: vocab.len(),
            docs,
        }
    }

    /// Rounds a dense nonnegative matrix to counts.
    pub fn from_dense(x: &Matrix) -> Result<Self> {
        let mut docs = Vec::with_capacity(x.rows());
        for row in x.iter_rows() {
            let mut d = Vec::new();
            for (j, &v) in row.iter().enumerate() {
                if !(v >= 0.0) {
                    return Err(Error::invalid("counts must be nonnegative"));
                }
                let c = v.round() as u32;
                if c > 0 {
                    d.push((j, c));
                }
            }
            docs.push(d);
        }
        Ok(CountMatrix {
            n_terms: x.cols(),
            docs,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn doc_len(&self, d: usize) -> u32 {
        self.docs[d].iter().map(|&(_, c)| c).sum()
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.docs.len(), self.n_terms);
        for (i, d) in self.docs.iter().enumerate() {
            for &(t, c) in d {
                m[(i, t)] = c as f64;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicModel {
    pub algorithm: TopicAlgorithm,
    pub k: usize,
    /// k × V.
    pub topic_term: Matrix,
    /// N × k.
    pub doc_topic: Matrix,
    pub assignment: Vec<usize>,
    /// Objective per iteration: log-likelihood (pLSA), squared reconstruction
    /// error (NMF); empty for LDA and LSA.
    pub trace: Vec<f64>,
    /// LSA only, non-increasing.
    pub singular_values: Vec<f64>,
    pub warnings: Vec<String>,
}

fn row_argmax(m: &Matrix) -> Vec<usize> {
    m.iter_rows().map(argmax).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdaParams {
    pub alpha: f64,
    pub beta: f64,
    pub iters: usize,
}

impl LdaParams {
    pub fn defaults_for(k: usize) -> Self {
        LdaParams {
            alpha: 50.0 / k as f64,
            beta: 0.01,
            iters: 500,
        }
    }
}

/// Collapsed Gibbs sampling over token-topic assignments. Document-topic and
/// topic-term estimates come from the final counts with Dirichlet smoothing.
pub fn lda_gibbs(counts: &CountMatrix, k: usize, params: LdaParams, seed: u64) -> Result<TopicModel> {
    if k < 2 {
        return Err(Error::invalid("lda needs k ≥ 2"));
    }
    let v = counts.n_terms;
    let n = counts.n_docs();
    let mut rng = rng::derived(seed, "lda", &[]);
    let tokens: Vec<Vec<usize>> = counts
        .docs
        .iter()
        .map(|d| d.iter().flat_map(|&(t, c)| std::iter::repeat_n(t, c as usize)).collect())
        .collect();
    let mut ndk = vec![vec![0u32; k]; n];
    let mut nkw = vec![vec![0u32; v]; k];
    let mut nk = vec![0u32; k];
    let mut z: Vec<Vec<usize>> = Vec::with_capacity(n);
    for (d, doc) in tokens.iter().enumerate() {
        let zs: Vec<usize> = doc
            .iter()
            .map(|&w| {
                let t = rng.gen_range(0..k);
                ndk[d][t] += 1;
                nkw[t][w] += 1;
                nk[t] += 1;
                t
            })
            .collect();
        z.push(zs);
    }
    let vbeta = v as f64 * params.beta;
    let mut p = vec![0.0; k];
    for _ in 0..params.iters {
        for (d, doc) in tokens.iter().enumerate() {
            for (i, &w) in doc.iter().enumerate() {
                let old = z[d][i];
                ndk[d][old] -= 1;
                nkw[old][w] -= 1;
                nk[old] -= 1;
                let mut total = 0.0;
                for t in 0..k {
                    total += (ndk[d][t] as f64 + params.alpha) * (nkw[t][w] as f64 + params.beta)
                        / (nk[t] as f64 + vbeta);
                    p[t] = total;
                }
                let u = rng.gen::<f64>() * total;
                let new = p.iter().position(|&c| u < c).unwrap_or(k - 1);
                z[d][i] = new;
                ndk[d][new] += 1;
                nkw[new][w] += 1;
                nk[new] += 1;
            }
        }
    }
    let mut doc_topic = Matrix::zeros(n, k);
    let mut empty = 0;
    for d in 0..n {
        let nd = tokens[d].len() as f64;
        if tokens[d].is_empty() {
            empty += 1;
        }
        for t in 0..k {
            doc_topic[(d, t)] = (ndk[d][t] as f64 + params.alpha) / (nd + k as f64 * params.alpha);
        }
    }
    let mut topic_term = Matrix::zeros(k, v);
    for t in 0..k {
        for w in 0..v {
            topic_term[(t, w)] = (nkw[t][w] as f64 + params.beta) / (nk[t] as f64 + vbeta);
        }
    }
    let mut warnings = Vec::new();
    if empty > 0 {
        warnings.push(format!("lda: {empty} empty documents skipped"));
    }
    Ok(TopicModel {
        algorithm: TopicAlgorithm::Lda,
        k,
        assignment: row_argmax(&doc_topic),
        topic_term,
        doc_topic,
        trace: Vec::new(),
        singular_values: Vec::new(),
        warnings,
    })
}

pub const NMF_EPS: f64 = 1e-12;

fn nmf_objective(x: &Matrix, w: &Matrix, h: &Matrix) -> Result<f64> {
    let wh = w.matmul(h)?;
    Ok(x.data().iter().zip(wh.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Multiplicative updates for `‖X − WH‖²_F`, stopping when the relative
/// objective change falls below `tol`.
pub fn nmf(x: &Matrix, k: usize, iters: usize, tol: f64, seed: u64) -> Result<TopicModel> {
    if x.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("nmf input must be nonnegative"));
    }
    if k == 0 || k > x.rows().min(x.cols()) {
        return Err(Error::invalid("nmf needs 1 ≤ k ≤ min(rows, cols)"));
    }
    let (n, v) = x.shape();
    let mut rng = rng::derived(seed, "nmf", &[]);
    let mean = x.data().iter().sum::<f64>() / (n * v) as f64;
    let scale = (mean / k as f64).sqrt().max(1e-6);
    let mut w = Matrix::from_vec(n, k, (0..n * k).map(|_| scale * rng.gen::<f64>()).collect())?;
    let mut h = Matrix::from_vec(k, v, (0..k * v).map(|_| scale * rng.gen::<f64>()).collect())?;
    let mut trace = vec![nmf_objective(x, &w, &h)?];
    for _ in 0..iters {
        // H <- H * (W^T X) / (W^T W H)
        let num = w.t_matmul(x)?;
        let den = w.t_matmul(&w)?.matmul(&h)?;
        for ((hv, a), b) in h.data_mut().iter_mut().zip(num.data()).zip(den.data()) {
            *hv *= a / (b + NMF_EPS);
        }
        // W <- W * (X H^T) / (W H H^T)
        let num = x.matmul_t(&h)?;
        let den = w.matmul(&h.matmul_t(&h)?)?;
        for ((wv, a), b) in w.data_mut().iter_mut().zip(num.data()).zip(den.data()) {
            *wv *= a / (b + NMF_EPS);
        }
        let obj = nmf_objective(x, &w, &h)?;
        let prev = *trace.last().unwrap();
        trace.push(obj);
        if (prev - obj).abs() <= tol * prev.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(TopicModel {
        algorithm: TopicAlgorithm::Nmf,
        k,
        assignment: row_argmax(&w),
        topic_term: h,
        doc_topic: w,
        trace,
        singular_values: Vec::new(),
        warnings: Vec::new(),
    })
}

/// Thin SVD by one-sided Jacobi rotations: returns `(U, sigma, V)` with
/// `a = U diag(sigma) Vᵀ`, sigma sorted non-increasing, and `a.cols()`
/// columns in `U` and `V`.
pub fn jacobi_svd(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (m, n) = a.shape();
    // columns of `u` are rotated until mutually orthogonal
    let mut u = a.transpose();
    let mut v = Matrix::identity(n);
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (up, uq) = (u.row(p), u.row(q));
                    (dot(up, up), dot(uq, uq), dot(up, uq))
                };
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (mat, len) in [(&mut u, m), (&mut v, n)] {
                    for i in 0..len {
                        let (xp, xq) = (mat[(p, i)], mat[(q, i)]);
                        mat[(p, i)] = c * xp - s * xq;
                        mat[(q, i)] = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    // rows of `u` and `v` now hold columns
    let sigma: Vec<f64> = (0..n).map(|j| dot(u.row(j), u.row(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let mut uu = Matrix::zeros(m, n);
    let mut vv = Matrix::zeros(n, n);
    let mut ss = Vec::with_capacity(n);
    for (col, &j) in order.iter().enumerate() {
        let s = sigma[j];
        ss.push(s);
        for i in 0..m {
            uu[(i, col)] = if s > 0.0 { u[(j, i)] / s } else { 0.0 };
        }
        for i in 0..n {
            vv[(i, col)] = v[(j, i)];
        }
    }
    (uu, ss, vv)
}

/// Rank-k truncated SVD. Documents are represented by `U_k Σ_k` and assigned
/// to the component with the largest magnitude.
pub fn lsa(x: &Matrix, k: usize) -> Result<TopicModel> {
    let (n, v) = x.shape();
    if k == 0 || k > n.min(v) {
        return Err(Error::invalid("lsa needs 1 ≤ k ≤ min(rows, cols)"));
    }
    // rotate over the smaller dimension
    let (doc_vecs, sigma, term_vecs) = if v <= n {
        let (u, s, vv) = jacobi_svd(x);
        (u, s, vv)
    } else {
        let (u, s, vv) = jacobi_svd(&x.transpose());
        (vv, s, u)
    };
    let mut doc_topic = Matrix::zeros(n, k);
    let mut topic_term = Matrix::zeros(k, v);
    for c in 0..k {
        for i in 0..n {
            doc_topic[(i, c)] = doc_vecs[(i, c)] * sigma[c];
        }
        for j in 0..v {
            topic_term[(c, j)] = term_vecs[(j, c)];
        }
    }
    let mut warnings = Vec::new();
    let tiny = sigma[0] * 1e-10;
    let rank_deficient = sigma[..k].iter().filter(|&&s| s <= tiny).count();
    if rank_deficient > 0 {
        warnings.push(format!(
            "lsa: {rank_deficient} of {k} singular values are numerically zero"
        ));
    }
    let assignment = doc_topic
        .iter_rows()
        .map(|r| argmax(&r.iter().map(|v| v.abs()).collect::<Vec<_>>()))
        .collect();
    Ok(TopicModel {
        algorithm: TopicAlgorithm::Lsa,
        k,
        topic_term,
        doc_topic,
        assignment,
        trace: Vec::new(),
        singular_values: sigma[..k].to_vec(),
        warnings,
    })
}

fn normalize_row(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    if s > 0.0 {
        row.iter_mut().for_each(|v| *v /= s);
    } else {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|v| *v = u);
    }
}

fn plsa_log_likelihood(counts: &CountMatrix, pzd: &Matrix, pwz: &Matrix) -> f64 {
    let k = pzd.cols();
    let mut ll = 0.0;
    for (d, doc) in counts.docs.iter().enumerate() {
        for &(w, c) in doc {
            let p: f64 = (0..k).map(|z| pzd[(d, z)] * pwz[(z, w)]).sum();
            ll += c as f64 * p.ln();
        }
    }
    ll
}

/// EM for P(w|z) and P(z|d), stopping once the log-likelihood gains less
/// than `tol`.
pub fn plsa_em(counts: &CountMatrix, k: usize, iters: usize, tol: f64, seed: u64) -> Result<TopicModel> {
    if k < 2 {
        return Err(Error::invalid("plsa needs k ≥ 2"));
    }
    let (n, v) = (counts.n_docs(), counts.n_terms);
    let mut rng = rng::derived(seed, "plsa", &[]);
    let mut pzd = Matrix::from_vec(n, k, (0..n * k).map(|_| rng.gen_range(0.5..1.5)).collect())?;
    let mut pwz = Matrix::from_vec(k, v, (0..k * v).map(|_| rng.gen_range(0.5..1.5)).collect())?;
    for i in 0..n {
        normalize_row(pzd.row_mut(i));
    }
    for z in 0..k {
        normalize_row(pwz.row_mut(z));
    }
    let mut trace = vec![plsa_log_likelihood(counts, &pzd, &pwz)];
    let mut post = vec![0.0; k];
    for _ in 0..iters {
        let mut new_pzd = Matrix::zeros(n, k);
        let mut new_pwz = Matrix::zeros(k, v);
        for (d, doc) in counts.docs.iter().enumerate() {
            for &(w, c) in doc {
                let mut s = 0.0;
                for z in 0..k {
                    post[z] = pzd[(d, z)] * pwz[(z, w)];
                    s += post[z];
                }
                if s <= 0.0 {
                    continue;
                }
                for z in 0..k {
                    let r = c as f64 * post[z] / s;
                    new_pzd[(d, z)] += r;
                    new_pwz[(z, w)] += r;
                }
            }
        }
        for d in 0..n {
            if counts.docs[d].is_empty() {
                new_pzd.row_mut(d).copy_from_slice(pzd.row(d));
            } else {
                normalize_row(new_pzd.row_mut(d));
            }
        }
        for z in 0..k {
            normalize_row(new_pwz.row_mut(z));
        }
        pzd = new_pzd;
        pwz = new_pwz;
        let ll = plsa_log_likelihood(counts, &pzd, &pwz);
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if ll - prev < tol {
            break;
        }
    }
    Ok(TopicModel {
        algorithm: TopicAlgorithm::Plsa,
        k,
        assignment: row_argmax(&pzd),
        topic_term: pwz,
        doc_topic: pzd,
        trace,
        singular_values: Vec::new(),
        warnings: Vec::new(),
    })
}

/// Something that can label every document with a domain id.
pub trait DomainModel {
    fn domain_labels(&self) -> Result<Vec<usize>>;
}

impl DomainModel for TopicModel {
    fn domain_labels(&self) -> Result<Vec<usize>> {
        if self.k == 0 {
            return Err(Error::invalid("model has no topics"));
        }
        Ok(self.assignment.clone())
    }
}

impl DomainModel for ClusterModel {
    /// HDBSCAN noise goes to the cluster with the nearest member mean.
    fn domain_labels(&self) -> Result<Vec<usize>> {
        if self.k == 0 {
            return Err(Error::invalid("model has no clusters"));
        }
        Ok(self
            .assignment
            .iter()
            .enumerate()
            .map(|(i, &a)| match (&self.params, a) {
                (ClusterParams::Density { nearest, .. }, NOISE) => nearest[i],
                _ => a as usize,
            })
            .collect())
    }
}

pub fn assign_domains(model: &dyn DomainModel) -> Result<Vec<usize>> {
    model.domain_labels()
}

/// Dominant topic per row, ties to the lowest id.
pub fn argmax_topics(doc_topic: &Matrix) -> Vec<usize> {
    row_argmax(doc_topic)
}

/// `topics.txt` body: the ten highest-weighted terms of every topic.
pub fn topics_report(model: &TopicModel, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for t in 0..model.k {
        let row = model.topic_term.row(t);
        let mut ids: Vec<usize> = (1..row.len().min(vocab.len())).collect();
        ids.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let terms: Vec<String> = ids
            .iter()
            .take(10)
            .map(|&id| format!("{}:{:.4}", vocab.token(id), row[id]))
            .collect();
        out.push_str(&format!("topic {t}\t{}\n", terms.join(" ")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted(n_per: usize, seed: u64) -> (CountMatrix, Vec<usize>) {
        let mut rng = rng::rng(seed);
        let mut x = Matrix::zeros(2 * n_per, 20);
        let mut truth = Vec::new();
        for d in 0..2 * n_per {
            let topic = d % 2;
            truth.push(topic);
            for _ in 0..30 {
                let w = topic * 10 + rng.gen_range(0..10);
                x[(d, w)] += 1.0;
            }
        }
        (CountMatrix::from_dense(&x).unwrap(), truth)
    }

    fn matches_up_to_permutation(a: &[usize], b: &[usize]) -> bool {
        let same = a.iter().zip(b).all(|(x, y)| x == y);
        let flipped = a.iter().zip(b).all(|(x, y)| *x == 1 - y);
        same || flipped
    }

    #[test]
    fn lda_recovers_planted_topics() {
        let (c, truth) = planted(15, 1);
        let m = lda_gibbs(&c, 2, LdaParams { iters: 200, ..LdaParams::defaults_for(2) }, 3).unwrap();
        assert!(matches_up_to_permutation(&m.assignment, &truth));
        for r in m.doc_topic.iter_rows().chain(m.topic_term.iter_rows()) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let again = lda_gibbs(&c, 2, LdaParams { iters: 200, ..LdaParams::defaults_for(2) }, 3).unwrap();
        assert_eq!(m.assignment, again.assignment);
    }

    #[test]
    fn plsa_recovers_planted_topics() {
        let (c, truth) = planted(15, 2);
        let m = plsa_em(&c, 2, 300, 1e-6, 0).unwrap();
        assert!(matches_up_to_permutation(&m.assignment, &truth));
        for w in m.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        for r in m.doc_topic.iter_rows().chain(m.topic_term.iter_rows()) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nmf_rank_one() {
        let a = [1.0, 2.0, 0.5, 3.0];
        let b = [0.2, 1.0, 4.0];
        let x = Matrix::from_vec(4, 3, a.iter().flat_map(|u| b.iter().map(move |v| u * v)).collect()).unwrap();
        let m = nmf(&x, 1, 500, 1e-12, 0).unwrap();
        assert!(*m.trace.last().unwrap() < 1e-6);
        assert!(nmf(&x.map(|v| -v), 1, 10, 1e-6, 0).is_err());
    }

    #[test]
    fn lsa_identity() {
        let m = lsa(&Matrix::identity(4), 4).unwrap();
        for s in &m.singular_values {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lsa_orders_singular_values() {
        let x = Matrix::from_rows(&[[3.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]).unwrap();
        let m = lsa(&x, 3).unwrap();
        assert_eq!(m.singular_values, vec![5.0, 3.0, 1.0]);
        assert_eq!(m.assignment[..3], [1, 0, 2]);
        let wide = lsa(&x.transpose(), 2).unwrap();
        assert_eq!(wide.singular_values, vec![5.0, 3.0]);
    }

    #[test]
    fn argmax_examples() {
        let m = Matrix::from_rows(&[[0.1, 0.7, 0.2], [0.5, 0.5, 0.0]]).unwrap();
        assert_eq!(argmax_topics(&m), vec![1, 0]);
    }

    #[test]
    fn noise_goes_to_nearest_cluster() {
        let x = Matrix::from_rows(&[[0.0], [0.1], [0.2], [0.15], [0.05], [9.0], [9.1], [9.2], [9.05], [9.15], [100.0]])
            .unwrap();
        let model = crate::clustering::hdbscan(
            &x,
            crate::clustering::HdbscanParams {
                min_cluster_size: 5,
                min_samples: 3,
            },
        )
        .unwrap();
        assert_eq!(model.k, 2);
        assert_eq!(model.assignment[10], NOISE);
        let labels = assign_domains(&model).unwrap();
        assert!(labels.iter().all(|&l| l < 2));
        assert_eq!(labels[10], labels[5]);
    }

    #[test]
    fn zero_cluster_model_is_rejected() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let mut m = crate::clustering::kmeans(&x, 1, crate::clustering::Metric::Euclidean, 0, 10).unwrap();
        m.k = 0;
        assert!(assign_domains(&m).is_err());
    }
}
