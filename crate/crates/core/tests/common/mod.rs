//! Independent oracles shared by the integration tests and the acceptance
//! target. Nothing here calls into the code it is checking except to obtain
//! the value under test.

#![allow(dead_code)]

use rand::Rng;
use uda_forge::adversarial::{uda_loss, UdaBatch, UdaModel};
use uda_forge::augment::{decode, tfidf_replace, DecodeConfig, LanguageModel, Replacer, Strategy};
use uda_forge::cat::{alignment_loss, cat_loss, centroids, clustering_loss, CatConfig};
use uda_forge::cdcl::{cdc_loss, cdcl_loss, CdclConfig};
use uda_forge::clustering::{self, gmm_em, hdbscan, kmeans, kmedoids, ClusterAlgorithm, HdbscanParams, Metric};
use uda_forge::corpus::{build_vocab, synth_corpus, tokenize};
use uda_forge::expcli::config::RunConfig;
use uda_forge::nnet::{GradBuffer, Network};
use uda_forge::rng;
use uda_forge::topics::{lda_gibbs, lsa, nmf, plsa_em, CountMatrix, LdaParams};
use uda_forge::training::{supervised_pass, Classifier, StepSeeds, TrainConfig};
use uda_forge::Matrix;

pub type TestRng = rng::Rng;

pub fn random_matrix(rng: &mut TestRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn random_labels(rng: &mut TestRng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..2)).collect()
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------------------------------------------------------------------------
// finite differences

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_INSTANCES: u64 = 10;
pub const GRAD_ROWS: usize = 5;
const INPUT_DIM: usize = 6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        dropout: 0.0,
        encoder_dims: vec![5, 4],
        head_hidden: 3,
        seed,
        ..TrainConfig::default()
    }
}

/// Largest relative error between `analytic` and central differences of `f`
/// over every parameter of the network picked by `net`.
pub fn fd_max_error<M: Clone>(
    model: &M,
    net: fn(&mut M) -> &mut Network,
    analytic: &GradBuffer,
    f: impl Fn(&M) -> f64,
) -> f64 {
    let mut m = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..analytic.len() {
        let orig = *net(&mut m).param_mut(i);
        *net(&mut m).param_mut(i) = orig + FD_STEP;
        let up = f(&m);
        *net(&mut m).param_mut(i) = orig - FD_STEP;
        let down = f(&m);
        *net(&mut m).param_mut(i) = orig;
        worst = worst.max(rel_err(analytic.get(i), (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

fn clf_encoder(m: &mut Classifier) -> &mut Network {
    &mut m.encoder
}
fn clf_head(m: &mut Classifier) -> &mut Network {
    &mut m.label_head
}
fn uda_encoder(m: &mut UdaModel) -> &mut Network {
    &mut m.classifier.encoder
}
fn uda_label_head(m: &mut UdaModel) -> &mut Network {
    &mut m.classifier.label_head
}
fn uda_domain_head(m: &mut UdaModel) -> &mut Network {
    &mut m.domain_head
}

fn seeds() -> StepSeeds {
    StepSeeds::new(0, 0, 0)
}

fn label_loss_value(m: &Classifier, x: &Matrix, y: &[usize]) -> f64 {
    supervised_pass(m, x, y, seeds()).unwrap().label_loss
}

pub fn grad_check_label_loss(instance: u64) -> f64 {
    let mut r = rng::derived(instance, "gc/label", &[]);
    let x = random_matrix(&mut r, GRAD_ROWS, INPUT_DIM, 0.0, 1.0);
    let y = random_labels(&mut r, GRAD_ROWS);
    let model = Classifier::new(INPUT_DIM, &tiny_config(instance)).unwrap();
    let pass = supervised_pass(&model, &x, &y, seeds()).unwrap();
    let enc = model.encoder.backward(&pass.encoder_cache, &pass.source_feature_grad).unwrap();
    let f = |m: &Classifier| label_loss_value(m, &x, &y);
    fd_max_error(&model, clf_encoder, &enc.grads, f).max(fd_max_error(&model, clf_head, &pass.label_grads, f))
}

/// The encoder and label head descend `L_y - lambda L_d`; the domain head
/// descends `L_d`.
pub fn grad_check_uda(instance: u64) -> f64 {
    let mut r = rng::derived(instance, "gc/uda", &[]);
    let lambda = [0.1, 1.0, 5.0][instance as usize % 3];
    let source = random_matrix(&mut r, 3, INPUT_DIM, 0.0, 1.0);
    let target = random_matrix(&mut r, GRAD_ROWS - 3, INPUT_DIM, 0.0, 1.0);
    let batch = UdaBatch::new(source, random_labels(&mut r, 3), target);
    let model = UdaModel::new(INPUT_DIM, &tiny_config(instance), lambda, None).unwrap();
    let loss = uda_loss(&model, &batch, seeds()).unwrap();
    let total = |m: &UdaModel| uda_loss(m, &batch, seeds()).unwrap().total;
    let domain = |m: &UdaModel| uda_loss(m, &batch, seeds()).unwrap().domain_loss;
    fd_max_error(&model, uda_encoder, &loss.grads[0], total)
        .max(fd_max_error(&model, uda_label_head, &loss.grads[1], total))
        .max(fd_max_error(&model, uda_domain_head, &loss.grads[2], domain))
}

pub fn grad_check_cat(instance: u64) -> f64 {
    let mut r = rng::derived(instance, "gc/cat", &[]);
    let x = random_matrix(&mut r, GRAD_ROWS, INPUT_DIM, 0.0, 1.0);
    let ys = random_labels(&mut r, 3);
    let pseudo: Vec<(usize, bool)> = (0..GRAD_ROWS - 3).map(|_| (r.gen_range(0..2), true)).collect();
    let cfg = CatConfig {
        alpha: 1.0,
        margin: 0.05,
        ..CatConfig::default()
    };
    let model = Classifier::new(INPUT_DIM, &tiny_config(instance)).unwrap();
    let loss = cat_loss(&model, &x, &ys, &pseudo, &cfg, seeds()).unwrap();
    let f = |m: &Classifier| cat_loss(m, &x, &ys, &pseudo, &cfg, seeds()).unwrap().total;
    fd_max_error(&model, clf_encoder, &loss.grads[0], f).max(fd_max_error(&model, clf_head, &loss.grads[1], f))
}

pub fn grad_check_cdcl(instance: u64) -> f64 {
    let mut r = rng::derived(instance, "gc/cdcl", &[]);
    let x = random_matrix(&mut r, GRAD_ROWS, INPUT_DIM, 0.0, 1.0);
    let ys = random_labels(&mut r, 3);
    let yt = random_labels(&mut r, GRAD_ROWS - 3);
    let cfg = CdclConfig { tau: 0.5, gamma: 1.0 };
    let model = Classifier::new(INPUT_DIM, &tiny_config(instance)).unwrap();
    let loss = cdcl_loss(&model, &x, &ys, &yt, &cfg, seeds()).unwrap();
    let f = |m: &Classifier| cdcl_loss(m, &x, &ys, &yt, &cfg, seeds()).unwrap().total;
    fd_max_error(&model, clf_encoder, &loss.grads[0], f).max(fd_max_error(&model, clf_head, &loss.grads[1], f))
}

/// Worst relative error of each objective over all instances.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let checks: [(&str, fn(u64) -> f64); 4] = [
        ("label loss", grad_check_label_loss),
        ("adversarial loss", grad_check_uda),
        ("cat total", grad_check_cat),
        ("cdcl total", grad_check_cdcl),
    ];
    checks
        .iter()
        .map(|(name, check)| (*name, (0..GRAD_INSTANCES).map(check).fold(0.0, f64::max)))
        .collect()
}

// ---------------------------------------------------------------------------
// brute-force loss oracles

pub fn brute_clustering(f: &Matrix, y: &[usize], margin: f64) -> f64 {
    let n = f.rows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = sqdist(f.row(i), f.row(j));
            total += if y[i] == y[j] { d } else { (margin - d).max(0.0) };
        }
    }
    total / (n * n) as f64
}

pub fn brute_alignment(fs: &Matrix, ys: &[usize], ft: &Matrix, yt: &[usize]) -> f64 {
    let mean = |f: &Matrix, y: &[usize], k: usize| -> Option<Vec<f64>> {
        let rows: Vec<&[f64]> = (0..f.rows()).filter(|&i| y[i] == k).map(|i| f.row(i)).collect();
        if rows.is_empty() {
            return None;
        }
        Some((0..f.cols()).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64).collect())
    };
    let mut total = 0.0;
    let mut shared = 0;
    for k in 0..2 {
        if let (Some(a), Some(b)) = (mean(fs, ys, k), mean(ft, yt, k)) {
            total += sqdist(&a, &b);
            shared += 1;
        }
    }
    total / shared as f64
}

fn unit_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let n = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn brute_cdc_side(za: &Matrix, ya: &[usize], zo: &Matrix, yo: &[usize], tau: f64) -> f64 {
    let mut sum = 0.0;
    let mut used = 0;
    for a in 0..za.rows() {
        let sim = |j: usize| za.row(a).iter().zip(zo.row(j)).map(|(x, y)| x * y).sum::<f64>() / tau;
        let denom: f64 = (0..zo.rows()).map(|j| sim(j).exp()).sum();
        let positives: Vec<usize> = (0..zo.rows()).filter(|&j| yo[j] == ya[a]).collect();
        if positives.is_empty() {
            continue;
        }
        let l: f64 = positives.iter().map(|&p| (sim(p).exp() / denom).ln()).sum();
        sum += -l / positives.len() as f64;
        used += 1;
    }
    if used == 0 {
        0.0
    } else {
        sum / used as f64
    }
}

/// Inputs are normalized here; pass raw rows.
pub fn brute_cdc(fs: &Matrix, ys: &[usize], ft: &Matrix, yt: &[usize], tau: f64) -> f64 {
    let (zs, zt) = (unit_rows(fs), unit_rows(ft));
    brute_cdc_side(&zs, ys, &zt, yt, tau) + brute_cdc_side(&zt, yt, &zs, ys, tau)
}

pub const ORACLE_BATCHES: u64 = 50;

/// Largest absolute disagreement of clustering, alignment and CDC loss with
/// their double-loop oracles over random batches of at most 16 rows.
pub fn loss_oracle_suite() -> [(&'static str, f64); 3] {
    let mut worst = [0.0f64; 3];
    for b in 0..ORACLE_BATCHES {
        let mut r = rng::derived(b, "oracle", &[]);
        let dim = r.gen_range(2..6);
        let ns = r.gen_range(2..=8);
        let nt = r.gen_range(2..=8);
        let fs = random_matrix(&mut r, ns, dim, -1.0, 1.0);
        let ft = random_matrix(&mut r, nt, dim, -1.0, 1.0);
        let mut ys = random_labels(&mut r, ns);
        let mut yt = random_labels(&mut r, nt);
        // keep class 0 on both sides so alignment has a shared class
        ys[0] = 0;
        yt[0] = 0;
        let margin = r.gen_range(0.1..3.0);
        let tau = r.gen_range(0.1..1.0);

        let pooled = fs.vstack(&ft).unwrap();
        let y_pooled: Vec<usize> = ys.iter().chain(&yt).copied().collect();
        let (lc, _) = clustering_loss(&pooled, &y_pooled, margin).unwrap();
        worst[0] = worst[0].max((lc - brute_clustering(&pooled, &y_pooled, margin)).abs());

        let (la, _, _) = alignment_loss(&centroids(&fs, &ys, 2), &centroids(&ft, &yt, 2)).unwrap();
        worst[1] = worst[1].max((la - brute_alignment(&fs, &ys, &ft, &yt)).abs());

        let zs = uda_forge::cdcl::l2_normalize(&fs).unwrap().z;
        let zt = uda_forge::cdcl::l2_normalize(&ft).unwrap().z;
        let lcdc = cdc_loss(&zs, &ys, &zt, &yt, tau).unwrap().loss;
        worst[2] = worst[2].max((lcdc - brute_cdc(&fs, &ys, &ft, &yt, tau)).abs());
    }
    [("clustering", worst[0]), ("alignment", worst[1]), ("cdc", worst[2])]
}

// ---------------------------------------------------------------------------
// monotonicity

pub const MONOTONE_FITS: u64 = 20;
pub const MONOTONE_SLACK: f64 = 1e-9;

/// Gaussian blobs around `centers`, `per` rows each, with their true ids.
pub fn blobs(seed: u64, centers: &[[f64; 2]], per: usize, sd: f64) -> (Matrix, Vec<usize>) {
    use rand_distr::{Distribution, Normal};
    let mut r = rng::derived(seed, "blobs", &[]);
    let noise = Normal::new(0.0, sd).unwrap();
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..per {
            rows.push([c[0] + noise.sample(&mut r), c[1] + noise.sample(&mut r)]);
            ids.push(k);
        }
    }
    (Matrix::from_rows(&rows).unwrap(), ids)
}

fn overlapping_blobs(seed: u64) -> Matrix {
    blobs(seed, &[[0.0, 0.0], [2.0, 0.5], [0.5, 2.0]], 20, 1.0).0
}

fn random_counts(seed: u64, docs: usize, terms: usize) -> CountMatrix {
    let mut r = rng::derived(seed, "counts", &[]);
    let dense = Matrix::from_vec(docs, terms, (0..docs * terms).map(|_| r.gen_range(0..4) as f64).collect()).unwrap();
    CountMatrix::from_dense(&dense).unwrap()
}

/// Worst step against the required direction, relative to the objective's
/// scale: `(next - prev) / max(1, |prev|)` for a non-increasing trace.
pub fn worst_increase(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .map(|w| (w[1] - w[0]) / w[0].abs().max(1.0))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn worst_decrease(trace: &[f64]) -> f64 {
    let neg: Vec<f64> = trace.iter().map(|v| -v).collect();
    worst_increase(&neg)
}

/// Per algorithm: the worst violation over every iteration of 20 seeded fits
/// and the shortest trace seen.
pub fn monotonicity_suite() -> Vec<(&'static str, f64, usize)> {
    let mut out = Vec::new();
    let mut record = |name, traces: Vec<(f64, usize)>| {
        let worst = traces.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let shortest = traces.iter().map(|t| t.1).min().unwrap_or(0);
        out.push((name, worst, shortest));
    };
    let fits = 0..MONOTONE_FITS;
    record(
        "k-means distortion",
        fits.clone()
            .map(|s| {
                let t = kmeans(&overlapping_blobs(s), 3, Metric::Euclidean, s, 300).unwrap().trace;
                (worst_increase(&t), t.len())
            })
            .collect(),
    );
    record(
        "k-medoids cost",
        fits.clone()
            .map(|s| {
                let t = kmedoids(&overlapping_blobs(s), 3, s, 100).unwrap().trace;
                (worst_increase(&t), t.len())
            })
            .collect(),
    );
    record(
        "gmm log-likelihood",
        fits.clone()
            .map(|s| {
                let t = gmm_em(&overlapping_blobs(s), 3, s, 0.0, 100).unwrap().trace;
                (worst_decrease(&t), t.len())
            })
            .collect(),
    );
    record(
        "plsa log-likelihood",
        fits.clone()
            .map(|s| {
                let t = plsa_em(&random_counts(s, 15, 12), 3, 100, 0.0, s).unwrap().trace;
                (worst_decrease(&t), t.len())
            })
            .collect(),
    );
    record(
        "nmf objective",
        fits.map(|s| {
            let t = nmf(&random_counts(s, 15, 12).to_dense(), 3, 200, 0.0, s).unwrap().trace;
            (worst_increase(&t), t.len())
        })
        .collect(),
    );
    out
}

// ---------------------------------------------------------------------------
// small-instance optimality

/// Exhaustive minimum over medoid pairs of the summed distance to the
/// nearer medoid.
pub fn exhaustive_two_medoids(x: &Matrix) -> f64 {
    let n = x.rows();
    let d = |i: usize, j: usize| sqdist(x.row(i), x.row(j)).sqrt();
    let mut best = f64::INFINITY;
    for a in 0..n {
        for b in (a + 1)..n {
            let cost: f64 = (0..n).map(|i| d(i, a).min(d(i, b))).sum();
            best = best.min(cost);
        }
    }
    best
}

/// Largest gap between K-Medoids and the exhaustive optimum over random
/// 7-point instances.
pub fn kmedoids_optimality_gap(instances: u64) -> f64 {
    (0..instances)
        .map(|s| {
            let mut r = rng::derived(s, "medoids7", &[]);
            let x = random_matrix(&mut r, 7, 2, 0.0, 10.0);
            let got = *kmedoids(&x, 2, s, 100).unwrap().trace.last().unwrap();
            (got - exhaustive_two_medoids(&x)).abs()
        })
        .fold(0.0, f64::max)
}

/// Context-dependent next-token table over `vocab` ordinary tokens; the end
/// token never has mass, so every sequence runs to full length.
pub struct TableLm {
    pub vocab: usize,
    pub seed: u64,
}

impl LanguageModel for TableLm {
    fn size(&self) -> usize {
        self.vocab + 1
    }

    fn next_distribution(&self, context: &[usize]) -> Vec<f64> {
        let counters: Vec<u64> = context.iter().map(|&t| t as u64).collect();
        let mut r = rng::derived(self.seed, "table_lm", &counters);
        let w: Vec<f64> = (0..self.vocab).map(|_| r.gen_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        let mut dist: Vec<f64> = w.iter().map(|v| v / s).collect();
        dist.push(0.0);
        dist
    }
}

pub fn exhaustive_argmax(lm: &TableLm, len: usize) -> Vec<usize> {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let total = lm.vocab.pow(len as u32);
    for code in 0..total {
        let mut seq = Vec::with_capacity(len);
        let mut c = code;
        for _ in 0..len {
            seq.push(c % lm.vocab);
            c /= lm.vocab;
        }
        let mut lp = 0.0;
        for i in 0..len {
            lp += lm.next_distribution(&seq[..i])[seq[i]].ln();
        }
        if lp > best.0 {
            best = (lp, seq);
        }
    }
    best.1
}

/// Number of random tables on which beam search disagrees with exhaustive
/// search (vocab 4, length 3, 64 beams).
pub fn beam_mismatches(tables: u64) -> usize {
    let cfg = DecodeConfig {
        beams: 64,
        max_len: 3,
        ..DecodeConfig::new(Strategy::Beam)
    };
    (0..tables)
        .filter(|&s| {
            let lm = TableLm { vocab: 4, seed: s };
            decode(&lm, &[], &cfg, 0) != exhaustive_argmax(&lm, 3)
        })
        .count()
}

/// Largest gap between LSA singular values and square roots of the top
/// eigenvalues of the Gram matrix from a general-purpose eigensolver.
pub fn lsa_singular_value_gap(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..instances {
        let mut r = rng::derived(s, "lsa", &[]);
        let x = random_matrix(&mut r, 9, 6, 0.0, 1.0);
        let k = 3;
        let got = lsa(&x, k).unwrap().singular_values;
        let a = nalgebra::DMatrix::from_row_slice(x.rows(), x.cols(), x.data());
        let gram = a.transpose() * &a;
        let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|p, q| q.total_cmp(p));
        for i in 0..k {
            worst = worst.max((got[i] - eig[i].max(0.0).sqrt()).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// planted structure

/// Exact agreement of two partitions up to relabeling; noise (-1) in
/// `found` never matches.
pub fn same_partition(found: &[i64], truth: &[usize]) -> bool {
    use std::collections::HashMap;
    let mut fwd: HashMap<i64, usize> = HashMap::new();
    let mut back: HashMap<usize, i64> = HashMap::new();
    for (&f, &t) in found.iter().zip(truth) {
        if f < 0 {
            return false;
        }
        if *fwd.entry(f).or_insert(t) != t || *back.entry(t).or_insert(f) != f {
            return false;
        }
    }
    true
}

/// Documents drawn from one of two disjoint 10-term vocabularies.
pub fn planted_topics(seed: u64) -> (CountMatrix, Vec<usize>) {
    let mut r = rng::derived(seed, "planted", &[]);
    let mut docs = Vec::new();
    let mut truth = Vec::new();
    for d in 0..40 {
        let topic = d % 2;
        let mut counts = [0u32; 20];
        for _ in 0..30 {
            counts[topic * 10 + r.gen_range(0..10)] += 1;
        }
        docs.push(counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(t, &c)| (t, c)).collect());
        truth.push(topic);
    }
    (CountMatrix { n_terms: 20, docs }, truth)
}

pub const SEPARATED: [[f64; 2]; 3] = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];

/// Name and success of each planted-structure recovery.
pub fn planted_suite(seed: u64) -> Vec<(&'static str, bool)> {
    let as_i64 = |v: &[usize]| v.iter().map(|&a| a as i64).collect::<Vec<_>>();
    let (counts, truth) = planted_topics(seed);
    let lda = lda_gibbs(&counts, 2, LdaParams::defaults_for(2), seed).unwrap();
    let plsa = plsa_em(&counts, 2, 300, 1e-9, seed).unwrap();
    let (x, ids) = blobs(seed, &SEPARATED, 30, 0.5);
    let km = clustering::fit(&x, ClusterAlgorithm::KmeansEuclidean, 3, seed).unwrap();
    let gmm = clustering::fit(&x, ClusterAlgorithm::Gmm, 3, seed).unwrap();
    let hdb = hdbscan(
        &x,
        HdbscanParams {
            min_cluster_size: 5,
            min_samples: 5,
        },
    )
    .unwrap();
    vec![
        ("lda", same_partition(&as_i64(&lda.assignment), &truth)),
        ("plsa", same_partition(&as_i64(&plsa.assignment), &truth)),
        ("k-means", same_partition(&km.assignment, &ids)),
        ("gmm", same_partition(&gmm.assignment, &ids)),
        ("hdbscan", same_partition(&hdb.assignment, &ids)),
    ]
}

// ---------------------------------------------------------------------------
// augmentation statistics

/// Fraction of token positions changed by TF-IDF replacement at rate `p`
/// over a synthetic corpus, and the number of tokens seen.
pub fn replacement_rate(p: f64, seed: u64) -> (f64, usize) {
    let (source, _) = synth_corpus(500, 0.5, seed).unwrap();
    let vocab = build_vocab(&source, 20_000, 1).unwrap();
    let replacer = Replacer::fit(&source, &vocab).unwrap();
    let mut changed = 0;
    let mut total = 0;
    for (i, d) in source.documents.iter().enumerate() {
        let doc = tokenize(&d.text, &vocab);
        let out = tfidf_replace(&doc, &replacer, p, rng::derive(seed, "rate", &[i as u64]));
        changed += doc.tokens.iter().zip(&out.tokens).filter(|(a, b)| a != b).count();
        total += doc.tokens.len();
    }
    (changed as f64 / total as f64, total)
}

/// The smallest set of most probable tokens whose mass reaches `p`,
/// computed by full sort.
pub fn nucleus_oracle(dist: &[f64], p: f64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
    ids.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).unwrap().then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut out = Vec::new();
    for i in ids {
        out.push(i);
        mass += dist[i];
        if mass >= p {
            break;
        }
    }
    out
}

/// Top-p draws that land outside the oracle nucleus.
pub fn top_p_violations(draws: u64, p: f64) -> usize {
    let lm = TableLm { vocab: 12, seed: 99 };
    let cfg = DecodeConfig {
        p,
        max_len: 1,
        ..DecodeConfig::new(Strategy::TopP)
    };
    (0..draws)
        .filter(|&i| {
            let ctx = [(i % 12) as usize];
            let tok = decode(&lm, &ctx, &cfg, i)[0];
            !nucleus_oracle(&lm.next_distribution(&ctx), p).contains(&tok)
        })
        .count()
}

// ---------------------------------------------------------------------------
// end to end

/// Synthetic corpus with 500 documents per domain at shift 0.5, trained for
/// ten epochs with checkpoint selection on target validation.
pub fn synth_config(method: &str, seed: u64, section: Option<(&str, serde_json::Value)>) -> RunConfig {
    let mut v = serde_json::json!({
        "method": method,
        "dataset": { "synth": { "n": 500, "shift": 0.5, "seed": 7 } },
        "seed": seed,
        "epochs": 10,
        "learning_rate": 0.002,
        "selection": "target_validation",
    });
    if let Some((name, value)) = section {
        v[name] = value;
    }
    RunConfig::from_value(v).unwrap()
}

pub fn uda_config(lambda: f64, seed: u64) -> RunConfig {
    synth_config("uda", seed, Some(("uda", serde_json::json!({ "lambda": lambda }))))
}

pub fn cluster_uda_config(seed: u64) -> RunConfig {
    let mut v = serde_json::to_value(uda_config(0.1, seed)).unwrap();
    v["method"] = "cluster_uda".into();
    v["clustering"] = serde_json::json!({ "algorithm": "kmeans_euclidean", "k": 3 });
    RunConfig::from_value(v).unwrap()
}
