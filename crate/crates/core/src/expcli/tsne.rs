//! Exact t-SNE for exporting 2-D views of encoder features.

use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iters: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iters: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tsne {
    pub coords: Matrix,
    /// KL(P || Q) before every update, measured against the unexaggerated P.
    pub kl: Vec<f64>,
    /// Entropy (nats) of every conditional distribution after the bandwidth search.
    pub entropies: Vec<f64>,
}

const ENTROPY_TOL: f64 = 1e-10;
const MAX_BISECTIONS: usize = 200;

/// Row-conditional affinities `p_{j|i}` whose entropies match
/// `ln(perplexity)`, from a matrix of squared distances.
pub fn conditional_probabilities(d2: &Matrix, perplexity: f64) -> Result<(Matrix, Vec<f64>)> {
    let n = d2.rows();
    if d2.cols() != n {
        return Err(Error::shape(format!("{n}x{n} distances"), format!("{}x{}", n, d2.cols())));
    }
    let target = perplexity.ln();
    let mut p = Matrix::zeros(n, n);
    let mut entropies = Vec::with_capacity(n);
    for i in 0..n {
        let row = d2.row(i);
        let dmin = (0..n)
            .filter(|&j| j != i)
            .map(|j| row[j])
            .fold(f64::INFINITY, f64::min);
        let shifted: Vec<f64> = row.iter().map(|&d| d - dmin).collect();
        let eval = |beta: f64, out: &mut [f64]| {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                out[j] = if j == i { 0.0 } else { (-beta * shifted[j]).exp() };
                sum += out[j];
                weighted += shifted[j] * out[j];
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
            sum.ln() + beta * weighted / sum
        };
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0;
        let out = p.row_mut(i);
        let mut h = eval(beta, out);
        for _ in 0..MAX_BISECTIONS {
            let diff = h - target;
            if diff.abs() < ENTROPY_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            h = eval(beta, out);
        }
        entropies.push(h);
    }
    Ok((p, entropies))
}

fn pairwise_squared(x: &Matrix) -> Matrix {
    let n = x.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = squared_distance(x.row(i), x.row(j));
            d.row_mut(i)[j] = v;
            d.row_mut(j)[i] = v;
        }
    }
    d
}

pub fn tsne_project(features: &Matrix, cfg: &TsneConfig) -> Result<Tsne> {
    let n = features.rows();
    if (n as f64) < 3.0 * cfg.perplexity {
        return Err(Error::invalid(format!(
            "t-SNE with perplexity {} needs at least {} points, got {n}; lower the perplexity",
            cfg.perplexity,
            (3.0 * cfg.perplexity).ceil()
        )));
    }
    if !features.is_finite() {
        return Err(Error::invalid("t-SNE input contains non-finite values"));
    }
    let (cond, entropies) = conditional_probabilities(&pairwise_squared(features), cfg.perplexity)?;
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p.row_mut(i)[j] = ((cond.row(i)[j] + cond.row(j)[i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }

    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut rng = rng::derived(cfg.seed, "tsne/init", &[]);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = Matrix::zeros(n, n);
    let mut kl = Vec::with_capacity(cfg.iters);

    for it in 0..cfg.iters {
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num.row_mut(i)[j] = v;
                num.row_mut(j)[i] = v;
                z += 2.0 * v;
            }
        }
        let mut objective = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let pij = p.row(i)[j];
                    objective += pij * (pij / (num.row(i)[j] / z).max(1e-12)).ln();
                }
            }
        }
        kl.push(objective);

        let exaggeration = if it < cfg.exaggeration_iters { cfg.exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iters {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num.row(i)[j];
                let coeff = (exaggeration * p.row(i)[j] - w / z) * w;
                g[0] += coeff * (y[i][0] - y[j][0]);
                g[1] += coeff * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                let grad = 4.0 * g[d];
                gains[i][d] = if (grad > 0.0) != (update[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(0.01)
                };
                update[i][d] = momentum * update[i][d] - cfg.learning_rate * gains[i][d] * grad;
            }
        }
        let mut mean = [0.0; 2];
        for (yi, u) in y.iter_mut().zip(&update) {
            yi[0] += u[0];
            yi[1] += u[1];
            mean[0] += yi[0] / n as f64;
            mean[1] += yi[1] / n as f64;
        }
        for yi in &mut y {
            yi[0] -= mean[0];
            yi[1] -= mean[1];
        }
    }
    let coords = Matrix::from_vec(n, 2, y.into_iter().flatten().collect())?;
    Ok(Tsne {
        coords,
        kl,
        entropies,
    })
}

/// Reads a feature table with a header row. A column named `id` is kept
/// as row names; every other column must be numeric.
pub fn read_features_csv(path: &Path) -> Result<(Option<Vec<String>>, Matrix)> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let id_col = headers.iter().position(|h| h == "id");
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        for (c, field) in record.iter().enumerate() {
            if Some(c) == id_col {
                ids.push(field.to_string());
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::invalid(format!(
                    "row {}, column `{}`: `{field}` is not a number",
                    line + 1,
                    headers.get(c).unwrap_or("?")
                ))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let cols = headers.len() - usize::from(id_col.is_some());
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("feature table is empty"));
    }
    Ok((id_col.map(|_| ids), Matrix::from_vec(rows, cols, data)?))
}

/// `id,x,y` rows (or `x,y` without ids).
pub fn coords_csv(ids: Option<&[String]>, coords: &Matrix) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if ids.is_some() {
        w.write_record(["id", "x", "y"])?;
    } else {
        w.write_record(["x", "y"])?;
    }
    for (i, row) in coords.iter_rows().enumerate() {
        let xy = [format!("{:.6}", row[0]), format!("{:.6}", row[1])];
        match ids {
            Some(ids) => w.write_record([ids[i].as_str(), &xy[0], &xy[1]])?,
            None => w.write_record(&xy)?,
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
