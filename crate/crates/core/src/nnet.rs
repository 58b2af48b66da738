//! Dense feed-forward networks with hand-derived gradients, softmax
//! cross-entropy, and Adam with decoupled weight decay, value clipping and a
//! linear warm-up/decay schedule.
//!
//! The default encoder maps TF-IDF rows through `dense(256, relu)` and
//! `dense(64, identity)`; heads are `dense(256, relu)` followed by a linear
//! layer with one output per class.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{log_sum_exp, Matrix};
use crate::rng;

pub const DEFAULT_ENCODER_DIMS: [usize; 2] = [256, 64];
pub const DEFAULT_HEAD_HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation; relu uses 0 at the kink.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `y = act(W · dropout(x) + b)`, with `W` stored out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    /// Inverted dropout applied to the layer input in train mode.
    pub dropout: f64,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<DenseLayer>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Layer inputs after dropout.
    pub inputs: Vec<Matrix>,
    /// Inverted-dropout scale per input element (0 or 1/keep), train mode only.
    pub masks: Vec<Option<Vec<f64>>>,
    pub pre_activations: Vec<Matrix>,
    pub outputs: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("network has at least one layer")
    }

    /// Output of layer `i` (post-activation).
    pub fn layer_output(&self, i: usize) -> &Matrix {
        &self.outputs[i]
    }
}

/// Gradients for every parameter of a [`Network`], layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub weights: Vec<Matrix>,
    pub bias: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(net: &Network) -> Self {
        GradBuffer {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        self.weights.iter_mut().for_each(|w| w.data_mut().fill(0.0));
        self.bias.iter_mut().for_each(|b| b.fill(0.0));
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.data().iter().chain(b.iter()))
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|&g| g == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| w.scale(s));
        self.bias
            .iter_mut()
            .for_each(|b| b.iter_mut().for_each(|x| *x *= s));
    }

    fn check_congruent(&self, net: &Network) -> Result<()> {
        let ok = self.weights.len() == net.layers.len()
            && self
                .weights
                .iter()
                .zip(&self.bias)
                .zip(&net.layers)
                .all(|((w, b), l)| w.shape() == l.weights.shape() && b.len() == l.bias.len());
        if ok {
            Ok(())
        } else {
            Err(Error::shape(net.describe(), "gradient buffer of another shape"))
        }
    }
}

/// Result of back-propagating through a network.
#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: GradBuffer,
    /// Gradient with respect to the network input.
    pub input_grad: Matrix,
}

impl Network {
    /// Glorot-uniform weights, zero biases. `dims` lists the input size
    /// followed by every layer's output size.
    pub fn new(dims: &[usize], activations: &[Activation], dropout: &[f64], seed: u64) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 || dropout.len() != dims.len() - 1 {
            return Err(Error::invalid(format!(
                "network needs n+1 dims for n activations/dropout rates (got {}, {}, {})",
                dims.len(),
                activations.len(),
                dropout.len()
            )));
        }
        if let Some(&d) = dropout.iter().find(|&&d| !(0.0..=0.5).contains(&d)) {
            return Err(Error::invalid(format!("dropout rate {d} outside [0, 0.5]")));
        }
        let mut rng = rng::derived(seed, "init", &[]);
        let layers = dims
            .windows(2)
            .zip(activations.iter().zip(dropout))
            .map(|(io, (&activation, &dropout))| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
                DenseLayer {
                    weights: Matrix::from_vec(fan_out, fan_in, w).expect("sized above"),
                    bias: vec![0.0; fan_out],
                    activation,
                    dropout,
                }
            })
            .collect();
        Ok(Network { layers })
    }

    /// `input → hidden… (relu) → last (identity)`, dropout on every layer input
    /// except the raw network input.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, dropout: f64, seed: u64) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let n = dims.len() - 1;
        let activations: Vec<Activation> = (0..n)
            .map(|i| if i + 1 == n { Activation::Identity } else { Activation::Relu })
            .collect();
        let rates: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else { dropout }).collect();
        Network::new(&dims, &activations, &rates, seed)
    }

    /// Encoder `input → 256 relu → 64 identity` by default.
    pub fn encoder(input: usize, dims: &[usize], dropout: f64, seed: u64) -> Result<Self> {
        let (last, hidden) = dims
            .split_last()
            .ok_or_else(|| Error::invalid("encoder needs at least one layer"))?;
        Network::mlp(input, hidden, *last, dropout, seed)
    }

    /// Fully connected head with one hidden layer and `classes` outputs. The
    /// head input is the encoder's features, so its first layer also gets dropout.
    pub fn head(input: usize, hidden: usize, classes: usize, dropout: f64, seed: u64) -> Result<Self> {
        Network::new(
            &[input, hidden, classes],
            &[Activation::Relu, Activation::Identity],
            &[dropout, dropout],
            seed,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::output_dim)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.data().len() + l.bias.len()).sum()
    }

    fn describe(&self) -> String {
        let dims: Vec<String> = std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::output_dim))
            .map(|d| d.to_string())
            .collect();
        format!("network {}", dims.join("→"))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// Runs the network. Dropout masks are drawn row-major from a stream keyed
    /// by `rng_seed` and the layer index, so a row's mask depends only on the
    /// rows before it.
    pub fn forward(&self, x: &Matrix, train_mode: bool, rng_seed: u64) -> Result<ForwardCache> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                format!("input with {} columns ({})", self.input_dim(), self.describe()),
                format!("{}x{}", x.rows(), x.cols()),
            ));
        }
        let n = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
            pre_activations: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
        };
        let mut current = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mask = if train_mode && layer.dropout > 0.0 {
                let keep = 1.0 - layer.dropout;
                let mut rng = rng::derived(rng_seed, "dropout", &[li as u64]);
                let mask: Vec<f64> = (0..current.data().len())
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                for (v, m) in current.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                Some(mask)
            } else {
                None
            };
            let mut pre = current.matmul_t(&layer.weights)?;
            for r in 0..pre.rows() {
                for (v, b) in pre.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let out = pre.map(|v| layer.activation.apply(v));
            cache.inputs.push(current);
            cache.masks.push(mask);
            cache.pre_activations.push(pre);
            current = out.clone();
            cache.outputs.push(out);
        }
        Ok(cache)
    }

    /// Inference-mode output.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x, false, 0)?.outputs.pop().expect("non-empty network"))
    }

    pub fn backward(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<Backward> {
        self.backward_with_taps(cache, d_out, &[])
    }

    /// Back-propagates `d_out` from the final layer and, in addition, injects
    /// `(layer, gradient)` pairs at intermediate layer outputs.
    pub fn backward_with_taps(
        &self,
        cache: &ForwardCache,
        d_out: &Matrix,
        taps: &[(usize, &Matrix)],
    ) -> Result<Backward> {
        let n = self.layers.len();
        if cache.outputs.len() != n || cache.output().shape() != d_out.shape() {
            return Err(Error::shape(
                format!(
                    "activations of {} with output {}x{}",
                    self.describe(),
                    cache.outputs.last().map_or(0, Matrix::rows),
                    self.output_dim()
                ),
                format!(
                    "{} cached layers, gradient {}x{}",
                    cache.outputs.len(),
                    d_out.rows(),
                    d_out.cols()
                ),
            ));
        }
        for (li, g) in taps {
            if *li >= n || cache.outputs[*li].shape() != g.shape() {
                return Err(Error::shape(
                    format!("tap gradient matching layer {li} output"),
                    format!("{}x{}", g.rows(), g.cols()),
                ));
            }
        }
        let mut grads = GradBuffer::zeros_like(self);
        let mut d = d_out.clone();
        for li in (0..n).rev() {
            let layer = &self.layers[li];
            for (tl, g) in taps {
                if *tl == li {
                    d.add_assign(g)?;
                }
            }
            let pre = &cache.pre_activations[li];
            for (dv, &p) in d.data_mut().iter_mut().zip(pre.data()) {
                *dv *= layer.activation.derivative(p);
            }
            grads.weights[li] = d.t_matmul(&cache.inputs[li])?;
            for r in 0..d.rows() {
                for (gb, dv) in grads.bias[li].iter_mut().zip(d.row(r)) {
                    *gb += dv;
                }
            }
            let mut d_in = d.matmul(&layer.weights)?;
            if let Some(mask) = &cache.masks[li] {
                for (v, m) in d_in.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
            }
            d = d_in;
        }
        Ok(Backward { grads, input_grad: d })
    }

    /// Applies `f` to every parameter paired with its gradient entry.
    pub(crate) fn zip_params_mut(&mut self, other: &GradBuffer, mut f: impl FnMut(&mut f64, f64, usize)) {
        let mut k = 0;
        for ((layer, gw), gb) in self.layers.iter_mut().zip(&other.weights).zip(&other.bias) {
            for (p, &g) in layer.weights.data_mut().iter_mut().zip(gw.data()) {
                f(p, g, k);
                k += 1;
            }
            for (p, &g) in layer.bias.iter_mut().zip(gb) {
                f(p, g, k);
                k += 1;
            }
        }
    }

    /// Mutable access to the i-th parameter in layer order (W then b).
    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for layer in &mut self.layers {
            let nw = layer.weights.data().len();
            if i < nw {
                return &mut layer.weights.data_mut()[i];
            }
            i -= nw;
            if i < layer.bias.len() {
                return &mut layer.bias[i];
            }
            i -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }
}

impl GradBuffer {
    /// The i-th gradient entry in the same order as [`Network::param_mut`].
    pub fn get(&self, mut i: usize) -> f64 {
        for (w, b) in self.weights.iter().zip(&self.bias) {
            if i < w.data().len() {
                return w.data()[i];
            }
            i -= w.data().len();
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("gradient index out of range");
    }

    pub fn len(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.data().len() + b.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    p
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn xent_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(
            format!("{} labels", logits.rows()),
            format!("{} labels", labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("cross-entropy over an empty batch"));
    }
    let classes = logits.cols();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel { label, classes });
    }
    let n = labels.len() as f64;
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        loss += log_sum_exp(logits.row(r)) - logits[(r, y)];
        grad[(r, y)] -= 1.0;
    }
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn new(learning_rate: f64, total_steps: usize) -> Self {
        OptimizerConfig {
            learning_rate,
            warmup_fraction: 0.05,
            total_steps,
            weight_decay: 1e-3,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).round() as usize)
            .clamp(1, self.total_steps.max(1))
    }

    /// Piecewise-linear schedule: 0 at step 0, peak at the end of warm-up,
    /// 0 again at `total_steps` and beyond.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps as f64;
        let warm = self.warmup_steps() as f64;
        let s = step as f64;
        if step >= self.total_steps {
            return 0.0;
        }
        let factor = if s <= warm {
            s / warm
        } else {
            (total - s) / (total - warm)
        };
        self.learning_rate * factor.max(0.0)
    }
}

/// Adam with decoupled weight decay and elementwise value clipping. One
/// instance per network.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, net: &Network) -> Self {
        let n = net.n_params();
        Optimizer {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    pub fn step(&mut self, net: &mut Network, grads: &GradBuffer) -> Result<()> {
        grads.check_congruent(net)?;
        if !grads.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        self.step += 1;
        let c = self.config;
        let lr = c.lr_at(self.step);
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (m, v) = (&mut self.m, &mut self.v);
        net.zip_params_mut(grads, |p, g, k| {
            let g = g.clamp(-c.clip, c.clip);
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *p);
        });
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub dropout: Vec<f64>,
    pub step: usize,
}

/// Writes `manifest.json` and `params.bin` (little-endian f32, W then b per layer).
pub fn save_checkpoint(net: &Network, step: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        dims: std::iter::once(net.input_dim())
            .chain(net.layers.iter().map(DenseLayer::output_dim))
            .collect(),
        activations: net.layers.iter().map(|l| l.activation).collect(),
        dropout: net.layers.iter().map(|l| l.dropout).collect(),
        step,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let mut bytes = Vec::with_capacity(net.n_params() * 4);
    for layer in &net.layers {
        for &x in layer.weights.data().iter().chain(&layer.bias) {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fs::write(dir.join("params.bin"), bytes)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Network, usize)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut net = Network::new(&manifest.dims, &manifest.activations, &manifest.dropout, 0)?;
    let bytes = fs::read(dir.join("params.bin"))?;
    if bytes.len() != net.n_params() * 4 {
        return Err(Error::shape(
            format!("{} bytes of parameters", net.n_params() * 4),
            format!("{} bytes", bytes.len()),
        ));
    }
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        *net.param_mut(i) = f64::from(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")));
    }
    Ok((net, manifest.step))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_relu() -> Network {
        Network {
            layers: vec![DenseLayer {
                weights: Matrix::identity(2),
                bias: vec![0.0; 2],
                activation: Activation::Relu,
                dropout: 0.0,
            }],
        }
    }

    #[test]
    fn relu_identity_layer() {
        let x = Matrix::from_rows(&[[-1.0, 2.0]]).unwrap();
        let out = identity_relu().predict(&x).unwrap();
        assert_eq!(out.row(0), &[0.0, 2.0]);
    }

    #[test]
    fn no_dropout_train_equals_eval() {
        let net = Network::mlp(5, &[7], 3, 0.0, 1).unwrap();
        let x = Matrix::from_vec(2, 5, (0..10).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        let a = net.forward(&x, true, 42).unwrap();
        let b = net.forward(&x, false, 0).unwrap();
        assert_eq!(a.output(), b.output());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut net = identity_relu();
        net.layers[0].weights = Matrix::identity(10_000);
        net.layers[0].bias = vec![0.0; 10_000];
        net.layers[0].dropout = 0.5;
        let x = Matrix::from_vec(1, 10_000, vec![1.0; 10_000]).unwrap();
        let out = net.forward(&x, true, 3).unwrap();
        let alive = out.output().data().iter().filter(|&&v| v > 0.0).count() as f64 / 10_000.0;
        assert!((alive - 0.5).abs() < 0.02, "{alive}");
        // inverted scaling keeps survivors at 1/keep
        assert!(out.output().data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn forward_shape_error_names_both_shapes() {
        let net = Network::mlp(4, &[3], 2, 0.0, 0).unwrap();
        let err = net.forward(&Matrix::zeros(2, 5), false, 0).unwrap_err().to_string();
        assert!(err.contains("4 columns") && err.contains("2x5"), "{err}");
    }

    #[test]
    fn xent_examples() {
        let (l, _) = xent_loss(&Matrix::from_rows(&[[0.0, 0.0]]).unwrap(), &[0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let (l, _) = xent_loss(&Matrix::from_rows(&[[10.0, -10.0]]).unwrap(), &[0]).unwrap();
        // ln(1 + e^-20)
        assert!((l - 2.061_153_6e-9).abs() < 1e-15, "{l}");
        assert!(matches!(
            xent_loss(&Matrix::from_rows(&[[0.0, 0.0]]).unwrap(), &[2]),
            Err(Error::InvalidLabel { label: 2, .. })
        ));
    }

    #[test]
    fn backward_zero_dout_gives_zero_grads() {
        let net = Network::mlp(4, &[6], 2, 0.2, 5).unwrap();
        let x = Matrix::from_vec(3, 4, (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let cache = net.forward(&x, true, 9).unwrap();
        let b = net.backward(&cache, &Matrix::zeros(3, 2)).unwrap();
        assert!(b.grads.is_zero());
        let again = net.backward(&cache, &Matrix::zeros(3, 2)).unwrap();
        assert_eq!(b.grads, again.grads);
    }

    #[test]
    fn backward_rejects_stale_activations() {
        let net = Network::mlp(4, &[6], 2, 0.0, 5).unwrap();
        let cache = net.forward(&Matrix::zeros(3, 4), false, 0).unwrap();
        assert!(matches!(
            net.backward(&cache, &Matrix::zeros(2, 2)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn schedule_shape() {
        let c = OptimizerConfig::new(1e-3, 200);
        assert_eq!(c.warmup_steps(), 10);
        assert_eq!(c.lr_at(0), 0.0);
        assert_eq!(c.lr_at(10), 1e-3);
        assert_eq!(c.lr_at(200), 0.0);
        assert!((c.lr_at(5) - 5e-4).abs() < 1e-15);
        assert!((c.lr_at(105) - 5e-4).abs() < 1e-15);
        for s in 0..=200 {
            assert!(c.lr_at(s) >= 0.0);
        }
    }

    #[test]
    fn clipping_treats_large_entries_as_one() {
        let mut a = Network::mlp(1, &[], 1, 0.0, 0).unwrap();
        let mut b = a.clone();
        let mut cfg = OptimizerConfig::new(0.1, 10);
        cfg.weight_decay = 0.0;
        let mut ga = GradBuffer::zeros_like(&a);
        ga.weights[0][(0, 0)] = 5.0;
        let mut gb = ga.clone();
        gb.weights[0][(0, 0)] = 1.0;
        Optimizer::new(cfg, &a).step(&mut a, &ga).unwrap();
        Optimizer::new(cfg, &b).step(&mut b, &gb).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_grads_without_decay_is_fixpoint() {
        let mut net = Network::mlp(3, &[4], 2, 0.0, 2).unwrap();
        let before = net.clone();
        let mut cfg = OptimizerConfig::new(0.1, 10);
        cfg.weight_decay = 0.0;
        let mut opt = Optimizer::new(cfg, &net);
        for _ in 0..5 {
            opt.step(&mut net, &GradBuffer::zeros_like(&before)).unwrap();
        }
        assert_eq!(net, before);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut net = Network::mlp(2, &[], 1, 0.0, 0).unwrap();
        let mut g = GradBuffer::zeros_like(&net);
        g.bias[0][0] = f64::NAN;
        let mut opt = Optimizer::new(OptimizerConfig::new(0.1, 10), &net);
        let err = opt.step(&mut net, &g).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::mlp(5, &[4], 2, 0.1, 3).unwrap();
        save_checkpoint(&net, 17, dir.path()).unwrap();
        let (back, step) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(step, 17);
        for (a, b) in back.layers.iter().zip(&net.layers) {
            for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
                assert_eq!(*x, f64::from(*y as f32));
            }
            assert_eq!(a.dropout, b.dropout);
        }
    }
}
