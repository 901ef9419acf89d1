//! Dense networks with hand-written forward and backward passes.
//!
//! Party embedding networks end in `tanh`, so every embedding coordinate is
//! bounded by 1. The server fusion network is a linear layer followed by
//! softmax cross-entropy.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("label {label} outside {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("cache was produced by an older version of the network")]
    StaleCache,
    #[error("party network must end in tanh to bound its embeddings")]
    Unbounded,
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::Shape {
                what: "tensor data",
                expected: (rows, cols),
                got: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NnError::Shape {
                    what: "ragged rows",
                    expected: (rows.len(), cols),
                    got: (rows.len(), r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// New tensor made of the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Tensor2) -> Result<(), NnError> {
        if self.shape() != other.shape() {
            return Err(NnError::Shape {
                what: "elementwise add",
                expected: self.shape(),
                got: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self · rhs`
    fn matmul(&self, rhs: &Tensor2) -> Tensor2 {
        debug_assert_eq!(self.cols, rhs.rows);
        let mut out = Tensor2::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &w) in orow.iter_mut().zip(rhs.row(k)) {
                    *o += a * w;
                }
            }
        }
        out
    }

    /// `selfᵀ · rhs`
    fn t_matmul(&self, rhs: &Tensor2) -> Tensor2 {
        debug_assert_eq!(self.rows, rhs.rows);
        let mut out = Tensor2::zeros(self.cols, rhs.cols);
        for r in 0..self.rows {
            for (i, &a) in self.row(r).iter().enumerate() {
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &g) in orow.iter_mut().zip(rhs.row(r)) {
                    *o += a * g;
                }
            }
        }
        out
    }

    /// `self · rhsᵀ`
    fn matmul_t(&self, rhs: &Tensor2) -> Tensor2 {
        debug_assert_eq!(self.cols, rhs.cols);
        let mut out = Tensor2::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = self.row(i).iter().zip(rhs.row(j)).map(|(a, b)| a * b).sum();
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Affine map `x·W + b` (`W` is `in × out`) followed by an activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    /// Uniform initialization in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let weight = (0..input * output).map(|_| rng.random_range(-bound..=bound)).collect();
        let bias = (0..output).map(|_| rng.random_range(-bound..=bound)).collect();
        Self {
            weight: Tensor2 {
                rows: input,
                cols: output,
                data: weight,
            },
            bias,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
    #[serde(skip)]
    generation: u64,
}

/// Activations kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Input of every layer.
    inputs: Vec<Tensor2>,
    /// Post-activation output of every layer.
    outputs: Vec<Tensor2>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor2 {
        self.outputs.last().expect("cache holds at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

/// Gradients shaped like the layers of a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub layers: Vec<LayerGrad>,
}

impl GradSet {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Tensor2::zeros(l.weight.rows, l.weight.cols),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Weights then bias, layer by layer; same order as [`DenseNet::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Shape {
                what: "network depth",
                expected: (1, 0),
                got: (0, 0),
            });
        }
        for l in &layers {
            if l.bias.len() != l.weight.cols {
                return Err(NnError::Shape {
                    what: "bias length",
                    expected: (l.weight.cols, 1),
                    got: (l.bias.len(), 1),
                });
            }
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(NnError::Shape {
                    what: "layer chaining",
                    expected: (pair[0].output_dim(), 0),
                    got: (pair[1].input_dim(), 0),
                });
            }
        }
        Ok(Self { layers, generation: 0 })
    }

    /// `input → hidden (tanh) → p_dim (tanh)`; a zero `hidden` drops the hidden layer.
    pub fn party<R: Rng + ?Sized>(input: usize, hidden: usize, p_dim: usize, rng: &mut R) -> Self {
        let layers = if hidden == 0 {
            vec![Layer::init(input, p_dim, Activation::Tanh, rng)]
        } else {
            vec![
                Layer::init(input, hidden, Activation::Tanh, rng),
                Layer::init(hidden, p_dim, Activation::Tanh, rng),
            ]
        };
        Self::new(layers).expect("dimensions chain by construction")
    }

    /// Linear `p_dim → classes`; softmax lives in the loss.
    pub fn server<R: Rng + ?Sized>(p_dim: usize, classes: usize, rng: &mut R) -> Self {
        Self::new(vec![Layer::init(p_dim, classes, Activation::Identity, rng)]).expect("single layer")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn is_bounded(&self) -> bool {
        self.layers.last().map(|l| l.activation) == Some(Activation::Tanh)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data.len() + l.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.num_params() {
            return Err(NnError::Shape {
                what: "flat parameters",
                expected: (self.num_params(), 1),
                got: (params.len(), 1),
            });
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            for w in l.weight.data.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().unwrap();
            }
        }
        self.generation += 1;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor2) -> Result<(Tensor2, ForwardCache), NnError> {
        if x.cols != self.input_dim() {
            return Err(NnError::Shape {
                what: "network input",
                expected: (x.rows, self.input_dim()),
                got: x.shape(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let mut z = current.matmul(&layer.weight);
            for r in 0..z.rows {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                    if layer.activation == Activation::Tanh {
                        *v = v.tanh();
                    }
                }
            }
            inputs.push(std::mem::replace(&mut current, z.clone()));
            outputs.push(z);
        }
        let cache = ForwardCache {
            generation: self.generation,
            inputs,
            outputs,
        };
        Ok((current, cache))
    }

    /// Backpropagates `grad_out` (gradient of the loss w.r.t. the network
    /// output). Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Tensor2) -> Result<(GradSet, Tensor2), NnError> {
        if cache.generation != self.generation || cache.outputs.len() != self.layers.len() {
            return Err(NnError::StaleCache);
        }
        if grad_out.shape() != cache.output().shape() {
            return Err(NnError::Shape {
                what: "output gradient",
                expected: cache.output().shape(),
                got: grad_out.shape(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Tanh {
                for (d, y) in delta.data.iter_mut().zip(&cache.outputs[i].data) {
                    *d *= 1.0 - y * y;
                }
            }
            let weight = cache.inputs[i].t_matmul(&delta);
            let mut bias = vec![0.0; layer.bias.len()];
            for r in 0..delta.rows {
                for (b, d) in bias.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            let next = delta.matmul_t(&layer.weight);
            grads.push(LayerGrad { weight, bias });
            delta = next;
        }
        grads.reverse();
        Ok((GradSet { layers: grads }, delta))
    }
}

/// Party embedding pass; output entries lie in `[-1, 1]`.
pub fn forward_party(net: &DenseNet, x_batch: &Tensor2) -> Result<(Tensor2, ForwardCache), NnError> {
    if !net.is_bounded() {
        return Err(NnError::Unbounded);
    }
    net.forward(x_batch)
}

/// Gradient of the batch loss w.r.t. party parameters, given the gradient
/// w.r.t. the embedding sum (the sum passes each embedding through unchanged).
pub fn backward_party(net: &DenseNet, cache: &ForwardCache, grad_hsum: &Tensor2) -> Result<GradSet, NnError> {
    net.backward(cache, grad_hsum).map(|(g, _)| g)
}

/// Server forward state.
#[derive(Debug, Clone)]
pub struct ServerPass {
    pub loss: f64,
    pub probs: Tensor2,
    cache: ForwardCache,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<(), NnError> {
    if labels.len() != rows {
        return Err(NnError::Shape {
            what: "labels",
            expected: (rows, 1),
            got: (labels.len(), 1),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(NnError::Label { label, classes });
    }
    Ok(())
}

/// Row-wise softmax of `logits`, and `ln Σ exp` per row.
pub fn softmax(logits: &Tensor2) -> (Tensor2, Vec<f64>) {
    let mut probs = logits.clone();
    let mut lse = Vec::with_capacity(logits.rows);
    for r in 0..logits.rows {
        let row = probs.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        lse.push(max + sum.ln());
    }
    (probs, lse)
}

/// Mean softmax cross-entropy of the fusion network on embedding sums.
pub fn forward_server(net: &DenseNet, h_sum: &Tensor2, labels: &[usize]) -> Result<ServerPass, NnError> {
    let (logits, cache) = net.forward(h_sum)?;
    check_labels(labels, logits.rows, logits.cols)?;
    let (probs, lse) = softmax(&logits);
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| lse[i] - logits.get(i, y)).sum();
    Ok(ServerPass {
        loss: total / labels.len().max(1) as f64,
        probs,
        cache,
    })
}

/// Gradients of the mean batch loss w.r.t. server parameters and w.r.t. the
/// embedding-sum input.
pub fn backward_server(net: &DenseNet, pass: &ServerPass, labels: &[usize]) -> Result<(GradSet, Tensor2), NnError> {
    check_labels(labels, pass.probs.rows, pass.probs.cols)?;
    let scale = 1.0 / labels.len().max(1) as f64;
    let mut grad_logits = pass.probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        let row = grad_logits.row_mut(i);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    net.backward(&pass.cache, &grad_logits)
}

/// `θ ← θ − η·∇θ`.
pub fn sgd_step(net: &mut DenseNet, grads: &GradSet, eta: f64) -> Result<(), NnError> {
    if grads.layers.len() != net.layers.len() {
        return Err(NnError::Shape {
            what: "gradient depth",
            expected: (net.layers.len(), 0),
            got: (grads.layers.len(), 0),
        });
    }
    for (layer, g) in net.layers.iter().zip(&grads.layers) {
        if layer.weight.shape() != g.weight.shape() || layer.bias.len() != g.bias.len() {
            return Err(NnError::Shape {
                what: "gradient layer",
                expected: layer.weight.shape(),
                got: g.weight.shape(),
            });
        }
    }
    for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
        for (w, d) in layer.weight.data.iter_mut().zip(&g.weight.data) {
            *w -= eta * d;
        }
        for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= eta * d;
        }
    }
    net.generation += 1;
    Ok(())
}

/// Index of the largest entry in each row.
pub fn argmax_rows(t: &Tensor2) -> Vec<usize> {
    (0..t.rows)
        .map(|r| {
            t.row(r)
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

const CHECKPOINT_FORMAT: &str = "pbm-vfl/densenet";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    net: DenseNet,
}

/// JSON checkpoint: `{"format": "pbm-vfl/densenet", "version": 1, "net": {...}}`.
/// Floats are written in shortest round-trip form, so loading is exact.
pub fn save_checkpoint(net: &DenseNet) -> String {
    serde_json::to_string_pretty(&Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        net: net.clone(),
    })
    .expect("network serializes")
}

pub fn load_checkpoint(text: &str) -> Result<DenseNet, NnError> {
    let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported format {} v{}",
            ckpt.format, ckpt.version
        )));
    }
    for l in &ckpt.net.layers {
        if l.weight.data.len() != l.weight.rows * l.weight.cols {
            return Err(NnError::Checkpoint("weight data length mismatch".into()));
        }
    }
    DenseNet::new(ckpt.net.layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_net(w: f64, b: f64, activation: Activation) -> DenseNet {
        DenseNet::new(vec![Layer {
            weight: Tensor2::from_vec(1, 1, vec![w]).unwrap(),
            bias: vec![b],
            activation,
        }])
        .unwrap()
    }

    #[test]
    fn zero_party_net_gives_zero_embeddings() {
        let mut net = DenseNet::party(3, 4, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let n = net.num_params();
        net.set_flat_params(&vec![0.0; n]).unwrap();
        let x = Tensor2::from_vec(5, 3, (0..15).map(f64::from).collect()).unwrap();
        let (h, _) = forward_party(&net, &x).unwrap();
        assert_eq!(h.shape(), (5, 2));
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_tanh() {
        let net = scalar_net(1.0, 0.0, Activation::Tanh);
        let (h, _) = forward_party(&net, &Tensor2::from_vec(1, 1, vec![0.5]).unwrap()).unwrap();
        assert!((h.get(0, 0) - 0.46211715726).abs() < 1e-10);
    }

    #[test]
    fn dimension_errors() {
        let net = DenseNet::party(3, 4, 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(net.forward(&Tensor2::zeros(2, 4)), Err(NnError::Shape { .. })));
        let server = DenseNet::server(2, 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(
            forward_party(&server, &Tensor2::zeros(1, 2)),
            Err(NnError::Unbounded)
        ));
        assert!(matches!(
            forward_server(&server, &Tensor2::zeros(2, 2), &[0, 3]),
            Err(NnError::Label { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut net = DenseNet::server(4, 5, &mut ChaCha8Rng::seed_from_u64(1));
        let n = net.num_params();
        net.set_flat_params(&vec![0.0; n]).unwrap();
        let pass = forward_server(&net, &Tensor2::zeros(3, 4), &[0, 2, 4]).unwrap();
        assert!((pass.loss - 5f64.ln()).abs() < 1e-12);
        for r in 0..3 {
            assert!((pass.probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // symmetric point: every gradient vanishes
        let (g0, gh) = backward_server(&net, &pass, &[0, 2, 4]).unwrap();
        let _ = g0;
        let (gs, gh_sym) = {
            let labels = [0, 1, 2, 3, 4];
            let pass = forward_server(&net, &Tensor2::zeros(5, 4), &labels).unwrap();
            backward_server(&net, &pass, &labels).unwrap()
        };
        assert!(gs.norm() < 1e-8);
        assert!(gh_sym.max_abs() < 1e-8);
        assert_eq!(gh.shape(), (3, 4));
    }

    #[test]
    fn saturated_logit_has_vanishing_loss() {
        let net = DenseNet::new(vec![Layer {
            weight: Tensor2::from_vec(1, 2, vec![0.0, 1.0]).unwrap(),
            bias: vec![0.0, 0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let pass = forward_server(&net, &Tensor2::from_vec(1, 1, vec![800.0]).unwrap(), &[1]).unwrap();
        assert!(pass.loss < 1e-300);
    }

    #[test]
    fn three_class_hand_value() {
        // logits (0.2, -1.0, 0.7), label 2
        let net = DenseNet::new(vec![Layer {
            weight: Tensor2::from_vec(1, 3, vec![0.0; 3]).unwrap(),
            bias: vec![0.2, -1.0, 0.7],
            activation: Activation::Identity,
        }])
        .unwrap();
        let pass = forward_server(&net, &Tensor2::zeros(1, 1), &[2]).unwrap();
        let denom = 0.2f64.exp() + (-1.0f64).exp() + 0.7f64.exp();
        let expected = -(0.7f64.exp() / denom).ln();
        assert!((pass.loss - expected).abs() < 1e-14);
        assert!((expected - 0.5817765199793885).abs() < 1e-12);
    }

    #[test]
    fn grad_of_mean_is_mean_of_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::server(3, 4, &mut rng);
        let h = Tensor2::from_vec(4, 3, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels = [0, 3, 1, 1];
        let pass = forward_server(&net, &h, &labels).unwrap();
        let (g, gh) = backward_server(&net, &pass, &labels).unwrap();
        let mut acc = vec![0.0; g.flatten().len()];
        for i in 0..4 {
            let hi = h.select_rows(&[i]);
            let pass_i = forward_server(&net, &hi, &labels[i..=i]).unwrap();
            let (gi, ghi) = backward_server(&net, &pass_i, &labels[i..=i]).unwrap();
            for (a, v) in acc.iter_mut().zip(gi.flatten()) {
                *a += v / 4.0;
            }
            for (a, b) in gh.row(i).iter().zip(ghi.row(0)) {
                assert!((a - b / 4.0).abs() < 1e-15);
            }
        }
        for (a, b) in acc.iter().zip(g.flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let net = DenseNet::party(3, 5, 2, &mut ChaCha8Rng::seed_from_u64(4));
        let x = Tensor2::from_vec(2, 3, vec![0.1, -0.3, 2.0, 1.0, 0.0, -1.0]).unwrap();
        let (_, cache) = forward_party(&net, &x).unwrap();
        let g = backward_party(&net, &cache, &Tensor2::zeros(2, 2)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_parties_get_identical_grads() {
        let net = DenseNet::party(2, 3, 2, &mut ChaCha8Rng::seed_from_u64(5));
        let x = Tensor2::from_vec(3, 2, vec![0.5, -0.5, 1.0, 0.2, -0.7, 0.0]).unwrap();
        let (h1, c1) = forward_party(&net, &x).unwrap();
        let (h2, c2) = forward_party(&net, &x).unwrap();
        let mut hsum = h1.clone();
        hsum.add_assign(&h2).unwrap();
        let server = DenseNet::server(2, 2, &mut ChaCha8Rng::seed_from_u64(6));
        let labels = [0, 1, 1];
        let pass = forward_server(&server, &hsum, &labels).unwrap();
        let (_, gh) = backward_server(&server, &pass, &labels).unwrap();
        assert_eq!(
            backward_party(&net, &c1, &gh).unwrap(),
            backward_party(&net, &c2, &gh).unwrap()
        );
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = DenseNet::party(2, 3, 2, &mut ChaCha8Rng::seed_from_u64(7));
        let x = Tensor2::zeros(1, 2);
        let (_, cache) = forward_party(&net, &x).unwrap();
        let zero = GradSet::zeros_like(&net);
        sgd_step(&mut net, &zero, 0.1).unwrap();
        assert_eq!(
            backward_party(&net, &cache, &Tensor2::zeros(1, 2)),
            Err(NnError::StaleCache)
        );
    }

    #[test]
    fn sgd_examples() {
        let mut net = DenseNet::party(2, 3, 2, &mut ChaCha8Rng::seed_from_u64(8));
        let before = net.flat_params();
        let mut g = GradSet::zeros_like(&net);
        g.layers[0].bias[0] = 5.0;
        sgd_step(&mut net, &g, 0.0).unwrap();
        assert_eq!(net.flat_params(), before);

        let mut scalar = scalar_net(1.0, 0.0, Activation::Identity);
        let g = GradSet {
            layers: vec![LayerGrad {
                weight: Tensor2::from_vec(1, 1, vec![2.0]).unwrap(),
                bias: vec![0.0],
            }],
        };
        sgd_step(&mut scalar, &g, 0.1).unwrap();
        assert!((scalar.flat_params()[0] - 0.8).abs() < 1e-15);

        // fixed gradients: two steps equal one step with the summed gradient
        let mut twice = scalar.clone();
        sgd_step(&mut twice, &g, 0.1).unwrap();
        sgd_step(&mut twice, &g, 0.1).unwrap();
        let doubled = GradSet {
            layers: vec![LayerGrad {
                weight: Tensor2::from_vec(1, 1, vec![4.0]).unwrap(),
                bias: vec![0.0],
            }],
        };
        let mut once = scalar.clone();
        sgd_step(&mut once, &doubled, 0.1).unwrap();
        assert!((twice.flat_params()[0] - once.flat_params()[0]).abs() < 1e-15);

        let wrong = GradSet::zeros_like(&DenseNet::server(3, 3, &mut ChaCha8Rng::seed_from_u64(0)));
        assert!(sgd_step(&mut scalar, &wrong, 0.1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = DenseNet::party(4, 6, 3, &mut ChaCha8Rng::seed_from_u64(9));
        let text = save_checkpoint(&net);
        let back = load_checkpoint(&text).unwrap();
        assert_eq!(back.flat_params(), net.flat_params());
        assert_eq!(back.layers(), net.layers());
        assert!(load_checkpoint(&text.replace("\"version\": 1", "\"version\": 2")).is_err());
    }

    #[test]
    fn deterministic_forward_backward() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let net = DenseNet::party(3, 4, 2, &mut rng);
            let x = Tensor2::from_vec(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let (h, cache) = forward_party(&net, &x).unwrap();
            let g = backward_party(&net, &cache, &h).unwrap();
            (h, g)
        };
        assert_eq!(run(), run());
    }
}
