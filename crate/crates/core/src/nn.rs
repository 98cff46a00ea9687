//! Dense ReLU layers, forward traces, hand-derived gradients and Adam.
//!
//! Every hidden layer computes `pre = input·W + b`, `act = relu(pre)` and
//! hands `l2_row_normalize(act)` to the next layer. Goodness is read from
//! `act`; the next layer only ever sees the normalized copy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, Rng, NORM_EPSILON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `in_dim × out_dim`.
    pub weights: DenseMatrix,
    /// `1 × out_dim`.
    pub biases: DenseMatrix,
}

impl DenseLayer {
    pub fn new(weights: DenseMatrix, biases: DenseMatrix) -> Result<Self> {
        if biases.rows() != 1 || biases.cols() != weights.cols() {
            return Err(Error::Shape {
                op: "DenseLayer::new",
                left: weights.shape(),
                right: biases.shape(),
            });
        }
        Ok(DenseLayer { weights, biases })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            weights: DenseMatrix::zeros(in_dim, out_dim),
            biases: DenseMatrix::zeros(1, out_dim),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        DenseLayer {
            weights: DenseMatrix::random_uniform(in_dim, out_dim, -limit, limit, rng),
            biases: DenseMatrix::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    /// Affine map `input·W + b`.
    pub fn pre_activation(&self, input: &DenseMatrix) -> Result<DenseMatrix> {
        let mut pre = linalg::matmul(input, &self.weights)?;
        pre.add_row_broadcast(&self.biases)?;
        Ok(pre)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpNetwork {
    layers: Vec<DenseLayer>,
}

impl MlpNetwork {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape {
                    op: "MlpNetwork::new",
                    left: pair[0].weights.shape(),
                    right: pair[1].weights.shape(),
                });
            }
        }
        Ok(MlpNetwork { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// `[in_dim, out_1, out_2, ...]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> &DenseLayer {
        &self.layers[index]
    }

    /// Mutable access to the layers; shapes must be left unchanged.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn layer_mut(&mut self, index: usize) -> &mut DenseLayer {
        &mut self.layers[index]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.biases.data().len())
            .sum()
    }
}

/// Builds a network for `layer_dims = [input, hidden_1, ..., hidden_k]`.
pub fn init_network(layer_dims: &[usize], rng: &mut Rng) -> Result<MlpNetwork> {
    if layer_dims.len() < 2 {
        return Err(Error::Config(format!(
            "layer_dims needs at least 2 entries, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Config(format!(
            "layer_dims must all be positive, got {layer_dims:?}"
        )));
    }
    let layers = layer_dims
        .windows(2)
        .map(|w| DenseLayer::glorot(w[0], w[1], rng))
        .collect();
    MlpNetwork::new(layers)
}

/// What the next layer consumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Normalization {
    /// Row-wise `act / (‖act‖ + epsilon)`.
    L2 { epsilon: f64 },
    /// The raw activities.
    Identity,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::L2 {
            epsilon: NORM_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub pre: DenseMatrix,
    pub act: DenseMatrix,
    pub norm: DenseMatrix,
    /// `‖act row‖₂`, one per sample.
    pub act_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: DenseMatrix,
    pub layers: Vec<LayerTrace>,
    pub normalization: Normalization,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// Matrix consumed by `layer`: the raw input for layer 0, otherwise the
    /// predecessor's normalized output.
    pub fn layer_input(&self, layer: usize) -> &DenseMatrix {
        if layer == 0 {
            &self.input
        } else {
            &self.layers[layer - 1].norm
        }
    }

    pub fn output(&self) -> &DenseMatrix {
        &self.layers[self.layers.len() - 1].norm
    }
}

pub fn forward_trace(net: &MlpNetwork, batch: &DenseMatrix) -> Result<ForwardTrace> {
    forward_trace_with(net, batch, net.depth(), Normalization::default())
}

/// Forward pass through the first `depth` layers only.
pub fn forward_trace_with(
    net: &MlpNetwork,
    batch: &DenseMatrix,
    depth: usize,
    normalization: Normalization,
) -> Result<ForwardTrace> {
    if batch.cols() != net.input_dim() {
        return Err(Error::Shape {
            op: "forward_trace",
            left: batch.shape(),
            right: net.layer(0).weights.shape(),
        });
    }
    if depth == 0 || depth > net.depth() {
        return Err(Error::Config(format!(
            "trace depth {depth} outside 1..={}",
            net.depth()
        )));
    }
    let mut layers: Vec<LayerTrace> = Vec::with_capacity(depth);
    for i in 0..depth {
        let input = if i == 0 { batch } else { &layers[i - 1].norm };
        let pre = net.layer(i).pre_activation(input)?;
        layers.push(activate(pre, normalization));
    }
    Ok(ForwardTrace {
        input: batch.clone(),
        layers,
        normalization,
    })
}

/// Full-depth layer traces starting from the first layer's affine output.
pub fn forward_from_first_pre(
    net: &MlpNetwork,
    first_pre: DenseMatrix,
    normalization: Normalization,
) -> Result<Vec<LayerTrace>> {
    if first_pre.cols() != net.layer(0).out_dim() {
        return Err(Error::Shape {
            op: "forward_from_first_pre",
            left: first_pre.shape(),
            right: net.layer(0).weights.shape(),
        });
    }
    let mut layers: Vec<LayerTrace> = Vec::with_capacity(net.depth());
    layers.push(activate(first_pre, normalization));
    for i in 1..net.depth() {
        let pre = net.layer(i).pre_activation(&layers[i - 1].norm)?;
        layers.push(activate(pre, normalization));
    }
    Ok(layers)
}

/// ReLU and inter-layer normalization for an already computed affine output.
pub fn activate(pre: DenseMatrix, normalization: Normalization) -> LayerTrace {
    let act = linalg::relu(&pre);
    let (norm, act_norms) = match normalization {
        Normalization::L2 { epsilon } => linalg::l2_row_normalize_with_norms(&act, epsilon),
        Normalization::Identity => {
            let norms = act
                .row_iter()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            (act.clone(), norms)
        }
    };
    LayerTrace {
        pre,
        act,
        norm,
        act_norms,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: DenseMatrix,
    pub biases: DenseMatrix,
}

/// Parameter gradient of one layer from per-activity coefficients.
///
/// `coeffs[s][u]` is `∂loss/∂act[s][u]` for the batch loss (any batch-mean
/// factor is already folded into the coefficients), so the result is
/// `inputᵀ·(coeffs ⊙ 1[pre > 0])` and the column sums of the masked
/// coefficients. No gradient reaches other layers.
pub fn layer_local_grad(
    layer: &DenseLayer,
    layer_input: &DenseMatrix,
    pre: &DenseMatrix,
    coeffs: &DenseMatrix,
) -> Result<LayerGrad> {
    if layer_input.cols() != layer.in_dim() || layer_input.rows() != coeffs.rows() {
        return Err(Error::Shape {
            op: "layer_local_grad",
            left: layer_input.shape(),
            right: coeffs.shape(),
        });
    }
    if pre.shape() != coeffs.shape() || coeffs.cols() != layer.out_dim() {
        return Err(Error::Shape {
            op: "layer_local_grad",
            left: pre.shape(),
            right: coeffs.shape(),
        });
    }
    let delta = relu_backward(pre, coeffs);
    Ok(LayerGrad {
        weights: linalg::matmul_tn(layer_input, &delta)?,
        biases: delta.column_sums(),
    })
}

fn relu_backward(pre: &DenseMatrix, upstream: &DenseMatrix) -> DenseMatrix {
    let mut delta = upstream.clone();
    delta
        .data_mut()
        .iter_mut()
        .zip(pre.data())
        .for_each(|(d, &p)| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
    delta
}

/// Backpropagates an upstream gradient through `act / (‖act‖ + ε)` row-wise.
///
/// For a row `a` with `r = ‖a‖`, the Jacobian is
/// `I/(r+ε) − a aᵀ / (r (r+ε)²)`; zero rows keep only the first term.
pub fn l2_normalize_backward(
    act: &DenseMatrix,
    act_norms: &[f64],
    upstream: &DenseMatrix,
    epsilon: f64,
) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(act.rows(), act.cols());
    for s in 0..act.rows() {
        let a = act.row(s);
        let u = upstream.row(s);
        let r = act_norms[s];
        let denom = r + epsilon;
        let dot: f64 = a.iter().zip(u).map(|(x, y)| x * y).sum();
        let radial = if r > 0.0 {
            dot / (r * denom * denom)
        } else {
            0.0
        };
        for ((o, &ai), &ui) in out.row_mut(s).iter_mut().zip(a).zip(u) {
            *o = ui / denom - ai * radial;
        }
    }
    out
}

/// Chain-rule gradients for every layer given `∂loss/∂act` of the last layer.
pub fn full_backprop_grad(
    net: &MlpNetwork,
    batch: &DenseMatrix,
    output_grad: &DenseMatrix,
) -> Result<Vec<LayerGrad>> {
    let trace = forward_trace(net, batch)?;
    backprop_from_trace(net, &trace, output_grad)
}

/// Like [`full_backprop_grad`] but reuses an existing trace.
pub fn backprop_from_trace(
    net: &MlpNetwork,
    trace: &ForwardTrace,
    output_grad: &DenseMatrix,
) -> Result<Vec<LayerGrad>> {
    if trace.depth() != net.depth() {
        return Err(Error::Config(format!(
            "trace depth {} differs from network depth {}",
            trace.depth(),
            net.depth()
        )));
    }
    let last = &trace.layers[net.depth() - 1];
    if output_grad.shape() != last.act.shape() {
        return Err(Error::Shape {
            op: "full_backprop_grad",
            left: last.act.shape(),
            right: output_grad.shape(),
        });
    }
    let mut grads = Vec::with_capacity(net.depth());
    let mut act_grad = output_grad.clone();
    for i in (0..net.depth()).rev() {
        let lt = &trace.layers[i];
        let delta = relu_backward(&lt.pre, &act_grad);
        let input = trace.layer_input(i);
        grads.push(LayerGrad {
            weights: linalg::matmul_tn(input, &delta)?,
            biases: delta.column_sums(),
        });
        if i > 0 {
            let norm_grad = linalg::matmul_nt(&delta, &net.layer(i).weights)?;
            let below = &trace.layers[i - 1];
            act_grad = match trace.normalization {
                Normalization::L2 { epsilon } => {
                    l2_normalize_backward(&below.act, &below.act_norms, &norm_grad, epsilon)
                }
                Normalization::Identity => norm_grad,
            };
        }
    }
    grads.reverse();
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for an ordered list of parameter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<DenseMatrix>,
    pub second_moment: Vec<DenseMatrix>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros: Vec<_> = shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect();
        AdamState {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }

    /// State for a layer's `[weights, biases]`.
    pub fn for_layer(config: AdamConfig, layer: &DenseLayer) -> Self {
        Self::new(config, &[layer.weights.shape(), layer.biases.shape()])
    }

    pub fn step_layer(&mut self, layer: &mut DenseLayer, grad: &LayerGrad) -> Result<()> {
        adam_step(
            &mut [&mut layer.weights, &mut layer.biases],
            &[&grad.weights, &grad.biases],
            self,
        )
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [&mut DenseMatrix],
    grads: &[&DenseMatrix],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Config(format!(
            "adam_step got {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    state.step_count += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step_count as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[k].data_mut();
        let v = state.second_moment[k].data_mut();
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *pi -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}
