//! Backpropagation reference models: a pairwise goodness discriminator over
//! linked inputs, and a classic classifier with a linear label head.

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::ff::{self, argmax_first, text_enum, EpochEnd, EpochObserver, FfConfig, GammaMode, Polarity};
use crate::linalg::{self, DenseMatrix, Rng};
use crate::nn::{self, AdamConfig, AdamState, DenseLayer, LayerGrad, MlpNetwork, Normalization};
use crate::report::{HistoryRow, TrainingHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Pairwise,
    ClassicLabel,
}

text_enum!(BaselineKind {
    Pairwise => "pairwise",
    ClassicLabel => "classic_label",
});

/// Sigmoid goodness loss on the last layer only, averaged over the batch,
/// with `∂loss/∂act` of that layer.
pub fn pairwise_loss_and_coeffs(
    trace: &nn::ForwardTrace,
    theta: f64,
    polarity: &[Polarity],
) -> Result<ff::LayerLoss> {
    let last = trace.depth() - 1;
    let zero = vec![0.0; trace.batch_size()];
    ff::ff_loss_and_coeffs(trace, last, &zero, theta, polarity)
}

/// Gradients of the pairwise loss for every layer.
pub fn pairwise_grad(
    net: &MlpNetwork,
    inputs: &DenseMatrix,
    theta: f64,
    polarity: &[Polarity],
) -> Result<(f64, Vec<LayerGrad>)> {
    let trace = nn::forward_trace(net, inputs)?;
    let l = pairwise_loss_and_coeffs(&trace, theta, polarity)?;
    let grads = nn::backprop_from_trace(net, &trace, &l.coeffs)?;
    Ok((l.loss, grads))
}

/// Trains the whole network end to end on the last layer's goodness.
///
/// Uses `theta`, `epochs`, `batch_size`, `negatives_per_positive`, `seed`
/// and `adam` from `cfg`; `gamma_mode` must be `none`.
pub fn train_pairwise(net: &mut MlpNetwork, data: &Dataset, cfg: &FfConfig) -> Result<TrainingHistory> {
    train_pairwise_observed(net, data, cfg, &mut |_, _| Ok(()))
}

pub fn train_pairwise_observed(
    net: &mut MlpNetwork,
    data: &Dataset,
    cfg: &FfConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainingHistory> {
    if cfg.gamma_mode != GammaMode::None {
        return Err(Error::Config(format!(
            "pairwise baseline takes gamma_mode none, got {}",
            cfg.gamma_mode
        )));
    }
    let mut check = cfg.clone();
    check.inference_layer_mask = pairwise_mask(net);
    ff::check_network(net, data, &check)?;
    let depth = net.depth();
    let last = depth - 1;
    let mut rng = Rng::stream(cfg.seed, ff::DATA_STREAM);
    let mut optimizers: Vec<AdamState> = net
        .layers()
        .iter()
        .map(|l| AdamState::for_layer(cfg.adam, l))
        .collect();
    let mut history = TrainingHistory::new(depth);
    for epoch in 1..=cfg.epochs {
        let mut stats = RunningMeans::default();
        for batch in data::make_linked_batches(data, &mut rng, cfg.batch_size, cfg.negatives_per_positive) {
            let trace = nn::forward_trace(net, &batch.inputs)?;
            let l = pairwise_loss_and_coeffs(&trace, cfg.theta, &batch.polarity)?;
            let grads = nn::backprop_from_trace(net, &trace, &l.coeffs)?;
            for ((layer, opt), grad) in net.layers_mut().iter_mut().zip(&mut optimizers).zip(&grads) {
                opt.step_layer(layer, grad)?;
            }
            stats.loss.push(l.loss);
            for (g, p) in ff::goodness(&trace, last).into_iter().zip(&batch.polarity) {
                match p {
                    Polarity::Positive => stats.pos.push(g),
                    Polarity::Negative => stats.neg.push(g),
                }
            }
        }
        let row = stats.row(epoch, depth, "pairwise");
        history.layer_final_loss[last] = Some(row.loss);
        history.rows.push(row);
        observer(&EpochEnd { global_epoch: epoch, layer: None }, net)?;
    }
    Ok(history)
}

/// Inference mask of the pairwise model: the last layer alone.
pub fn pairwise_mask(net: &MlpNetwork) -> Vec<usize> {
    vec![net.depth() - 1]
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

#[derive(Default)]
struct RunningMeans {
    loss: Mean,
    pos: Mean,
    neg: Mean,
}

impl RunningMeans {
    fn row(&self, epoch: usize, layer: usize, kind: &str) -> HistoryRow {
        HistoryRow {
            epoch,
            layer,
            loss_kind: kind.to_string(),
            split: "train".to_string(),
            loss: self.loss.get().unwrap_or(f64::NAN),
            mean_goodness_pos: self.pos.get(),
            mean_goodness_neg: self.neg.get(),
        }
    }
}

/// Hidden ReLU layers followed by a linear head over the labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicModel {
    pub body: MlpNetwork,
    pub head: DenseLayer,
    /// Whether hidden layers hand on l2-normalized activities.
    pub normalize: bool,
}

impl ClassicModel {
    /// `dims = [d, hidden.., labels]`; the last entry is the head width.
    pub fn init(dims: &[usize], normalize: bool, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 3 {
            return Err(Error::Config(format!(
                "classic model needs input, at least one hidden layer and a head, got {dims:?}"
            )));
        }
        let body = nn::init_network(&dims[..dims.len() - 1], rng)?;
        let head = DenseLayer::glorot(dims[dims.len() - 2], dims[dims.len() - 1], rng);
        Ok(ClassicModel { body, head, normalize })
    }

    pub fn new(body: MlpNetwork, head: DenseLayer, normalize: bool) -> Result<Self> {
        if head.in_dim() != body.output_dim() {
            return Err(Error::Shape {
                op: "ClassicModel::new",
                left: (body.output_dim(), body.output_dim()),
                right: head.weights.shape(),
            });
        }
        Ok(ClassicModel { body, head, normalize })
    }

    pub fn normalization(&self) -> Normalization {
        if self.normalize {
            Normalization::default()
        } else {
            Normalization::Identity
        }
    }

    pub fn input_dim(&self) -> usize {
        self.body.input_dim()
    }

    pub fn num_labels(&self) -> usize {
        self.head.out_dim()
    }

    /// `[d, hidden.., labels]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = self.body.layer_dims();
        d.push(self.head.out_dim());
        d
    }

    fn trace(&self, inputs: &DenseMatrix) -> Result<nn::ForwardTrace> {
        nn::forward_trace_with(&self.body, inputs, self.body.depth(), self.normalization())
    }

    pub fn logits(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        self.head.pre_activation(self.trace(inputs)?.output())
    }

    pub fn predict(&self, inputs: &DenseMatrix) -> Result<Vec<usize>> {
        Ok(self.logits(inputs)?.row_iter().map(argmax_first).collect())
    }

    pub fn error_rate(&self, ds: &Dataset) -> Result<f64> {
        let mut wrong = 0;
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(1024) {
            let preds = self.predict(&ds.images.select_rows(chunk))?;
            wrong += preds.iter().zip(chunk).filter(|(p, &s)| **p != ds.labels[s]).count();
        }
        Ok(if ds.is_empty() { 0.0 } else { wrong as f64 / ds.len() as f64 })
    }

    /// Mean cross-entropy and gradients for the body layers and the head.
    pub fn loss_and_grads(&self, inputs: &DenseMatrix, labels: &[usize]) -> Result<(f64, Vec<LayerGrad>, LayerGrad)> {
        let trace = self.trace(inputs)?;
        let hidden = trace.output();
        let logits = self.head.pre_activation(hidden)?;
        let (loss, dlogits) = cross_entropy_with_grad(&logits, labels)?;
        let head_grad = LayerGrad {
            weights: linalg::matmul_tn(hidden, &dlogits)?,
            biases: dlogits.column_sums(),
        };
        let hidden_grad = linalg::matmul_nt(&dlogits, &self.head.weights)?;
        let last = &trace.layers[trace.depth() - 1];
        let act_grad = match trace.normalization {
            Normalization::L2 { epsilon } => {
                nn::l2_normalize_backward(&last.act, &last.act_norms, &hidden_grad, epsilon)
            }
            Normalization::Identity => hidden_grad,
        };
        let body_grads = nn::backprop_from_trace(&self.body, &trace, &act_grad)?;
        Ok((loss, body_grads, head_grad))
    }
}

/// Row-wise softmax.
pub fn softmax(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for s in 0..out.rows() {
        let row = out.row_mut(s);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Mean softmax cross-entropy and its gradient `(p − onehot) / m`.
pub fn cross_entropy_with_grad(logits: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)> {
    let m = logits.rows();
    if labels.len() != m {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Domain(format!("label {bad} outside {} classes", logits.cols())));
    }
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        let row = logits.row(s);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad.row_mut(s)[y] -= 1.0;
    }
    let inv_m = 1.0 / m as f64;
    grad.scale(inv_m);
    Ok((loss * inv_m, grad))
}

/// Settings for the classic baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl ClassicConfig {
    pub fn from_ff(cfg: &FfConfig) -> Self {
        ClassicConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            adam: cfg.adam,
        }
    }
}

pub fn train_classic(model: &mut ClassicModel, data: &Dataset, cfg: &ClassicConfig) -> Result<TrainingHistory> {
    train_classic_observed(model, data, cfg, &mut |_, _| Ok(()))
}

/// The observer sees the body network after each epoch.
pub fn train_classic_observed(
    model: &mut ClassicModel,
    data: &Dataset,
    cfg: &ClassicConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainingHistory> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if model.input_dim() != data.dim() || model.num_labels() != data.num_labels() {
        return Err(Error::Config(format!(
            "classic model dims {:?} do not match {} inputs and {} labels",
            model.dims(),
            data.dim(),
            data.num_labels()
        )));
    }
    let mut rng = Rng::stream(cfg.seed, ff::DATA_STREAM);
    let mut body_opt: Vec<AdamState> = model
        .body
        .layers()
        .iter()
        .map(|l| AdamState::for_layer(cfg.adam, l))
        .collect();
    let mut head_opt = AdamState::for_layer(cfg.adam, &model.head);
    let head_index = model.body.depth() + 1;
    let mut history = TrainingHistory::new(model.body.depth());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut stats = RunningMeans::default();
        for chunk in order.chunks(cfg.batch_size) {
            let inputs = data.images.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&s| data.labels[s]).collect();
            let (loss, body_grads, head_grad) = model.loss_and_grads(&inputs, &labels)?;
            for ((layer, opt), grad) in model.body.layers_mut().iter_mut().zip(&mut body_opt).zip(&body_grads) {
                opt.step_layer(layer, grad)?;
            }
            head_opt.step_layer(&mut model.head, &head_grad)?;
            stats.loss.push(loss);
        }
        history.rows.push(stats.row(epoch, head_index, "cross_entropy"));
        observer(&EpochEnd { global_epoch: epoch, layer: None }, &model.body)?;
    }
    if let Some(last) = history.rows.last() {
        history.layer_final_loss = vec![Some(last.loss)];
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_labels() {
        let logits = DenseMatrix::zeros(3, 10);
        let (loss, grad) = cross_entropy_with_grad(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((grad.get(1, 4) - (0.1 - 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_give_vanishing_loss() {
        let mut logits = DenseMatrix::zeros(1, 10);
        logits.set(0, 3, 60.0);
        let (loss, _) = cross_entropy_with_grad(&logits, &[3]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(5);
        let logits = DenseMatrix::random_uniform(20, 10, -50.0, 50.0, &mut rng);
        for r in softmax(&logits).row_iter() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = DenseMatrix::zeros(2, 3);
        assert!(cross_entropy_with_grad(&logits, &[0]).is_err());
        assert!(cross_entropy_with_grad(&logits, &[0, 3]).is_err());
    }

    #[test]
    fn classic_init_shapes() {
        let mut rng = Rng::new(1);
        let m = ClassicModel::init(&[6, 5, 4, 3], false, &mut rng).unwrap();
        assert_eq!(m.dims(), vec![6, 5, 4, 3]);
        assert_eq!(m.normalization(), Normalization::Identity);
        assert!(ClassicModel::init(&[6, 3], false, &mut rng).is_err());
    }

    #[test]
    fn kind_text() {
        assert_eq!("classic_label".parse::<BaselineKind>().unwrap(), BaselineKind::ClassicLabel);
        assert!("label".parse::<BaselineKind>().is_err());
    }
}
