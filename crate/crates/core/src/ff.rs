//! Forward-forward training: goodness, the per-layer sigmoid loss, the
//! collaborative offset γ, the entropy objective, both training schedules
//! and goodness-voting inference.
//!
//! Layer indices are zero-based throughout the API. Text outputs (CSV,
//! subset names) render them one-based.

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, Rng};
use crate::nn::{
    self, AdamConfig, AdamState, ForwardTrace, MlpNetwork, Normalization,
};
use crate::report::{HistoryRow, TrainingHistory};

/// RNG stream used for parameter initialisation.
pub const INIT_STREAM: u64 = 0;
/// RNG stream used for shuffling and negative-label sampling.
pub const DATA_STREAM: u64 = 1;
/// RNG stream used to draw a training subset.
pub const SUBSET_STREAM: u64 = 2;
/// RNG stream used to draw entropy probe samples.
pub const PROBE_STREAM: u64 = 3;

/// Added to every `h` before the entropy objective takes logarithms.
pub const ENTROPY_FLOOR: f64 = 1e-12;

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = $crate::error::Error;

            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err($crate::error::Error::Config(format!(
                        "unknown {} '{}', expected one of: {}",
                        stringify!($name),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}
pub(crate) use text_enum;

/// Which detached goodness values are added to a layer's logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    None,
    AllOtherLayers,
    PredecessorsOnly,
}

text_enum!(GammaMode {
    None => "none",
    AllOtherLayers => "all_other_layers",
    PredecessorsOnly => "predecessors_only",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Each layer trained for its full budget before the next one starts.
    Layerwise,
    /// Every layer takes one step per batch.
    Alternating,
}

text_enum!(Schedule {
    Layerwise => "layerwise",
    Alternating => "alternating",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SigmoidGoodness,
    Entropy,
}

text_enum!(LossKind {
    SigmoidGoodness => "sigmoid_goodness",
    Entropy => "entropy",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    /// +1 for positive samples, −1 for negative ones.
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfConfig {
    pub theta: f64,
    pub gamma_mode: GammaMode,
    pub schedule: Schedule,
    pub loss_kind: LossKind,
    pub epochs: usize,
    /// Source samples per batch; each contributes one positive row plus
    /// `negatives_per_positive` negative rows.
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
    /// Zero-based layers whose goodness is summed at inference time.
    pub inference_layer_mask: Vec<usize>,
    pub adam: AdamConfig,
}

impl Default for FfConfig {
    fn default() -> Self {
        FfConfig {
            theta: 10.0,
            gamma_mode: GammaMode::None,
            schedule: Schedule::Layerwise,
            loss_kind: LossKind::SigmoidGoodness,
            epochs: 150,
            batch_size: 200,
            negatives_per_positive: 1,
            seed: 0,
            inference_layer_mask: vec![0, 1, 2],
            adam: AdamConfig::default(),
        }
    }
}

impl FfConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if !self.theta.is_finite() {
            return Err(Error::Config(format!("theta must be finite, got {}", self.theta)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Config("negatives_per_positive must be at least 1".into()));
        }
        validate_mask(&self.inference_layer_mask, depth)?;
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.adam.learning_rate
            )));
        }
        Ok(())
    }
}

pub(crate) fn validate_mask(mask: &[usize], depth: usize) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::Config("layer mask must not be empty".into()));
    }
    if let Some(bad) = mask.iter().find(|&&i| i >= depth) {
        return Err(Error::Config(format!(
            "layer index {} outside network of depth {depth}",
            bad + 1
        )));
    }
    Ok(())
}

/// Per-sample, per-layer goodness (`samples × layers`).
#[derive(Debug, Clone, PartialEq)]
pub struct GoodnessTable {
    pub values: DenseMatrix,
    /// True when the values are treated as constants by the optimiser.
    pub detached: bool,
}

impl GoodnessTable {
    /// Detached goodness of every traced layer.
    pub fn from_trace(trace: &ForwardTrace) -> Self {
        let n = trace.batch_size();
        let k = trace.depth();
        let mut values = DenseMatrix::zeros(n, k);
        for layer in 0..k {
            for (s, g) in goodness(trace, layer).into_iter().enumerate() {
                values.set(s, layer, g);
            }
        }
        GoodnessTable {
            values,
            detached: true,
        }
    }

    pub fn samples(&self) -> usize {
        self.values.rows()
    }

    pub fn layers(&self) -> usize {
        self.values.cols()
    }

    /// Keeps only the given sample rows.
    pub fn select_samples(&self, rows: &[usize]) -> Self {
        GoodnessTable {
            values: self.values.select_rows(rows),
            detached: self.detached,
        }
    }
}

/// One batch of label-linked inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkedBatch {
    /// `m × (d + num_labels)`: pixels followed by the one-hot label block.
    pub inputs: DenseMatrix,
    pub polarity: Vec<Polarity>,
    pub true_labels: Vec<usize>,
    pub linked_labels: Vec<usize>,
}

impl LinkedBatch {
    pub fn len(&self) -> usize {
        self.polarity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polarity.is_empty()
    }
}

/// `Σ_u act[s][u]²` for every sample of `layer`.
pub fn goodness(trace: &ForwardTrace, layer: usize) -> Vec<f64> {
    trace.layers[layer]
        .act
        .row_iter()
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect()
}

/// Logit `g + γ − θ`, evaluated as `g − (θ − γ)` so that an offset γ is
/// bitwise identical to lowering the threshold by γ.
#[inline]
pub fn logit(g: f64, gamma: f64, theta: f64) -> f64 {
    g - (theta - gamma)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eᶻ)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Probability that a sample is positive according to one layer.
pub fn positive_prob(g: f64, gamma: f64, theta: f64) -> f64 {
    sigmoid(logit(g, gamma, theta))
}

/// Detached goodness of the other layers, per sample.
pub fn compute_gamma(table: &GoodnessTable, layer: usize, mode: GammaMode) -> Result<Vec<f64>> {
    if !table.detached {
        return Err(Error::Config(
            "gamma must be computed from a detached goodness table".into(),
        ));
    }
    if layer >= table.layers() {
        return Err(Error::Config(format!(
            "layer {} outside goodness table of {} layers",
            layer + 1,
            table.layers()
        )));
    }
    let others: Vec<usize> = match mode {
        GammaMode::None => Vec::new(),
        GammaMode::AllOtherLayers => (0..table.layers()).filter(|&t| t != layer).collect(),
        GammaMode::PredecessorsOnly => (0..layer).collect(),
    };
    Ok(table
        .values
        .row_iter()
        .map(|r| others.iter().map(|&t| r[t]).sum())
        .collect())
}

/// Batch loss of one layer plus its activity coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLoss {
    /// The quantity being minimised.
    pub loss: f64,
    /// `∂loss/∂act`, ready for [`nn::layer_local_grad`].
    pub coeffs: DenseMatrix,
}

/// Sigmoid goodness loss, averaged over the batch.
///
/// Positive rows contribute `−log σ(z)`, negative rows `−log σ(−z)` with
/// `z = g + γ − θ`. γ is a constant, so it only shifts `z`.
pub fn ff_loss_and_coeffs(
    trace: &ForwardTrace,
    layer: usize,
    gamma: &[f64],
    theta: f64,
    polarity: &[Polarity],
) -> Result<LayerLoss> {
    let act = &trace.layers[layer].act;
    let m = act.rows();
    check_batch_lengths("ff_loss_and_coeffs", m, gamma.len(), polarity.len())?;
    let g = goodness(trace, layer);
    let inv_m = 1.0 / m as f64;
    let mut loss = 0.0;
    let mut coeffs = DenseMatrix::zeros(m, act.cols());
    for s in 0..m {
        let z = logit(g[s], gamma[s], theta);
        // d(-log σ(±z))/dz = ∓ σ(∓z)
        let dz = match polarity[s] {
            Polarity::Positive => {
                loss += softplus(-z);
                -sigmoid(-z)
            }
            Polarity::Negative => {
                loss += softplus(z);
                sigmoid(z)
            }
        };
        let scale = 2.0 * dz * inv_m;
        for (c, &a) in coeffs.row_mut(s).iter_mut().zip(act.row(s)) {
            *c = scale * a;
        }
    }
    Ok(LayerLoss {
        loss: loss * inv_m,
        coeffs,
    })
}

/// Entropy objective of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyLoss {
    /// `Ent(h | positive rows) − Ent(h | negative rows)`, to be maximised.
    pub objective: f64,
    /// `∂(−objective)/∂act`, ready for [`nn::layer_local_grad`].
    pub coeffs: DenseMatrix,
}

/// Functional entropy of `h = g + γ` over the batch, maximised on positive
/// rows and minimised on negative rows.
///
/// Each polarity group is its own uniform empirical measure. Within a group
/// of size `n`, `∂Ent/∂h_s = log(h_s / h̄) / n`.
pub fn entropy_loss_and_coeffs(
    trace: &ForwardTrace,
    layer: usize,
    gamma: &[f64],
    polarity: &[Polarity],
) -> Result<EntropyLoss> {
    let act = &trace.layers[layer].act;
    let m = act.rows();
    check_batch_lengths("entropy_loss_and_coeffs", m, gamma.len(), polarity.len())?;
    if m < 2 {
        return Err(Error::Estimation(format!(
            "entropy objective needs at least 2 samples, got {m}"
        )));
    }
    let g = goodness(trace, layer);
    let h: Vec<f64> = g
        .iter()
        .zip(gamma)
        .map(|(g, gm)| g + gm + ENTROPY_FLOOR)
        .collect();
    let mut objective = 0.0;
    let mut dh = vec![0.0; m];
    for group in [Polarity::Positive, Polarity::Negative] {
        let idx: Vec<usize> = (0..m).filter(|&s| polarity[s] == group).collect();
        if idx.is_empty() {
            continue;
        }
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&s| h[s]).sum::<f64>() / n;
        let ent = idx.iter().map(|&s| h[s] * (h[s] / mean).ln()).sum::<f64>() / n;
        objective += group.sign() * ent;
        for &s in &idx {
            // loss = −objective
            dh[s] = -group.sign() * (h[s] / mean).ln() / n;
        }
    }
    let mut coeffs = DenseMatrix::zeros(m, act.cols());
    for s in 0..m {
        let scale = 2.0 * dh[s];
        for (c, &a) in coeffs.row_mut(s).iter_mut().zip(act.row(s)) {
            *c = scale * a;
        }
    }
    Ok(EntropyLoss { objective, coeffs })
}

fn check_batch_lengths(op: &'static str, m: usize, gamma: usize, polarity: usize) -> Result<()> {
    if gamma != m || polarity != m {
        return Err(Error::Shape {
            op,
            left: (m, 1),
            right: (gamma, polarity),
        });
    }
    Ok(())
}

/// Emitted after every completed epoch of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochEnd {
    /// One-based count of epochs completed so far across the whole run.
    pub global_epoch: usize,
    /// Layer being trained, for the layer-wise schedule.
    pub layer: Option<usize>,
}

pub type EpochObserver<'a> = dyn FnMut(&EpochEnd, &MlpNetwork) -> Result<()> + 'a;

/// Running per-layer statistics over one epoch.
#[derive(Debug, Clone, Default)]
struct EpochStats {
    loss_sum: f64,
    batches: usize,
    pos_sum: f64,
    pos_n: usize,
    neg_sum: f64,
    neg_n: usize,
}

impl EpochStats {
    fn record(&mut self, loss: f64, g: &[f64], polarity: &[Polarity]) {
        self.loss_sum += loss;
        self.batches += 1;
        for (v, p) in g.iter().zip(polarity) {
            match p {
                Polarity::Positive => {
                    self.pos_sum += v;
                    self.pos_n += 1;
                }
                Polarity::Negative => {
                    self.neg_sum += v;
                    self.neg_n += 1;
                }
            }
        }
    }

    fn row(&self, epoch: usize, layer: usize, loss_kind: &str) -> HistoryRow {
        let mean = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
        HistoryRow {
            epoch,
            layer: layer + 1,
            loss_kind: loss_kind.to_string(),
            split: "train".to_string(),
            loss: mean(self.loss_sum, self.batches).unwrap_or(f64::NAN),
            mean_goodness_pos: mean(self.pos_sum, self.pos_n),
            mean_goodness_neg: mean(self.neg_sum, self.neg_n),
        }
    }
}

/// Loss for one layer of one batch, dispatched on the loss kind.
fn layer_step(
    net: &mut MlpNetwork,
    optimizer: &mut AdamState,
    trace: &ForwardTrace,
    table: &GoodnessTable,
    layer: usize,
    batch: &LinkedBatch,
    cfg: &FfConfig,
    stats: &mut EpochStats,
) -> Result<()> {
    let gamma = compute_gamma(table, layer, cfg.gamma_mode)?;
    let (loss, coeffs) = match cfg.loss_kind {
        LossKind::SigmoidGoodness => {
            let l = ff_loss_and_coeffs(trace, layer, &gamma, cfg.theta, &batch.polarity)?;
            (l.loss, l.coeffs)
        }
        LossKind::Entropy => {
            let l = entropy_loss_and_coeffs(trace, layer, &gamma, &batch.polarity)?;
            (-l.objective, l.coeffs)
        }
    };
    let lt = &trace.layers[layer];
    let grad = nn::layer_local_grad(net.layer(layer), trace.layer_input(layer), &lt.pre, &coeffs)?;
    optimizer.step_layer(net.layer_mut(layer), &grad)?;
    let g: Vec<f64> = table.values.row_iter().map(|r| r[layer]).collect();
    stats.record(loss, &g, &batch.polarity);
    Ok(())
}

pub(crate) fn check_network(net: &MlpNetwork, data: &Dataset, cfg: &FfConfig) -> Result<()> {
    cfg.validate(net.depth())?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let expected = data.dim() + data.num_labels();
    if net.input_dim() != expected {
        return Err(Error::Config(format!(
            "network input dim {} does not match linked input dim {expected}",
            net.input_dim()
        )));
    }
    Ok(())
}

/// Trains layers strictly in order, each for `cfg.epochs` passes.
pub fn train_layerwise(
    net: &mut MlpNetwork,
    data: &Dataset,
    cfg: &FfConfig,
) -> Result<TrainingHistory> {
    train_layerwise_observed(net, data, cfg, &mut |_, _| Ok(()))
}

pub fn train_layerwise_observed(
    net: &mut MlpNetwork,
    data: &Dataset,
    cfg: &FfConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainingHistory> {
    if cfg.schedule != Schedule::Layerwise {
        return Err(Error::Config(format!(
            "train_layerwise called with schedule {}",
            cfg.schedule
        )));
    }
    check_network(net, data, cfg)?;
    let depth = net.depth();
    let mut rng = Rng::stream(cfg.seed, DATA_STREAM);
    let mut history = TrainingHistory::new(depth);
    let kind = cfg.loss_kind.as_str();
    let mut global_epoch = 0;
    for layer in 0..depth {
        let mut optimizer = AdamState::for_layer(cfg.adam, net.layer(layer));
        let trace_depth = match cfg.gamma_mode {
            GammaMode::AllOtherLayers => depth,
            GammaMode::None | GammaMode::PredecessorsOnly => layer + 1,
        };
        for _ in 0..cfg.epochs {
            global_epoch += 1;
            let mut stats = EpochStats::default();
            for batch in data::make_linked_batches(data, &mut rng, cfg.batch_size, cfg.negatives_per_positive) {
                let trace = nn::forward_trace_with(net, &batch.inputs, trace_depth, Normalization::default())?;
                let table = GoodnessTable::from_trace(&trace);
                layer_step(net, &mut optimizer, &trace, &table, layer, &batch, cfg, &mut stats)?;
            }
            let row = stats.row(global_epoch, layer, kind);
            history.layer_final_loss[layer] = Some(row.loss);
            history.rows.push(row);
            observer(
                &EpochEnd {
                    global_epoch,
                    layer: Some(layer),
                },
                net,
            )?;
        }
    }
    Ok(history)
}

/// Trains all layers together: one step per layer per batch.
///
/// Every batch is traced once before any update; each layer's gradient and
/// γ come from that single pre-update trace, so the update does not depend
/// on the order in which layers are visited.
pub fn train_alternating(
    net: &mut MlpNetwork,
    data: &Dataset,
    cfg: &FfConfig,
) -> Result<TrainingHistory> {
    train_alternating_observed(net, data, cfg, &mut |_, _| Ok(()))
}

pub fn train_alternating_observed(
    net: &mut MlpNetwork,
    data: &Dataset,
    cfg: &FfConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainingHistory> {
    if cfg.schedule != Schedule::Alternating {
        return Err(Error::Config(format!(
            "train_alternating called with schedule {}",
            cfg.schedule
        )));
    }
    check_network(net, data, cfg)?;
    let depth = net.depth();
    let mut rng = Rng::stream(cfg.seed, DATA_STREAM);
    let mut history = TrainingHistory::new(depth);
    let kind = cfg.loss_kind.as_str();
    let mut optimizers: Vec<AdamState> = net
        .layers()
        .iter()
        .map(|l| AdamState::for_layer(cfg.adam, l))
        .collect();
    for epoch in 1..=cfg.epochs {
        let mut stats = vec![EpochStats::default(); depth];
        for batch in data::make_linked_batches(data, &mut rng, cfg.batch_size, cfg.negatives_per_positive) {
            let trace = nn::forward_trace(net, &batch.inputs)?;
            let table = GoodnessTable::from_trace(&trace);
            for layer in 0..depth {
                layer_step(net, &mut optimizers[layer], &trace, &table, layer, &batch, cfg, &mut stats[layer])?;
            }
        }
        for (layer, s) in stats.iter().enumerate() {
            let row = s.row(epoch, layer, kind);
            history.layer_final_loss[layer] = Some(row.loss);
            history.rows.push(row);
        }
        observer(
            &EpochEnd {
                global_epoch: epoch,
                layer: None,
            },
            net,
        )?;
    }
    Ok(history)
}

/// Dispatches on `cfg.schedule`.
pub fn train(net: &mut MlpNetwork, data: &Dataset, cfg: &FfConfig) -> Result<TrainingHistory> {
    train_observed(net, data, cfg, &mut |_, _| Ok(()))
}

pub fn train_observed(
    net: &mut MlpNetwork,
    data: &Dataset,
    cfg: &FfConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainingHistory> {
    match cfg.schedule {
        Schedule::Layerwise => train_layerwise_observed(net, data, cfg, observer),
        Schedule::Alternating => train_alternating_observed(net, data, cfg, observer),
    }
}

/// Predicts the label whose linked input has the largest goodness summed
/// over `mask`. Ties go to the smallest label.
pub fn infer(net: &MlpNetwork, x: &[f64], num_labels: usize, mask: &[usize]) -> Result<usize> {
    validate_mask(mask, net.depth())?;
    if num_labels == 0 {
        return Err(Error::Config("num_labels must be positive".into()));
    }
    let rows: Vec<Vec<f64>> = (0..num_labels)
        .map(|y| data::link(x, y, num_labels))
        .collect();
    let inputs = DenseMatrix::from_rows(&rows)?;
    let depth = mask.iter().max().map_or(1, |m| m + 1);
    let trace = nn::forward_trace_with(net, &inputs, depth, Normalization::default())?;
    let mut scores = vec![0.0; num_labels];
    for &layer in mask {
        for (s, g) in scores.iter_mut().zip(goodness(&trace, layer)) {
            *s += g;
        }
    }
    Ok(argmax_first(&scores))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
