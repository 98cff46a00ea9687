//! Functional entropy `Ent_μ(h) = E[h log(h / E[h])]` of non-negative
//! values, its scaled-KL form, and the split into an across-layer term and
//! per-layer conditional terms.

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::ff::{text_enum, GoodnessTable};
use crate::linalg::{DenseMatrix, Rng};
use crate::nn::{self, MlpNetwork};

const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySplit {
    Positive,
    Negative,
    Both,
}

text_enum!(EntropySplit {
    Positive => "positive",
    Negative => "negative",
    Both => "both",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub overall: f64,
    pub across_layers: f64,
    /// One entry per layer, in layer order.
    pub within_layer: Vec<f64>,
    pub sample_count: usize,
    pub split: EntropySplit,
}

impl EntropyReport {
    pub fn mean_within(&self) -> f64 {
        if self.within_layer.is_empty() {
            0.0
        } else {
            self.within_layer.iter().sum::<f64>() / self.within_layer.len() as f64
        }
    }
}

fn check_inputs(values: &[f64], weights: &[f64]) -> Result<()> {
    if values.len() != weights.len() {
        return Err(Error::Domain(format!(
            "{} values but {} weights",
            values.len(),
            weights.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("values must be finite and non-negative, got {v}")));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::Domain(format!("weights must be finite and non-negative, got {w}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(Error::Domain(format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// `x log(x / mean)` with `0 log 0 = 0`.
#[inline]
fn xlogx_over(x: f64, mean: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / mean).ln()
    }
}

/// `Σ w_s h_s log(h_s / h̄)` with `h̄ = Σ w_s h_s`; zero when `h̄ = 0`.
pub fn functional_entropy(values: &[f64], weights: &[f64]) -> Result<f64> {
    check_inputs(values, weights)?;
    Ok(entropy_unchecked(values, weights))
}

fn entropy_unchecked(values: &[f64], weights: &[f64]) -> f64 {
    let mean: f64 = values.iter().zip(weights).map(|(h, w)| h * w).sum();
    if mean <= 0.0 {
        return 0.0;
    }
    values
        .iter()
        .zip(weights)
        .map(|(&h, &w)| w * xlogx_over(h, mean))
        .sum()
}

/// Entropy under the uniform measure.
pub fn uniform_entropy(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("entropy of an empty sample".into()));
    }
    let w = vec![1.0 / values.len() as f64; values.len()];
    functional_entropy(values, &w)
}

/// Returns `(Ent_μ(h), E[h]·KL(q‖p))` with `q ∝ p·h`.
pub fn scaled_kl_identity(values: &[f64], weights: &[f64]) -> Result<(f64, f64)> {
    check_inputs(values, weights)?;
    let mean: f64 = values.iter().zip(weights).map(|(h, w)| h * w).sum();
    if mean <= 0.0 {
        return Err(Error::Domain("E[h] must be positive".into()));
    }
    let lhs = entropy_unchecked(values, weights);
    let kl: f64 = values
        .iter()
        .zip(weights)
        .filter(|(h, w)| **h > 0.0 && **w > 0.0)
        .map(|(&h, &w)| {
            let q = w * h / mean;
            q * (q / w).ln()
        })
        .sum();
    Ok((lhs, mean * kl))
}

/// Decomposes the entropy of a goodness table under the product of uniform
/// measures over samples and layers.
pub fn entropy_decompose(table: &GoodnessTable, split: EntropySplit) -> Result<EntropyReport> {
    let n = table.samples();
    let k = table.layers();
    if n == 0 || k == 0 {
        return Err(Error::Domain("empty goodness table".into()));
    }
    let values = table.values.data();
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("goodness must be non-negative, got {v}")));
    }
    let sample_w = vec![1.0 / n as f64; n];
    let mut within = Vec::with_capacity(k);
    let mut layer_means = Vec::with_capacity(k);
    for layer in 0..k {
        let column: Vec<f64> = table.values.row_iter().map(|r| r[layer]).collect();
        within.push(entropy_unchecked(&column, &sample_w));
        layer_means.push(column.iter().sum::<f64>() / n as f64);
    }
    let across = entropy_unchecked(&layer_means, &vec![1.0 / k as f64; k]);
    let grid_w = vec![1.0 / (n * k) as f64; n * k];
    let overall = entropy_unchecked(values, &grid_w);
    Ok(EntropyReport {
        overall,
        across_layers: across,
        within_layer: within,
        sample_count: n,
        split,
    })
}

/// A fixed evaluation set linked once to true labels and once to wrong labels.
#[derive(Debug, Clone)]
pub struct EntropyProbe {
    positives: DenseMatrix,
    negatives: DenseMatrix,
}

impl EntropyProbe {
    /// Draws up to `n` samples from `ds` and one wrong label per sample.
    pub fn new(ds: &Dataset, n: usize, rng: &mut Rng) -> Self {
        let sample = ds.random_subset(n, rng);
        let wrong: Vec<usize> = sample
            .labels
            .iter()
            .map(|&y| data::wrong_label(y, sample.num_labels(), rng))
            .collect();
        EntropyProbe {
            positives: data::link_all(&sample, &sample.labels).inputs,
            negatives: data::link_all(&sample, &wrong).inputs,
        }
    }

    pub fn len(&self) -> usize {
        self.positives.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.rows() == 0
    }

    /// Positive, negative and pooled reports for `net`.
    pub fn measure(&self, net: &MlpNetwork) -> Result<[EntropyReport; 3]> {
        let pos = GoodnessTable::from_trace(&nn::forward_trace(net, &self.positives)?);
        let neg = GoodnessTable::from_trace(&nn::forward_trace(net, &self.negatives)?);
        let mut pooled = pos.values.data().to_vec();
        pooled.extend_from_slice(neg.values.data());
        let both = GoodnessTable {
            values: DenseMatrix::from_vec(pos.samples() + neg.samples(), pos.layers(), pooled)?,
            detached: true,
        };
        Ok([
            entropy_decompose(&pos, EntropySplit::Positive)?,
            entropy_decompose(&neg, EntropySplit::Negative)?,
            entropy_decompose(&both, EntropySplit::Both)?,
        ])
    }
}
