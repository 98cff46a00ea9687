//! Layer-subset evaluation: classification error when only some layers vote,
//! and each layer's marginal contribution to the full vote.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ff::{argmax_first, validate_mask};
use crate::linalg::{self, DenseMatrix};
use crate::nn::{self, MlpNetwork, Normalization};
use crate::report;

/// Samples pushed through the network at once when filling the cache.
const CACHE_CHUNK: usize = 256;

/// A sorted, duplicate-free set of zero-based layer indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerSet(Vec<usize>);

impl LayerSet {
    pub fn new(layers: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = layers.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        LayerSet(v)
    }

    pub fn full(depth: usize) -> Self {
        LayerSet((0..depth).collect())
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn without(&self, layer: usize) -> Self {
        LayerSet(self.0.iter().copied().filter(|&l| l != layer).collect())
    }
}

/// Renders one-based indices joined by `+`, e.g. `1+2+3`.
impl fmt::Display for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|l| (l + 1).to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for LayerSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let layers = s
            .split('+')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&i| i >= 1)
                    .map(|i| i - 1)
                    .ok_or_else(|| Error::Config(format!("bad layer '{p}' in subset '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerSet::new(layers))
    }
}

/// Singletons, prefixes, leave-one-outs and the full set, in that order,
/// without repeats.
pub fn default_subsets(depth: usize) -> Vec<LayerSet> {
    let full = LayerSet::full(depth);
    let mut out: Vec<LayerSet> = Vec::new();
    let candidates = (0..depth)
        .map(|i| LayerSet::new([i]))
        .chain((1..=depth).map(|n| LayerSet::new(0..n)))
        .chain((0..depth).map(|i| full.without(i)))
        .chain(std::iter::once(full.clone()));
    for s in candidates {
        if !s.layers().is_empty() && !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Goodness of every (sample, candidate label, layer) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct GoodnessCache {
    samples: usize,
    labels: usize,
    depth: usize,
    values: Vec<f64>,
}

impl GoodnessCache {
    /// Runs one forward pass per (sample, label).
    ///
    /// The first layer's pixel contribution `x·W₁[:d]` is shared across
    /// labels; each label then only adds its one-hot row of `W₁`.
    pub fn build(net: &MlpNetwork, images: &DenseMatrix, num_labels: usize) -> Result<Self> {
        let d = images.cols();
        if net.input_dim() != d + num_labels {
            return Err(Error::Config(format!(
                "network input dim {} does not match {d} pixels + {num_labels} labels",
                net.input_dim()
            )));
        }
        let depth = net.depth();
        let first = net.layer(0);
        let hidden = first.out_dim();
        let pixel_weights =
            DenseMatrix::from_vec(d, hidden, first.weights.data()[..d * hidden].to_vec())?;
        let n = images.rows();
        let mut values = vec![0.0; n * num_labels * depth];
        let rows: Vec<usize> = (0..n).collect();
        for chunk in rows.chunks(CACHE_CHUNK) {
            let x = images.select_rows(chunk);
            let mut base = linalg::matmul(&x, &pixel_weights)?;
            base.add_row_broadcast(&first.biases)?;
            for y in 0..num_labels {
                let mut pre = base.clone();
                let label_row = first.weights.row(d + y);
                for r in 0..pre.rows() {
                    pre.row_mut(r).iter_mut().zip(label_row).for_each(|(p, w)| *p += w);
                }
                let trace = nn::forward_from_first_pre(net, pre, Normalization::default())?;
                for (layer, lt) in trace.iter().enumerate() {
                    for (i, r) in lt.act.row_iter().enumerate() {
                        let s = chunk[i];
                        values[(s * num_labels + y) * depth + layer] =
                            r.iter().map(|v| v * v).sum();
                    }
                }
            }
        }
        Ok(GoodnessCache {
            samples: n,
            labels: num_labels,
            depth,
            values,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn get(&self, sample: usize, label: usize, layer: usize) -> f64 {
        self.values[(sample * self.labels + label) * self.depth + layer]
    }

    /// Summed goodness over `mask` for every candidate label of `sample`.
    pub fn scores(&self, sample: usize, mask: &[usize]) -> Vec<f64> {
        (0..self.labels)
            .map(|y| mask.iter().map(|&l| self.get(sample, y, l)).sum())
            .collect()
    }

    pub fn predict(&self, mask: &[usize]) -> Vec<usize> {
        (0..self.samples)
            .map(|s| argmax_first(&self.scores(s, mask)))
            .collect()
    }

    pub fn error_rate(&self, mask: &[usize], truth: &[usize]) -> f64 {
        error_rate(&self.predict(mask), truth)
    }
}

/// Fraction of mismatched predictions; zero for an empty set.
pub fn error_rate(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let wrong = predicted.iter().zip(truth).filter(|(p, t)| p != t).count();
    wrong as f64 / truth.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub layers: LayerSet,
    pub error: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetEvalReport {
    pub depth: usize,
    pub subsets: Vec<SubsetResult>,
    /// Present when the full set and all leave-one-out sets were evaluated.
    pub marginals: Option<Vec<f64>>,
}

impl SubsetEvalReport {
    pub fn error_of(&self, set: &LayerSet) -> Option<f64> {
        self.subsets.iter().find(|s| &s.layers == set).map(|s| s.error)
    }
}

/// Evaluates every requested subset over the whole dataset.
pub fn evaluate_subsets(net: &MlpNetwork, ds: &Dataset, subsets: &[LayerSet]) -> Result<SubsetEvalReport> {
    validate_subsets(subsets, net.depth())?;
    let cache = GoodnessCache::build(net, &ds.images, ds.num_labels())?;
    evaluate_cached(&cache, &ds.labels, subsets)
}

/// Same as [`evaluate_subsets`] over an existing cache.
pub fn evaluate_cached(cache: &GoodnessCache, truth: &[usize], subsets: &[LayerSet]) -> Result<SubsetEvalReport> {
    validate_subsets(subsets, cache.depth())?;
    let mut unique: Vec<LayerSet> = Vec::with_capacity(subsets.len());
    for s in subsets {
        if unique.contains(s) {
            warn!("subset {s} requested more than once; evaluating it once");
        } else {
            unique.push(s.clone());
        }
    }
    let results = unique
        .into_iter()
        .map(|layers| SubsetResult {
            error: cache.error_rate(layers.layers(), truth),
            sample_count: truth.len(),
            layers,
        })
        .collect();
    let mut report = SubsetEvalReport {
        depth: cache.depth(),
        subsets: results,
        marginals: None,
    };
    report.marginals = marginal_contributions(&report).ok();
    Ok(report)
}

fn validate_subsets(subsets: &[LayerSet], depth: usize) -> Result<()> {
    if subsets.is_empty() {
        return Err(Error::Config("no subsets requested".into()));
    }
    for s in subsets {
        validate_mask(s.layers(), depth)?;
    }
    Ok(())
}

/// `error(full \ {i}) − error(full)` per layer; positive means the layer helps.
pub fn marginal_contributions(report: &SubsetEvalReport) -> Result<Vec<f64>> {
    let full = LayerSet::full(report.depth);
    let full_error = report
        .error_of(&full)
        .ok_or_else(|| Error::Config(format!("subset {full} missing from report")))?;
    if report.depth < 2 {
        return Err(Error::Config("marginals need at least two layers".into()));
    }
    (0..report.depth)
        .map(|i| {
            let without = full.without(i);
            report
                .error_of(&without)
                .map(|e| e - full_error)
                .ok_or_else(|| Error::Config(format!("subset {without} missing from report")))
        })
        .collect()
}

#[derive(Serialize)]
struct SubsetCsvRow {
    subset: String,
    error: f64,
    n: usize,
}

#[derive(Serialize)]
struct MarginalCsvRow {
    layer: usize,
    marginal: f64,
}

/// Writes `subset,error,n` and, when available, `layer,marginal`.
pub fn write_report(report: &SubsetEvalReport, subsets_csv: &Path, marginals_csv: &Path) -> Result<()> {
    let rows: Vec<SubsetCsvRow> = report
        .subsets
        .iter()
        .map(|s| SubsetCsvRow {
            subset: s.layers.to_string(),
            error: s.error,
            n: s.sample_count,
        })
        .collect();
    report::write_csv(subsets_csv, &rows)?;
    if let Some(m) = &report.marginals {
        let rows: Vec<MarginalCsvRow> = m
            .iter()
            .enumerate()
            .map(|(i, &marginal)| MarginalCsvRow { layer: i + 1, marginal })
            .collect();
        report::write_csv(marginals_csv, &rows)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report_with(errors: &[(&str, f64)], depth: usize) -> SubsetEvalReport {
        SubsetEvalReport {
            depth,
            subsets: errors
                .iter()
                .map(|(s, e)| SubsetResult {
                    layers: s.parse().unwrap(),
                    error: *e,
                    sample_count: 100,
                })
                .collect(),
            marginals: None,
        }
    }

    #[test]
    fn layer_set_text() {
        let s: LayerSet = "3+1+2+1".parse().unwrap();
        assert_eq!(s.layers(), &[0, 1, 2]);
        assert_eq!(s.to_string(), "1+2+3");
        assert!("0+1".parse::<LayerSet>().is_err());
        assert!("a".parse::<LayerSet>().is_err());
    }

    #[test]
    fn default_family_at_depth_three() {
        let names: Vec<String> = default_subsets(3).iter().map(|s| s.to_string()).collect();
        assert_eq!(names, vec!["1", "2", "3", "1+2", "1+2+3", "2+3", "1+3"]);
        assert_eq!(default_subsets(1).len(), 1);
    }

    #[test]
    fn marginals_from_arithmetic() {
        let r = report_with(&[("1+2+3", 0.02), ("2+3", 0.03), ("1+3", 0.02), ("1+2", 0.025)], 3);
        let m = marginal_contributions(&r).unwrap();
        assert!((m[0] - 0.01).abs() < 1e-15);
        assert_eq!(m[1], 0.0);
        assert!((m[2] - 0.005).abs() < 1e-15);
    }

    #[test]
    fn equal_errors_give_zero_marginals() {
        let r = report_with(&[("1+2+3", 0.1), ("2+3", 0.1), ("1+3", 0.1), ("1+2", 0.1)], 3);
        assert_eq!(marginal_contributions(&r).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn missing_subsets_are_reported() {
        let r = report_with(&[("1+2+3", 0.1), ("2+3", 0.1)], 3);
        let err = marginal_contributions(&r).unwrap_err().to_string();
        assert!(err.contains("1+3"), "{err}");
        assert!(marginal_contributions(&report_with(&[("1", 0.1)], 3)).is_err());
    }

    #[test]
    fn error_rate_counts_mismatches() {
        assert_eq!(error_rate(&[1, 2, 3, 4], &[1, 0, 3, 0]), 0.5);
        assert_eq!(error_rate(&[], &[]), 0.0);
    }
}
