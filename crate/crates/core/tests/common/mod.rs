//! Reference computations written with plain loops, independent of the
//! library's matrix kernels and traces.

#![allow(dead_code)]

use collab_ff::data::{Dataset, DatasetName, Split};
use collab_ff::ff::Polarity;
use collab_ff::linalg::{DenseMatrix, Rng};
use collab_ff::nn::MlpNetwork;

pub const EPS: f64 = 1e-8;

/// Per-layer activities `act` for every row, from scratch.
pub fn naive_acts(net: &MlpNetwork, inputs: &[Vec<f64>], normalize: bool) -> Vec<Vec<Vec<f64>>> {
    let mut per_layer = Vec::new();
    let mut current: Vec<Vec<f64>> = inputs.to_vec();
    for layer in net.layers() {
        let (rows, cols) = layer.weights.shape();
        let act: Vec<Vec<f64>> = current
            .iter()
            .map(|x| {
                (0..cols)
                    .map(|j| {
                        let mut s = layer.biases.get(0, j);
                        for i in 0..rows {
                            s += x[i] * layer.weights.get(i, j);
                        }
                        s.max(0.0)
                    })
                    .collect()
            })
            .collect();
        current = act
            .iter()
            .map(|a| {
                if normalize {
                    let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                    a.iter().map(|v| v / (n + EPS)).collect()
                } else {
                    a.clone()
                }
            })
            .collect();
        per_layer.push(act);
    }
    per_layer
}

/// Output of the last layer after normalization (or raw when disabled).
pub fn naive_output(net: &MlpNetwork, inputs: &[Vec<f64>], normalize: bool) -> Vec<Vec<f64>> {
    let acts = naive_acts(net, inputs, normalize);
    acts.last()
        .unwrap()
        .iter()
        .map(|a| {
            if normalize {
                let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                a.iter().map(|v| v / (n + EPS)).collect()
            } else {
                a.clone()
            }
        })
        .collect()
}

pub fn naive_goodness(net: &MlpNetwork, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    naive_acts(net, inputs, true)
        .iter()
        .map(|layer| layer.iter().map(|a| a.iter().map(|v| v * v).sum()).collect())
        .collect()
}

/// `log(1 + e^x)` written directly; arguments stay small in these tests.
pub fn log1pexp(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Mean sigmoid goodness loss of `layer` with a fixed per-row offset.
pub fn naive_ff_loss(
    net: &MlpNetwork,
    inputs: &[Vec<f64>],
    layer: usize,
    gamma: &[f64],
    theta: f64,
    polarity: &[Polarity],
) -> f64 {
    let g = &naive_goodness(net, inputs)[layer];
    let total: f64 = g
        .iter()
        .zip(gamma)
        .zip(polarity)
        .map(|((g, gm), p)| {
            let z = g + gm - theta;
            match p {
                Polarity::Positive => log1pexp(-z),
                Polarity::Negative => log1pexp(z),
            }
        })
        .sum();
    total / g.len() as f64
}

/// `E[h log h] − E[h] log E[h]` over a uniform measure.
pub fn naive_entropy(h: &[f64]) -> f64 {
    let n = h.len() as f64;
    let mean = h.iter().sum::<f64>() / n;
    let ehlogh = h.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>() / n;
    ehlogh - if mean > 0.0 { mean * mean.ln() } else { 0.0 }
}

/// Negative entropy objective of `layer`: `−(Ent(h⁺) − Ent(h⁻))`.
pub fn naive_entropy_loss(
    net: &MlpNetwork,
    inputs: &[Vec<f64>],
    layer: usize,
    gamma: &[f64],
    polarity: &[Polarity],
) -> f64 {
    let g = &naive_goodness(net, inputs)[layer];
    let h: Vec<f64> = g.iter().zip(gamma).map(|(g, gm)| g + gm + 1e-12).collect();
    let pick = |want: Polarity| -> Vec<f64> {
        h.iter().zip(polarity).filter(|(_, p)| **p == want).map(|(v, _)| *v).collect()
    };
    -(naive_entropy(&pick(Polarity::Positive)) - naive_entropy(&pick(Polarity::Negative)))
}

/// Central difference of `f` with respect to every entry of `param`.
pub fn numeric_grad(param: &DenseMatrix, step: f64, mut f: impl FnMut(&DenseMatrix) -> f64) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(param.rows(), param.cols());
    let mut p = param.clone();
    for i in 0..param.data().len() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + step;
        let up = f(&p);
        p.data_mut()[i] = orig - step;
        let down = f(&p);
        p.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * step);
    }
    out
}

/// Worst relative error over entries, and the fraction of entries within
/// `tol`. Entries where both values are below `floor` count as agreeing.
pub fn compare(analytic: &DenseMatrix, numeric: &DenseMatrix, tol: f64, floor: f64) -> (f64, f64) {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst: f64 = 0.0;
    let mut ok = 0;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let scale = a.abs().max(n.abs());
        let rel = if scale < floor { 0.0 } else { (a - n).abs() / scale };
        worst = worst.max(rel);
        if rel <= tol {
            ok += 1;
        }
    }
    (worst, ok as f64 / analytic.data().len() as f64)
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn normwise(analytic: &DenseMatrix, numeric: &DenseMatrix) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.frobenius_norm().max(numeric.frobenius_norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn random_rows(n: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.uniform(0.0, 1.0)).collect()).collect()
}

pub fn to_matrix(rows: &[Vec<f64>]) -> DenseMatrix {
    DenseMatrix::from_rows(rows).unwrap()
}

pub fn alternating_polarity(n: usize) -> Vec<Polarity> {
    (0..n)
        .map(|i| if i % 2 == 0 { Polarity::Positive } else { Polarity::Negative })
        .collect()
}

/// Small synthetic dataset: class-dependent bright pixel plus noise.
pub fn toy_dataset(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(10)).collect();
    let images = DenseMatrix::from_fn(n, d, |s, j| {
        let base = if j % 10 == labels[s] { 0.8 } else { 0.1 };
        base + 0.1 * rng.uniform(0.0, 1.0)
    });
    Dataset::new(images, labels, DatasetName::Mnist, Split::Train).unwrap()
}
