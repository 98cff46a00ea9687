//! Dense row-major matrices of `f64` and a seedable random generator.
//!
//! A batch of `m` samples of dimension `d` is always an `m × d` matrix
//! (one sample per row). Matrix products go through `matrixmultiply`'s
//! single-threaded `dgemm`, which is deterministic for fixed inputs.

use std::fmt;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default epsilon for [`l2_row_normalize`].
pub const NORM_EPSILON: f64 = 1e-8;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 64 {
            f.debug_struct("DenseMatrix")
                .field("rows", &self.rows)
                .field("cols", &self.cols)
                .field("data", &self.data)
                .finish()
        } else {
            write!(f, "DenseMatrix({}×{})", self.rows, self.cols)
        }
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        let m = DenseMatrix { rows, cols, data };
        m.ensure_finite("from_vec")?;
        Ok(m)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (i, cols),
                    right: (i, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    /// Matrix with entries drawn uniformly from `[low, high)`.
    pub fn random_uniform(rows: usize, cols: usize, low: f64, high: f64, rng: &mut Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.uniform(low, high))
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics, so empty-column matrices yield nothing.
        let n = if self.cols == 0 { 0 } else { self.rows };
        (0..n).map(move |i| self.row(i))
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_same_shape("hadamard", other)?;
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<()> {
        self.check_same_shape("add_assign", other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Adds a `1 × cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, row: &DenseMatrix) -> Result<()> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                left: self.shape(),
                right: row.shape(),
            });
        }
        if self.cols == 0 {
            return Ok(());
        }
        for r in self.data.chunks_exact_mut(self.cols) {
            r.iter_mut().zip(&row.data).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// `1 × cols` matrix of column sums.
    pub fn column_sums(&self) -> DenseMatrix {
        let mut out = vec![0.0; self.cols];
        for r in self.row_iter() {
            out.iter_mut().zip(r).for_each(|(o, v)| *o += v);
        }
        DenseMatrix {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    /// Copies the selected rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copies the column range `[start, end)` into a new matrix.
    pub fn column_slice(&self, start: usize, end: usize) -> DenseMatrix {
        assert!(start <= end && end <= self.cols, "column range out of bounds");
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in self.row_iter() {
            data.extend_from_slice(&r[start..end]);
        }
        DenseMatrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        matmul(self, other)
    }

    fn check_same_shape(&self, op: &'static str, other: &DenseMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

/// Strided view used to express transposes without copying.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
}

impl<'a> View<'a> {
    fn plain(m: &'a DenseMatrix) -> Self {
        View {
            data: &m.data,
            rows: m.rows,
            cols: m.cols,
            row_stride: m.cols as isize,
            col_stride: 1,
        }
    }

    fn transposed(m: &'a DenseMatrix) -> Self {
        View {
            data: &m.data,
            rows: m.cols,
            cols: m.rows,
            row_stride: 1,
            col_stride: m.cols as isize,
        }
    }
}

fn gemm(op: &'static str, a: View<'_>, b: View<'_>) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op,
            left: (a.rows, a.cols),
            right: (b.rows, b.cols),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    if a.rows == 0 || b.cols == 0 || a.cols == 0 {
        return Ok(out);
    }
    // SAFETY: the views describe in-bounds strided layouts of the borrowed
    // slices, and `out` is a freshly allocated rows×cols row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            0.0,
            out.data.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
    out.ensure_finite(op)?;
    Ok(out)
}

/// Matrix product `a · b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    gemm("matmul", View::plain(a), View::plain(b))
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    gemm("matmul_tn", View::transposed(a), View::plain(b))
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    gemm("matmul_nt", View::plain(a), View::transposed(b))
}

pub fn relu(a: &DenseMatrix) -> DenseMatrix {
    a.map(|v| v.max(0.0))
}

/// Divides each row by `‖row‖₂ + epsilon`.
pub fn l2_row_normalize(a: &DenseMatrix, epsilon: f64) -> DenseMatrix {
    l2_row_normalize_with_norms(a, epsilon).0
}

/// Like [`l2_row_normalize`], also returning each row's Euclidean norm.
pub fn l2_row_normalize_with_norms(a: &DenseMatrix, epsilon: f64) -> (DenseMatrix, Vec<f64>) {
    let mut out = a.clone();
    let mut norms = Vec::with_capacity(a.rows);
    if a.cols == 0 {
        return (out, vec![0.0; a.rows]);
    }
    for r in out.data.chunks_exact_mut(a.cols) {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(norm);
        let denom = norm + epsilon;
        if denom > 0.0 {
            r.iter_mut().for_each(|v| *v /= denom);
        }
    }
    (out, norms)
}

/// Seedable generator; equal seeds and equal call sequences give equal draws.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent generator for a named sub-stream of the same seed.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng(inner)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform draw from `[low, high)`.
    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        if low == high {
            return low;
        }
        Uniform::new(low, high).sample(&mut self.0)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        Uniform::new(0, n).sample(&mut self.0)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn assert_close(a: &DenseMatrix, b: &DenseMatrix, rel: f64) {
        assert_eq!(a.shape(), b.shape());
        let scale = b.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= rel * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_identity() {
        let id = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&id, &b).unwrap(), b);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(3);
        let a = DenseMatrix::random_uniform(5, 7, -1.0, 1.0, &mut rng);
        let b = DenseMatrix::random_uniform(7, 3, -1.0, 1.0, &mut rng);
        assert_close(&matmul(&a, &b).unwrap(), &naive_matmul(&a, &b), 1e-10);
    }

    #[test]
    fn matmul_random_sizes_up_to_64() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let (m, k, n) = (1 + rng.below(64), 1 + rng.below(64), 1 + rng.below(64));
            let a = DenseMatrix::random_uniform(m, k, -2.0, 2.0, &mut rng);
            let b = DenseMatrix::random_uniform(k, n, -2.0, 2.0, &mut rng);
            assert_close(&matmul(&a, &b).unwrap(), &naive_matmul(&a, &b), 1e-10);
        }
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = Rng::new(5);
        let a = DenseMatrix::random_uniform(6, 4, -1.0, 1.0, &mut rng);
        let b = DenseMatrix::random_uniform(6, 3, -1.0, 1.0, &mut rng);
        let c = DenseMatrix::random_uniform(5, 4, -1.0, 1.0, &mut rng);
        assert_close(
            &matmul_tn(&a, &b).unwrap(),
            &naive_matmul(&a.transpose(), &b),
            1e-12,
        );
        assert_close(
            &matmul_nt(&a, &c).unwrap(),
            &naive_matmul(&a, &c.transpose()),
            1e-12,
        );
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn non_finite_inputs_rejected() {
        assert!(DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        let a = DenseMatrix::filled(1, 1, 1e200);
        assert!(matches!(matmul(&a, &a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn relu_cases() {
        let a = DenseMatrix::from_rows(&[[-1.0, 0.0, 2.0]]).unwrap();
        assert_eq!(relu(&a).data(), &[0.0, 0.0, 2.0]);
        let neg = DenseMatrix::filled(3, 2, -0.5);
        assert_eq!(relu(&neg), DenseMatrix::zeros(3, 2));
        let pos = DenseMatrix::from_rows(&[[0.5, 1.5], [2.0, 3.0]]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn normalize_three_four_five() {
        let a = DenseMatrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let n = l2_row_normalize(&a, 0.0);
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_zero_row_stays_zero() {
        let a = DenseMatrix::zeros(2, 4);
        for eps in [0.0, NORM_EPSILON] {
            let n = l2_row_normalize(&a, eps);
            assert!(n.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let mut rng = Rng::new(9);
        let a = DenseMatrix::random_uniform(10, 6, -3.0, 3.0, &mut rng);
        let n = l2_row_normalize(&a, 0.0);
        for r in n.row_iter() {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rng_reproducible_for_10k_draws() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::stream(42, 1);
        let mut d = Rng::new(42);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn broadcast_and_column_sums() {
        let mut a = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[[10.0, 20.0]]).unwrap();
        a.add_row_broadcast(&b).unwrap();
        assert_eq!(a.data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(a.column_sums().data(), &[24.0, 46.0]);
        assert!(a.add_row_broadcast(&DenseMatrix::zeros(1, 3)).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalized_norm_bounds(
                row in prop::collection::vec(-10.0f64..10.0, 1..20),
                eps in 1e-9f64..1e-2,
            ) {
                let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assume!(norm > 1e-6);
                let a = DenseMatrix::from_rows(&[row]).unwrap();
                let n = l2_row_normalize(&a, eps);
                let out = n.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(out <= 1.0 + 1e-12);
                prop_assert!(out >= 1.0 - eps / norm - 1e-12);
            }
        }
    }
}
