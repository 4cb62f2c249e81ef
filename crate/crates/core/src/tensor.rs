//! Dense matrices of 64-bit reals.
//!
//! A [`Tensor`] is logically a `rows × cols` matrix stored row-major;
//! vectors are 1×n or n×1 and scalars are 1×1. There is no implicit
//! broadcasting: every operation either requires exactly matching shapes or
//! documents its own rule (matmul, outer product, reductions).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "dims must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// 1×n row vector.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// n×1 column vector.
    pub fn column(values: &[f64]) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::shape("from_rows: no rows"));
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("from_rows: ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    /// Identity-like matrix: `value` on the main diagonal, zero elsewhere.
    pub fn diagonal(rows: usize, cols: usize, value: f64) -> Self {
        let mut t = Tensor::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            t.data[i * cols + i] = value;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_vector(&self) -> bool {
        self.rows == 1 || self.cols == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = value;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "expected scalar, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    // ---- arithmetic ----------------------------------------------------

    fn same_shape(&self, rhs: &Tensor, op: &str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "add")?;
        Ok(self.zip(rhs, |a, b| a + b))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "sub")?;
        Ok(self.zip(rhs, |a, b| a - b))
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "mul")?;
        Ok(self.zip(rhs, |a, b| a * b))
    }

    fn zip(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn ln(&self) -> Result<Tensor> {
        if let Some(bad) = self.data.iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.map(f64::ln))
    }

    pub fn max_with(&self, c: f64) -> Tensor {
        self.map(|v| v.max(c))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[p * n..(p + 1) * n];
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            rows: m,
            cols: n,
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.numel()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Outer product of two vectors: `len(self) × len(rhs)`.
    pub fn outer(&self, rhs: &Tensor) -> Result<Tensor> {
        if !self.is_vector() || !rhs.is_vector() {
            return Err(Error::shape(format!(
                "outer requires two vectors, got {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let m = self.numel();
        let n = rhs.numel();
        let mut data = Vec::with_capacity(m * n);
        for &a in &self.data {
            for &b in &rhs.data {
                data.push(a * b);
            }
        }
        Ok(Tensor {
            rows: m,
            cols: n,
            data,
        })
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// Per-row sums as an n×1 column.
    pub fn row_sums(&self) -> Tensor {
        let data = (0..self.rows)
            .map(|r| self.row_slice(r).iter().sum())
            .collect();
        Tensor {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// Per-column sums as a 1×m row.
    pub fn col_sums(&self) -> Tensor {
        let mut data = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (acc, &v) in data.iter_mut().zip(self.row_slice(r)) {
                *acc += v;
            }
        }
        Tensor {
            rows: 1,
            cols: self.cols,
            data,
        }
    }

    pub fn row_means(&self) -> Tensor {
        self.row_sums().scale(1.0 / self.cols as f64)
    }

    pub fn col_means(&self) -> Tensor {
        self.col_sums().scale(1.0 / self.rows as f64)
    }

    // ---- softmax family ------------------------------------------------

    /// Softmax within each row; max-subtracted for stability.
    pub fn softmax_rows(&self) -> Tensor {
        let mut out = self.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            softmax_in_place(row, 1);
        }
        out
    }

    /// Softmax within each column; max-subtracted for stability.
    pub fn softmax_cols(&self) -> Tensor {
        let mut out = self.clone();
        let cols = out.cols;
        for c in 0..cols {
            softmax_in_place(&mut out.data[c..], cols);
        }
        out
    }

    /// Numerically stable `x - logsumexp(x)` within each row.
    pub fn log_softmax_rows(&self) -> Tensor {
        let mut out = self.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        out
    }

    // ---- structure -----------------------------------------------------

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::shape(format!(
                    "gather_rows: index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row_slice(i));
        }
        Tensor::new(indices.len(), self.cols, data)
    }

    pub fn concat_rows(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.cols != rhs.cols {
            return Err(Error::shape(format!(
                "concat_rows: {} vs {} columns",
                self.cols, rhs.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&rhs.data);
        Tensor::new(self.rows + rhs.rows, self.cols, data)
    }

    /// Per-row index of the maximum entry (first on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row_slice(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// In-place stable softmax over the strided slice `data[0], data[stride], ...`.
fn softmax_in_place(data: &mut [f64], stride: usize) {
    let mut max = f64::NEG_INFINITY;
    let mut i = 0;
    while i < data.len() {
        max = max.max(data[i]);
        i += stride;
    }
    let mut total = 0.0;
    let mut i = 0;
    while i < data.len() {
        data[i] = (data[i] - max).exp();
        total += data[i];
        i += stride;
    }
    let mut i = 0;
    while i < data.len() {
        data[i] /= total;
        i += stride;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
        assert_eq!(c.shape(), (2, 1));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_of_uniform_row_is_uniform() {
        let t = Tensor::row(&[0.0, 0.0, 0.0]);
        let s = t.softmax_rows();
        for &v in s.data() {
            assert_close(v, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn softmax_rows_is_shift_invariant() {
        let t = Tensor::row(&[1000.0, 1001.0, 1002.0]);
        let s = t.softmax_rows();
        let base = Tensor::row(&[0.0, 1.0, 2.0]).softmax_rows();
        for (a, b) in s.data().iter().zip(base.data()) {
            assert_close(*a, *b, 1e-12);
        }
        assert!(s.all_finite());
    }

    #[test]
    fn softmax_cols_columns_sum_to_one() {
        let t =
            Tensor::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, -1.0], &[2.0, 2.0, 2.0]]).unwrap();
        let s = t.softmax_cols();
        let sums = s.col_sums();
        for &v in sums.data() {
            assert_close(v, 1.0, 1e-12);
        }
        assert!(s.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn outer_hand_arithmetic() {
        let u = Tensor::row(&[1.0, 2.0]);
        let v = Tensor::row(&[3.0, 4.0, 5.0]);
        let o = u.outer(&v).unwrap();
        assert_eq!(o.shape(), (2, 3));
        assert_eq!(o.data(), &[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn outer_rejects_matrices() {
        let m = Tensor::zeros(2, 2);
        let v = Tensor::row(&[1.0]);
        assert!(matches!(m.outer(&v), Err(Error::Shape(_))));
    }

    #[test]
    fn ln_domain_error() {
        let t = Tensor::row(&[1.0, 0.0]);
        assert!(matches!(t.ln(), Err(Error::Domain(_))));
    }

    #[test]
    fn reductions() {
        let t = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(t.sum(), 10.0);
        assert_eq!(t.mean(), 2.5);
        assert_eq!(t.row_sums().data(), &[3.0, 7.0]);
        assert_eq!(t.col_sums().data(), &[4.0, 6.0]);
        assert_eq!(t.row_means().data(), &[1.5, 3.5]);
        assert_eq!(t.col_means().data(), &[2.0, 3.0]);
    }

    #[test]
    fn gather_and_concat() {
        let t = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        let g = t.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        assert!(t.gather_rows(&[3]).is_err());

        let top = Tensor::row(&[9.0, 9.0]);
        let cat = top.concat_rows(&t).unwrap();
        assert_eq!(cat.shape(), (4, 2));
        assert_eq!(cat.row_slice(0), &[9.0, 9.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let t = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let tt = t.transpose();
        assert_eq!(tt.shape(), (3, 2));
        assert_eq!(tt.transpose(), t);
    }

    #[test]
    fn data_length_must_match_dims() {
        assert!(Tensor::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Tensor::new(0, 2, vec![]).is_err());
    }
}
