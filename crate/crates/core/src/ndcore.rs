//! Dense row-major matrices and the scalar kernels the rest of the crate
//! builds on (stable softmax, `p ln p`).
//!
//! Everything is `f64`. Uncertainty differences are small, and the
//! decomposition identity checks need the extra precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed when checking that a value is a probability or that a row
/// sums to one.
pub const PROB_TOLERANCE: f64 = 1e-9;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot be viewed as {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Array2 { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Array2 {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Array2::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |r| self.row(r))
    }

    /// Gathers the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Array2 {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Array2 {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Array2 {
        let mut out = Array2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array2 {
        Array2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::Shape(format!(
                "bias of length {} added to matrix with {} columns",
                bias.len(),
                self.cols
            )));
        }
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Column sums, one entry per column.
    pub fn sum_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }
}

/// `a · b`.
pub fn matmul(a: &Array2, b: &Array2) -> Result<Array2> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Array2::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, without materializing the transpose.
pub fn matmul_bt(a: &Array2, b: &Array2) -> Result<Array2> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_bt of {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Array2::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ai, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`, without materializing the transpose.
pub fn matmul_at(a: &Array2, b: &Array2) -> Result<Array2> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "matmul_at of ({}x{})ᵀ by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Array2::zeros(a.cols, b.cols);
    for n in 0..a.rows {
        let bn = b.row(n);
        for (i, &ani) in a.row(n).iter().enumerate() {
            if ani == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &v) in out_row.iter_mut().zip(bn) {
                *o += ani * v;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the compiler can vectorize
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `ln Σ exp(xᵢ)` computed with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// `p ln p` with `0 ln 0 = 0`.
pub fn xlogx(p: f64) -> Result<f64> {
    if !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&p) {
        return Err(Error::Domain(format!("{p} is not a probability")));
    }
    Ok(xlogx_unchecked(p))
}

#[inline]
pub(crate) fn xlogx_unchecked(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

/// N×C matrix whose rows are categorical distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Array2);

impl ProbMatrix {
    /// Wraps `probs` after checking every row is a distribution within
    /// [`PROB_TOLERANCE`].
    pub fn new(probs: Array2) -> Result<Self> {
        for (i, row) in probs.row_iter().enumerate() {
            check_distribution(row).map_err(|e| Error::Domain(format!("row {i}: {e}")))?;
        }
        Ok(ProbMatrix(probs))
    }

    pub(crate) fn new_unchecked(probs: Array2) -> Self {
        ProbMatrix(probs)
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn c(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn as_array(&self) -> &Array2 {
        &self.0
    }

    pub fn into_array(self) -> Array2 {
        self.0
    }

    /// Index of the largest entry of each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.0.row_iter().map(argmax).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub(crate) fn check_distribution(row: &[f64]) -> std::result::Result<(), String> {
    if row.is_empty() {
        return Err("empty distribution".into());
    }
    if let Some(p) = row
        .iter()
        .find(|&&p| !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&p))
    {
        return Err(format!("entry {p} is not a probability"));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > PROB_TOLERANCE {
        return Err(format!("entries sum to {s}"));
    }
    Ok(())
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2) -> ProbMatrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    ProbMatrix(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = Array2::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &Array2::identity(2)).unwrap(), a);
        let z = Array2::zeros(3, 2);
        let b = Array2::from_rows(&[[5.0, -1.0, 2.0], [0.5, 7.0, 1.0]]).unwrap();
        assert_eq!(matmul(&z, &b).unwrap(), Array2::zeros(3, 3));
    }

    #[test]
    fn matmul_hand_product() {
        let a = Array2::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Array2::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Array2::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
        assert!(matches!(matmul_bt(&a, &Array2::zeros(2, 2)), Err(Error::Shape(_))));
        assert!(matches!(matmul_at(&a, &Array2::zeros(3, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Array2::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.0, 4.0]]).unwrap();
        let b = Array2::from_rows(&[[2.0, 1.0, -1.0], [0.0, 3.0, 2.0], [1.0, 1.0, 1.0]])
            .unwrap();
        assert_eq!(
            matmul_bt(&a, &b).unwrap(),
            matmul(&a, &b.transpose()).unwrap()
        );
        let c = Array2::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(
            matmul_at(&a, &c).unwrap(),
            matmul(&a.transpose(), &c).unwrap()
        );
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&Array2::zeros(1, 10));
        assert!(p.row(0).iter().all(|&v| close(v, 0.1, 1e-15)));

        let p = softmax_rows(&Array2::from_rows(&[[1000.0, 0.0]]).unwrap());
        assert!(close(p.row(0)[0], 1.0, 1e-15));
        assert!(p.row(0)[1] >= 0.0 && p.row(0)[1] < 1e-300);

        let p = softmax_rows(&Array2::from_rows(&[[1f64.ln(), 3f64.ln()]]).unwrap());
        assert!(close(p.row(0)[0], 0.25, 1e-15));
        assert!(close(p.row(0)[1], 0.75, 1e-15));
    }

    #[test]
    fn xlogx_examples() {
        assert_eq!(xlogx(0.0).unwrap(), 0.0);
        assert_eq!(xlogx(1.0).unwrap(), 0.0);
        assert!(close(xlogx(0.5).unwrap(), 0.5 * 0.5f64.ln(), 1e-16));
        assert!(close(xlogx(0.5).unwrap(), -0.346_573_590_279_972_6, 1e-15));
        assert!(matches!(xlogx(1.1), Err(Error::Domain(_))));
        assert!(matches!(xlogx(-0.01), Err(Error::Domain(_))));
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!(close(log_sum_exp(&[1000.0, 1000.0]), 1000.0 + 2f64.ln(), 1e-12));
        assert!(close(log_sum_exp(&[0.0, 0.0, 0.0]), 3f64.ln(), 1e-15));
    }

    #[test]
    fn prob_matrix_rejects_bad_rows() {
        assert!(ProbMatrix::new(Array2::from_rows(&[[0.5, 0.4]]).unwrap()).is_err());
        assert!(ProbMatrix::new(Array2::from_rows(&[[1.2, -0.2]]).unwrap()).is_err());
        assert!(ProbMatrix::new(Array2::from_rows(&[[0.3, 0.7]]).unwrap()).is_ok());
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2> {
        prop::collection::vec(-5.0f64..5.0, rows * cols)
            .prop_map(move |v| Array2::from_vec(rows, cols, v).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(logits in small_matrix(4, 7)) {
            let p = softmax_rows(&logits.map(|v| v * 40.0));
            for r in 0..p.n() {
                let s: f64 = p.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_shift_invariant(logits in small_matrix(3, 5), shift in -100.0f64..100.0) {
            let a = softmax_rows(&logits);
            let b = softmax_rows(&logits.map(|v| v + shift));
            for (x, y) in a.as_array().as_slice().iter().zip(b.as_array().as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_preserves_order(logits in small_matrix(2, 6)) {
            let p = softmax_rows(&logits);
            for r in 0..2 {
                for i in 0..6 {
                    for j in 0..6 {
                        if logits.get(r, i) < logits.get(r, j) {
                            prop_assert!(p.row(r)[i] <= p.row(r)[j]);
                        }
                    }
                }
            }
        }

        #[test]
        fn matmul_is_associative(
            a in small_matrix(3, 4),
            b in small_matrix(4, 2),
            c in small_matrix(2, 5),
        ) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
