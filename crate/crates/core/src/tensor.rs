//! Dense row-major `f64` matrices and the handful of kernels the models need.
//!
//! All products go through `matrixmultiply::dgemm`, which is single-threaded
//! and deterministic, so identical inputs give bit-identical outputs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match buffer");
        Mat { rows, cols, data }
    }

    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Gathers rows by index into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }
}

/// Strided view used to address sub-blocks (attention heads) without copying.
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
}

impl<'a> View<'a> {
    pub fn full(m: &'a Mat) -> Self {
        View {
            data: &m.data,
            offset: 0,
            rows: m.rows,
            cols: m.cols,
            row_stride: m.cols,
        }
    }

    pub fn cols(m: &'a Mat, start: usize, width: usize) -> Self {
        assert!(start + width <= m.cols);
        View {
            data: &m.data,
            offset: start,
            rows: m.rows,
            cols: width,
            row_stride: m.cols,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.row_stride + self.cols - 1;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

/// Mutable counterpart of [`View`].
pub struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
}

impl<'a> ViewMut<'a> {
    pub fn full(m: &'a mut Mat) -> Self {
        let (rows, cols) = (m.rows, m.cols);
        ViewMut {
            data: &mut m.data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
        }
    }

    pub fn cols(m: &'a mut Mat, start: usize, width: usize) -> Self {
        assert!(start + width <= m.cols);
        let (rows, stride) = (m.rows, m.cols);
        ViewMut {
            data: &mut m.data,
            offset: start,
            rows,
            cols: width,
            row_stride: stride,
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
pub fn gemm_view(
    alpha: f64,
    a: View<'_>,
    trans_a: bool,
    b: View<'_>,
    trans_b: bool,
    beta: f64,
    c: ViewMut<'_>,
) {
    a.check();
    b.check();
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if c.rows > 0 {
        let last = c.offset + (c.rows - 1) * c.row_stride + c.cols - 1;
        assert!(last < c.data.len(), "output view out of bounds");
    }
    let (rsa, csa) = if trans_a {
        (1isize, a.row_stride as isize)
    } else {
        (a.row_stride as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, b.row_stride as isize)
    } else {
        (b.row_stride as isize, 1isize)
    };
    // SAFETY: every view was bounds-checked above against its backing slice,
    // and `c` is a unique borrow disjoint from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            rsa,
            csa,
            b.data.as_ptr().add(b.offset),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            1,
        );
    }
}

/// Inverted-dropout multipliers: `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<R: Rng>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 - p;
    (0..len)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// `a * b`
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm_view(1.0, View::full(a), false, View::full(b), false, 0.0, ViewMut::full(&mut c));
    c
}

/// `a * b^T`
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.rows);
    gemm_view(1.0, View::full(a), false, View::full(b), true, 0.0, ViewMut::full(&mut c));
    c
}

/// `c += a^T * b`
pub fn add_matmul_tn(c: &mut Mat, a: &Mat, b: &Mat) {
    gemm_view(1.0, View::full(a), true, View::full(b), false, 1.0, ViewMut::full(c));
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log-sum-exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax of a slice into a new vector.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Mean softmax cross-entropy over rows of `logits` against `targets`, with
/// the gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Mat, targets: &[usize]) -> (f64, Mat) {
    assert_eq!(logits.rows, targets.len());
    let n = targets.len().max(1) as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = grad.row_mut(r);
        let lse = log_sum_exp(row);
        loss += lse - row[t];
        for x in row.iter_mut() {
            *x = (*x - lse).exp() / n;
        }
        row[t] -= 1.0 / n;
    }
    (loss / n, grad)
}
