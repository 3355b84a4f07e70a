//! Dense rank-≤3 tensors of `f64` and the slice kernels behind the tape ops.

use core::fmt;

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Up to three axes, row-major.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    dims: [usize; 3],
    rank: u8,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > 3 {
            return Err(Error::BadShape { dims: dims.to_vec(), len: 0 });
        }
        let mut d = [1; 3];
        d[..dims.len()].copy_from_slice(dims);
        Ok(Shape { dims: d, rank: dims.len() as u8 })
    }

    pub fn scalar() -> Self {
        Shape { dims: [1; 3], rank: 0 }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    /// Length of the last axis (1 for scalars).
    pub fn last(&self) -> usize {
        self.dims().last().copied().unwrap_or(1)
    }

    /// Number of last-axis vectors.
    pub fn rows(&self) -> usize {
        self.numel().checked_div(self.last()).unwrap_or(0)
    }

    /// Same leading axes, last axis replaced.
    pub fn with_last(&self, last: usize) -> Self {
        let mut s = *self;
        if s.rank == 0 {
            s.rank = 1;
        }
        s.dims[s.rank as usize - 1] = last;
        s
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.dims().iter().enumerate() {
            if i > 0 {
                write!(f, "×")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// A value buffer with a matching gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn from_vec(dims: &[usize], values: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != values.len() {
            return Err(Error::BadShape { dims: dims.to_vec(), len: values.len() });
        }
        Ok(Self::with_shape(shape, values))
    }

    pub(crate) fn with_shape(shape: Shape, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), values.len());
        let grad = vec![0.0; values.len()];
        Tensor { shape, values, grad, requires_grad: false }
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Ok(Self::with_shape(shape, vec![0.0; shape.numel()]))
    }

    pub fn scalar(v: f64) -> Self {
        Self::with_shape(Shape::scalar(), vec![v])
    }

    /// Builds a rank-2 tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Contract("rows of unequal length"));
        }
        let values = rows.iter().flatten().copied().collect();
        Self::from_vec(&[rows.len(), width], values)
    }

    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.values[0]
    }

    /// Row `i` of the last axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.shape.last();
        &self.values[i * w..(i + 1) * w]
    }

    pub(crate) fn take_grad(&mut self) -> Vec<f64> {
        core::mem::take(&mut self.grad)
    }

    pub(crate) fn put_grad(&mut self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.values.len());
        self.grad = g;
    }
}

// ── kernels ──────────────────────────────────────────────────────────

/// `out[rows×m] += a[rows×k] · w[k×m]`.
///
/// For each output element the products are added in increasing `k`, so the
/// result is bitwise equal to the textbook triple loop starting from zero.
pub(crate) fn matmul_acc(a: &[f64], w: &[f64], out: &mut [f64], rows: usize, k: usize, m: usize) {
    for i in 0..rows {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * m..(i + 1) * m];
        for (kk, &aik) in a_row.iter().enumerate() {
            let w_row = &w[kk * m..(kk + 1) * m];
            for (o, &wv) in out_row.iter_mut().zip(w_row) {
                *o += aik * wv;
            }
        }
    }
}

/// `da[rows×k] += dout[rows×m] · wᵀ`.
///
/// Works on a transposed copy of `w` so the inner loop is a contiguous axpy.
/// Into a zeroed `da` the sums match a per-element dot product bitwise.
pub(crate) fn matmul_grad_lhs(dout: &[f64], w: &[f64], da: &mut [f64], rows: usize, k: usize, m: usize) {
    let mut wt = vec![0.0; k * m];
    for kk in 0..k {
        for j in 0..m {
            wt[j * k + kk] = w[kk * m + j];
        }
    }
    for i in 0..rows {
        let d_row = &dout[i * m..(i + 1) * m];
        let da_row = &mut da[i * k..(i + 1) * k];
        for (j, &dij) in d_row.iter().enumerate() {
            for (g, &wv) in da_row.iter_mut().zip(&wt[j * k..(j + 1) * k]) {
                *g += dij * wv;
            }
        }
    }
}

/// `dw[k×m] += aᵀ · dout[rows×m]`.
pub(crate) fn matmul_grad_rhs(a: &[f64], dout: &[f64], dw: &mut [f64], rows: usize, k: usize, m: usize) {
    for i in 0..rows {
        let a_row = &a[i * k..(i + 1) * k];
        let d_row = &dout[i * m..(i + 1) * m];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let dw_row = &mut dw[kk * m..(kk + 1) * m];
            for (g, &dv) in dw_row.iter_mut().zip(d_row) {
                *g += aik * dv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_K * x * x * x)))
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + GELU_K * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Max-subtracted softmax of one vector, written into `out`.
pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = libm::exp(v - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `log Σ exp(x)` with max subtraction.
pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.iter().map(|&v| libm::exp(v - max)).sum();
    max + libm::log(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_accessors() {
        let s = Shape::new(&[2, 3, 4]).unwrap();
        assert_eq!(s.numel(), 24);
        assert_eq!(s.rows(), 6);
        assert_eq!(s.last(), 4);
        assert_eq!(s.with_last(5).dims(), &[2, 3, 5]);
        assert!(Shape::new(&[1, 1, 1, 1]).is_err());
        assert_eq!(Shape::scalar().numel(), 1);
    }

    #[test]
    fn tensor_invariants() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.grad().len(), t.values().len());
        assert!(t.grad().iter().all(|&g| g == 0.0));
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8, "x={x}");
        }
    }
}
