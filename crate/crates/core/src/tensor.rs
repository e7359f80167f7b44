//! Dense row-major `f64` tensors and the elementwise/row-wise kernels the
//! encoders are built from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.cols()).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx [x Φ(x)] = Φ(x) + x φ(x)
pub fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Exact GELU, `x·Φ(x)`, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Normalize one row in place to zero mean and unit variance; returns the
/// reciprocal standard deviation.
pub(crate) fn normalize_row(row: &mut [f64], eps: f64) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * rstd;
    }
    rstd
}

/// Layer normalization over the last axis followed by `gain ⊙ x̂ + bias`.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> Result<Tensor> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            actual: gain.len().min(bias.len()),
        });
    }
    let mut out = x.clone();
    if c == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_mut(c) {
        normalize_row(row, eps);
        for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
            *v = *v * g + b;
        }
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    if c > 0 {
        out.data.chunks_mut(c).for_each(softmax_in_place);
    }
    out
}

/// `c = op(a)·op(b) + beta·c` for row-major slices, where `op` is an
/// optional transpose. `op(a)` is m×k, `op(b)` is k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address them in bounds for both layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x·W + b` for `rows` input rows; `w` is [in × out].
pub(crate) fn linear(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.shape[0], w.shape[1]);
    let mut y = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        y.extend_from_slice(&b.data);
    }
    gemm(rows, din, dout, x, false, &w.data, false, 1.0, &mut y);
    y
}

/// Accumulate the gradients of `y = x·W + b` given `dy`. Writes (not adds)
/// the input gradient into `dx` when requested.
pub(crate) fn linear_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    w: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
    dx: Option<&mut [f64]>,
) {
    let (din, dout) = (w.shape[0], w.shape[1]);
    gemm(din, rows, dout, x, true, dy, false, 1.0, &mut dw.data);
    for r in dy.chunks(dout) {
        for (g, v) in db.data.iter_mut().zip(r) {
            *g += v;
        }
    }
    if let Some(dx) = dx {
        gemm(rows, dout, din, dy, false, &w.data, true, 0.0, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gelu_values() {
        let g = gelu(&Tensor::from_vec(&[3], vec![0.0, 10.0, 1.0]).unwrap());
        assert_eq!(g.data()[0], 0.0);
        assert!((g.data()[1] - 10.0).abs() < 1e-6);
        // 1·Φ(1), Φ(1) = 0.841344746068543
        assert!((g.data()[2] - 0.841_344_746_068_543).abs() < 1e-12);
        for x in [-3.0, -0.5, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let x = Tensor::filled(&[1, 4], 3.5);
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let x = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);
        assert!(layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).is_err());
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_rows(&Tensor::filled(&[2, 4], 0.7));
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = softmax_rows(&Tensor::from_vec(&[1, 2], vec![1000.0, 0.0]).unwrap());
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
    }

    #[test]
    fn gemm_transposes() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // aᵀ stored as 3x2 -> use trans
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [1.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, 0.0, &mut c2);
        assert_eq!(c2, c);
        gemm(2, 3, 2, &a, false, &b, false, 1.0, &mut c2);
        assert_eq!(c2, [116.0, 128.0, 278.0, 308.0]);
    }

    proptest! {
        #[test]
        fn layer_norm_normalizes(row in prop::collection::vec(-50.0f64..50.0, 2..40)) {
            let n = row.len();
            prop_assume!(row.iter().any(|v| (v - row[0]).abs() > 1e-3));
            let x = Tensor::from_vec(&[1, n], row).unwrap();
            let y = layer_norm(&x, &vec![1.0; n], &vec![0.0; n], 1e-12).unwrap();
            let mean = y.data().iter().sum::<f64>() / n as f64;
            let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }

        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-700.0f64..700.0, 1..30)) {
            let n = row.len();
            let y = softmax_rows(&Tensor::from_vec(&[1, n], row).unwrap());
            prop_assert!(y.is_finite());
            prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
