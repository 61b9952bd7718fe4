//! Dense row-major matrices and the handful of differentiable primitives the
//! actor and critic are built from.
//!
//! Every forward kernel has a matching backward kernel. The batched kernels
//! treat a `Matrix` of shape `(batch, features)` as one sample per row; the
//! vector forms (`affine`, `layer_norm`, ...) are the single-sample versions.

use crate::error::{dim_err, Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return dim_err(format!("matrix shape must be positive, got {rows}x{cols}"));
        }
        if data.len() != rows * cols {
            return dim_err(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite matrix entry at index {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        Self::new(rows.len(), cols, rows.concat())
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return dim_err(format!("vstack: {} vs {} columns", self.cols, other.cols));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }
}

/// `c = a·b + beta·c` where `a` is logically `m×k` and `b` is `k×n`. A
/// transposed flag means the operand is stored as its transpose, row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
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

fn check_affine_shapes(w: &Matrix, b: &[f64], in_dim: usize) -> Result<()> {
    if w.cols != in_dim {
        return dim_err(format!("affine: W has {} cols, input has {in_dim}", w.cols));
    }
    if b.len() != w.rows {
        return dim_err(format!("affine: W has {} rows, bias has {}", w.rows, b.len()));
    }
    Ok(())
}

/// `W x + b` for a single input vector.
pub fn affine(w: &Matrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_affine_shapes(w, b, x.len())?;
    Ok((0..w.rows)
        .map(|i| {
            w.row(i)
                .iter()
                .zip(x)
                .fold(b[i], |acc, (wij, xj)| acc + wij * xj)
        })
        .collect())
}

/// Row-wise `x W^T + b` over a batch of inputs.
pub fn affine_batch(w: &Matrix, b: &[f64], x: &Matrix) -> Result<Matrix> {
    check_affine_shapes(w, b, x.cols)?;
    let mut out = Matrix::zeros(x.rows, w.rows);
    for r in 0..x.rows {
        out.row_mut(r).copy_from_slice(b);
    }
    gemm(x.rows, x.cols, w.rows, &x.data, false, &w.data, true, 1.0, &mut out.data);
    Ok(out)
}

pub struct AffineGrads {
    pub d_input: Matrix,
    pub d_weight: Matrix,
    pub d_bias: Vec<f64>,
}

/// Backward pass of [`affine_batch`] given the upstream gradient `d_out`.
pub fn affine_backward(w: &Matrix, x: &Matrix, d_out: &Matrix) -> Result<AffineGrads> {
    if d_out.rows != x.rows || d_out.cols != w.rows || x.cols != w.cols {
        return dim_err("affine_backward: shape mismatch");
    }
    let batch = x.rows;
    let mut d_input = Matrix::zeros(batch, w.cols);
    gemm(batch, w.rows, w.cols, &d_out.data, false, &w.data, false, 0.0, &mut d_input.data);
    let mut d_weight = Matrix::zeros(w.rows, w.cols);
    gemm(w.rows, batch, w.cols, &d_out.data, true, &x.data, false, 0.0, &mut d_weight.data);
    let mut d_bias = vec![0.0; w.rows];
    for r in 0..batch {
        for (db, g) in d_bias.iter_mut().zip(d_out.row(r)) {
            *db += g;
        }
    }
    Ok(AffineGrads {
        d_input,
        d_weight,
        d_bias,
    })
}

/// Per-row statistics kept from the layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

fn normalize_row(x: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv_std;
    }
    inv_std
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return dim_err("layer_norm: empty input");
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return dim_err("layer_norm: gain/bias length differs from input");
    }
    let mut out = vec![0.0; x.len()];
    normalize_row(x, eps, &mut out);
    for ((o, g), b) in out.iter_mut().zip(gain).zip(bias) {
        *o = g * *o + b;
    }
    Ok(out)
}

pub fn layer_norm_batch(
    x: &Matrix,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<(Matrix, LayerNormCache)> {
    if gain.len() != x.cols || bias.len() != x.cols {
        return dim_err("layer_norm: gain/bias length differs from input");
    }
    let mut normalized = Matrix::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        inv_std.push(normalize_row(x.row(r), eps, normalized.row_mut(r)));
        for ((o, xh), (g, b)) in out
            .row_mut(r)
            .iter_mut()
            .zip(normalized.row(r))
            .zip(gain.iter().zip(bias))
        {
            *o = g * xh + b;
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

pub struct LayerNormGrads {
    pub d_input: Matrix,
    pub d_gain: Vec<f64>,
    pub d_bias: Vec<f64>,
}

pub fn layer_norm_backward(
    d_out: &Matrix,
    cache: &LayerNormCache,
    gain: &[f64],
) -> Result<LayerNormGrads> {
    let (rows, cols) = d_out.shape();
    if cache.normalized.shape() != (rows, cols) || gain.len() != cols {
        return dim_err("layer_norm_backward: shape mismatch");
    }
    let n = cols as f64;
    let mut d_input = Matrix::zeros(rows, cols);
    let mut d_gain = vec![0.0; cols];
    let mut d_bias = vec![0.0; cols];
    let mut d_norm = vec![0.0; cols];
    for r in 0..rows {
        let dy = d_out.row(r);
        let xh = cache.normalized.row(r);
        let mut mean_d = 0.0;
        let mut mean_d_xh = 0.0;
        for j in 0..cols {
            d_gain[j] += dy[j] * xh[j];
            d_bias[j] += dy[j];
            d_norm[j] = dy[j] * gain[j];
            mean_d += d_norm[j];
            mean_d_xh += d_norm[j] * xh[j];
        }
        mean_d /= n;
        mean_d_xh /= n;
        let s = cache.inv_std[r];
        for (j, dx) in d_input.row_mut(r).iter_mut().enumerate() {
            *dx = s * (d_norm[j] - mean_d - xh[j] * mean_d_xh);
        }
    }
    Ok(LayerNormGrads {
        d_input,
        d_gain,
        d_bias,
    })
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn tanh_act(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

pub fn relu_in_place(x: &mut Matrix) {
    for v in &mut x.data {
        *v = v.max(0.0);
    }
}

/// Gradient through relu, using the forward output. The subgradient at zero is 0.
pub fn relu_backward(d_out: &mut Matrix, output: &Matrix) {
    for (g, y) in d_out.data.iter_mut().zip(&output.data) {
        if *y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Gradient through tanh, using the forward output.
pub fn tanh_backward(d_out: &mut Matrix, output: &Matrix) {
    for (g, y) in d_out.data.iter_mut().zip(&output.data) {
        *g *= 1.0 - y * y;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// In-place Adam update with bias correction at step `t` (1-based).
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return dim_err("adam: parameter, gradient and moment lengths differ");
    }
    if t == 0 {
        return Err(Error::Config("adam: step count starts at 1".into()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("adam: non-finite gradient at index {i}")));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Pure form of [`adam_update`]: returns the updated `(param, m, v)`.
pub fn adam_step(
    param: &Matrix,
    grad: &Matrix,
    m: &Matrix,
    v: &Matrix,
    t: u64,
    cfg: &AdamConfig,
) -> Result<(Matrix, Matrix, Matrix)> {
    let shape = param.shape();
    if grad.shape() != shape || m.shape() != shape || v.shape() != shape {
        return dim_err("adam: shapes differ");
    }
    let (mut p, mut m, mut v) = (param.clone(), m.clone(), v.clone());
    adam_update(&mut p.data, &grad.data, &mut m.data, &mut v.data, t, cfg)?;
    Ok((p, m, v))
}

/// Largest relative error between `analytic_grad` and central differences of
/// `f` at `x`.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic_grad: &[f64],
    h: f64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::Config("finite_diff_check: step must be positive".into()));
    }
    if analytic_grad.len() != x.len() {
        return dim_err("finite_diff_check: gradient length differs from x");
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("finite_diff_check: f not finite near coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (numeric - analytic_grad[i]).abs() / (analytic_grad[i].abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn affine_examples() {
        let out = affine(&Matrix::identity(2), &[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert_eq!(out, vec![3.0, 4.0]);
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(affine(&w, &[1.0, 1.0], &[1.0, 1.0]).unwrap(), vec![4.0, 8.0]);
        let out = affine(&Matrix::zeros(2, 2), &[5.0, 6.0], &[-7.5, 1e3]).unwrap();
        assert_eq!(out, vec![5.0, 6.0]);
    }

    #[test]
    fn affine_shape_errors() {
        let w = Matrix::zeros(2, 3);
        assert!(matches!(affine(&w, &[0.0; 2], &[1.0; 2]), Err(Error::Dimension(_))));
        assert!(matches!(affine(&w, &[0.0; 3], &[1.0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn batch_affine_matches_vector_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_matrix(&mut rng, 7, 5);
        let b: Vec<f64> = (0..7).map(|i| i as f64 * 0.1).collect();
        let x = random_matrix(&mut rng, 4, 5);
        let batch = affine_batch(&w, &b, &x).unwrap();
        for r in 0..4 {
            let single = affine(&w, &b, x.row(r)).unwrap();
            for (a, s) in batch.row(r).iter().zip(&single) {
                assert_abs_diff_eq!(a, s, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0; 3];
        let zeros = [0.0; 3];
        let out = layer_norm(&[1.0, 2.0, 3.0], &ones, &zeros, 1e-6).unwrap();
        // sigma^2 = 2/3, so the extremes are +-1/sqrt(2/3 + eps)
        let expected = 1.0 / (2.0f64 / 3.0 + 1e-6).sqrt();
        assert_abs_diff_eq!(out[0], -expected, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[2], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(out[2], 1.2247, epsilon = 1e-4);

        let bias = [0.5, -1.0, 2.0];
        assert_eq!(layer_norm(&[4.0; 3], &ones, &bias, 1e-6).unwrap(), bias.to_vec());
        assert_eq!(layer_norm(&[1.0, 2.0, 3.0], &zeros, &bias, 1e-6).unwrap(), bias.to_vec());
        assert!(matches!(layer_norm(&[], &[], &[], 1e-6), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x: Vec<f64> = (0..64).map(|_| rng.random_range(-10.0..10.0)).collect();
            let y = layer_norm(&x, &[1.0; 64], &[0.0; 64], LAYER_NORM_EPS).unwrap();
            let mean = y.iter().sum::<f64>() / 64.0;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn activations() {
        assert_eq!(relu(&[-1.0, 2.0]), vec![0.0, 2.0]);
        assert_eq!(tanh_act(&[0.0]), vec![0.0]);
        assert_abs_diff_eq!(tanh_act(&[1e9])[0], 1.0);
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let one = Matrix::new(1, 1, vec![1.0]).unwrap();
        let zero = Matrix::zeros(1, 1);
        let (p, m, v) = adam_step(&one, &one, &zero, &zero, 1, &cfg).unwrap();
        assert_abs_diff_eq!(p.get(0, 0), 0.9, epsilon = 1e-7);
        assert_abs_diff_eq!(m.get(0, 0), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(v.get(0, 0), 0.001, epsilon = 1e-15);

        let param = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 - 2.5);
        let g0 = Matrix::zeros(3, 2);
        let (p, _, _) = adam_step(&param, &g0, &g0, &g0, 1, &cfg).unwrap();
        assert_eq!(p, param);

        let grad = Matrix::from_fn(3, 2, |i, j| (i as f64 - j as f64) * 0.3);
        let a = adam_step(&param, &grad, &g0, &g0, 4, &cfg).unwrap();
        let b = adam_step(&param, &grad, &g0, &g0, 4, &cfg).unwrap();
        assert_eq!(a.0.as_slice(), b.0.as_slice());
        assert_eq!(a.1.as_slice(), b.1.as_slice());
        assert_eq!(a.2.as_slice(), b.2.as_slice());
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let cfg = AdamConfig::with_lr(1e-3);
        let mut p = [0.0, 0.0];
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        let err = adam_update(&mut p, &[1.0, f64::NAN], &mut m, &mut v, 1, &cfg);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn finite_diff_checker_examples() {
        let err = finite_diff_check(|x| x[0] * x[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
        let err = finite_diff_check(|x| 2.0 * x[0] - 3.0 * x[1] + 1.0, &[0.3, -7.0], &[2.0, -3.0], 1e-5)
            .unwrap();
        assert!(err < 1e-9, "{err}");
        let err = finite_diff_check(|x| x[0] * x[0], &[3.0], &[12.0], 1e-5).unwrap();
        assert_abs_diff_eq!(err, 0.5, epsilon = 1e-6);
        let err = finite_diff_check(|x| x[0] * x[0], &[3.0], &[3.0], 1e-5).unwrap();
        assert_abs_diff_eq!(err, 1.0, epsilon = 1e-6);
        assert!(matches!(
            finite_diff_check(|_| f64::NAN, &[0.0], &[0.0], 1e-5),
            Err(Error::Numeric(_))
        ));
    }

    /// Scalar loss sum(c ⊙ f(x)) for a random contraction `c`, so the upstream
    /// gradient is not uniform.
    fn weighted_sum(m: &Matrix, c: &Matrix) -> f64 {
        m.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_matrix(&mut rng, 4, 3);
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = random_matrix(&mut rng, 2, 3);
        let c = random_matrix(&mut rng, 2, 4);
        let grads = affine_backward(&w, &x, &c).unwrap();

        let wdata = w.as_slice().to_vec();
        let err = finite_diff_check(
            |p| {
                let w = Matrix::new(4, 3, p.to_vec()).unwrap();
                weighted_sum(&affine_batch(&w, &b, &x).unwrap(), &c)
            },
            &wdata,
            grads.d_weight.as_slice(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "dW {err}");
        let err = finite_diff_check(
            |p| weighted_sum(&affine_batch(&w, p, &x).unwrap(), &c),
            &b,
            &grads.d_bias,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "db {err}");
        let err = finite_diff_check(
            |p| {
                let x = Matrix::new(2, 3, p.to_vec()).unwrap();
                weighted_sum(&affine_batch(&w, &b, &x).unwrap(), &c)
            },
            x.as_slice(),
            grads.d_input.as_slice(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "dx {err}");
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let x = random_matrix(&mut rng, 3, 6);
            let gain: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
            let bias: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
            let c = random_matrix(&mut rng, 3, 6);
            let (_, cache) = layer_norm_batch(&x, &gain, &bias, LAYER_NORM_EPS).unwrap();
            let g = layer_norm_backward(&c, &cache, &gain).unwrap();
            let loss = |x: &Matrix, gain: &[f64], bias: &[f64]| {
                weighted_sum(&layer_norm_batch(x, gain, bias, LAYER_NORM_EPS).unwrap().0, &c)
            };
            let err = finite_diff_check(
                |p| loss(&Matrix::new(3, 6, p.to_vec()).unwrap(), &gain, &bias),
                x.as_slice(),
                g.d_input.as_slice(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "dx {err}");
            let err = finite_diff_check(|p| loss(&x, p, &bias), &gain, &g.d_gain, 1e-5).unwrap();
            assert!(err < 1e-5, "dgain {err}");
            let err = finite_diff_check(|p| loss(&x, &gain, p), &bias, &g.d_bias, 1e-5).unwrap();
            assert!(err < 1e-5, "dbias {err}");
        }
    }

    #[test]
    fn pointwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // keep relu inputs away from the kink
        let x: Vec<f64> = (0..8)
            .map(|_| {
                let v: f64 = rng.random_range(0.1..2.0);
                if rng.random_bool(0.5) { v } else { -v }
            })
            .collect();
        let c: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dot = |a: &[f64]| a.iter().zip(&c).map(|(p, q)| p * q).sum::<f64>();

        let y = Matrix::new(1, 8, relu(&x)).unwrap();
        let mut d = Matrix::new(1, 8, c.clone()).unwrap();
        relu_backward(&mut d, &y);
        let err = finite_diff_check(|p| dot(&relu(p)), &x, d.as_slice(), 1e-5).unwrap();
        assert!(err < 1e-5, "relu {err}");

        let y = Matrix::new(1, 8, tanh_act(&x)).unwrap();
        let mut d = Matrix::new(1, 8, c.clone()).unwrap();
        tanh_backward(&mut d, &y);
        let err = finite_diff_check(|p| dot(&tanh_act(p)), &x, d.as_slice(), 1e-5).unwrap();
        assert!(err < 1e-5, "tanh {err}");
    }

    #[test]
    fn matrix_rejects_bad_shapes() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
        assert!(matches!(Matrix::new(1, 1, vec![f64::INFINITY]), Err(Error::Numeric(_))));
    }
}
