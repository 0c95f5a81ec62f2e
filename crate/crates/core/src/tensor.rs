//! Dense row-major tensors and the handful of numeric kernels everything
//! else builds on.
//!
//! [`Tensor`] is a flat `Vec` of scalars plus a shape; two-dimensional
//! matrices dominate the codebase. Values are required to stay finite:
//! constructors that accept external data validate, and compute paths that
//! could overflow (softmax) are written so they cannot. The optional `grad`
//! slot carries a same-shape gradient accumulator when a tensor is exported
//! from an autodiff tape.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    /// Build from shape and data; checks element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "element {i} of new tensor with shape {shape:?} is {v}"
                )));
            }
        }
        Ok(Tensor { shape, data, grad: None })
    }

    /// Internal constructor for freshly computed data that is known finite by
    /// construction (or checked by the caller).
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); numel], grad: None }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], grad: None }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows of a 2-D tensor (or 1 for a 1-D tensor).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => 1,
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Number of columns of a 1-D or 2-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Attached gradient, if one has been exported onto this tensor.
    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<F>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    /// Error if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{context}: element {i} is {v}")));
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, F> {
        self.data.iter()
    }

    /// Maximum absolute value (0 for an empty tensor).
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }

    /// Convert element-wise to another precision.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        )
    }
}

/// Plain matrix product `a @ b` for row-major 2-D tensors.
///
/// This is the value-level kernel; the autodiff tape wraps it with a backward
/// rule. Loop order is chosen so the inner loop runs over contiguous memory.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "matmul expects 2-D tensors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, ka) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner dims disagree: {m}x{ka} @ {kb}x{n}"
        )));
    }
    let mut out = vec![F::zero(); m * n];
    matmul_into(a.as_slice(), b.as_slice(), m, ka, n, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `out +=`-free accumulate of `a[m x k] @ b[k x n]` into `out[m x n]`
/// (overwrites `out`).
pub(crate) fn matmul_into<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    out.fill(F::zero());
    matmul_acc(a, b, m, k, n, out);
}

/// Accumulating product: `out[m x n] += a[m x k] @ b[k x n]`.
pub(crate) fn matmul_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// Accumulating product with the left operand transposed:
/// `out[k x n] += a^T[k x m] @ b[m x n]` where `a` is stored `[m x k]`.
pub(crate) fn matmul_at_b_acc<F: Real>(
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// Accumulating product with the right operand transposed:
/// `out[m x k] += a[m x n] @ b^T[n x k]` where `b` is stored `[k x n]`.
pub(crate) fn matmul_a_bt_acc<F: Real>(
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// Softmax over the positions where `valid` is true; invalid outputs are 0.
///
/// Stabilized by max subtraction; the normalizer is accumulated in `f64` so
/// the valid outputs sum to 1 well inside 1e-6 even in 32-bit mode. At least
/// one position must be valid.
pub fn softmax_masked<F: Real>(logits: &Tensor<F>, valid: &[bool]) -> Result<Tensor<F>> {
    if logits.shape().len() != 1 {
        return Err(Error::Shape(format!(
            "softmax_masked expects a 1-D tensor, got {:?}",
            logits.shape()
        )));
    }
    if logits.numel() != valid.len() {
        return Err(Error::Shape(format!(
            "softmax_masked: {} logits vs {} mask entries",
            logits.numel(),
            valid.len()
        )));
    }
    let mut out = vec![F::zero(); valid.len()];
    softmax_masked_into(logits.as_slice(), valid, &mut out)?;
    Ok(Tensor::from_parts(vec![valid.len()], out))
}

pub(crate) fn softmax_masked_into<F: Real>(
    logits: &[F],
    valid: &[bool],
    out: &mut [F],
) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for (l, &v) in logits.iter().zip(valid.iter()) {
        if v {
            max = max.max(l.to_f64());
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::Invariant(
            "softmax over an empty valid set".to_string(),
        ));
    }
    let mut denom = 0.0f64;
    for ((o, l), &v) in out.iter_mut().zip(logits.iter()).zip(valid.iter()) {
        if v {
            let e = (l.to_f64() - max).exp();
            denom += e;
            *o = F::from_f64(e);
        } else {
            *o = F::zero();
        }
    }
    let inv = F::from_f64(1.0 / denom);
    for (o, &v) in out.iter_mut().zip(valid.iter()) {
        if v {
            *o = *o * inv;
        }
    }
    Ok(())
}

/// Softmax over a dense prefix `logits[0..len]` written into `out[0..len]`.
pub(crate) fn softmax_dense_into<F: Real>(logits: &[F], out: &mut [F]) {
    debug_assert!(!logits.is_empty());
    debug_assert_eq!(logits.len(), out.len());
    let mut max = f64::NEG_INFINITY;
    for l in logits {
        max = max.max(l.to_f64());
    }
    let mut denom = 0.0f64;
    for (o, l) in out.iter_mut().zip(logits.iter()) {
        let e = (l.to_f64() - max).exp();
        denom += e;
        *o = F::from_f64(e);
    }
    let inv = F::from_f64(1.0 / denom);
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Independent normal entries with the given standard deviation.
    Normal(f64),
    /// Normal with std scaled by 1/sqrt(rows); `rows` is the fan-in for the
    /// `x @ W` convention used throughout.
    ScaledNormal(f64),
}

/// Draw a `[rows x cols]` matrix from `rng` under `scheme`.
///
/// Deterministic given the rng state; the draw order is row-major.
pub fn init_matrix<F: Real>(rows: usize, cols: usize, scheme: Init, rng: &mut Rng) -> Tensor<F> {
    let std = match scheme {
        Init::Zeros => return Tensor::zeros(vec![rows, cols]),
        Init::Normal(s) => s,
        Init::ScaledNormal(s) => s / (rows as f64).sqrt(),
    };
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(F::from_f64(rng.normal_f64() * std));
    }
    Tensor::from_parts(vec![rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn new_rejects_shape_mismatch() {
        let r = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn new_rejects_non_finite() {
        let r = Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        let r = Tensor::<f64>::new(vec![1], vec![f64::INFINITY]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn matmul_identity_is_identity() {
        let a = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let i = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let p = matmul(&a, &i).unwrap();
        assert_eq!(p.as_slice(), a.as_slice());
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![4, 2]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_small_example() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let p = matmul(&a, &b).unwrap();
        assert_eq!(p.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = Rng::new(1);
        let a: Tensor<f64> = init_matrix(4, 3, Init::Normal(1.0), &mut rng);
        let b: Tensor<f64> = init_matrix(4, 5, Init::Normal(1.0), &mut rng);
        // a^T @ b via helper.
        let mut out = vec![0.0; 3 * 5];
        matmul_at_b_acc(a.as_slice(), b.as_slice(), 4, 3, 5, &mut out);
        // Explicit transpose then plain matmul.
        let mut at = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                at[j * 4 + i] = a.at(i, j);
            }
        }
        let atm = Tensor::from_parts(vec![3, 4], at);
        let want = matmul(&atm, &b).unwrap();
        for (x, y) in out.iter().zip(want.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }

        // a @ c^T via helper, c stored [k x n] with n matching a's cols.
        let c: Tensor<f64> = init_matrix(6, 3, Init::Normal(1.0), &mut rng);
        let a2: Tensor<f64> = init_matrix(2, 3, Init::Normal(1.0), &mut rng);
        let mut out2 = vec![0.0; 2 * 6];
        matmul_a_bt_acc(a2.as_slice(), c.as_slice(), 2, 6, 3, &mut out2);
        let mut ct = vec![0.0; 18];
        for i in 0..6 {
            for j in 0..3 {
                ct[j * 6 + i] = c.at(i, j);
            }
        }
        let ctm = Tensor::from_parts(vec![3, 6], ct);
        let want2 = matmul(&a2, &ctm).unwrap();
        for (x, y) in out2.iter().zip(want2.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_logits_uniform_output() {
        let logits = t(vec![4], vec![2.0; 4]);
        let p = softmax_masked(&logits, &[true; 4]).unwrap();
        for &v in p.as_slice() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        // Independent oracle: exp(x_i) / sum over valid, computed directly.
        let logits = t(vec![3], vec![0.1, -1.3, 2.4]);
        let valid = [true, false, true];
        let p = softmax_masked(&logits, &valid).unwrap();
        let denom = 0.1f64.exp() + 2.4f64.exp();
        assert!((p.as_slice()[0] - 0.1f64.exp() / denom).abs() < 1e-12);
        assert_eq!(p.as_slice()[1], 0.0);
        assert!((p.as_slice()[2] - 2.4f64.exp() / denom).abs() < 1e-12);
    }

    #[test]
    fn softmax_single_valid_position_is_one() {
        let logits = t(vec![3], vec![5.0, -2.0, 0.0]);
        let p = softmax_masked(&logits, &[false, true, false]).unwrap();
        assert_eq!(p.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_empty_mask_is_error() {
        let logits = t(vec![2], vec![0.0, 1.0]);
        assert!(matches!(
            softmax_masked(&logits, &[false, false]),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let logits = Tensor::<f32>::new(vec![3], vec![500.0, 499.0, -500.0]).unwrap();
        let p = softmax_masked(&logits, &[true; 3]).unwrap();
        p.check_finite("softmax").unwrap();
        let s: f64 = p.as_slice().iter().map(|v| v.to_f64()).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_sums_to_one_in_f32_across_sizes() {
        let mut rng = Rng::new(17);
        for &n in &[2usize, 17, 128, 1024] {
            let data: Vec<f32> = (0..n)
                .map(|_| (rng.normal_f64() * 3.0) as f32)
                .collect();
            let logits = Tensor::<f32>::new(vec![n], data).unwrap();
            let p = softmax_masked(&logits, &vec![true; n]).unwrap();
            let s: f64 = p.as_slice().iter().map(|v| v.to_f64()).sum();
            assert!((s - 1.0).abs() < 1e-6, "n={n} sum={s}");
        }
    }

    #[test]
    fn init_zeros_is_zero() {
        let mut rng = Rng::new(0);
        let m: Tensor<f64> = init_matrix(3, 3, Init::Zeros, &mut rng);
        assert!(m.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_normal_sample_std_close() {
        let mut rng = Rng::new(21);
        let m: Tensor<f64> = init_matrix(1000, 1000, Init::Normal(0.02), &mut rng);
        let n = m.numel() as f64;
        let mean: f64 = m.as_slice().iter().sum::<f64>() / n;
        let var: f64 = m.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!(
            (std - 0.02).abs() / 0.02 < 0.05,
            "sample std {std} vs requested 0.02"
        );
    }

    #[test]
    fn init_is_deterministic_given_seed() {
        let mut r1 = Rng::new(9);
        let mut r2 = Rng::new(9);
        let a: Tensor<f32> = init_matrix(8, 8, Init::Normal(0.1), &mut r1);
        let b: Tensor<f32> = init_matrix(8, 8, Init::Normal(0.1), &mut r2);
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn scaled_normal_shrinks_with_fan_in() {
        let mut rng = Rng::new(33);
        let m: Tensor<f64> = init_matrix(400, 400, Init::ScaledNormal(1.0), &mut rng);
        let n = m.numel() as f64;
        let var: f64 = m.as_slice().iter().map(|v| v * v).sum::<f64>() / n;
        // Expected std = 1/sqrt(400) = 0.05.
        assert!((var.sqrt() - 0.05).abs() < 0.005);
    }
}
