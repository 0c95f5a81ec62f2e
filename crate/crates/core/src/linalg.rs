//! Numerical rank via a one-sided Jacobi singular value decomposition.
//!
//! The rank probe used by the diagnostics suite needs trustworthy small
//! singular values, so rank is computed from an SVD of the matrix itself
//! rather than from a Gram matrix (which would square the condition number
//! and drown tiny singular values in rounding noise). All arithmetic is
//! f64 regardless of the input element type.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 64;
const CONVERGENCE: f64 = 1e-13;

/// Singular values of a 2-D tensor, sorted descending, computed by
/// one-sided Jacobi rotations.
pub fn singular_values<F: Real>(a: &Tensor<F>) -> Result<Vec<f64>> {
    if a.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "singular values need a matrix, got shape {:?}",
            a.shape()
        )));
    }
    let (m, n) = (a.rows(), a.cols());
    if m == 0 || n == 0 {
        return Ok(Vec::new());
    }
    // One-sided Jacobi wants at least as many rows as columns; the singular
    // values of the transpose are identical.
    let (rows, cols, transposed) = if m >= n { (m, n, false) } else { (n, m, true) };
    let mut w = vec![0.0f64; rows * cols];
    for i in 0..m {
        for j in 0..n {
            let v = a.at(i, j).to_f64();
            if transposed {
                w[j * cols + i] = v;
            } else {
                w[i * cols + j] = v;
            }
        }
    }

    let col_dot = |w: &[f64], p: usize, q: usize| -> f64 {
        let mut acc = 0.0;
        for r in 0..rows {
            acc += w[r * cols + p] * w[r * cols + q];
        }
        acc
    };

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = col_dot(&w, p, p);
                let beta = col_dot(&w, q, q);
                let gamma = col_dot(&w, p, q);
                let denom = (alpha * beta).sqrt();
                if denom > 0.0 {
                    off = off.max(gamma.abs() / denom);
                }
                if gamma.abs() <= CONVERGENCE * denom || denom == 0.0 {
                    continue;
                }
                // Rotate columns p and q to zero their inner product.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let vp = w[r * cols + p];
                    let vq = w[r * cols + q];
                    w[r * cols + p] = c * vp - s * vq;
                    w[r * cols + q] = s * vp + c * vq;
                }
            }
        }
        if off <= CONVERGENCE {
            break;
        }
    }

    let mut sigma: Vec<f64> = (0..cols).map(|p| col_dot(&w, p, p).sqrt()).collect();
    sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sigma)
}

/// Number of singular values exceeding `tol * sigma_max`.
///
/// A matrix whose largest singular value is zero has rank zero.
pub fn numerical_rank<F: Real>(a: &Tensor<F>, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("rank tolerance must be positive, got {tol}")));
    }
    let sigma = singular_values(a)?;
    let max = sigma.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sigma.iter().filter(|&&s| s > tol * max).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::matmul;

    fn rand(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal_f64()).collect()).unwrap()
    }

    #[test]
    fn identity_has_full_rank_and_unit_singular_values() {
        let mut eye = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            eye.as_mut_slice()[i * 4 + i] = 1.0;
        }
        let sigma = singular_values(&eye).unwrap();
        for s in &sigma {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(numerical_rank(&eye, 1e-6).unwrap(), 4);
    }

    #[test]
    fn outer_product_has_rank_one() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [2.0, 1.0, -1.0];
        let mut data = Vec::new();
        for a in u {
            for b in v {
                data.push(a * b);
            }
        }
        let m = Tensor::new(vec![4, 3], data).unwrap();
        assert_eq!(numerical_rank(&m, 1e-6).unwrap(), 1);
        // sigma_1 = |u| * |v|, the rest are numerically zero.
        let sigma = singular_values(&m).unwrap();
        let want = (1.0f64 + 4.0 + 0.25 + 9.0).sqrt() * (4.0f64 + 1.0 + 1.0).sqrt();
        assert!((sigma[0] - want).abs() < 1e-10);
        assert!(sigma[1] < 1e-10);
    }

    #[test]
    fn product_rank_is_bounded_by_inner_dimension() {
        let a = rand(vec![8, 3], 1);
        let b = rand(vec![3, 8], 2);
        let m = matmul(&a, &b).unwrap();
        assert_eq!(numerical_rank(&m, 1e-6).unwrap(), 3);
    }

    #[test]
    fn known_two_by_two_singular_values() {
        // [[3, 0], [4, 5]]: squared singular values are 45 and 5.
        let m = Tensor::new(vec![2, 2], vec![3.0, 0.0, 4.0, 5.0]).unwrap();
        let sigma = singular_values(&m).unwrap();
        assert!((sigma[0] - 45.0f64.sqrt()).abs() < 1e-12);
        assert!((sigma[1] - 5.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn wide_matrices_match_their_transpose() {
        let a = rand(vec![3, 9], 7);
        let mut at = Tensor::zeros(vec![9, 3]);
        for i in 0..3 {
            for j in 0..9 {
                at.as_mut_slice()[j * 3 + i] = a.at(i, j);
            }
        }
        let sa = singular_values(&a).unwrap();
        let sat = singular_values(&at).unwrap();
        for (x, y) in sa.iter().zip(&sat) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn repeated_rows_collapse_rank() {
        let row = rand(vec![1, 6], 3);
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(row.as_slice());
        }
        let m = Tensor::new(vec![5, 6], data).unwrap();
        assert_eq!(numerical_rank(&m, 1e-6).unwrap(), 1);
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let m = Tensor::<f64>::zeros(vec![3, 3]);
        assert_eq!(numerical_rank(&m, 1e-6).unwrap(), 0);
    }

    #[test]
    fn frobenius_norm_is_preserved() {
        let m = rand(vec![6, 5], 11);
        let frob: f64 = m.iter().map(|v| v * v).sum::<f64>();
        let sigma = singular_values(&m).unwrap();
        let sum_sq: f64 = sigma.iter().map(|s| s * s).sum();
        assert!((frob - sum_sq).abs() < 1e-9 * frob.max(1.0));
    }
}
