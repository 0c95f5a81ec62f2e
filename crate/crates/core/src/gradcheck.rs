//! Gradient verification by central finite differences.
//!
//! The oracle is independent of the tape's backward rules: it re-evaluates
//! the loss at `p +/- eps` per coordinate and compares the secant slope with
//! the analytic gradient. Checks always run in 64-bit precision; relative
//! error uses `max(|analytic|, |numeric|, 1e-12)` as denominator so that
//! exact zeros on both sides compare clean.

use crate::error::{Error, Result};
use crate::tape::{Corruption, Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check over a set of parameter tensors.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error across every coordinate of every parameter.
    pub max_rel_err: f64,
    /// Index (into the params slice) of the worst parameter.
    pub worst_param: usize,
    /// Flat coordinate of the worst entry.
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Check `loss`'s analytic gradients against central differences.
///
/// `loss` must be a deterministic scalar function of the leaves it is handed;
/// it is called once on a gradient-enabled tape for the analytic side and
/// `2 * total_coords` times on value-only tapes for the numeric side.
pub fn grad_check<L>(params: &[Tensor<f64>], eps: f64, loss: L) -> Result<GradCheckReport>
where
    L: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(params, eps, None, loss)
}

/// [`grad_check`] with an optional backward-rule corruption installed on the
/// analytic tape (negative-control fixture).
pub fn grad_check_with<L>(
    params: &[Tensor<f64>],
    eps: f64,
    corrupt: Option<Corruption>,
    mut loss: L,
) -> Result<GradCheckReport>
where
    L: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("grad_check eps must be > 0, got {eps}")));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    if let Some(c) = corrupt {
        tape.corrupt_backward(c);
    }
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = loss(&mut tape, &vars)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::Shape(
            "grad_check loss must return a scalar".to_string(),
        ));
    }
    let f0 = tape.value(root).as_slice()[0];
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {f0}")));
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    drop(tape);

    // Numeric pass.
    let mut eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.leaf(p.clone())).collect();
        let r = loss(&mut t, &vs)?;
        let f = t.value(r).as_slice()[0];
        if !f.is_finite() {
            return Err(Error::NonFinite(format!("perturbed loss evaluated to {f}")));
        }
        Ok(f)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for pi in 0..params.len() {
        for ci in 0..params[pi].numel() {
            let orig = work[pi].as_slice()[ci];
            work[pi].as_mut_slice()[ci] = orig + eps;
            let fp = eval(&work)?;
            work[pi].as_mut_slice()[ci] = orig - eps;
            let fm = eval(&work)?;
            work[pi].as_mut_slice()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = pi;
                report.worst_coord = ci;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
