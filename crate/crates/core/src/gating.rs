//! Sigmoid gates around the attention core.
//!
//! Two gates, both driven by the residual stream: the value gate scales
//! each (grouped) value vector before attention mixes them, and the output
//! gate scales each head's output before the output projection recombines
//! heads. Both are plain `x * sigmoid(h W + b)` constructions composed from
//! tape primitives, so their gradients come from the engine's own rules
//! rather than bespoke backward code.
//!
//! Unlike the indexer, the gates sit on the differentiable path: gradients
//! flow through them into the residual stream and the gate parameters.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{MacBucket, Tape, Var};
use crate::tensor::{init_matrix, Init, Tensor};

/// Learned parameters of both gates.
///
/// `wg_v`/`bg_v` produce the value gate (`d -> n_kv * d_k`), `wg_o`/`bg_o`
/// the per-head output gate (`d -> n_h * d_k`).
#[derive(Debug, Clone)]
pub struct GateParams<F: Real> {
    pub wg_v: Tensor<F>,
    pub bg_v: Tensor<F>,
    pub wg_o: Tensor<F>,
    pub bg_o: Tensor<F>,
}

impl<F: Real> GateParams<F> {
    /// Fresh parameters: weights ~ normal(0.02), biases zero, so both gates
    /// start close to (but not exactly) one half.
    pub fn init(d: usize, n_kv: usize, n_h: usize, d_k: usize, rng: &mut Rng) -> Self {
        GateParams {
            wg_v: init_matrix(d, n_kv * d_k, Init::Normal(0.02), rng),
            bg_v: Tensor::zeros(vec![n_kv * d_k]),
            wg_o: init_matrix(d, n_h * d_k, Init::Normal(0.02), rng),
            bg_o: Tensor::zeros(vec![n_h * d_k]),
        }
    }

    pub fn zeros(d: usize, n_kv: usize, n_h: usize, d_k: usize) -> Self {
        GateParams {
            wg_v: Tensor::zeros(vec![d, n_kv * d_k]),
            bg_v: Tensor::zeros(vec![n_kv * d_k]),
            wg_o: Tensor::zeros(vec![d, n_h * d_k]),
            bg_o: Tensor::zeros(vec![n_h * d_k]),
        }
    }

    /// Total parameter count for the given dimensions.
    pub fn param_count(d: usize, n_kv: usize, n_h: usize, d_k: usize) -> usize {
        d * n_kv * d_k + n_kv * d_k + d * n_h * d_k + n_h * d_k
    }

    pub fn validate(&self, d: usize, n_kv: usize, n_h: usize, d_k: usize) -> Result<()> {
        if self.wg_v.shape() != [d, n_kv * d_k] || self.bg_v.shape() != [n_kv * d_k] {
            return Err(Error::Shape("value gate parameter shapes".to_string()));
        }
        if self.wg_o.shape() != [d, n_h * d_k] || self.bg_o.shape() != [n_h * d_k] {
            return Err(Error::Shape("output gate parameter shapes".to_string()));
        }
        Ok(())
    }
}

/// Tape handles for one layer's gate parameters.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub wg_v: Var,
    pub bg_v: Var,
    pub wg_o: Var,
    pub bg_o: Var,
}

pub fn bind_gates<F: Real>(tape: &mut Tape<F>, p: &GateParams<F>) -> GateVars {
    GateVars {
        wg_v: tape.leaf(p.wg_v.clone()),
        bg_v: tape.leaf(p.bg_v.clone()),
        wg_o: tape.leaf(p.wg_o.clone()),
        bg_o: tape.leaf(p.bg_o.clone()),
    }
}

/// `x * sigmoid(h W + b)`, the shared shape of both gates.
/// Returns `(gated, gate)` where `gate` is the sigmoid tensor itself (for
/// diagnostics). The projection and the element-wise multiply are charged
/// to the gating cost bucket.
fn apply_gate<F: Real>(tape: &mut Tape<F>, x: Var, h: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let proj = tape.matmul_counted(h, w, MacBucket::Gating)?;
    let shifted = tape.add_row_broadcast(proj, b)?;
    let gate = tape.sigmoid_op(shifted);
    let gated = tape.mul_counted(x, gate, MacBucket::Gating)?;
    Ok((gated, gate))
}

/// Value gate: scale the `[L x n_kv*d_k]` value rows by `sigmoid(h wg_v + bg_v)`.
pub fn value_gate<F: Real>(
    tape: &mut Tape<F>,
    v: Var,
    h: Var,
    gates: &GateVars,
) -> Result<(Var, Var)> {
    apply_gate(tape, v, h, gates.wg_v, gates.bg_v)
}

/// Output gate: scale the `[L x n_h*d_k]` concatenated head outputs by
/// `sigmoid(h wg_o + bg_o)`, per head and channel, before the output
/// projection.
pub fn output_gate<F: Real>(
    tape: &mut Tape<F>,
    o: Var,
    h: Var,
    gates: &GateVars,
) -> Result<(Var, Var)> {
    apply_gate(tape, o, h, gates.wg_o, gates.bg_o)
}

/// Summary statistics of a tensor of gate activations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateStats {
    pub mean: f64,
    pub frac_below_half: f64,
    pub min: f64,
    pub max: f64,
}

/// Compute statistics over gate values, enforcing that every value lies
/// strictly inside `(0, 1)` — anything else means the tensor is not the
/// output of a finite-logit sigmoid.
pub fn gate_stats<F: Real>(gates: &Tensor<F>) -> Result<GateStats> {
    if gates.numel() == 0 {
        return Err(Error::Invariant("gate stats over an empty tensor".to_string()));
    }
    let mut sum = 0.0f64;
    let mut below = 0usize;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &g in gates.iter() {
        let g = g.to_f64();
        if !(g > 0.0 && g < 1.0) {
            return Err(Error::Invariant(format!(
                "gate value {g} outside the open interval (0, 1)"
            )));
        }
        sum += g;
        if g < 0.5 {
            below += 1;
        }
        min = min.min(g);
        max = max.max(g);
    }
    let n = gates.numel() as f64;
    Ok(GateStats {
        mean: sum / n,
        frac_below_half: below as f64 / n,
        min,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::real::sigmoid;

    fn rand(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal_f64() * scale).collect()).unwrap()
    }

    #[test]
    fn zero_parameters_halve_the_input_exactly() {
        let (l, d, n_kv, d_k) = (4, 8, 2, 4);
        let h = rand(vec![l, d], 1, 1.0);
        let v = rand(vec![l, n_kv * d_k], 2, 1.0);
        let p = GateParams::zeros(d, n_kv, 4, d_k);
        let mut tape = Tape::<f64>::no_grad();
        let hv = tape.constant(h);
        let vv = tape.constant(v.clone());
        let gv = bind_gates(&mut tape, &p);
        let (gated, gate) = value_gate(&mut tape, vv, hv, &gv).unwrap();
        for (out, inp) in tape.value(gated).iter().zip(v.iter()) {
            assert_eq!(*out, 0.5 * *inp);
        }
        for g in tape.value(gate).iter() {
            assert_eq!(*g, 0.5);
        }
    }

    #[test]
    fn gate_matches_scalar_oracle() {
        let (l, d, n_h, d_k) = (3, 6, 2, 4);
        let h = rand(vec![l, d], 3, 0.7);
        let o = rand(vec![l, n_h * d_k], 4, 0.7);
        let mut rng = Rng::new(5);
        let p = GateParams::init(d, 1, n_h, d_k, &mut rng);
        let mut tape = Tape::<f64>::no_grad();
        let hv = tape.constant(h.clone());
        let ov = tape.constant(o.clone());
        let gv = bind_gates(&mut tape, &p);
        let (gated, _) = output_gate(&mut tape, ov, hv, &gv).unwrap();
        for t in 0..l {
            for c in 0..n_h * d_k {
                let mut z = p.bg_o.as_slice()[c];
                for x in 0..d {
                    z += h.at(t, x) * p.wg_o.at(x, c);
                }
                let want = o.at(t, c) * sigmoid(z);
                let got = tape.value(gated).at(t, c);
                assert!((got - want).abs() < 1e-12, "t={t} c={c}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn strongly_negative_bias_closes_the_gate() {
        let (l, d, n_kv, d_k) = (3, 4, 1, 4);
        let h = rand(vec![l, d], 6, 0.5);
        let v = rand(vec![l, n_kv * d_k], 7, 1.0);
        let mut p = GateParams::zeros(d, n_kv, 2, d_k);
        p.bg_v = Tensor::full(vec![n_kv * d_k], -30.0);
        let mut tape = Tape::<f64>::no_grad();
        let hv = tape.constant(h);
        let vv = tape.constant(v);
        let gv = bind_gates(&mut tape, &p);
        let (gated, gate) = value_gate(&mut tape, vv, hv, &gv).unwrap();
        for out in tape.value(gated).iter() {
            assert!(out.abs() < 1e-10);
        }
        // ... but the gate is still strictly positive.
        for g in tape.value(gate).iter() {
            assert!(*g > 0.0);
        }
    }

    #[test]
    fn gate_gradients_pass_fd_check() {
        let (l, d, n_h, d_k) = (3, 5, 2, 3);
        let h0 = rand(vec![l, d], 8, 0.6);
        let o0 = rand(vec![l, n_h * d_k], 9, 0.6);
        let mut rng = Rng::new(10);
        let wg = init_matrix::<f64>(d, n_h * d_k, Init::Normal(0.3), &mut rng);
        let bg = rand(vec![n_h * d_k], 11, 0.2);
        // Check gradients w.r.t. the gate parameters AND both data inputs.
        let report = grad_check(
            &[wg, bg, h0, o0],
            1e-5,
            |tape, vars| {
                let gv = GateVars {
                    wg_v: vars[0],
                    bg_v: vars[1],
                    wg_o: vars[0],
                    bg_o: vars[1],
                };
                let (gated, _) = output_gate(tape, vars[3], vars[2], &gv)?;
                let sq = tape.mul(gated, gated)?;
                Ok(tape.sum(sq))
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn gate_stats_hand_example() {
        let g = Tensor::new(vec![4], vec![0.25f64, 0.75, 0.4, 0.9]).unwrap();
        let stats = gate_stats(&g).unwrap();
        assert!((stats.mean - 0.575).abs() < 1e-12);
        assert_eq!(stats.frac_below_half, 0.5);
        assert_eq!(stats.min, 0.25);
        assert_eq!(stats.max, 0.9);
    }

    #[test]
    fn gate_stats_reject_out_of_range_values() {
        for bad in [0.0f64, 1.0, -0.1, 1.5] {
            let g = Tensor::new(vec![2], vec![0.5, bad]).unwrap();
            assert!(
                matches!(gate_stats(&g), Err(Error::Invariant(_))),
                "value {bad} must be rejected"
            );
        }
    }

    #[test]
    fn gating_macs_land_in_the_gating_bucket() {
        let (l, d, n_kv, d_k) = (4, 6, 2, 3);
        let h = rand(vec![l, d], 12, 0.5);
        let v = rand(vec![l, n_kv * d_k], 13, 0.5);
        let mut rng = Rng::new(14);
        let p = GateParams::init(d, n_kv, 4, d_k, &mut rng);
        let mut tape = Tape::<f64>::no_grad();
        tape.enable_counting();
        let hv = tape.constant(h);
        let vv = tape.constant(v);
        let gv = bind_gates(&mut tape, &p);
        value_gate(&mut tape, vv, hv, &gv).unwrap();
        let counters = tape.counters().unwrap();
        // Projection L*d*(n_kv*d_k) plus the element-wise multiply L*(n_kv*d_k).
        assert_eq!(
            counters.gating_macs,
            (l * d * n_kv * d_k + l * n_kv * d_k) as u64
        );
        assert_eq!(counters.qkv_macs, 0);
    }
}
