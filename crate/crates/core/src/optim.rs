//! AdamW with named parameter groups.
//!
//! Parameters are addressed by the dotted names from
//! [`crate::model::visit_params`]; each name maps to one of three groups
//! (base / indexer / gates) with its own learning-rate multiplier. Moments
//! are kept in f64 regardless of the working precision, and each tensor
//! carries its own step count so bias correction stays exact when a group
//! sits out a phase (the indexer-only warmup).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{visit_params_mut, ModelParams, ParamGroup};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use serde::{Deserialize, Serialize};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1): got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 || !self.eps.is_finite() {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Per-group learning-rate multipliers on top of the base rate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrMultipliers {
    pub base: f64,
    pub indexer: f64,
    pub gates: f64,
}

impl Default for LrMultipliers {
    fn default() -> Self {
        LrMultipliers { base: 1.0, indexer: 10.0, gates: 1.0 }
    }
}

impl LrMultipliers {
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("base", self.base), ("indexer", self.indexer), ("gates", self.gates)] {
            if m <= 0.0 || !m.is_finite() {
                return Err(Error::Config(format!(
                    "{name} learning-rate multiplier must be positive, got {m}"
                )));
            }
        }
        Ok(())
    }

    pub fn for_group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Base => self.base,
            ParamGroup::Indexer => self.indexer,
            ParamGroup::Gates => self.gates,
        }
    }
}

/// Classify a set of parameter names into groups, rejecting any name whose
/// group membership is ambiguous. The partition is total by construction
/// (every name falls somewhere); this check guards the "exactly one group"
/// half of the contract.
pub fn assign_groups<'a>(
    names: impl IntoIterator<Item = &'a str>,
) -> Result<BTreeMap<String, ParamGroup>> {
    let mut out = BTreeMap::new();
    for name in names {
        let hits = [name.contains(".indexer."), name.contains(".gates.")];
        if hits.iter().filter(|h| **h).count() > 1 {
            return Err(Error::Config(format!(
                "parameter {name} matches more than one group"
            )));
        }
        out.insert(name.to_string(), ParamGroup::of(name));
    }
    Ok(out)
}

/// First and second moment estimates plus the tensor's own step count.
#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Gradients accumulated per parameter name, always in f64.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Add the exported tape gradients of the named leaves into `acc`.
/// Leaves the tape never touched contribute nothing.
pub fn accumulate_grads<F: Real>(acc: &mut GradMap, tape: &Tape<F>, named: &[(String, Var)]) {
    for (name, var) in named {
        if let Some(g) = tape.grad(*var) {
            let slot = acc.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (a, x) in slot.iter_mut().zip(g) {
                *a += x.to_f64();
            }
        }
    }
}

/// Scale every accumulated gradient in place (e.g. by 1/batch).
pub fn scale_grads(acc: &mut GradMap, c: f64) {
    for g in acc.values_mut() {
        for x in g.iter_mut() {
            *x *= c;
        }
    }
}

/// The optimizer: AdamW over named tensors with per-group learning rates.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub base_lr: f64,
    pub multipliers: LrMultipliers,
    pub adamw: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(base_lr: f64, multipliers: LrMultipliers, adamw: AdamWConfig) -> Result<Self> {
        if base_lr <= 0.0 || !base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be positive, got {base_lr}")));
        }
        multipliers.validate()?;
        adamw.validate()?;
        Ok(Optimizer { base_lr, multipliers, adamw, state: BTreeMap::new() })
    }

    /// Number of update steps this named tensor has received.
    pub fn steps_taken(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |m| m.t)
    }

    /// One AdamW update of a single named tensor.
    ///
    /// Decoupled weight decay applies only to tensors of rank >= 2 — gains
    /// and biases are left undecayed, per common practice.
    pub fn step_named<F: Real>(
        &mut self,
        name: &str,
        theta: &mut Tensor<F>,
        grad: &[f64],
    ) -> Result<()> {
        if grad.len() != theta.numel() {
            return Err(Error::Shape(format!(
                "gradient for {name} has {} entries, tensor has {}",
                grad.len(),
                theta.numel()
            )));
        }
        let group = ParamGroup::of(name);
        let lr = self.base_lr * self.multipliers.for_group(group);
        let decay = if theta.shape().len() >= 2 { self.adamw.weight_decay } else { 0.0 };
        let n = theta.numel();
        let slot = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n], t: 0 });
        if slot.m.len() != n {
            return Err(Error::Shape(format!(
                "optimizer state for {name} has {} entries, tensor has {n}",
                slot.m.len()
            )));
        }
        slot.t += 1;
        let (b1, b2) = (self.adamw.beta1, self.adamw.beta2);
        let bc1 = 1.0 - b1.powi(slot.t as i32);
        let bc2 = 1.0 - b2.powi(slot.t as i32);
        let data = theta.as_mut_slice();
        for i in 0..n {
            let g = grad[i];
            slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
            slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            let mut x = data[i].to_f64();
            x -= lr * decay * x;
            x -= lr * m_hat / (v_hat.sqrt() + self.adamw.eps);
            data[i] = F::from_f64(x);
        }
        Ok(())
    }

    /// Update every model parameter that has a gradient in `grads`,
    /// optionally restricted to one group. Parameters without a gradient
    /// entry are untouched (no decay either — they sat the step out).
    pub fn step<F: Real>(
        &mut self,
        params: &mut ModelParams<F>,
        grads: &GradMap,
        only: Option<ParamGroup>,
    ) -> Result<()> {
        let mut result = Ok(());
        visit_params_mut(params, &mut |name, t| {
            if result.is_err() {
                return;
            }
            if let Some(g) = only {
                if ParamGroup::of(name) != g {
                    return;
                }
            }
            if let Some(grad) = grads.get(name) {
                if let Err(e) = self.step_named(name, t, grad) {
                    result = Err(e);
                }
            }
        });
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt(lr: f64, wd: f64) -> Optimizer {
        Optimizer::new(
            lr,
            LrMultipliers::default(),
            AdamWConfig { weight_decay: wd, ..AdamWConfig::default() },
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(Optimizer::new(0.0, LrMultipliers::default(), AdamWConfig::default()).is_err());
        assert!(Optimizer::new(
            1e-3,
            LrMultipliers { indexer: 0.0, ..LrMultipliers::default() },
            AdamWConfig::default()
        )
        .is_err());
        assert!(Optimizer::new(
            1e-3,
            LrMultipliers::default(),
            AdamWConfig { beta1: 1.0, ..AdamWConfig::default() }
        )
        .is_err());
        assert!(Optimizer::new(
            1e-3,
            LrMultipliers::default(),
            AdamWConfig { weight_decay: -0.1, ..AdamWConfig::default() }
        )
        .is_err());
    }

    #[test]
    fn first_step_matches_hand_computed_adamw() {
        // With fresh moments, m_hat = g and v_hat = g^2 exactly, so the
        // update is lr * (decay * theta + g / (|g| + eps)).
        let mut o = opt(0.1, 0.01);
        let mut theta = Tensor::<f64>::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let g = [0.5, -0.25];
        o.step_named("w", &mut theta, &g).unwrap();
        for i in 0..2 {
            let x0 = [1.0, -2.0][i];
            let want = x0 - 0.1 * 0.01 * x0 - 0.1 * g[i] / (g[i].abs() + 1e-8);
            let got = theta.as_slice()[i];
            assert!((want - got).abs() < 1e-12, "coord {i}: {want} vs {got}");
        }
    }

    #[test]
    fn constant_gradient_gives_constant_updates() {
        // For a constant gradient, bias-corrected m_hat = g and
        // v_hat = g^2 at every step, so each update moves by the same
        // lr * g / (|g| + eps).
        let mut o = opt(0.05, 0.0);
        let mut theta = Tensor::<f64>::new(vec![1, 1], vec![3.0]).unwrap();
        let g = [0.7];
        for _ in 0..4 {
            o.step_named("w", &mut theta, &g).unwrap();
        }
        let want = 3.0 - 4.0 * 0.05 * 0.7 / (0.7 + 1e-8);
        assert!((theta.as_slice()[0] - want).abs() < 1e-9);
        assert_eq!(o.steps_taken("w"), 4);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut o = opt(0.1, 0.0);
        let mut theta = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        o.step_named("w", &mut theta, &[0.0; 4]).unwrap();
        assert_eq!(theta.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn weight_decay_skips_rank_one_tensors() {
        let mut o = opt(0.1, 0.5);
        let mut gain = Tensor::<f64>::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        o.step_named("blocks.0.gamma1", &mut gain, &[0.0; 3]).unwrap();
        assert_eq!(gain.as_slice(), &[1.0, 1.0, 1.0], "rank-1 tensor was decayed");
        let mut w = Tensor::<f64>::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        o.step_named("blocks.0.ffn_w1", &mut w, &[0.0; 3]).unwrap();
        for x in w.as_slice() {
            assert!((x - (1.0 - 0.1 * 0.5)).abs() < 1e-12, "rank-2 tensor not decayed: {x}");
        }
    }

    #[test]
    fn indexer_steps_are_ten_times_base_steps() {
        // Identical tensors, identical gradient histories; the only
        // difference is the group the name maps to. Every term of the
        // update (decay and moment step) scales with the group lr, so the
        // displacement ratio is exactly the multiplier.
        let mut o = opt(0.01, 0.01);
        let mut base = Tensor::<f64>::new(vec![1, 2], vec![0.8, -0.3]).unwrap();
        let mut ix = base.clone();
        let g = [0.12, 0.45];
        o.step_named("blocks.0.attn.wq", &mut base, &g).unwrap();
        o.step_named("blocks.0.attn.indexer.wq", &mut ix, &g).unwrap();
        for i in 0..2 {
            let d_base = 0.8_f64.mul_add(0.0, [0.8, -0.3][i]) - base.as_slice()[i];
            let d_ix = [0.8, -0.3][i] - ix.as_slice()[i];
            assert!(
                (d_ix - 10.0 * d_base).abs() < 1e-12,
                "coord {i}: indexer moved {d_ix}, base moved {d_base}"
            );
        }
    }

    #[test]
    fn group_assignment_is_unambiguous() {
        let names = ["embed", "blocks.0.attn.indexer.wq", "blocks.0.attn.gates.wg_v"];
        let groups = assign_groups(names).unwrap();
        assert_eq!(groups["embed"], ParamGroup::Base);
        assert_eq!(groups["blocks.0.attn.indexer.wq"], ParamGroup::Indexer);
        assert_eq!(groups["blocks.0.attn.gates.wg_v"], ParamGroup::Gates);
        assert!(assign_groups(["a.indexer.b.gates.c"]).is_err());
    }

    #[test]
    fn per_tensor_step_counts_are_independent() {
        let mut o = opt(0.1, 0.0);
        let mut a = Tensor::<f64>::new(vec![1, 1], vec![1.0]).unwrap();
        let mut b = a.clone();
        o.step_named("a", &mut a, &[0.1]).unwrap();
        o.step_named("a", &mut a, &[0.1]).unwrap();
        o.step_named("b", &mut b, &[0.1]).unwrap();
        assert_eq!(o.steps_taken("a"), 2);
        assert_eq!(o.steps_taken("b"), 1);
        assert_eq!(o.steps_taken("never"), 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut o = opt(0.1, 0.0);
        let mut t = Tensor::<f64>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert!(o.step_named("w", &mut t, &[0.1]).is_err());
        // State created with one shape rejects a different one later.
        o.step_named("w", &mut t, &[0.1, 0.2]).unwrap();
        let mut bigger = Tensor::<f64>::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(o.step_named("w", &mut bigger, &[0.1, 0.2, 0.3]).is_err());
    }

    #[test]
    fn grad_map_accumulation_and_scaling() {
        use crate::attention::AttentionMode;
        use crate::model::{bind_model_named, ModelConfig};
        use crate::rng::Rng;
        let cfg = ModelConfig {
            n_layers: 1,
            vocab_size: 7,
            ffn_width: 8,
            attention: crate::attention::GsaConfig {
                d: 8,
                n_h: 2,
                n_kv: 2,
                d_k: 4,
                d_i: 2,
                h_i: 2,
                k_base: 2,
                k_min: 1,
                k_max: 4,
                mode: AttentionMode::Standard,
                adaptive_k_enabled: true,
                ema_decay: 0.99,
                rope: false,
            },
        };
        let mut rng = Rng::new(5);
        let p = crate::model::ModelParams::<f64>::init(&cfg, &mut rng);
        let tokens = [1usize, 3, 5];
        let targets = [3usize, 5, 1];
        let mut acc = GradMap::new();
        for _ in 0..2 {
            let mut tape = Tape::<f64>::new();
            let (vars, named) = bind_model_named(&mut tape, &p);
            let run = crate::model::model_forward(
                &mut tape,
                &vars,
                &cfg,
                &tokens,
                Some(&targets),
                &crate::model::ModelPolicy::Dense,
                &crate::model::ModelKl::None,
                false,
            )
            .unwrap();
            tape.backward(run.ce.unwrap()).unwrap();
            accumulate_grads(&mut acc, &tape, &named);
        }
        // Two identical passes accumulate exactly twice the one-pass grad;
        // scaling by 1/2 recovers it.
        let mut tape = Tape::<f64>::new();
        let (vars, named) = bind_model_named(&mut tape, &p);
        let run = crate::model::model_forward(
            &mut tape,
            &vars,
            &cfg,
            &tokens,
            Some(&targets),
            &crate::model::ModelPolicy::Dense,
            &crate::model::ModelKl::None,
            false,
        )
        .unwrap();
        tape.backward(run.ce.unwrap()).unwrap();
        let mut once = GradMap::new();
        accumulate_grads(&mut once, &tape, &named);
        scale_grads(&mut acc, 0.5);
        assert_eq!(acc.len(), once.len());
        for (name, g) in &once {
            let a = &acc[name];
            for (x, y) in a.iter().zip(g) {
                assert!((x - y).abs() < 1e-12, "{name}");
            }
        }
    }
}
