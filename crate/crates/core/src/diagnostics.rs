//! Behavioral measurements: attention-sink mass, gate statistics,
//! activation magnitudes, selection fidelity, and the gradient-attenuation
//! probe. Everything here is read-only over forward/backward traces.

use std::collections::BTreeSet;

use crate::attention::{GsaConfig, LayerParams, LayerRun, SelectionPolicy};
use crate::error::{Error, Result};
use crate::gating::gate_stats;
use crate::indexer::SparsityState;
use crate::model::{model_forward, run_single_layer, ModelConfig, ModelKl, ModelParams, ModelPolicy};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::task::{TaskConfig, TaskStream};
use crate::tensor::Tensor;

/// Per-layer behavioral summary.
#[derive(Debug, Clone)]
pub struct LayerDiagnostics {
    /// Mean attention mass on position 0 over queries `t >= 1` and heads.
    pub first_token_attn: f64,
    /// Mean of all gate activations (value and output), absent for
    /// ungated modes.
    pub mean_gate: Option<f64>,
    /// Largest |entry| of the layer's attention output, pre-residual.
    pub max_activation: f64,
    /// Mean selected-set size per query.
    pub mean_k: f64,
}

/// Whole-model summary plus its per-layer breakdown.
#[derive(Debug, Clone)]
pub struct DiagnosticsRecord {
    pub first_token_attn: f64,
    pub mean_gate: Option<f64>,
    pub max_activation: f64,
    pub mean_k: f64,
    pub per_layer: Vec<LayerDiagnostics>,
}

impl DiagnosticsRecord {
    /// Enforce the record's own invariants: fractions in [0,1], finite
    /// magnitudes.
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invariant(format!("{name} = {v} outside [0, 1]")));
            }
            Ok(())
        };
        frac("first_token_attn", self.first_token_attn)?;
        if let Some(g) = self.mean_gate {
            frac("mean_gate", g)?;
        }
        if !self.max_activation.is_finite() {
            return Err(Error::NonFinite(format!(
                "max_activation = {}",
                self.max_activation
            )));
        }
        Ok(())
    }
}

/// Mean probability mass on position 0, over all rows after the first.
///
/// `rows[t]` is one attention distribution (any length >= 1); row 0 is
/// excluded because its entire mass sits on position 0 by construction.
/// Rows must be genuine distributions: nonnegative, summing to 1 within
/// 1e-4. A sparse row that excludes position 0 should carry an explicit 0
/// in front.
pub fn first_token_attention(rows: &[Vec<f64>]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::Invariant(
            "first-token mass needs at least two rows (t = 0 is excluded)".to_string(),
        ));
    }
    let mut total = 0.0f64;
    for (t, row) in rows.iter().enumerate() {
        if row.is_empty() {
            return Err(Error::Invariant(format!("row {t} is empty")));
        }
        let mut sum = 0.0f64;
        for &p in row {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::Invariant(format!("row {t} has weight {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Invariant(format!("row {t} sums to {sum}")));
        }
        if t >= 1 {
            total += row[0];
        }
    }
    Ok(total / (rows.len() - 1) as f64)
}

/// Largest absolute entry across a set of tensors (0 for none).
pub fn max_activation<F: Real>(tensors: &[&Tensor<F>]) -> f64 {
    tensors.iter().map(|t| t.max_abs()).fold(0.0, f64::max)
}

/// |A intersect B| / k for two same-sized index sets.
pub fn overlap_at_k(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invariant(format!(
            "overlap of sets with sizes {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Invariant("overlap of empty sets".to_string()));
    }
    let sa: BTreeSet<usize> = a.iter().copied().collect();
    let sb: BTreeSet<usize> = b.iter().copied().collect();
    if sa.len() != a.len() || sb.len() != b.len() {
        return Err(Error::Invariant("overlap arguments contain duplicates".to_string()));
    }
    Ok(sa.intersection(&sb).count() as f64 / a.len() as f64)
}

/// Summarize one layer's forward record. Gate statistics are validated
/// (every activation strictly inside (0, 1)) when present.
pub fn layer_diagnostics<F: Real>(tape: &Tape<F>, run: &LayerRun<F>) -> Result<LayerDiagnostics> {
    let mean_gate = match (run.value_gate, run.output_gate) {
        (Some(vg), Some(og)) => {
            let sv = gate_stats(tape.value(vg))?;
            let so = gate_stats(tape.value(og))?;
            let nv = tape.value(vg).numel() as f64;
            let no = tape.value(og).numel() as f64;
            Some((sv.mean * nv + so.mean * no) / (nv + no))
        }
        (None, None) => None,
        _ => {
            return Err(Error::Invariant(
                "layer has exactly one of the two gates".to_string(),
            ))
        }
    };
    Ok(LayerDiagnostics {
        first_token_attn: run.first_token_mass,
        mean_gate,
        max_activation: tape.value(run.out).max_abs(),
        mean_k: run.mean_k,
    })
}

/// Aggregate per-layer summaries into one record (uniform average over
/// layers, gates averaged over the layers that have them).
pub fn aggregate(per_layer: Vec<LayerDiagnostics>) -> Result<DiagnosticsRecord> {
    if per_layer.is_empty() {
        return Err(Error::Invariant("aggregating zero layers".to_string()));
    }
    let n = per_layer.len() as f64;
    let gated: Vec<f64> = per_layer.iter().filter_map(|l| l.mean_gate).collect();
    let rec = DiagnosticsRecord {
        first_token_attn: per_layer.iter().map(|l| l.first_token_attn).sum::<f64>() / n,
        mean_gate: if gated.is_empty() {
            None
        } else {
            Some(gated.iter().sum::<f64>() / gated.len() as f64)
        },
        max_activation: per_layer.iter().map(|l| l.max_activation).fold(0.0, f64::max),
        mean_k: per_layer.iter().map(|l| l.mean_k).sum::<f64>() / n,
        per_layer,
    };
    rec.validate()?;
    Ok(rec)
}

/// Result of one gradient-attenuation probe.
#[derive(Debug, Clone)]
pub struct AttenuationReport {
    /// Coordinates where |grad entering attention| exceeded |grad leaving
    /// the output gate|.
    pub violations: usize,
    /// Coordinates compared.
    pub checked: usize,
    /// Largest ratio |grad_pre| / |grad_post| observed (<= 1 when the
    /// claim holds; post-gate coordinates with zero gradient are skipped).
    pub max_ratio: f64,
    /// Largest |activation| before the output gate.
    pub max_activation_pre: f64,
    /// Largest |activation| after the output gate.
    pub max_activation_post: f64,
}

/// Run a gated layer forward and backward and compare the gradient on the
/// attention output before the output gate against the gradient after it.
///
/// The output gate multiplies by sigmoid values in (0, 1), so backward
/// through it can only shrink each coordinate: |d loss / d o_sparse| <=
/// |d loss / d o_gated| everywhere. The same multiplication bounds the
/// forward activations. Both facts are what this probe measures.
pub fn attenuation_probe<F: Real>(
    cfg: &GsaConfig,
    params: &LayerParams<F>,
    h: &Tensor<F>,
) -> Result<AttenuationReport> {
    if !cfg.mode.uses_gates() {
        return Err(Error::Config(format!(
            "attenuation probe needs a gated mode, got {}",
            cfg.mode
        )));
    }
    let mut tape = Tape::<F>::new();
    let policy = if cfg.mode.uses_indexer() {
        SelectionPolicy::FixedK(cfg.k_base)
    } else {
        SelectionPolicy::Dense
    };
    let run = run_single_layer(&mut tape, h, params, cfg, policy)?;
    let sq = tape.mul(run.out, run.out)?;
    let loss = tape.sum(sq);
    tape.backward(loss)?;
    let g_pre = tape
        .grad(run.o_sparse)
        .ok_or_else(|| Error::Invariant("no gradient reached the attention output".to_string()))?;
    let g_post = tape
        .grad(run.o_gated)
        .ok_or_else(|| Error::Invariant("no gradient left the output gate".to_string()))?;
    let mut violations = 0usize;
    let mut max_ratio = 0.0f64;
    for (a, b) in g_pre.iter().zip(g_post) {
        let (a, b) = (a.to_f64().abs(), b.to_f64().abs());
        if a > b {
            violations += 1;
        }
        if b > 0.0 {
            max_ratio = max_ratio.max(a / b);
        }
    }
    Ok(AttenuationReport {
        violations,
        checked: g_pre.len(),
        max_ratio,
        max_activation_pre: tape.value(run.o_sparse).max_abs(),
        max_activation_post: tape.value(run.o_gated).max_abs(),
    })
}

/// Forward a model over `n_seqs` held-out sequences and aggregate the
/// behavioral summaries. Selection runs under the mode's inference policy:
/// adaptive top-k driven by `states` when an indexer is present (so a
/// checkpoint's running variance average carries over), dense otherwise.
pub fn probe_model<F: Real>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    states: &[SparsityState],
    task: &TaskConfig,
    seq_len: usize,
    n_seqs: usize,
    seed: u64,
) -> Result<DiagnosticsRecord> {
    if n_seqs == 0 {
        return Err(Error::Config("probe needs at least one sequence".to_string()));
    }
    if cfg.attention.mode.uses_indexer() && states.len() != cfg.n_layers {
        return Err(Error::Config(format!(
            "{} sparsity states for {} layers",
            states.len(),
            cfg.n_layers
        )));
    }
    let mut rng = Rng::new(seed);
    let mut stream = TaskStream::new(task, seq_len, cfg.vocab_size, rng.fork("probe"))?;
    let mut sums: Vec<(f64, f64, f64, f64, usize)> = vec![(0.0, 0.0, 0.0, 0.0, 0); cfg.n_layers];
    for _ in 0..n_seqs {
        let batch = stream.next_batch(1);
        let mut tape = Tape::<F>::no_grad();
        let vars = crate::model::bind_model(&mut tape, params);
        let policy = if cfg.attention.mode.uses_indexer() {
            ModelPolicy::TopK(states)
        } else {
            ModelPolicy::Dense
        };
        let run = model_forward(
            &mut tape,
            &vars,
            cfg,
            &batch.tokens[0],
            None,
            &policy,
            &ModelKl::None,
            false,
        )?;
        for (i, layer) in run.layers.iter().enumerate() {
            let d = layer_diagnostics(&tape, layer)?;
            let s = &mut sums[i];
            s.0 += d.first_token_attn;
            s.1 = s.1.max(d.max_activation);
            s.2 += d.mean_k;
            if let Some(g) = d.mean_gate {
                s.3 += g;
                s.4 += 1;
            }
        }
    }
    let n = n_seqs as f64;
    let per_layer = sums
        .into_iter()
        .map(|(ftm, act, k, g, gn)| LayerDiagnostics {
            first_token_attn: ftm / n,
            mean_gate: if gn == 0 { None } else { Some(g / gn as f64) },
            max_activation: act,
            mean_k: k / n,
        })
        .collect();
    aggregate(per_layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionMode;
    use crate::rng::Rng;

    #[test]
    fn uniform_rows_give_one_over_length() {
        // Ten rows, each uniform over ten positions: every counted row
        // puts 1/10 on position 0.
        let rows: Vec<Vec<f64>> = (0..10).map(|_| vec![0.1; 10]).collect();
        let got = first_token_attention(&rows).unwrap();
        assert!((got - 0.1).abs() < 1e-12);
    }

    #[test]
    fn causal_uniform_rows_match_harmonic_mean_form() {
        // Row t uniform over its t+1 causal positions: the mean over rows
        // 1..l of 1/(t+1).
        let l = 6;
        let rows: Vec<Vec<f64>> =
            (0..l).map(|t| vec![1.0 / (t + 1) as f64; t + 1]).collect();
        let want: f64 = (1..l).map(|t| 1.0 / (t + 1) as f64).sum::<f64>() / (l - 1) as f64;
        let got = first_token_attention(&rows).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn all_mass_on_front_gives_one() {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|t| {
                let mut r = vec![0.0; t + 1];
                r[0] = 1.0;
                r
            })
            .collect();
        assert_eq!(first_token_attention(&rows).unwrap(), 1.0);
    }

    #[test]
    fn first_token_attention_rejects_non_distributions() {
        assert!(first_token_attention(&[vec![1.0]]).is_err());
        assert!(first_token_attention(&[vec![1.0], vec![0.7, 0.7]]).is_err());
        assert!(first_token_attention(&[vec![1.0], vec![1.5, -0.5]]).is_err());
        assert!(first_token_attention(&[vec![1.0], vec![]]).is_err());
    }

    #[test]
    fn max_activation_examples() {
        let z = Tensor::<f64>::zeros(vec![3, 3]);
        assert_eq!(max_activation(&[&z]), 0.0);
        let mut t = Tensor::<f64>::zeros(vec![2, 2]);
        t.as_mut_slice()[2] = -7.5;
        assert_eq!(max_activation(&[&z, &t]), 7.5);
        assert_eq!(max_activation::<f64>(&[]), 0.0);
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(overlap_at_k(&[1, 2, 3], &[3, 1, 2]).unwrap(), 1.0);
        assert_eq!(overlap_at_k(&[0, 1], &[2, 3]).unwrap(), 0.0);
        assert_eq!(overlap_at_k(&[0, 1, 2, 9], &[9, 5, 0, 6]).unwrap(), 0.5);
        assert!(overlap_at_k(&[1, 2], &[1, 2, 3]).is_err());
        assert!(overlap_at_k(&[1, 1], &[1, 2]).is_err());
        assert!(overlap_at_k(&[], &[]).is_err());
    }

    #[test]
    fn random_set_overlap_approaches_k_over_l() {
        // Two independent uniform k-subsets of [0, L): E|A intersect B| = k^2/L,
        // so the expected overlap fraction is k/L.
        let (l, k, trials) = (64usize, 8usize, 2000usize);
        let mut rng = Rng::new(1234);
        let draw = |rng: &mut Rng| -> Vec<usize> {
            let mut pool: Vec<usize> = (0..l).collect();
            for i in 0..k {
                let j = i + rng.below(l - i);
                pool.swap(i, j);
            }
            pool.truncate(k);
            pool
        };
        let mut acc = 0.0;
        for _ in 0..trials {
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            acc += overlap_at_k(&a, &b).unwrap();
        }
        let mean = acc / trials as f64;
        let want = k as f64 / l as f64;
        assert!((mean - want).abs() < 0.02, "mean {mean}, want {want}");
    }

    fn gated_cfg(mode: AttentionMode) -> GsaConfig {
        GsaConfig {
            d: 16,
            n_h: 2,
            n_kv: 2,
            d_k: 8,
            d_i: 4,
            h_i: 2,
            k_base: 3,
            k_min: 2,
            k_max: 6,
            mode,
            adaptive_k_enabled: true,
            ema_decay: 0.99,
            rope: false,
        }
    }

    #[test]
    fn attenuation_probe_holds_on_random_instances() {
        for seed in 0..20 {
            let cfg = gated_cfg(AttentionMode::Gsa);
            let mut rng = Rng::new(1000 + seed);
            let params = LayerParams::<f64>::init(&cfg, &mut rng);
            let h = Tensor::from_parts(
                vec![8, 16],
                (0..8 * 16).map(|_| rng.normal_f64()).collect(),
            );
            let rep = attenuation_probe(&cfg, &params, &h).unwrap();
            assert_eq!(rep.violations, 0, "seed {seed}: {} violations", rep.violations);
            assert!(rep.checked > 0);
            assert!(rep.max_ratio <= 1.0, "seed {seed}: ratio {}", rep.max_ratio);
            assert!(
                rep.max_activation_post <= rep.max_activation_pre + 1e-12,
                "seed {seed}: post {} > pre {}",
                rep.max_activation_post,
                rep.max_activation_pre
            );
        }
    }

    #[test]
    fn attenuation_probe_rejects_ungated_modes() {
        let cfg = gated_cfg(AttentionMode::Standard);
        let mut rng = Rng::new(2);
        let params = LayerParams::<f64>::init(&cfg, &mut rng);
        let h = Tensor::<f64>::zeros(vec![4, 16]);
        assert!(attenuation_probe(&cfg, &params, &h).is_err());
    }

    #[test]
    fn layer_diagnostics_and_aggregation() {
        let cfg = gated_cfg(AttentionMode::Gsa);
        let mut rng = Rng::new(31);
        let params = LayerParams::<f64>::init(&cfg, &mut rng);
        let h = Tensor::from_parts(vec![6, 16], (0..6 * 16).map(|_| rng.normal_f64()).collect());
        let mut tape = Tape::<f64>::no_grad();
        let run = run_single_layer(&mut tape, &h, &params, &cfg, SelectionPolicy::FixedK(3))
            .unwrap();
        let d = layer_diagnostics(&tape, &run).unwrap();
        // Fresh params keep gates near 0.5 and the sink mass inside [0, 1].
        let g = d.mean_gate.unwrap();
        assert!((g - 0.5).abs() < 0.05, "mean gate {g}");
        assert!((0.0..=1.0).contains(&d.first_token_attn));
        assert!(d.max_activation.is_finite());
        assert!((d.mean_k - (1.0 + 2.0 + 3.0 * 4.0) / 6.0).abs() < 1e-12);
        let rec = aggregate(vec![d.clone(), d]).unwrap();
        assert!(rec.mean_gate.is_some());
        rec.validate().unwrap();
    }

    #[test]
    fn model_probe_aggregates_over_sequences_and_layers() {
        use crate::model::ModelConfig;
        use crate::task::{TaskConfig, TaskKind};
        let cfg = ModelConfig {
            n_layers: 2,
            vocab_size: 9,
            ffn_width: 8,
            attention: gated_cfg(AttentionMode::Gsa),
        };
        let mut rng = Rng::new(8);
        let params = ModelParams::<f64>::init(&cfg, &mut rng);
        let states = vec![SparsityState::new(0.99).unwrap(); cfg.n_layers];
        let task = TaskConfig { kind: TaskKind::Copy, path: None, synthetic_len: 0 };
        let rec = probe_model(&params, &cfg, &states, &task, 8, 3, 77).unwrap();
        rec.validate().unwrap();
        assert_eq!(rec.per_layer.len(), 2);
        assert!(rec.mean_gate.is_some());
        assert!(rec.mean_k >= cfg.attention.k_min as f64);
        // Deterministic in the seed.
        let rec2 = probe_model(&params, &cfg, &states, &task, 8, 3, 77).unwrap();
        assert_eq!(rec.first_token_attn.to_bits(), rec2.first_token_attn.to_bits());
        // Ungated mode: no gate statistic.
        let mut ungated = cfg.clone();
        ungated.attention.mode = AttentionMode::SparseOnly;
        let params = ModelParams::<f64>::init(&ungated, &mut rng);
        let rec = probe_model(&params, &ungated, &states, &task, 8, 2, 5).unwrap();
        assert!(rec.mean_gate.is_none());
    }
}
