//! Cost model for the attention layer, and the instrumented measurement
//! that keeps it honest.
//!
//! `predict_cost` prices one layer's forward pass from the configuration
//! alone; `measure_cost` runs that layer on a counting tape and reads the
//! hardware-independent counters back. For the projection, scoring, and
//! attention buckets the two must agree exactly — the prediction and the
//! implementation count the same multiply-accumulates. The gate bucket is
//! the exception by design: the prediction prices only the two elementwise
//! gate applications (`2·L·d`), while the measured bucket also absorbs the
//! gate projection matmuls.

use crate::attention::{GsaConfig, SelectionPolicy};
use crate::error::{Error, Result};
use crate::model::run_single_layer;
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::{init_matrix, Init};

/// Largest sequence length the measurement path accepts. Beyond this the
/// dense teacher pass alone needs tens of gigabytes; the closed-form
/// predictor has no such limit.
pub const MAX_MEASURED_LEN: usize = 32_768;

/// Predicted per-layer forward cost. All MAC fields count one
/// multiply-accumulate as one unit; `topk_ops` counts comparisons inside
/// selection and is reported next to, never added into, `total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostBreakdown {
    pub qkv_macs: u64,
    pub indexer_macs: u64,
    /// Comparison count for top-k selection — not MACs, excluded from `total`.
    pub topk_ops: u64,
    pub attention_macs: u64,
    pub gating_macs: u64,
    /// Sum of the four MAC fields.
    pub total: u64,
}

fn check_dims(cfg: &GsaConfig, l: usize, k: usize) -> Result<()> {
    cfg.validate()?;
    if l == 0 {
        return Err(Error::Config("cost model needs a positive sequence length".to_string()));
    }
    if cfg.mode.uses_indexer() && k == 0 {
        return Err(Error::Config("cost model needs a positive k".to_string()));
    }
    Ok(())
}

/// Price one layer's forward pass at sequence length `l` with selection
/// budget `k`. Modes without an indexer ignore `k` and attend densely;
/// modes without gates price no gate work.
pub fn predict_cost(cfg: &GsaConfig, l: usize, k: usize) -> Result<CostBreakdown> {
    check_dims(cfg, l, k)?;
    let (d, n_h, n_kv, d_k) = (cfg.d as u64, cfg.n_h as u64, cfg.n_kv as u64, cfg.d_k as u64);
    let (d_i, h_i) = (cfg.d_i as u64, cfg.h_i as u64);
    let lu = l as u64;

    // Input projections for Q, K, V plus the output projection.
    let qkv_macs = lu * d * (n_h + 2 * n_kv) * d_k + lu * n_h * d_k * d;

    let (indexer_macs, topk_ops, attention_macs) = if cfg.mode.uses_indexer() {
        // Scoring: every query scores its whole causal prefix.
        let pair_terms: u64 = (0..l as u64).map(|t| t + 1).sum();
        let indexer = pair_terms * d_i * h_i      // query-key dot products
            + lu * d * d_i * (h_i + 1)            // query heads + shared key projection
            + lu * d * h_i; // gate logits
        // Heap selection: each candidate pays about log2 of the prefix.
        let topk: f64 = (0..l)
            .map(|t| {
                let kept = k.min(t + 1) as f64;
                kept * ((t + 1) as f64).log2()
            })
            .sum();
        // Attention reads only the selected keys: one MAC batch for the
        // score row, one for the value mix.
        let attn: u64 =
            (0..l as u64).map(|t| (k as u64).min(t + 1)).sum::<u64>() * d_k * n_h * 2;
        (indexer, topk.round() as u64, attn)
    } else {
        let attn: u64 = (0..l as u64).map(|t| t + 1).sum::<u64>() * d_k * n_h * 2;
        (0, 0, attn)
    };

    let gating_macs = if cfg.mode.uses_gates() { 2 * lu * d } else { 0 };

    Ok(CostBreakdown {
        qkv_macs,
        indexer_macs,
        topk_ops,
        attention_macs,
        gating_macs,
        total: qkv_macs + indexer_macs + attention_macs + gating_macs,
    })
}

/// Headline per-layer ratio of dense attention cost to sparse cost
/// (indexer scoring plus truncated attention):
/// `L^2 d / (L^2 d_i h_i + L k d)`.
pub fn speedup_vs_dense(cfg: &GsaConfig, l: usize, k: usize) -> Result<f64> {
    check_dims(cfg, l, k.max(1))?;
    let (l, k) = (l as f64, k as f64);
    let d = cfg.d as f64;
    let dense = l * l * d;
    let sparse = l * l * (cfg.d_i as f64) * (cfg.h_i as f64) + l * k * d;
    Ok(dense / sparse)
}

/// Measured per-layer forward cost, straight from the instrumented tape.
#[derive(Debug, Clone, Copy)]
pub struct MeasuredCost {
    pub qkv_macs: u64,
    pub indexer_macs: u64,
    pub topk_comparisons: u64,
    pub attention_macs: u64,
    pub gating_macs: u64,
}

impl MeasuredCost {
    /// Sum of the MAC buckets (comparisons excluded, as in the prediction).
    pub fn total(&self) -> u64 {
        self.qkv_macs + self.indexer_macs + self.attention_macs + self.gating_macs
    }
}

/// Run one layer forward on random activations with counting enabled and
/// report the per-bucket counters. Refuses lengths past
/// [`MAX_MEASURED_LEN`]; predictions have no such cap.
pub fn measure_cost<F: Real>(cfg: &GsaConfig, l: usize, k: usize, seed: u64) -> Result<MeasuredCost> {
    check_dims(cfg, l, k)?;
    if l > MAX_MEASURED_LEN {
        return Err(Error::Config(format!(
            "measuring at L = {l} would materialize dense intermediates; the cap is {MAX_MEASURED_LEN} (predictions stay available at any length)"
        )));
    }
    let mut rng = Rng::new(seed);
    let params = crate::attention::LayerParams::<F>::init(cfg, &mut rng);
    let h = init_matrix::<F>(l, cfg.d, Init::Normal(1.0), &mut rng);
    let mut tape = Tape::<F>::no_grad();
    tape.enable_counting();
    let policy = if cfg.mode.uses_indexer() {
        SelectionPolicy::FixedK(k)
    } else {
        SelectionPolicy::Dense
    };
    run_single_layer(&mut tape, &h, &params, cfg, policy)?;
    let c = tape.counters()?;
    Ok(MeasuredCost {
        qkv_macs: c.qkv_macs,
        indexer_macs: c.indexer_macs,
        topk_comparisons: c.topk_comparisons,
        attention_macs: c.attention_macs,
        gating_macs: c.gating_macs,
    })
}

/// One row of the benchmark table.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub l: usize,
    pub k: usize,
    pub mode: String,
    pub predicted_total: u64,
    pub measured_total: u64,
    pub speedup_vs_dense: f64,
}

pub const BENCH_COLUMNS: &str = "L,k,mode,predicted_total,measured_total,speedup_vs_dense";

impl BenchRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.l, self.k, self.mode, self.predicted_total, self.measured_total, self.speedup_vs_dense
        )
    }
}

/// Predict and measure one configuration, as one table row.
pub fn bench_row<F: Real>(cfg: &GsaConfig, l: usize, k: usize, seed: u64) -> Result<BenchRow> {
    let predicted = predict_cost(cfg, l, k)?;
    let measured = measure_cost::<F>(cfg, l, k, seed)?;
    Ok(BenchRow {
        l,
        k,
        mode: cfg.mode.as_str().to_string(),
        predicted_total: predicted.total,
        measured_total: measured.total(),
        speedup_vs_dense: speedup_vs_dense(cfg, l, k)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionMode;

    fn cfg(mode: AttentionMode, d: usize, d_i: usize, h_i: usize) -> GsaConfig {
        GsaConfig {
            d,
            n_h: 2,
            n_kv: 2,
            d_k: d / 2,
            d_i,
            h_i,
            k_base: 8,
            k_min: 2,
            k_max: 64,
            mode,
            adaptive_k_enabled: false,
            ema_decay: 0.99,
            rope: false,
        }
    }

    #[test]
    fn production_scale_speedup_lands_in_the_published_band() {
        // d = 4096, d_i = 64, h_i = 4, k = 2048, L = 128k: the closed form
        // gives 12.7387x.
        let mut c = cfg(AttentionMode::Gsa, 4096, 64, 4);
        c.n_h = 32;
        c.n_kv = 32;
        c.d_k = 128;
        c.k_base = 2048;
        c.k_max = 4096;
        let s = speedup_vs_dense(&c, 128_000, 2048).unwrap();
        assert!((12.7..=12.8).contains(&s), "speedup {s}");
        assert!((s - 12.7387).abs() < 1e-3, "speedup {s}");
        // Indexer scoring is a fraction of a percent of dense attention
        // per pair: d_i * h_i / (d) = 256/4096.
        let per_pair = (c.d_i * c.h_i) as f64 / c.d as f64;
        assert!(per_pair < 0.07);
        // The prediction itself runs fine at this length.
        let p = predict_cost(&c, 128_000, 2048).unwrap();
        assert!(p.total > 0);
    }

    #[test]
    fn hand_priced_tiny_case() {
        // L = 3, d = 4, n_h = 2, n_kv = 2, d_k = 2, d_i = 2, h_i = 2, k = 2.
        let mut c = cfg(AttentionMode::Gsa, 4, 2, 2);
        c.k_base = 2;
        let p = predict_cost(&c, 3, 2).unwrap();
        // qkv: 3*4*(2+4)*2 + 3*2*2*4 = 144 + 48 = 192.
        assert_eq!(p.qkv_macs, 192);
        // indexer: pairs (1+2+3)*2*2 = 24, projections 3*4*2*3 = 72,
        // gate logits 3*4*2 = 24 -> 120.
        assert_eq!(p.indexer_macs, 120);
        // attention: kept rows 1 + 2 + 2 = 5, * d_k * n_h * 2 = 5*2*2*2 = 40.
        assert_eq!(p.attention_macs, 40);
        // gating: 2*3*4 = 24.
        assert_eq!(p.gating_macs, 24);
        assert_eq!(p.total, 192 + 120 + 40 + 24);
        // topk: 1*log2(1) + 2*log2(2) + 2*log2(3) = 0 + 2 + 3.1699 -> 5.
        assert_eq!(p.topk_ops, 5);
    }

    #[test]
    fn single_token_sequence() {
        let c = cfg(AttentionMode::Gsa, 4, 2, 2);
        let p = predict_cost(&c, 1, 2).unwrap();
        assert_eq!(p.attention_macs, 2 * 2 * 2); // one kept key
        assert_eq!(p.topk_ops, 0); // log2(1) = 0
        let m = measure_cost::<f32>(&c, 1, 2, 7).unwrap();
        assert_eq!(m.qkv_macs, p.qkv_macs);
        assert_eq!(m.indexer_macs, p.indexer_macs);
        assert_eq!(m.attention_macs, p.attention_macs);
    }

    #[test]
    fn measurement_matches_prediction_exactly_for_counted_buckets() {
        for (l, k) in [(16usize, 4usize), (32, 8), (48, 48), (7, 3)] {
            let c = cfg(AttentionMode::Gsa, 8, 4, 2);
            let p = predict_cost(&c, l, k).unwrap();
            let m = measure_cost::<f32>(&c, l, k, 11).unwrap();
            assert_eq!(m.qkv_macs, p.qkv_macs, "qkv at L={l} k={k}");
            assert_eq!(m.indexer_macs, p.indexer_macs, "indexer at L={l} k={k}");
            assert_eq!(m.attention_macs, p.attention_macs, "attention at L={l} k={k}");
            // The measured gate bucket additionally holds the gate
            // projection matmuls, so prediction is a strict lower bound.
            assert!(m.gating_macs >= p.gating_macs, "gating at L={l} k={k}");
            // Selection comparisons stay within 2x of the heap estimate.
            assert!(
                (m.topk_comparisons as f64) <= 2.0 * p.topk_ops.max(1) as f64,
                "topk at L={l} k={k}: measured {} vs estimate {}",
                m.topk_comparisons,
                p.topk_ops
            );
        }
    }

    #[test]
    fn dense_standard_mode_has_closed_form() {
        let c = cfg(AttentionMode::Standard, 8, 4, 2);
        let l = 16u64;
        let p = predict_cost(&c, 16, 0).unwrap();
        assert_eq!(p.indexer_macs, 0);
        assert_eq!(p.gating_macs, 0);
        assert_eq!(p.topk_ops, 0);
        assert_eq!(p.attention_macs, (l * (l + 1) / 2) * 4 * 2 * 2);
        let m = measure_cost::<f32>(&c, 16, 0, 3).unwrap();
        assert_eq!(m.attention_macs, p.attention_macs);
        assert_eq!(m.indexer_macs, 0);
        assert_eq!(m.gating_macs, 0);
    }

    #[test]
    fn saturated_budget_removes_the_speedup() {
        // k = L: sparse attention reads the whole prefix, so the ratio
        // drops below 1 (the indexer is pure overhead).
        let c = cfg(AttentionMode::Gsa, 32, 8, 2);
        let s = speedup_vs_dense(&c, 512, 512).unwrap();
        assert!(s < 1.0, "saturated speedup {s}");
        // A 16x budget cut at the same sizes is a real win.
        let s = speedup_vs_dense(&c, 512, 32).unwrap();
        assert!(s > 1.0, "sparse speedup {s}");
    }

    #[test]
    fn indexer_cost_quadruples_per_length_doubling() {
        let c = cfg(AttentionMode::Gsa, 32, 8, 2);
        let a = predict_cost(&c, 2048, 64).unwrap().indexer_macs as f64;
        let b = predict_cost(&c, 4096, 64).unwrap().indexer_macs as f64;
        let ratio = b / a;
        assert!((ratio - 4.0).abs() <= 0.3, "indexer scaling ratio {ratio}");
        // Attention with a fixed budget only doubles.
        let a = predict_cost(&c, 2048, 64).unwrap().attention_macs as f64;
        let b = predict_cost(&c, 4096, 64).unwrap().attention_macs as f64;
        let ratio = b / a;
        assert!((ratio - 2.0).abs() <= 0.1, "attention scaling ratio {ratio}");
    }

    #[test]
    fn measurement_refuses_oom_scale_lengths() {
        let c = cfg(AttentionMode::Gsa, 8, 4, 2);
        let err = measure_cost::<f32>(&c, MAX_MEASURED_LEN + 1, 8, 1).unwrap_err();
        assert!(err.to_string().contains("cap"), "{err}");
        assert!(predict_cost(&c, MAX_MEASURED_LEN + 1, 8).is_ok());
    }

    #[test]
    fn bench_row_renders_csv() {
        let c = cfg(AttentionMode::Gsa, 8, 4, 2);
        let row = bench_row::<f32>(&c, 16, 4, 5).unwrap();
        let csv = row.to_csv();
        assert!(csv.starts_with("16,4,gsa,"));
        assert_eq!(csv.split(',').count(), BENCH_COLUMNS.split(',').count());
    }
}
