//! The gated sparse attention layer.
//!
//! One layer wires together: grouped-query Q/K/V projections, an optional
//! rotary position encoding, a value gate, the indexer-driven top-k
//! selection, sparse scaled-dot-product attention over the selected
//! positions, a per-head output gate, and the output projection. Four modes
//! ablate the two contributions independently:
//!
//! | mode        | indexer + top-k | value/output gates |
//! |-------------|-----------------|--------------------|
//! | standard    | off             | off                |
//! | sparse_only | on              | off                |
//! | gated_only  | off             | on                 |
//! | gsa         | on              | on                 |
//!
//! Dense attention is realized as sparse attention whose every query selects
//! its full causal prefix, so the dense and sparse paths share one code path
//! and one backward rule.
//!
//! The softmax for each query is normalized over that query's selected set
//! only, with max-subtraction and an f64 denominator.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{bind_gates, output_gate, value_gate, GateParams, GateVars};
use crate::indexer::{
    adaptive_k, bind_indexer, gated_scores_op, kl_to_teacher_op, row_variance,
    top_k_select_counted, IndexerParams, IndexerVars, KlRow, SparsityState,
};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Backward, BackwardArgs, GradSink, MacBucket, Tape, Var};
use crate::tensor::{init_matrix, Init, Tensor};

/// Which parts of the layer are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Dense attention, no gates, no indexer.
    Standard,
    /// Indexer-driven top-k selection without the value/output gates.
    SparseOnly,
    /// Value/output gates with dense attention.
    GatedOnly,
    /// The full mechanism: gates plus indexer-driven sparsity.
    Gsa,
}

impl AttentionMode {
    pub fn uses_indexer(self) -> bool {
        matches!(self, AttentionMode::SparseOnly | AttentionMode::Gsa)
    }

    pub fn uses_gates(self) -> bool {
        matches!(self, AttentionMode::GatedOnly | AttentionMode::Gsa)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Standard => "standard",
            AttentionMode::SparseOnly => "sparse_only",
            AttentionMode::GatedOnly => "gated_only",
            AttentionMode::Gsa => "gsa",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(AttentionMode::Standard),
            "sparse_only" => Ok(AttentionMode::SparseOnly),
            "gated_only" => Ok(AttentionMode::GatedOnly),
            "gsa" => Ok(AttentionMode::Gsa),
            other => Err(Error::Config(format!(
                "unknown attention mode {other:?}; expected standard, sparse_only, gated_only, or gsa"
            ))),
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_true() -> bool {
    true
}

fn default_ema_decay() -> f64 {
    0.99
}

/// Attention layer hyperparameters. Unknown keys in a config file are
/// rejected rather than silently ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GsaConfig {
    /// Model width; must equal `n_h * d_k`.
    pub d: usize,
    /// Query heads.
    pub n_h: usize,
    /// Key/value heads (grouped-query attention); divides `n_h`.
    pub n_kv: usize,
    /// Per-head dimension.
    pub d_k: usize,
    /// Indexer head dimension.
    pub d_i: usize,
    /// Indexer head count.
    pub h_i: usize,
    /// Base selection budget.
    pub k_base: usize,
    /// Lower clamp on the adaptive budget.
    pub k_min: usize,
    /// Upper clamp on the adaptive budget.
    pub k_max: usize,
    pub mode: AttentionMode,
    /// When false, every query uses `k_base` instead of the variance-driven
    /// budget.
    #[serde(default = "default_true")]
    pub adaptive_k_enabled: bool,
    /// Decay of the running score-variance average.
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    /// Rotary position encoding on Q and K.
    #[serde(default)]
    pub rope: bool,
}

impl GsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d != self.n_h * self.d_k {
            return Err(Error::Config(format!(
                "d = {} must equal n_h * d_k = {}",
                self.d,
                self.n_h * self.d_k
            )));
        }
        if self.n_kv == 0 || self.n_h % self.n_kv != 0 {
            return Err(Error::Config(format!(
                "n_kv = {} must divide n_h = {}",
                self.n_kv, self.n_h
            )));
        }
        if self.k_min < 1 || self.k_min > self.k_base || self.k_base > self.k_max {
            return Err(Error::Config(format!(
                "budgets must satisfy 1 <= k_min <= k_base <= k_max, got {}/{}/{}",
                self.k_min, self.k_base, self.k_max
            )));
        }
        if self.d_i == 0 || self.h_i == 0 {
            return Err(Error::Config("indexer dimensions must be positive".to_string()));
        }
        if self.d_i >= self.d {
            return Err(Error::Config(format!(
                "indexer dimension d_i = {} must be smaller than d = {}",
                self.d_i, self.d
            )));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!(
                "ema_decay must lie in (0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.rope && self.d_k % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary encoding needs an even d_k, got {}",
                self.d_k
            )));
        }
        Ok(())
    }
}

/// Per-component parameter counts for one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    /// Q/K/V/output projections.
    pub base: usize,
    /// Indexer parameters (zero in modes without the indexer).
    pub indexer: usize,
    /// Gate parameters (zero in modes without the gates).
    pub gates: usize,
    pub total: usize,
}

/// Parameter counts implied by a config, respecting its mode.
pub fn param_counts(cfg: &GsaConfig) -> ParamCounts {
    let base = cfg.d * cfg.n_h * cfg.d_k // wq
        + 2 * cfg.d * cfg.n_kv * cfg.d_k // wk, wv
        + cfg.n_h * cfg.d_k * cfg.d; // wo
    let indexer = if cfg.mode.uses_indexer() {
        IndexerParams::<f64>::param_count(cfg.d, cfg.h_i, cfg.d_i)
    } else {
        0
    };
    let gates = if cfg.mode.uses_gates() {
        GateParams::<f64>::param_count(cfg.d, cfg.n_kv, cfg.n_h, cfg.d_k)
    } else {
        0
    };
    ParamCounts {
        base,
        indexer,
        gates,
        total: base + indexer + gates,
    }
}

/// Learned parameters of one attention layer. The indexer and gate blocks
/// exist only in modes that use them.
#[derive(Debug, Clone)]
pub struct LayerParams<F: Real> {
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub indexer: Option<IndexerParams<F>>,
    pub gates: Option<GateParams<F>>,
}

impl<F: Real> LayerParams<F> {
    pub fn init(cfg: &GsaConfig, rng: &mut Rng) -> Self {
        LayerParams {
            wq: init_matrix(cfg.d, cfg.n_h * cfg.d_k, Init::Normal(0.02), rng),
            wk: init_matrix(cfg.d, cfg.n_kv * cfg.d_k, Init::Normal(0.02), rng),
            wv: init_matrix(cfg.d, cfg.n_kv * cfg.d_k, Init::Normal(0.02), rng),
            wo: init_matrix(cfg.n_h * cfg.d_k, cfg.d, Init::Normal(0.02), rng),
            indexer: cfg
                .mode
                .uses_indexer()
                .then(|| IndexerParams::init(cfg.d, cfg.h_i, cfg.d_i, rng)),
            gates: cfg
                .mode
                .uses_gates()
                .then(|| GateParams::init(cfg.d, cfg.n_kv, cfg.n_h, cfg.d_k, rng)),
        }
    }

    pub fn validate(&self, cfg: &GsaConfig) -> Result<()> {
        if self.wq.shape() != [cfg.d, cfg.n_h * cfg.d_k]
            || self.wk.shape() != [cfg.d, cfg.n_kv * cfg.d_k]
            || self.wv.shape() != [cfg.d, cfg.n_kv * cfg.d_k]
            || self.wo.shape() != [cfg.n_h * cfg.d_k, cfg.d]
        {
            return Err(Error::Shape("attention projection shapes".to_string()));
        }
        match (&self.indexer, cfg.mode.uses_indexer()) {
            (Some(p), true) => p.validate(cfg.d)?,
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::Config(format!(
                    "mode {} carries indexer parameters it cannot use",
                    cfg.mode
                )))
            }
            (None, true) => {
                return Err(Error::Config(format!(
                    "mode {} requires indexer parameters",
                    cfg.mode
                )))
            }
        }
        match (&self.gates, cfg.mode.uses_gates()) {
            (Some(p), true) => p.validate(cfg.d, cfg.n_kv, cfg.n_h, cfg.d_k)?,
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::Config(format!(
                    "mode {} carries gate parameters it cannot use",
                    cfg.mode
                )))
            }
            (None, true) => {
                return Err(Error::Config(format!(
                    "mode {} requires gate parameters",
                    cfg.mode
                )))
            }
        }
        Ok(())
    }
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub indexer: Option<IndexerVars>,
    pub gates: Option<GateVars>,
}

pub fn bind_layer<F: Real>(tape: &mut Tape<F>, p: &LayerParams<F>) -> LayerVars {
    LayerVars {
        wq: tape.leaf(p.wq.clone()),
        wk: tape.leaf(p.wk.clone()),
        wv: tape.leaf(p.wv.clone()),
        wo: tape.leaf(p.wo.clone()),
        indexer: p.indexer.as_ref().map(|i| bind_indexer(tape, i)),
        gates: p.gates.as_ref().map(|g| bind_gates(tape, g)),
    }
}

// ── Rotary position encoding ────────────────────────────────────────────

/// Rotate each head's channel pairs by a position-dependent angle.
/// `x` is `[L x heads*d_k]` with even `d_k`; pair `i` of each head turns by
/// `t * base^(-2i/d_k)` at row `t`.
pub fn rope_op<F: Real>(tape: &mut Tape<F>, x: Var, heads: usize, d_k: usize) -> Result<Var> {
    let sh = tape.value(x).shape();
    if sh.len() != 2 || sh[1] != heads * d_k {
        return Err(Error::Shape(format!(
            "rotary input shape {sh:?}, want [L, {}]",
            heads * d_k
        )));
    }
    if d_k % 2 != 0 {
        return Err(Error::Config(format!("rotary needs even d_k, got {d_k}")));
    }
    let l = sh[0];
    let half = d_k / 2;
    let mut cos = vec![0.0f64; l * half];
    let mut sin = vec![0.0f64; l * half];
    for t in 0..l {
        for i in 0..half {
            let theta = (t as f64) * 10000f64.powf(-2.0 * i as f64 / d_k as f64);
            cos[t * half + i] = theta.cos();
            sin[t * half + i] = theta.sin();
        }
    }
    let xv = tape.value(x);
    let mut out = vec![F::zero(); l * heads * d_k];
    for t in 0..l {
        for hh in 0..heads {
            let base = t * heads * d_k + hh * d_k;
            for i in 0..half {
                let c = F::from_f64(cos[t * half + i]);
                let s = F::from_f64(sin[t * half + i]);
                let x0 = xv.as_slice()[base + 2 * i];
                let x1 = xv.as_slice()[base + 2 * i + 1];
                out[base + 2 * i] = x0 * c - x1 * s;
                out[base + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    let value = Tensor::from_parts(vec![l, heads * d_k], out);
    let op = RopeBack {
        x,
        cos,
        sin,
        heads,
        d_k,
        l,
    };
    Ok(tape.push_node(value, &[x], Box::new(op)))
}

struct RopeBack {
    x: Var,
    cos: Vec<f64>,
    sin: Vec<f64>,
    heads: usize,
    d_k: usize,
    l: usize,
}

impl<F: Real> Backward<F> for RopeBack {
    fn name(&self) -> &'static str {
        "rope"
    }

    fn backward(&self, args: &BackwardArgs<'_, F>, sink: &mut GradSink<'_, F>) {
        if !sink.wants(self.x) {
            return;
        }
        let half = self.d_k / 2;
        let (heads, d_k) = (self.heads, self.d_k);
        let og = args.out_grad;
        let slot = sink.slot(self.x);
        for t in 0..self.l {
            for hh in 0..heads {
                let base = t * heads * d_k + hh * d_k;
                for i in 0..half {
                    // The inverse rotation (transpose of an orthonormal map).
                    let c = F::from_f64(self.cos[t * half + i]);
                    let s = F::from_f64(self.sin[t * half + i]);
                    let g0 = og[base + 2 * i];
                    let g1 = og[base + 2 * i + 1];
                    slot[base + 2 * i] += g0 * c + g1 * s;
                    slot[base + 2 * i + 1] += g1 * c - g0 * s;
                }
            }
        }
    }
}

// ── Sparse scaled-dot-product attention ─────────────────────────────────

/// Per-query selected source positions, ascending.
pub type Selections = Rc<Vec<Vec<usize>>>;

/// Every query attends to its full causal prefix.
pub fn dense_selections(l: usize) -> Vec<Vec<usize>> {
    (0..l).map(|t| (0..=t).collect()).collect()
}

/// Forward-time observations made inside the attention kernel.
#[derive(Debug, Clone)]
pub struct SdpaRecord<F: Real> {
    /// Mean probability mass on source position 0 over queries `t >= 1` and
    /// all heads (zero for queries that did not select position 0).
    pub first_token_mass: f64,
    /// Mean selected-set size.
    pub mean_k: f64,
    /// Per-query attention distribution averaged over heads, aligned with
    /// the query's selected set. Present only when requested.
    pub teacher_rows: Option<Vec<Vec<F>>>,
}

fn validate_selections(sel: &[Vec<usize>], l: usize) -> Result<()> {
    if sel.len() != l {
        return Err(Error::Shape(format!(
            "{} selection rows for {} queries",
            sel.len(),
            l
        )));
    }
    for (t, row) in sel.iter().enumerate() {
        if row.is_empty() {
            return Err(Error::Invariant(format!("query {t} has an empty selected set")));
        }
        let mut prev = None;
        for &s in row {
            if s > t {
                return Err(Error::Invariant(format!(
                    "query {t} selects future position {s}"
                )));
            }
            if let Some(p) = prev {
                if s <= p {
                    return Err(Error::Invariant(format!(
                        "selection row {t} is not strictly ascending"
                    )));
                }
            }
            prev = Some(s);
        }
    }
    Ok(())
}

/// Sparse attention over per-query selected sets, as one fused tape node.
///
/// `q` is `[L x n_h*d_k]`, `k`/`v` are `[L x n_kv*d_k]`; query head `h`
/// reads key/value head `h / (n_h / n_kv)`. Each query's softmax is
/// normalized over its selected set only. Dense attention is the special
/// case where every selection is the full prefix.
pub fn sparse_sdpa_op<F: Real>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    selections: Selections,
    n_h: usize,
    n_kv: usize,
    d_k: usize,
    record_teacher: bool,
) -> Result<(Var, SdpaRecord<F>)> {
    let l = tape.value(q).rows();
    if tape.value(q).cols() != n_h * d_k
        || tape.value(k).shape() != [l, n_kv * d_k]
        || tape.value(v).shape() != [l, n_kv * d_k]
    {
        return Err(Error::Shape(format!(
            "attention shapes q{:?} k{:?} v{:?} for n_h={n_h} n_kv={n_kv} d_k={d_k}",
            tape.value(q).shape(),
            tape.value(k).shape(),
            tape.value(v).shape()
        )));
    }
    if n_kv == 0 || n_h % n_kv != 0 {
        return Err(Error::Config(format!("n_kv = {n_kv} must divide n_h = {n_h}")));
    }
    validate_selections(&selections, l)?;
    let group = n_h / n_kv;
    let scale = F::from_f64(1.0 / (d_k as f64).sqrt());

    let qs = tape.value(q).as_slice().to_vec();
    let ks = tape.value(k).as_slice().to_vec();
    let vs = tape.value(v).as_slice().to_vec();

    let total_sel: usize = selections.iter().map(|s| s.len()).sum();
    let mut probs: Vec<F> = Vec::with_capacity(total_sel * n_h);
    let mut out = vec![F::zero(); l * n_h * d_k];
    let mut teacher: Option<Vec<Vec<F>>> = record_teacher.then(Vec::new);
    let mut first_mass = 0.0f64;
    let mut first_count = 0u64;
    let mut logits: Vec<F> = Vec::new();

    for t in 0..l {
        let sel = &selections[t];
        let n = sel.len();
        let mut head_mean: Option<Vec<f64>> = teacher.is_some().then(|| vec![0.0; n]);
        for h in 0..n_h {
            let kv = h / group;
            let qrow = &qs[t * n_h * d_k + h * d_k..t * n_h * d_k + (h + 1) * d_k];
            logits.clear();
            let mut max = F::from_f64(f64::NEG_INFINITY);
            for &s in sel {
                let krow = &ks[s * n_kv * d_k + kv * d_k..s * n_kv * d_k + (kv + 1) * d_k];
                let mut dot = F::zero();
                for (&a, &b) in qrow.iter().zip(krow) {
                    dot += a * b;
                }
                let z = dot * scale;
                if z > max {
                    max = z;
                }
                logits.push(z);
            }
            let mut denom = 0.0f64;
            for z in logits.iter_mut() {
                *z = (*z - max).exp();
                denom += z.to_f64();
            }
            let orow = &mut out[t * n_h * d_k + h * d_k..t * n_h * d_k + (h + 1) * d_k];
            for (i, &s) in sel.iter().enumerate() {
                let a = F::from_f64(logits[i].to_f64() / denom);
                probs.push(a);
                if let Some(hm) = head_mean.as_mut() {
                    hm[i] += a.to_f64();
                }
                if t >= 1 && s == 0 {
                    first_mass += a.to_f64();
                }
                let vrow = &vs[s * n_kv * d_k + kv * d_k..s * n_kv * d_k + (kv + 1) * d_k];
                for (o, &vv) in orow.iter_mut().zip(vrow) {
                    *o += a * vv;
                }
            }
        }
        if t >= 1 {
            first_count += n_h as u64;
        }
        if let (Some(teach), Some(hm)) = (teacher.as_mut(), head_mean) {
            teach.push(hm.iter().map(|&p| F::from_f64(p / n_h as f64)).collect());
        }
    }
    tape.count(MacBucket::Attention, 2 * (total_sel * n_h * d_k) as u64);

    let record = SdpaRecord {
        first_token_mass: if first_count == 0 {
            0.0
        } else {
            first_mass / first_count as f64
        },
        mean_k: total_sel as f64 / l as f64,
        teacher_rows: teacher,
    };
    let value = Tensor::from_parts(vec![l, n_h * d_k], out);
    let op = SdpaBack {
        q,
        k,
        v,
        selections,
        probs,
        n_h,
        n_kv,
        d_k,
        l,
    };
    let out_var = tape.push_node(value, &[q, k, v], Box::new(op));
    Ok((out_var, record))
}

struct SdpaBack<F: Real> {
    q: Var,
    k: Var,
    v: Var,
    selections: Selections,
    /// Saved attention probabilities, flattened per query then head then
    /// selected position.
    probs: Vec<F>,
    n_h: usize,
    n_kv: usize,
    d_k: usize,
    l: usize,
}

impl<F: Real> Backward<F> for SdpaBack<F> {
    fn name(&self) -> &'static str {
        "sparse_sdpa"
    }

    fn backward(&self, args: &BackwardArgs<'_, F>, sink: &mut GradSink<'_, F>) {
        let (n_h, n_kv, d_k) = (self.n_h, self.n_kv, self.d_k);
        let group = n_h / n_kv;
        let scale = F::from_f64(1.0 / (d_k as f64).sqrt());
        let qs: Vec<F> = args.val(self.q).as_slice().to_vec();
        let ks: Vec<F> = args.val(self.k).as_slice().to_vec();
        let vs: Vec<F> = args.val(self.v).as_slice().to_vec();
        let og = args.out_grad;

        let (wq, wk, wv) = (sink.wants(self.q), sink.wants(self.k), sink.wants(self.v));
        let mut dq = wq.then(|| vec![F::zero(); self.l * n_h * d_k]);
        let mut dk = wk.then(|| vec![F::zero(); self.l * n_kv * d_k]);
        let mut dv = wv.then(|| vec![F::zero(); self.l * n_kv * d_k]);

        let mut pi = 0usize; // cursor into saved probabilities
        let mut da: Vec<F> = Vec::new();
        for t in 0..self.l {
            let sel = &self.selections[t];
            let n = sel.len();
            for h in 0..n_h {
                let kv = h / group;
                let a = &self.probs[pi..pi + n];
                pi += n;
                let grow = &og[t * n_h * d_k + h * d_k..t * n_h * d_k + (h + 1) * d_k];
                // da_s = g . v_s ; dz_s = a_s (da_s - sum a da)
                da.clear();
                let mut dot = 0.0f64;
                for (i, &s) in sel.iter().enumerate() {
                    let vrow = &vs[s * n_kv * d_k + kv * d_k..s * n_kv * d_k + (kv + 1) * d_k];
                    let mut acc = F::zero();
                    for (&g, &vv) in grow.iter().zip(vrow) {
                        acc += g * vv;
                    }
                    da.push(acc);
                    dot += a[i].to_f64() * acc.to_f64();
                }
                let dot = F::from_f64(dot);
                let qrow = &qs[t * n_h * d_k + h * d_k..t * n_h * d_k + (h + 1) * d_k];
                for (i, &s) in sel.iter().enumerate() {
                    let dz = a[i] * (da[i] - dot) * scale;
                    if let Some(dq) = dq.as_mut() {
                        let krow = &ks[s * n_kv * d_k + kv * d_k..s * n_kv * d_k + (kv + 1) * d_k];
                        let drow = &mut dq[t * n_h * d_k + h * d_k..t * n_h * d_k + (h + 1) * d_k];
                        for (x, &kk) in drow.iter_mut().zip(krow) {
                            *x += dz * kk;
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        let drow = &mut dk[s * n_kv * d_k + kv * d_k..s * n_kv * d_k + (kv + 1) * d_k];
                        for (x, &qq) in drow.iter_mut().zip(qrow) {
                            *x += dz * qq;
                        }
                    }
                    if let Some(dv) = dv.as_mut() {
                        let drow = &mut dv[s * n_kv * d_k + kv * d_k..s * n_kv * d_k + (kv + 1) * d_k];
                        for (x, &g) in drow.iter_mut().zip(grow) {
                            *x += a[i] * g;
                        }
                    }
                }
            }
        }
        if let Some(d) = dq {
            for (g, v) in sink.slot(self.q).iter_mut().zip(d) {
                *g += v;
            }
        }
        if let Some(d) = dk {
            for (g, v) in sink.slot(self.k).iter_mut().zip(d) {
                *g += v;
            }
        }
        if let Some(d) = dv {
            for (g, v) in sink.slot(self.v).iter_mut().zip(d) {
                *g += v;
            }
        }
    }
}

// ── Layer assembly ──────────────────────────────────────────────────────

/// How the layer chooses each query's attended set.
#[derive(Debug, Clone)]
pub enum SelectionPolicy<'a> {
    /// Full causal prefix (dense attention).
    Dense,
    /// Indexer scores + variance-adaptive budget (the trained regime).
    TopK(&'a SparsityState),
    /// Indexer scores with a fixed budget for every query (benchmarking).
    FixedK(usize),
    /// Externally supplied selections, e.g. frozen for gradient checking.
    Given(Selections),
}

/// Where the distillation teacher for the KL term comes from.
#[derive(Debug, Clone)]
pub enum KlTeacher<F: Real> {
    /// No KL term.
    None,
    /// Teacher = this layer's own attention rows over the selected sets,
    /// detached (the training-time regime).
    SelfAttention,
    /// Externally supplied, fully frozen teacher rows (the gradient-check
    /// regime: finite differences must not move the teacher).
    Frozen(Rc<Vec<KlRow<F>>>),
}

/// Everything a caller might want to know about one layer forward pass.
pub struct LayerRun<F: Real> {
    /// Layer output after the output projection, `[L x d]`.
    pub out: Var,
    /// Concatenated head outputs before any output gate, `[L x n_h*d_k]`.
    pub o_sparse: Var,
    /// Head outputs after the output gate (same node as `o_sparse` when the
    /// mode has no gates).
    pub o_gated: Var,
    /// Sigmoid tensor of the value gate, when present.
    pub value_gate: Option<Var>,
    /// Sigmoid tensor of the output gate, when present.
    pub output_gate: Option<Var>,
    /// Indexer scores `[L x L]`, when the mode has an indexer.
    pub scores: Option<Var>,
    /// Mean-over-rows KL from the attention distribution to the indexer's
    /// softmax, when requested.
    pub kl: Option<Var>,
    pub selections: Selections,
    pub first_token_mass: f64,
    pub mean_k: f64,
    /// Per-query head-averaged attention rows (the distillation teacher),
    /// when requested.
    pub teacher_rows: Option<Vec<Vec<F>>>,
    /// Per-query indexer score-row variances (input to the running average).
    pub row_variances: Vec<f64>,
}

/// One full attention layer forward pass on the tape.
///
/// A KL term and the selection policies other than `Dense` require a mode
/// with an indexer. The indexer reads a detached copy of `h`: its
/// parameters learn through the KL term only, and selection is not
/// differentiated.
pub fn gsa_layer<F: Real>(
    tape: &mut Tape<F>,
    h: Var,
    params: &LayerVars,
    cfg: &GsaConfig,
    policy: SelectionPolicy<'_>,
    kl_teacher: KlTeacher<F>,
    record_teacher: bool,
) -> Result<LayerRun<F>> {
    let l = tape.value(h).rows();
    if tape.value(h).cols() != cfg.d {
        return Err(Error::Shape(format!(
            "layer input width {} does not match d = {}",
            tape.value(h).cols(),
            cfg.d
        )));
    }
    let uses_indexer = cfg.mode.uses_indexer();
    let wants_kl = !matches!(kl_teacher, KlTeacher::None);
    if (wants_kl || !matches!(policy, SelectionPolicy::Dense)) && !uses_indexer {
        return Err(Error::Config(format!(
            "mode {} has no indexer to drive selection or distillation",
            cfg.mode
        )));
    }

    // Projections.
    let mut q = tape.matmul_counted(h, params.wq, MacBucket::Qkv)?;
    let mut k = tape.matmul_counted(h, params.wk, MacBucket::Qkv)?;
    let v = tape.matmul_counted(h, params.wv, MacBucket::Qkv)?;
    if cfg.rope {
        q = rope_op(tape, q, cfg.n_h, cfg.d_k)?;
        k = rope_op(tape, k, cfg.n_kv, cfg.d_k)?;
    }

    // Value gate.
    let gates = params.gates.as_ref();
    let (v_eff, value_gate_var) = if let Some(g) = gates.filter(|_| cfg.mode.uses_gates()) {
        let (gated, gate) = value_gate(tape, v, h, g)?;
        (gated, Some(gate))
    } else {
        (v, None)
    };

    // Indexer scores and selection.
    let (scores, selections, row_variances) = if uses_indexer {
        let iv = params.indexer.as_ref().ok_or_else(|| {
            Error::Config(format!("mode {} requires indexer parameters", cfg.mode))
        })?;
        let hd = tape.detach(h);
        let scores = gated_scores_op(tape, hd, iv)?;
        let svals = tape.value(scores);
        let mut variances = Vec::with_capacity(l);
        for t in 0..l {
            variances.push(row_variance(&svals.row(t)[..=t]));
        }
        let sel: Selections = match policy {
            SelectionPolicy::Dense => Rc::new(dense_selections(l)),
            SelectionPolicy::Given(given) => given,
            SelectionPolicy::TopK(state) => {
                let mut comparisons = 0u64;
                let svals = tape.value(scores);
                let sel = (0..l)
                    .map(|t| {
                        let row = &svals.row(t)[..=t];
                        let kt = if cfg.adaptive_k_enabled {
                            adaptive_k(row, state, cfg)
                        } else {
                            cfg.k_base.clamp(cfg.k_min, cfg.k_max)
                        };
                        top_k_select_counted(row, kt, &mut comparisons).indices
                    })
                    .collect();
                tape.count_topk(comparisons);
                Rc::new(sel)
            }
            SelectionPolicy::FixedK(kt) => {
                let mut comparisons = 0u64;
                let svals = tape.value(scores);
                let sel = (0..l)
                    .map(|t| {
                        let row = &svals.row(t)[..=t];
                        top_k_select_counted(row, kt, &mut comparisons).indices
                    })
                    .collect();
                tape.count_topk(comparisons);
                Rc::new(sel)
            }
        };
        (Some(scores), sel, variances)
    } else {
        match policy {
            SelectionPolicy::Dense => {}
            _ => unreachable!("non-dense policy rejected above for indexer-free modes"),
        }
        (None, Rc::new(dense_selections(l)), Vec::new())
    };

    // Attention over the selected sets.
    let need_teacher = record_teacher || matches!(kl_teacher, KlTeacher::SelfAttention);
    let (o_sparse, record) = sparse_sdpa_op(
        tape,
        q,
        k,
        v_eff,
        Rc::clone(&selections),
        cfg.n_h,
        cfg.n_kv,
        cfg.d_k,
        need_teacher,
    )?;

    // Output gate.
    let (o_gated, output_gate_var) = if let Some(g) = gates.filter(|_| cfg.mode.uses_gates()) {
        let (gated, gate) = output_gate(tape, o_sparse, h, g)?;
        (gated, Some(gate))
    } else {
        (o_sparse, None)
    };

    let out = tape.matmul_counted(o_gated, params.wo, MacBucket::Qkv)?;

    // Distillation objective: indexer softmax toward the teacher rows.
    let kl = match kl_teacher {
        KlTeacher::None => None,
        KlTeacher::SelfAttention => {
            let scores_var = scores.expect("indexer mode checked above");
            let teacher = record
                .teacher_rows
                .as_ref()
                .expect("teacher recorded when KL requested");
            let rows: Vec<KlRow<F>> = (0..l)
                .map(|t| KlRow {
                    t,
                    subset: selections[t].clone(),
                    teacher: teacher[t].clone(),
                })
                .collect();
            Some(kl_to_teacher_op(tape, scores_var, Rc::new(rows))?)
        }
        KlTeacher::Frozen(rows) => {
            let scores_var = scores.expect("indexer mode checked above");
            Some(kl_to_teacher_op(tape, scores_var, rows)?)
        }
    };

    Ok(LayerRun {
        out,
        o_sparse,
        o_gated,
        value_gate: value_gate_var,
        output_gate: output_gate_var,
        scores,
        kl,
        selections,
        first_token_mass: record.first_token_mass,
        mean_k: record.mean_k,
        teacher_rows: if record_teacher { record.teacher_rows } else { None },
        row_variances,
    })
}
