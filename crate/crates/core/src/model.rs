//! Byte/token language model built around the sparse attention layer.
//!
//! Architecture: untied embedding, pre-norm residual blocks (RMSNorm ->
//! attention -> residual, RMSNorm -> SiLU FFN -> residual), final RMSNorm,
//! linear head. The attention sublayer is [`gsa_layer`] and carries the
//! mode-dependent machinery (indexer, selection, gates, distillation); this
//! module supplies everything around it plus the language-model loss.

use std::rc::Rc;

use crate::attention::{
    bind_layer, gsa_layer, GsaConfig, KlTeacher, LayerParams, LayerRun, LayerVars,
    Selections, SelectionPolicy,
};
use crate::error::{Error, Result};
use crate::indexer::{KlRow, SparsityState};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Backward, BackwardArgs, GradSink, MacBucket, Tape, Var};
use crate::tensor::{Init, Tensor};

use serde::{Deserialize, Serialize};

/// Epsilon inside the RMS denominator.
const RMS_EPS: f64 = 1e-6;

/// Shape of the whole model: token space, depth, FFN width, and the
/// embedded attention configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub vocab_size: usize,
    pub ffn_width: usize,
    pub attention: GsaConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be positive".to_string()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size = {} is too small for a next-token objective",
                self.vocab_size
            )));
        }
        if self.ffn_width == 0 {
            return Err(Error::Config("ffn_width must be positive".to_string()));
        }
        Ok(())
    }
}

/// One residual block: pre-norm attention, then a pre-norm SiLU FFN.
#[derive(Debug, Clone)]
pub struct BlockParams<F: Real> {
    /// RMSNorm gain ahead of the attention sublayer, `[d]`.
    pub gamma1: Tensor<F>,
    pub attn: LayerParams<F>,
    /// RMSNorm gain ahead of the FFN, `[d]`.
    pub gamma2: Tensor<F>,
    /// `[d x ffn_width]`.
    pub ffn_w1: Tensor<F>,
    /// `[ffn_width x d]`.
    pub ffn_w2: Tensor<F>,
}

/// Full parameter set.
#[derive(Debug, Clone)]
pub struct ModelParams<F: Real> {
    /// Token embedding table, `[vocab x d]`.
    pub embed: Tensor<F>,
    pub blocks: Vec<BlockParams<F>>,
    /// Final RMSNorm gain, `[d]`.
    pub final_gamma: Tensor<F>,
    /// Output head, `[d x vocab]` (untied from the embedding).
    pub w_out: Tensor<F>,
}

impl<F: Real> ModelParams<F> {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.attention.d;
        let w = Init::Normal(0.02);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                gamma1: Tensor::full(vec![d], F::one()),
                attn: LayerParams::init(&cfg.attention, rng),
                gamma2: Tensor::full(vec![d], F::one()),
                ffn_w1: crate::tensor::init_matrix(d, cfg.ffn_width, w, rng),
                ffn_w2: crate::tensor::init_matrix(cfg.ffn_width, d, w, rng),
            })
            .collect();
        ModelParams {
            embed: crate::tensor::init_matrix(cfg.vocab_size, d, w, rng),
            blocks,
            final_gamma: Tensor::full(vec![d], F::one()),
            w_out: crate::tensor::init_matrix(d, cfg.vocab_size, w, rng),
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        visit_params(self, &mut |_, t| n += t.numel());
        n
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.attention.d;
        if self.embed.shape() != [cfg.vocab_size, d] {
            return Err(Error::Shape("embedding table shape mismatch".to_string()));
        }
        if self.blocks.len() != cfg.n_layers {
            return Err(Error::Shape(format!(
                "{} blocks allocated for n_layers = {}",
                self.blocks.len(),
                cfg.n_layers
            )));
        }
        for b in &self.blocks {
            b.attn.validate(&cfg.attention)?;
            if b.gamma1.numel() != d || b.gamma2.numel() != d {
                return Err(Error::Shape("norm gain width mismatch".to_string()));
            }
            if b.ffn_w1.shape() != [d, cfg.ffn_width] || b.ffn_w2.shape() != [cfg.ffn_width, d] {
                return Err(Error::Shape("ffn weight shape mismatch".to_string()));
            }
        }
        if self.w_out.shape() != [d, cfg.vocab_size] {
            return Err(Error::Shape("output head shape mismatch".to_string()));
        }
        Ok(())
    }
}

/// Walk every parameter tensor with its dotted path name, in a fixed order.
///
/// Names look like `blocks.0.attn.indexer.wq` or `blocks.1.ffn_w2`; the
/// optimizer's group assignment and the checkpoint format both key off these
/// strings, so the order and spelling are part of the contract.
pub fn visit_params<F: Real>(p: &ModelParams<F>, f: &mut dyn FnMut(&str, &Tensor<F>)) {
    f("embed", &p.embed);
    for (i, b) in p.blocks.iter().enumerate() {
        f(&format!("blocks.{i}.gamma1"), &b.gamma1);
        f(&format!("blocks.{i}.attn.wq"), &b.attn.wq);
        f(&format!("blocks.{i}.attn.wk"), &b.attn.wk);
        f(&format!("blocks.{i}.attn.wv"), &b.attn.wv);
        f(&format!("blocks.{i}.attn.wo"), &b.attn.wo);
        if let Some(ix) = &b.attn.indexer {
            f(&format!("blocks.{i}.attn.indexer.wq"), &ix.wq);
            f(&format!("blocks.{i}.attn.indexer.wk"), &ix.wk);
            f(&format!("blocks.{i}.attn.indexer.ww"), &ix.ww);
            f(&format!("blocks.{i}.attn.indexer.b"), &ix.b);
        }
        if let Some(g) = &b.attn.gates {
            f(&format!("blocks.{i}.attn.gates.wg_v"), &g.wg_v);
            f(&format!("blocks.{i}.attn.gates.bg_v"), &g.bg_v);
            f(&format!("blocks.{i}.attn.gates.wg_o"), &g.wg_o);
            f(&format!("blocks.{i}.attn.gates.bg_o"), &g.bg_o);
        }
        f(&format!("blocks.{i}.gamma2"), &b.gamma2);
        f(&format!("blocks.{i}.ffn_w1"), &b.ffn_w1);
        f(&format!("blocks.{i}.ffn_w2"), &b.ffn_w2);
    }
    f("final_gamma", &p.final_gamma);
    f("w_out", &p.w_out);
}

/// Mutable counterpart of [`visit_params`]; same order, same names.
pub fn visit_params_mut<F: Real>(p: &mut ModelParams<F>, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
    f("embed", &mut p.embed);
    for (i, b) in p.blocks.iter_mut().enumerate() {
        f(&format!("blocks.{i}.gamma1"), &mut b.gamma1);
        f(&format!("blocks.{i}.attn.wq"), &mut b.attn.wq);
        f(&format!("blocks.{i}.attn.wk"), &mut b.attn.wk);
        f(&format!("blocks.{i}.attn.wv"), &mut b.attn.wv);
        f(&format!("blocks.{i}.attn.wo"), &mut b.attn.wo);
        if let Some(ix) = &mut b.attn.indexer {
            f(&format!("blocks.{i}.attn.indexer.wq"), &mut ix.wq);
            f(&format!("blocks.{i}.attn.indexer.wk"), &mut ix.wk);
            f(&format!("blocks.{i}.attn.indexer.ww"), &mut ix.ww);
            f(&format!("blocks.{i}.attn.indexer.b"), &mut ix.b);
        }
        if let Some(g) = &mut b.attn.gates {
            f(&format!("blocks.{i}.attn.gates.wg_v"), &mut g.wg_v);
            f(&format!("blocks.{i}.attn.gates.bg_v"), &mut g.bg_v);
            f(&format!("blocks.{i}.attn.gates.wg_o"), &mut g.wg_o);
            f(&format!("blocks.{i}.attn.gates.bg_o"), &mut g.bg_o);
        }
        f(&format!("blocks.{i}.gamma2"), &mut b.gamma2);
        f(&format!("blocks.{i}.ffn_w1"), &mut b.ffn_w1);
        f(&format!("blocks.{i}.ffn_w2"), &mut b.ffn_w2);
    }
    f("final_gamma", &mut p.final_gamma);
    f("w_out", &mut p.w_out);
}

/// Tape handles for one block.
pub struct BlockVars {
    pub gamma1: Var,
    pub attn: LayerVars,
    pub gamma2: Var,
    pub ffn_w1: Var,
    pub ffn_w2: Var,
}

/// Tape handles for the whole model.
pub struct ModelVars {
    pub embed: Var,
    pub blocks: Vec<BlockVars>,
    pub final_gamma: Var,
    pub w_out: Var,
}

/// Bind every parameter as a differentiable leaf (the training path).
pub fn bind_model<F: Real>(tape: &mut Tape<F>, p: &ModelParams<F>) -> ModelVars {
    bind_model_named(tape, p).0
}

/// Bind every parameter as a leaf and also return the `(name, var)` pairs
/// in visitation order, so gradients can be read back by parameter name
/// after a backward pass.
pub fn bind_model_named<F: Real>(
    tape: &mut Tape<F>,
    p: &ModelParams<F>,
) -> (ModelVars, Vec<(String, Var)>) {
    let mut pairs: Vec<(String, Var)> = Vec::new();
    visit_params(p, &mut |name, t| {
        let leaf = tape.leaf(t.clone());
        pairs.push((name.to_string(), leaf));
    });
    let lookup: std::collections::BTreeMap<&str, Var> =
        pairs.iter().map(|(n, v)| (n.as_str(), *v)).collect();
    let vars = bind_model_mixed(tape, p, |n| lookup.get(n).copied());
    (vars, pairs)
}

/// Bind parameters, letting the caller supply the tape handle for some of
/// them by name. Parameters for which `supply` returns `None` become
/// constants — they take part in the forward pass but receive no gradient.
/// The gradient-check harness uses this to focus finite differences on one
/// parameter group at a time.
pub fn bind_model_mixed<F: Real>(
    tape: &mut Tape<F>,
    p: &ModelParams<F>,
    mut supply: impl FnMut(&str) -> Option<Var>,
) -> ModelVars {
    let mut bind = |tape: &mut Tape<F>, name: &str, t: &Tensor<F>| match supply(name) {
        Some(v) => v,
        None => tape.constant(t.clone()),
    };
    let blocks = p
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| BlockVars {
            gamma1: bind(tape, &format!("blocks.{i}.gamma1"), &b.gamma1),
            attn: {
                let wq = bind(tape, &format!("blocks.{i}.attn.wq"), &b.attn.wq);
                let wk = bind(tape, &format!("blocks.{i}.attn.wk"), &b.attn.wk);
                let wv = bind(tape, &format!("blocks.{i}.attn.wv"), &b.attn.wv);
                let wo = bind(tape, &format!("blocks.{i}.attn.wo"), &b.attn.wo);
                let indexer = b.attn.indexer.as_ref().map(|ix| crate::indexer::IndexerVars {
                    wq: bind(tape, &format!("blocks.{i}.attn.indexer.wq"), &ix.wq),
                    wk: bind(tape, &format!("blocks.{i}.attn.indexer.wk"), &ix.wk),
                    ww: bind(tape, &format!("blocks.{i}.attn.indexer.ww"), &ix.ww),
                    b: bind(tape, &format!("blocks.{i}.attn.indexer.b"), &ix.b),
                });
                let gates = b.attn.gates.as_ref().map(|g| crate::gating::GateVars {
                    wg_v: bind(tape, &format!("blocks.{i}.attn.gates.wg_v"), &g.wg_v),
                    bg_v: bind(tape, &format!("blocks.{i}.attn.gates.bg_v"), &g.bg_v),
                    wg_o: bind(tape, &format!("blocks.{i}.attn.gates.wg_o"), &g.wg_o),
                    bg_o: bind(tape, &format!("blocks.{i}.attn.gates.bg_o"), &g.bg_o),
                });
                LayerVars { wq, wk, wv, wo, indexer, gates }
            },
            gamma2: bind(tape, &format!("blocks.{i}.gamma2"), &b.gamma2),
            ffn_w1: bind(tape, &format!("blocks.{i}.ffn_w1"), &b.ffn_w1),
            ffn_w2: bind(tape, &format!("blocks.{i}.ffn_w2"), &b.ffn_w2),
        })
        .collect();
    ModelVars {
        embed: bind(tape, "embed", &p.embed),
        blocks,
        final_gamma: bind(tape, "final_gamma", &p.final_gamma),
        w_out: bind(tape, "w_out", &p.w_out),
    }
}

// --- embedding lookup -------------------------------------------------------

struct EmbedBack {
    table: Var,
    ids: Rc<Vec<usize>>,
    d: usize,
}

impl<F: Real> Backward<F> for EmbedBack {
    fn name(&self) -> &'static str {
        "embedding"
    }

    fn backward(&self, args: &BackwardArgs<'_, F>, sink: &mut GradSink<'_, F>) {
        if !sink.wants(self.table) {
            return;
        }
        let og = args.out_grad;
        let slot = sink.slot(self.table);
        for (t, &id) in self.ids.iter().enumerate() {
            let src = &og[t * self.d..(t + 1) * self.d];
            let dst = &mut slot[id * self.d..(id + 1) * self.d];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + *s;
            }
        }
    }
}

/// Row-gather from an embedding table: out row `t` is `table[ids[t]]`.
/// Backward scatter-adds, so repeated ids accumulate.
pub fn embedding_op<F: Real>(tape: &mut Tape<F>, table: Var, ids: &[usize]) -> Result<Var> {
    let tv = tape.value(table);
    let (vocab, d) = (tv.rows(), tv.cols());
    if ids.is_empty() {
        return Err(Error::Shape("embedding lookup with no ids".to_string()));
    }
    for &id in ids {
        if id >= vocab {
            return Err(Error::Shape(format!(
                "token id {id} out of range for vocab {vocab}"
            )));
        }
    }
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        data.extend_from_slice(tv.row(id));
    }
    let out = Tensor::from_parts(vec![ids.len(), d], data);
    Ok(tape.push_node(
        out,
        &[table],
        Box::new(EmbedBack { table, ids: Rc::new(ids.to_vec()), d }),
    ))
}

// --- RMS normalization ------------------------------------------------------

struct RmsNormBack {
    x: Var,
    gamma: Var,
}

impl<F: Real> Backward<F> for RmsNormBack {
    fn name(&self) -> &'static str {
        "rmsnorm"
    }

    fn backward(&self, args: &BackwardArgs<'_, F>, sink: &mut GradSink<'_, F>) {
        let xv = args.val(self.x);
        let gv = args.val(self.gamma);
        let (l, n) = (xv.rows(), xv.cols());
        let og = args.out_grad;
        let want_x = sink.wants(self.x);
        let want_g = sink.wants(self.gamma);
        // dgamma accumulates over rows; buffer locally, then write once.
        let mut dgamma = vec![0.0f64; if want_g { n } else { 0 }];
        if want_x {
            for t in 0..l {
                let x = xv.row(t);
                let g = &og[t * n..(t + 1) * n];
                let mut ms = 0.0f64;
                for v in x {
                    let f = v.to_f64();
                    ms += f * f;
                }
                let r = (ms / n as f64 + RMS_EPS).sqrt();
                // s = sum_i g_i * gamma_i * x_i
                let mut s = 0.0f64;
                for i in 0..n {
                    s += g[i].to_f64() * gv.as_slice()[i].to_f64() * x[i].to_f64();
                }
                let slot = sink.slot(self.x);
                let dst = &mut slot[t * n..(t + 1) * n];
                let c = s / (n as f64 * r * r * r);
                for i in 0..n {
                    let d = g[i].to_f64() * gv.as_slice()[i].to_f64() / r - x[i].to_f64() * c;
                    dst[i] = dst[i] + F::from_f64(d);
                }
            }
        }
        if want_g {
            for t in 0..l {
                let x = xv.row(t);
                let g = &og[t * n..(t + 1) * n];
                let mut ms = 0.0f64;
                for v in x {
                    let f = v.to_f64();
                    ms += f * f;
                }
                let r = (ms / n as f64 + RMS_EPS).sqrt();
                for i in 0..n {
                    dgamma[i] += g[i].to_f64() * x[i].to_f64() / r;
                }
            }
            let slot = sink.slot(self.gamma);
            for i in 0..n {
                slot[i] = slot[i] + F::from_f64(dgamma[i]);
            }
        }
    }
}

/// Row-wise RMS normalization with a learned gain:
/// `y_i = gamma_i * x_i / sqrt(mean_j x_j^2 + eps)`.
pub fn rmsnorm_op<F: Real>(tape: &mut Tape<F>, x: Var, gamma: Var) -> Result<Var> {
    let xv = tape.value(x);
    let (l, n) = (xv.rows(), xv.cols());
    if tape.value(gamma).numel() != n {
        return Err(Error::Shape(format!(
            "norm gain has {} entries for width {}",
            tape.value(gamma).numel(),
            n
        )));
    }
    let gv = tape.value(gamma);
    let mut data = Vec::with_capacity(l * n);
    for t in 0..l {
        let row = tape.value(x).row(t);
        let mut ms = 0.0f64;
        for v in row {
            let f = v.to_f64();
            ms += f * f;
        }
        let r = (ms / n as f64 + RMS_EPS).sqrt();
        let inv = F::from_f64(1.0 / r);
        for i in 0..n {
            data.push(gv.as_slice()[i] * row[i] * inv);
        }
    }
    let out = Tensor::from_parts(vec![l, n], data);
    Ok(tape.push_node(out, &[x, gamma], Box::new(RmsNormBack { x, gamma })))
}

// --- FFN --------------------------------------------------------------------

/// Two-layer SiLU feed-forward: `silu(x W1) W2`, built from existing tape
/// primitives (`silu(a) = a * sigmoid(a)`).
pub fn silu_ffn<F: Real>(tape: &mut Tape<F>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let a = tape.matmul_counted(x, w1, MacBucket::Other)?;
    let s = tape.sigmoid_op(a);
    let act = tape.mul(a, s)?;
    tape.matmul_counted(act, w2, MacBucket::Other)
}

// --- cross-entropy ----------------------------------------------------------

struct CrossEntropyBack {
    logits: Var,
    targets: Rc<Vec<usize>>,
    /// Row-wise softmax of the logits, saved by the forward pass.
    probs: Tensor<f64>,
}

impl<F: Real> Backward<F> for CrossEntropyBack {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, args: &BackwardArgs<'_, F>, sink: &mut GradSink<'_, F>) {
        if !sink.wants(self.logits) {
            return;
        }
        let og = args.out_grad[0].to_f64();
        let (l, v) = (self.probs.rows(), self.probs.cols());
        let scale = og / l as f64;
        let slot = sink.slot(self.logits);
        for t in 0..l {
            let p = self.probs.row(t);
            let dst = &mut slot[t * v..(t + 1) * v];
            for c in 0..v {
                let ind = if c == self.targets[t] { 1.0 } else { 0.0 };
                dst[c] = dst[c] + F::from_f64(scale * (p[c] - ind));
            }
        }
    }
}

/// Mean next-token cross-entropy over rows: `-1/L * sum_t log softmax(z_t)[y_t]`.
///
/// The log-sum-exp runs in f64 with max subtraction regardless of the
/// working precision, so the loss survives confident logits.
pub fn cross_entropy_op<F: Real>(tape: &mut Tape<F>, logits: Var, targets: &[usize]) -> Result<Var> {
    let zv = tape.value(logits);
    let (l, v) = (zv.rows(), zv.cols());
    if targets.len() != l {
        return Err(Error::Shape(format!(
            "{} targets for {} logit rows",
            targets.len(),
            l
        )));
    }
    for &y in targets {
        if y >= v {
            return Err(Error::Shape(format!("target {y} out of range for vocab {v}")));
        }
    }
    let mut probs = Tensor::<f64>::zeros(vec![l, v]);
    let mut total = 0.0f64;
    for t in 0..l {
        let row = zv.row(t);
        let mut m = f64::NEG_INFINITY;
        for z in row {
            m = m.max(z.to_f64());
        }
        let mut denom = 0.0f64;
        let prow = &mut probs.as_mut_slice()[t * v..(t + 1) * v];
        for c in 0..v {
            let e = (row[c].to_f64() - m).exp();
            prow[c] = e;
            denom += e;
        }
        for p in prow.iter_mut() {
            *p /= denom;
        }
        total += denom.ln() + m - row[targets[t]].to_f64();
    }
    let out = Tensor::scalar(F::from_f64(total / l as f64));
    Ok(tape.push_node(
        out,
        &[logits],
        Box::new(CrossEntropyBack { logits, targets: Rc::new(targets.to_vec()), probs }),
    ))
}

// --- whole-model forward ----------------------------------------------------

/// How each layer chooses its attended set for this pass.
pub enum ModelPolicy<'a> {
    /// Full causal prefix in every layer.
    Dense,
    /// Indexer scores with the variance-adaptive budget; one running
    /// variance state per layer.
    TopK(&'a [SparsityState]),
    /// Indexer scores with a fixed budget (benchmarks, probes).
    FixedK(usize),
    /// Externally fixed selections, one set of rows per layer.
    Given(&'a [Selections]),
}

/// Where each layer's distillation teacher comes from.
pub enum ModelKl<'a, F: Real> {
    None,
    /// Each layer distills toward its own attention rows (detached).
    SelfAttention,
    /// Frozen per-layer teacher rows (gradient checking).
    Frozen(&'a [Rc<Vec<KlRow<F>>>]),
}

/// Everything produced by one forward pass over a single sequence.
pub struct ModelRun<F: Real> {
    /// `[L x vocab]` next-token logits.
    pub logits: Var,
    /// Mean cross-entropy, when targets were supplied.
    pub ce: Option<Var>,
    /// Mean of the per-layer distillation losses, when requested.
    pub kl: Option<Var>,
    /// Per-layer forward records, in depth order.
    pub layers: Vec<LayerRun<F>>,
}

/// Run the model over one token sequence.
///
/// `targets`, when present, must have the same length as `tokens`. The
/// policy and teacher selectors must match the configured depth; modes
/// without an indexer accept only [`ModelPolicy::Dense`] and
/// [`ModelKl::None`].
pub fn model_forward<F: Real>(
    tape: &mut Tape<F>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    tokens: &[usize],
    targets: Option<&[usize]>,
    policy: &ModelPolicy<'_>,
    kl: &ModelKl<'_, F>,
    record_teacher: bool,
) -> Result<ModelRun<F>> {
    if vars.blocks.len() != cfg.n_layers {
        return Err(Error::Config(format!(
            "{} bound blocks for n_layers = {}",
            vars.blocks.len(),
            cfg.n_layers
        )));
    }
    match policy {
        ModelPolicy::TopK(states) if states.len() != cfg.n_layers => {
            return Err(Error::Config(format!(
                "{} sparsity states for {} layers",
                states.len(),
                cfg.n_layers
            )));
        }
        ModelPolicy::Given(sel) if sel.len() != cfg.n_layers => {
            return Err(Error::Config(format!(
                "{} selection sets for {} layers",
                sel.len(),
                cfg.n_layers
            )));
        }
        _ => {}
    }
    if let ModelKl::Frozen(rows) = kl {
        if rows.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "{} frozen teacher sets for {} layers",
                rows.len(),
                cfg.n_layers
            )));
        }
    }

    let mut x = embedding_op(tape, vars.embed, tokens)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut kl_terms = Vec::new();
    for (i, b) in vars.blocks.iter().enumerate() {
        let a_in = rmsnorm_op(tape, x, b.gamma1)?;
        let layer_policy = match policy {
            ModelPolicy::Dense => SelectionPolicy::Dense,
            ModelPolicy::TopK(states) => SelectionPolicy::TopK(&states[i]),
            ModelPolicy::FixedK(k) => SelectionPolicy::FixedK(*k),
            ModelPolicy::Given(sel) => SelectionPolicy::Given(Rc::clone(&sel[i])),
        };
        let layer_kl = match kl {
            ModelKl::None => KlTeacher::None,
            ModelKl::SelfAttention => KlTeacher::SelfAttention,
            ModelKl::Frozen(rows) => KlTeacher::Frozen(Rc::clone(&rows[i])),
        };
        let run = gsa_layer(tape, a_in, &b.attn, &cfg.attention, layer_policy, layer_kl, record_teacher)?;
        x = tape.add(x, run.out)?;
        let f_in = rmsnorm_op(tape, x, b.gamma2)?;
        let f_out = silu_ffn(tape, f_in, b.ffn_w1, b.ffn_w2)?;
        x = tape.add(x, f_out)?;
        if let Some(k) = run.kl {
            kl_terms.push(k);
        }
        layers.push(run);
    }
    let xn = rmsnorm_op(tape, x, vars.final_gamma)?;
    let logits = tape.matmul_counted(xn, vars.w_out, MacBucket::Other)?;
    let ce = match targets {
        Some(y) => Some(cross_entropy_op(tape, logits, y)?),
        None => None,
    };
    let kl = if kl_terms.is_empty() {
        None
    } else {
        let mut acc = kl_terms[0];
        for &t in &kl_terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Some(tape.scale(acc, 1.0 / kl_terms.len() as f64))
    };
    Ok(ModelRun { logits, ce, kl, layers })
}

/// Convenience: bind a layer's parameters and run it outside a full model
/// (probes and benchmarks).
pub fn run_single_layer<F: Real>(
    tape: &mut Tape<F>,
    h: &Tensor<F>,
    params: &LayerParams<F>,
    cfg: &GsaConfig,
    policy: SelectionPolicy<'_>,
) -> Result<LayerRun<F>> {
    let hv = tape.constant(h.clone());
    let vars = bind_layer(tape, params);
    gsa_layer(tape, hv, &vars, cfg, policy, KlTeacher::None, false)
}

/// One parameter group's result from [`model_gradcheck`].
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub max_rel_err: f64,
    pub worst_param: String,
}

/// Finite-difference verification of the model's complete backward pass,
/// reported per parameter group (64-bit only).
///
/// Selections are non-differentiable and the importance scorer reads a
/// detached copy of the hidden state, so the check first fixes a base
/// point: one forward pass realizes the selected sets and the dense
/// teacher rows, and both stay frozen for every evaluation after that.
/// Two objectives then cover every parameter:
///
/// * the language-model loss, checked group by group — under frozen
///   selections it cannot reach the scorer, whose gradient there is
///   exactly zero on both sides of the comparison;
/// * the distillation loss, checked over the scorer's parameters alone.
///   Along this objective the hidden state reaches the scorer only
///   through the detached copy, so perturbing an upstream weight moves
///   the scorer's input numerically but (by design) not analytically;
///   holding upstream weights constant makes the comparison measure the
///   implemented rule rather than that deliberate cut.
///
/// Weights are drawn from the usual init and scaled up so every gradient
/// path sits well above finite-difference noise. `corrupt` installs the
/// negative-control fixture on each analytic tape.
pub fn model_gradcheck(
    cfg: &ModelConfig,
    seq_len: usize,
    seed: u64,
    corrupt: Option<crate::tape::Corruption>,
) -> Result<Vec<GroupCheck>> {
    use std::collections::BTreeMap;

    cfg.validate()?;
    if seq_len < 2 {
        return Err(Error::Config(format!("gradcheck needs seq_len >= 2, got {seq_len}")));
    }
    let mut rng = Rng::new(seed);
    let mut p = ModelParams::<f64>::init(cfg, &mut rng);
    visit_params_mut(&mut p, &mut |name, t| {
        if !name.ends_with("gamma1") && !name.ends_with("gamma2") && name != "final_gamma" {
            for x in t.as_mut_slice() {
                *x *= 8.0;
            }
        }
    });
    let tokens: Vec<usize> = (0..seq_len).map(|_| rng.below(cfg.vocab_size)).collect();
    let targets: Vec<usize> = (0..seq_len).map(|_| rng.below(cfg.vocab_size)).collect();
    let uses_indexer = cfg.attention.mode.uses_indexer();
    let k = cfg.attention.k_base.min(seq_len).max(1);

    // Base point.
    let (frozen_sel, frozen_rows) = if uses_indexer {
        let mut tape = Tape::<f64>::no_grad();
        let vars = bind_model(&mut tape, &p);
        let run = model_forward(
            &mut tape,
            &vars,
            cfg,
            &tokens,
            None,
            &ModelPolicy::FixedK(k),
            &ModelKl::None,
            true,
        )?;
        let sel: Vec<Selections> =
            run.layers.iter().map(|l| Rc::clone(&l.selections)).collect();
        let rows: Vec<Rc<Vec<KlRow<f64>>>> = run
            .layers
            .iter()
            .map(|l| {
                let teacher = l.teacher_rows.as_ref().expect("teacher was recorded");
                Rc::new(
                    (0..tokens.len())
                        .map(|t| KlRow {
                            t,
                            subset: l.selections[t].clone(),
                            teacher: teacher[t].clone(),
                        })
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        (Some(sel), Some(rows))
    } else {
        (None, None)
    };

    let mut by_group: BTreeMap<ParamGroup, (Vec<String>, Vec<Tensor<f64>>)> = BTreeMap::new();
    visit_params(&p, &mut |name, t| {
        let entry = by_group.entry(ParamGroup::of(name)).or_default();
        entry.0.push(name.to_string());
        entry.1.push(t.clone());
    });

    let mut out = Vec::new();
    for (group, (names, tensors)) in by_group {
        let lm_report = crate::gradcheck::grad_check_with(
            &tensors,
            1e-5,
            corrupt.clone(),
            |tape, vars| {
                let lookup: BTreeMap<&str, Var> =
                    names.iter().map(|n| n.as_str()).zip(vars.iter().copied()).collect();
                let mv = bind_model_mixed(tape, &p, |n| lookup.get(n).copied());
                let policy = match &frozen_sel {
                    Some(s) => ModelPolicy::Given(s),
                    None => ModelPolicy::Dense,
                };
                let run = model_forward(
                    tape,
                    &mv,
                    cfg,
                    &tokens,
                    Some(&targets),
                    &policy,
                    &ModelKl::None,
                    false,
                )?;
                Ok(run.ce.expect("targets were supplied"))
            },
        )?;
        let mut max_rel_err = lm_report.max_rel_err;
        let mut worst_param = names[lm_report.worst_param].clone();
        if group == ParamGroup::Indexer {
            let rows = frozen_rows.as_ref().expect("indexer modes freeze teacher rows");
            let kl_report = crate::gradcheck::grad_check_with(
                &tensors,
                1e-5,
                corrupt.clone(),
                |tape, vars| {
                    let lookup: BTreeMap<&str, Var> =
                        names.iter().map(|n| n.as_str()).zip(vars.iter().copied()).collect();
                    let mv = bind_model_mixed(tape, &p, |n| lookup.get(n).copied());
                    let policy = match &frozen_sel {
                        Some(s) => ModelPolicy::Given(s),
                        None => ModelPolicy::Dense,
                    };
                    let run = model_forward(
                        tape, &mv, cfg, &tokens, None, &policy, &ModelKl::Frozen(rows), false,
                    )?;
                    Ok(run.kl.expect("frozen teacher rows imply a kl loss"))
                },
            )?;
            if kl_report.max_rel_err > max_rel_err {
                max_rel_err = kl_report.max_rel_err;
                worst_param = names[kl_report.worst_param].clone();
            }
        }
        out.push(GroupCheck { group, max_rel_err, worst_param });
    }
    Ok(out)
}

/// Parameter-group partition used by the optimizer and reporting: the
/// indexer learns through distillation at its own learning rate, gates are
/// reported separately, everything else is the base group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Base,
    Indexer,
    Gates,
}

impl ParamGroup {
    /// Classify a dotted parameter name from [`visit_params`].
    pub fn of(name: &str) -> ParamGroup {
        if name.contains(".indexer.") {
            ParamGroup::Indexer
        } else if name.contains(".gates.") {
            ParamGroup::Gates
        } else {
            ParamGroup::Base
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::Base => "base",
            ParamGroup::Indexer => "indexer",
            ParamGroup::Gates => "gates",
        }
    }
}
