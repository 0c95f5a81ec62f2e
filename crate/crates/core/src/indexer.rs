//! The lightning indexer: a small learned scorer that decides which context
//! positions each query may attend to, plus the machinery around it
//! (adaptive budgets, top-k selection, and the KL objective that trains it).
//!
//! Two scorer variants exist. The gated scorer combines, per indexer head, a
//! sigmoid-squashed query-key logit with a sigmoid head weight, so every
//! score lies strictly inside `(0, H)` for `H` heads and gradients flow from
//! every score back to every parameter. The baseline scorer replaces both
//! sigmoids with a plain linear head weight and a ReLU, which kills the
//! gradient wherever the query-key product is negative.
//!
//! Scores are only defined on the causal triangle `s <= t`; entries above
//! the diagonal are structurally zero and carry no gradient.
//!
//! The indexer reads the residual stream as a detached signal: its scores
//! influence the rest of the layer only through the (non-differentiable)
//! selection, and its parameters learn only through the KL objective.

use std::rc::Rc;

use crate::attention::GsaConfig;
use crate::error::{Error, Result};
use crate::real::{sigmoid, Real};
use crate::rng::Rng;
use crate::tape::{Backward, BackwardArgs, GradSink, MacBucket, Tape, Var};
use crate::tensor::{
    init_matrix, matmul, matmul_at_b_acc, softmax_dense_into, Init, Tensor,
};

/// Learned parameters of the indexer.
///
/// `wq` packs one `d -> d_i` query projection per head as column blocks
/// (`[d x (heads * d_i)]`); the key projection `wk` is shared by all heads.
/// `ww` produces the per-head mixing weights from the residual stream and
/// `b` is the per-head logit bias (used by the gated variant only).
#[derive(Debug, Clone)]
pub struct IndexerParams<F: Real> {
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub ww: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Real> IndexerParams<F> {
    /// Fresh parameters: projections ~ normal(0.02), biases zero. With
    /// typical inputs this puts both sigmoids near 0.5, so initial scores
    /// sit near `heads/4`.
    pub fn init(d: usize, heads: usize, d_i: usize, rng: &mut Rng) -> Self {
        IndexerParams {
            wq: init_matrix(d, heads * d_i, Init::Normal(0.02), rng),
            wk: init_matrix(d, d_i, Init::Normal(0.02), rng),
            ww: init_matrix(d, heads, Init::Normal(0.02), rng),
            b: Tensor::zeros(vec![heads]),
        }
    }

    pub fn zeros(d: usize, heads: usize, d_i: usize) -> Self {
        IndexerParams {
            wq: Tensor::zeros(vec![d, heads * d_i]),
            wk: Tensor::zeros(vec![d, d_i]),
            ww: Tensor::zeros(vec![d, heads]),
            b: Tensor::zeros(vec![heads]),
        }
    }

    pub fn heads(&self) -> usize {
        self.ww.cols()
    }

    pub fn d_i(&self) -> usize {
        self.wk.cols()
    }

    /// Total parameter count for the given dimensions.
    pub fn param_count(d: usize, heads: usize, d_i: usize) -> usize {
        heads * d * d_i + d * d_i + d * heads + heads
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let heads = self.heads();
        let d_i = self.d_i();
        if self.wq.shape() != [d, heads * d_i] {
            return Err(Error::Shape(format!(
                "indexer wq shape {:?}, want [{d}, {}]",
                self.wq.shape(),
                heads * d_i
            )));
        }
        if self.wk.shape() != [d, d_i] || self.ww.shape() != [d, heads] {
            return Err(Error::Shape("indexer wk/ww shape mismatch".to_string()));
        }
        if self.b.shape() != [heads] {
            return Err(Error::Shape(format!(
                "indexer bias shape {:?}, want [{heads}]",
                self.b.shape()
            )));
        }
        Ok(())
    }
}

/// Tape handles for one indexer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct IndexerVars {
    pub wq: Var,
    pub wk: Var,
    pub ww: Var,
    pub b: Var,
}

pub fn bind_indexer<F: Real>(tape: &mut Tape<F>, p: &IndexerParams<F>) -> IndexerVars {
    IndexerVars {
        wq: tape.leaf(p.wq.clone()),
        wk: tape.leaf(p.wk.clone()),
        ww: tape.leaf(p.ww.clone()),
        b: tape.leaf(p.b.clone()),
    }
}

fn scorer_dims<F: Real>(tape: &Tape<F>, h: Var, p: &IndexerVars) -> Result<(usize, usize, usize, usize)> {
    let hsh = tape.value(h).shape();
    if hsh.len() != 2 {
        return Err(Error::Shape(format!("indexer input must be [L x d], got {hsh:?}")));
    }
    let (l, d) = (hsh[0], hsh[1]);
    let heads = tape.value(p.ww).cols();
    let d_i = tape.value(p.wk).cols();
    if tape.value(p.wq).shape() != [d, heads * d_i]
        || tape.value(p.wk).shape() != [d, d_i]
        || tape.value(p.ww).shape() != [d, heads]
        || tape.value(p.b).numel() != heads
    {
        return Err(Error::Shape("indexer parameter shapes disagree with input".to_string()));
    }
    Ok((l, d, heads, d_i))
}

/// Gated scores on the tape: `[L x L]`, causal triangle populated.
///
/// `score[t][s] = sum_j sigma(h_t . ww_j) * sigma(q_{t,j} . k_s + b_j)`.
/// The input `h` must be detached (non-differentiable); gradients reach the
/// four parameter tensors only.
pub fn gated_scores_op<F: Real>(
    tape: &mut Tape<F>,
    h: Var,
    p: &IndexerVars,
) -> Result<Var> {
    scores_op(tape, h, p, true)
}

/// Baseline scores on the tape: `score[t][s] = sum_j (h_t . ww_j) * relu(q_{t,j} . k_s)`.
/// No sigmoids, no bias; scores are unbounded and gradients vanish wherever
/// the query-key product is negative.
pub fn relu_scores_op<F: Real>(
    tape: &mut Tape<F>,
    h: Var,
    p: &IndexerVars,
) -> Result<Var> {
    scores_op(tape, h, p, false)
}

fn scores_op<F: Real>(tape: &mut Tape<F>, h: Var, p: &IndexerVars, gated: bool) -> Result<Var> {
    if tape.requires_grad_of(h) {
        return Err(Error::Invariant(
            "indexer scores must be computed on a detached input; pass tape.detach(h)".to_string(),
        ));
    }
    let (l, d, heads, d_i) = scorer_dims(tape, h, p)?;

    // Projections (counted as indexer cost).
    let hval = tape.value(h).clone();
    let q = matmul(&hval, tape.value(p.wq))?; // [L x heads*d_i]
    let k = matmul(&hval, tape.value(p.wk))?; // [L x d_i]
    let wpre = matmul(&hval, tape.value(p.ww))?; // [L x heads]
    tape.count(MacBucket::Indexer, (l * d * d_i * heads + l * d * d_i + l * d * heads) as u64);

    let bvals: Vec<F> = tape.value(p.b).as_slice().to_vec();
    let w: Vec<F> = if gated {
        wpre.as_slice().iter().map(|&x| sigmoid(x)).collect()
    } else {
        wpre.as_slice().to_vec()
    };

    // Pairwise logits over the causal triangle.
    let tri = l * (l + 1) / 2;
    let save = tape.grad_enabled();
    let mut g = if save { Vec::with_capacity(tri * heads) } else { Vec::new() };
    let mut scores = vec![F::zero(); l * l];
    let qs = q.as_slice();
    let ks = k.as_slice();
    for t in 0..l {
        for s in 0..=t {
            let krow = &ks[s * d_i..(s + 1) * d_i];
            let mut acc = F::zero();
            for j in 0..heads {
                let qrow = &qs[t * heads * d_i + j * d_i..t * heads * d_i + (j + 1) * d_i];
                let mut z = F::zero();
                for (&qv, &kv) in qrow.iter().zip(krow) {
                    z += qv * kv;
                }
                let act = if gated {
                    sigmoid(z + bvals[j])
                } else {
                    z.max_val(F::zero())
                };
                if save {
                    g.push(act);
                }
                acc += w[t * heads + j] * act;
            }
            scores[t * l + s] = acc;
        }
    }
    tape.count(MacBucket::Indexer, (tri * heads * d_i) as u64);

    let value = Tensor::from_parts(vec![l, l], scores);
    let op = ScoresBack {
        h,
        p: *p,
        q: q.as_slice().to_vec(),
        k: k.as_slice().to_vec(),
        w,
        g,
        l,
        d,
        heads,
        d_i,
        gated,
    };
    Ok(tape.push_node(value, &[p.wq, p.wk, p.ww, p.b], Box::new(op)))
}

struct ScoresBack<F: Real> {
    h: Var,
    p: IndexerVars,
    q: Vec<F>,
    k: Vec<F>,
    /// Head weights after the nonlinearity (sigmoid for gated, identity for baseline).
    w: Vec<F>,
    /// Saved per-(t,s,j) activations over the triangle (sigmoid or relu values).
    g: Vec<F>,
    l: usize,
    d: usize,
    heads: usize,
    d_i: usize,
    gated: bool,
}

impl<F: Real> Backward<F> for ScoresBack<F> {
    fn name(&self) -> &'static str {
        if self.gated {
            "gated_scores"
        } else {
            "relu_scores"
        }
    }

    fn backward(&self, args: &BackwardArgs<'_, F>, sink: &mut GradSink<'_, F>) {
        let (l, heads, d_i) = (self.l, self.heads, self.d_i);
        let og = args.out_grad;
        let mut dq = vec![F::zero(); l * heads * d_i];
        let mut dk = vec![F::zero(); l * d_i];
        let mut dw = vec![F::zero(); l * heads];
        let mut db = vec![F::zero(); heads];

        let mut gi = 0usize; // flat cursor into the saved triangle activations
        for t in 0..l {
            for s in 0..=t {
                let o = og[t * l + s];
                if o == F::zero() {
                    gi += heads;
                    continue;
                }
                let krow = &self.k[s * d_i..(s + 1) * d_i];
                for j in 0..heads {
                    let act = self.g[gi];
                    gi += 1;
                    let wv = self.w[t * heads + j];
                    dw[t * heads + j] += o * act;
                    let dact = o * wv;
                    let dz = if self.gated {
                        let s = dact * act * (F::one() - act);
                        db[j] += s;
                        s
                    } else if act > F::zero() {
                        dact
                    } else {
                        continue;
                    };
                    let qoff = t * heads * d_i + j * d_i;
                    let qrow = &self.q[qoff..qoff + d_i];
                    let dqrow = &mut dq[qoff..qoff + d_i];
                    let dkrow = &mut dk[s * d_i..(s + 1) * d_i];
                    for i in 0..d_i {
                        dqrow[i] += dz * krow[i];
                        dkrow[i] += dz * qrow[i];
                    }
                }
            }
        }

        // Chain head weights through their nonlinearity.
        if self.gated {
            for (dwv, &wv) in dw.iter_mut().zip(&self.w) {
                *dwv = *dwv * wv * (F::one() - wv);
            }
        }

        let hval: Vec<F> = args.val(self.h).as_slice().to_vec();
        let d = self.d;
        if sink.wants(self.p.wq) {
            matmul_at_b_acc(&hval, &dq, l, d, heads * d_i, sink.slot(self.p.wq));
        }
        if sink.wants(self.p.wk) {
            matmul_at_b_acc(&hval, &dk, l, d, d_i, sink.slot(self.p.wk));
        }
        if sink.wants(self.p.ww) {
            matmul_at_b_acc(&hval, &dw, l, d, heads, sink.slot(self.p.ww));
        }
        if self.gated && sink.wants(self.p.b) {
            for (g, &v) in sink.slot(self.p.b).iter_mut().zip(&db) {
                *g += v;
            }
        }
    }
}

/// Value-level gated scores (no tape required by the caller).
pub fn gated_scores<F: Real>(h: &Tensor<F>, p: &IndexerParams<F>) -> Result<Tensor<F>> {
    let mut tape = Tape::no_grad();
    let hv = tape.constant(h.clone());
    let vars = bind_indexer(&mut tape, p);
    let v = gated_scores_op(&mut tape, hv, &vars)?;
    Ok(tape.value(v).clone())
}

/// Value-level baseline scores.
pub fn relu_scores<F: Real>(h: &Tensor<F>, p: &IndexerParams<F>) -> Result<Tensor<F>> {
    let mut tape = Tape::no_grad();
    let hv = tape.constant(h.clone());
    let vars = bind_indexer(&mut tape, p);
    let v = relu_scores_op(&mut tape, hv, &vars)?;
    Ok(tape.value(v).clone())
}

// ── Adaptive budget ─────────────────────────────────────────────────────

/// Running scale estimate for the adaptive budget: an exponential moving
/// average of batch score variances.
#[derive(Debug, Clone)]
pub struct SparsityState {
    pub v_bar: f64,
    pub initialized: bool,
    pub decay: f64,
}

/// Floor applied to the stored average so the budget ratio never divides by
/// (nearly) zero.
pub const V_BAR_FLOOR: f64 = 1e-8;

impl SparsityState {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) || decay <= 0.0 {
            return Err(Error::Config(format!(
                "EMA decay must be in (0, 1), got {decay}"
            )));
        }
        Ok(SparsityState {
            v_bar: V_BAR_FLOOR,
            initialized: false,
            decay,
        })
    }
}

/// Population variance of a score row, accumulated in f64.
pub fn row_variance<F: Real>(row: &[F]) -> f64 {
    if row.len() < 2 {
        return 0.0;
    }
    let n = row.len() as f64;
    let mean: f64 = row.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    row.iter()
        .map(|v| {
            let d = v.to_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Fold one batch worth of per-row score variances into the running average.
///
/// The first call sets the average directly; later calls apply
/// `v_bar <- decay * v_bar + (1 - decay) * mean(batch)`. Exactly one call
/// should happen per optimizer step, and none at eval time.
pub fn update_vbar(state: &mut SparsityState, batch_variances: &[f64]) -> Result<()> {
    if batch_variances.is_empty() {
        return Err(Error::Invariant("update_vbar with no variances".to_string()));
    }
    for &v in batch_variances {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Invariant(format!("variance must be finite and >= 0, got {v}")));
        }
    }
    let mean = batch_variances.iter().sum::<f64>() / batch_variances.len() as f64;
    let next = if state.initialized {
        state.decay * state.v_bar + (1.0 - state.decay) * mean
    } else {
        mean
    };
    state.v_bar = next.max(V_BAR_FLOOR);
    state.initialized = true;
    Ok(())
}

/// Per-query budget: `clamp(floor(k_base * Var(row) / v_bar), k_min, k_max)`.
///
/// Before the state has seen any data the budget is `k_base` clamped. A row
/// shorter than 2 has zero variance and therefore gets `k_min`.
pub fn adaptive_k<F: Real>(row: &[F], state: &SparsityState, cfg: &GsaConfig) -> usize {
    if !state.initialized {
        return cfg.k_base.clamp(cfg.k_min, cfg.k_max);
    }
    let var = row_variance(row);
    let ratio = var / state.v_bar.max(V_BAR_FLOOR);
    let raw = (cfg.k_base as f64 * ratio).floor();
    let capped = raw.min(cfg.k_max as f64).max(0.0) as usize;
    capped.clamp(cfg.k_min, cfg.k_max)
}

// ── Top-k selection ─────────────────────────────────────────────────────

/// Outcome of selecting attention sources for one query position.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult<F: Real> {
    /// Selected source positions, sorted ascending.
    pub indices: Vec<usize>,
    /// Realized budget: `min(requested k, row length)`.
    pub k: usize,
    /// The scores this selection was drawn from (the causal prefix row).
    pub scores: Vec<F>,
}

/// Highest-`k` positions of `row`, ties broken toward the lower index.
pub fn top_k_select<F: Real>(row: &[F], k: usize) -> SelectionResult<F> {
    let mut comparisons = 0u64;
    top_k_select_counted(row, k, &mut comparisons)
}

/// `a` strictly weaker than `b` under (score, then preferring lower index).
#[inline]
fn weaker<F: Real>(a: (F, usize), b: (F, usize), comparisons: &mut u64) -> bool {
    *comparisons += 1;
    if a.0 != b.0 {
        a.0 < b.0
    } else {
        a.1 > b.1
    }
}

/// As [`top_k_select`], adding the number of comparisons executed to
/// `comparisons` (the log-factor term of the cost model).
pub fn top_k_select_counted<F: Real>(
    row: &[F],
    k: usize,
    comparisons: &mut u64,
) -> SelectionResult<F> {
    let keep = k.min(row.len());
    // Min-heap of the currently kept elements, weakest at the root.
    let mut heap: Vec<(F, usize)> = Vec::with_capacity(keep);
    for (idx, &score) in row.iter().enumerate() {
        let cand = (score, idx);
        if heap.len() < keep {
            heap.push(cand);
            // Sift up.
            let mut i = heap.len() - 1;
            while i > 0 {
                let parent = (i - 1) / 2;
                if weaker(heap[i], heap[parent], comparisons) {
                    heap.swap(i, parent);
                    i = parent;
                } else {
                    break;
                }
            }
        } else if keep > 0 && weaker(heap[0], cand, comparisons) {
            // Candidate beats the weakest kept element: replace and sift down.
            heap[0] = cand;
            let mut i = 0;
            loop {
                let (lc, rc) = (2 * i + 1, 2 * i + 2);
                let mut weakest = i;
                if lc < heap.len() && weaker(heap[lc], heap[weakest], comparisons) {
                    weakest = lc;
                }
                if rc < heap.len() && weaker(heap[rc], heap[weakest], comparisons) {
                    weakest = rc;
                }
                if weakest == i {
                    break;
                }
                heap.swap(i, weakest);
                i = weakest;
            }
        }
    }
    let mut indices: Vec<usize> = heap.into_iter().map(|(_, i)| i).collect();
    indices.sort_unstable();
    SelectionResult {
        indices,
        k: keep,
        scores: row.to_vec(),
    }
}

// ── KL objective ────────────────────────────────────────────────────────

/// KL divergence from the softmax of one score row to a teacher
/// distribution, optionally restricted (and renormalized) to a subset.
///
/// `p` is the teacher over the causal prefix; `scores` the indexer row over
/// the same prefix. With a subset, the teacher mass is renormalized over the
/// subset (an error if that mass is zero) and the student softmax runs over
/// the subset's scores only. Differentiable with respect to the scores only;
/// the teacher is data.
pub fn warmup_kl_loss<F: Real>(p: &[F], scores: &[F], subset: Option<&[usize]>) -> Result<f64> {
    if p.len() != scores.len() {
        return Err(Error::Shape(format!(
            "teacher has {} entries, scores {}",
            p.len(),
            scores.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::Invariant("KL over an empty row".to_string()));
    }
    let idx: Vec<usize> = match subset {
        Some(s) => {
            if s.is_empty() {
                return Err(Error::Invariant("KL over an empty subset".to_string()));
            }
            for &i in s {
                if i >= p.len() {
                    return Err(Error::Shape(format!("subset index {i} out of range")));
                }
            }
            s.to_vec()
        }
        None => (0..p.len()).collect(),
    };
    let mass: f64 = idx.iter().map(|&i| p[i].to_f64()).sum();
    if mass <= 0.0 {
        return Err(Error::Invariant(format!(
            "teacher mass over subset is {mass}; cannot renormalize"
        )));
    }
    let sub_scores: Vec<F> = idx.iter().map(|&i| scores[i]).collect();
    let mut q = vec![F::zero(); idx.len()];
    softmax_dense_into(&sub_scores, &mut q);
    let mut kl = 0.0f64;
    for (pos, &i) in idx.iter().enumerate() {
        let pt = p[i].to_f64() / mass;
        if pt > 0.0 {
            kl += pt * (pt / q[pos].to_f64()).ln();
        }
    }
    Ok(kl)
}

/// One query row of the tape-level KL objective.
#[derive(Debug, Clone)]
pub struct KlRow<F: Real> {
    /// Query position (selects the score row).
    pub t: usize,
    /// Context subset the student is normalized over (ascending).
    pub subset: Vec<usize>,
    /// Teacher distribution over `subset`, already normalized.
    pub teacher: Vec<F>,
}

/// Mean-over-rows KL between teacher distributions and the softmax of the
/// score rows, as a differentiable tape node. Gradients flow to `scores`
/// only (the teacher is constant data).
pub fn kl_to_teacher_op<F: Real>(
    tape: &mut Tape<F>,
    scores: Var,
    rows: Rc<Vec<KlRow<F>>>,
) -> Result<Var> {
    let l = tape.value(scores).rows();
    if rows.is_empty() {
        return Err(Error::Invariant("KL objective with no rows".to_string()));
    }
    let mut students: Vec<Vec<F>> = Vec::with_capacity(rows.len());
    let mut total = 0.0f64;
    for row in rows.iter() {
        if row.subset.is_empty() {
            return Err(Error::Invariant("KL row with empty subset".to_string()));
        }
        if row.subset.len() != row.teacher.len() {
            return Err(Error::Shape(format!(
                "KL row t={}: {} subset indices vs {} teacher entries",
                row.t,
                row.subset.len(),
                row.teacher.len()
            )));
        }
        if row.t >= l || row.subset.iter().any(|&s| s > row.t) {
            return Err(Error::Invariant(format!(
                "KL row t={} reaches outside its causal prefix",
                row.t
            )));
        }
        let srow = tape.value(scores).row(row.t);
        let sub: Vec<F> = row.subset.iter().map(|&s| srow[s]).collect();
        let mut q = vec![F::zero(); sub.len()];
        softmax_dense_into(&sub, &mut q);
        for (qv, p) in q.iter().zip(&row.teacher) {
            let pt = p.to_f64();
            if pt > 0.0 {
                total += pt * (pt / qv.to_f64()).ln();
            }
        }
        students.push(q);
    }
    let mean = total / rows.len() as f64;
    let value = Tensor::scalar(F::from_f64(mean));
    let op = KlBack {
        scores,
        rows,
        students,
        l,
    };
    Ok(tape.push_node(value, &[scores], Box::new(op)))
}

struct KlBack<F: Real> {
    scores: Var,
    rows: Rc<Vec<KlRow<F>>>,
    students: Vec<Vec<F>>,
    l: usize,
}

impl<F: Real> Backward<F> for KlBack<F> {
    fn name(&self) -> &'static str {
        "kl_to_teacher"
    }

    fn backward(&self, args: &BackwardArgs<'_, F>, sink: &mut GradSink<'_, F>) {
        if !sink.wants(self.scores) {
            return;
        }
        let og = args.out_grad[0];
        let scale = og * F::from_f64(1.0 / self.rows.len() as f64);
        let l = self.l;
        let slot = sink.slot(self.scores);
        for (row, student) in self.rows.iter().zip(&self.students) {
            for ((&s, &q), &p) in row.subset.iter().zip(student).zip(&row.teacher) {
                // d KL / d score_s = q_s - p_s over the subset.
                slot[row.t * l + s] += scale * (q - p);
            }
        }
    }
}
