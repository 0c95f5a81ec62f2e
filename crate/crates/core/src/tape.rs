//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Each forward operation appends a node holding its output tensor and (when
//! gradients are enabled and some input requires them) a boxed backward rule.
//! [`Tape::backward`] seeds the scalar root with gradient 1 and walks the
//! tape in reverse, letting each rule accumulate into its inputs' gradient
//! slots. Nodes whose gradient slot was never touched are skipped, so paths
//! that do not influence the loss cost nothing on the way back.
//!
//! Domain-specific fused operations (sparse attention, indexer scores, the
//! KL objective) live in their own modules and plug in through the
//! [`Backward`] trait; the primitive algebra lives here.
//!
//! The tape also carries the multiply-accumulate counters used by the cost
//! model. Counting is opt-in; when enabled, tagged operations add the number
//! of scalar multiply-accumulates they actually execute to the named bucket.

use crate::error::{Error, Result};
use crate::real::{sigmoid, Real};
use crate::tensor::{
    matmul_a_bt_acc, matmul_at_b_acc, matmul_into, Tensor,
};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Cost-model buckets for multiply-accumulate counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacBucket {
    /// Q/K/V and output projections of the attention layer.
    Qkv,
    /// Indexer projections and score dot products.
    Indexer,
    /// Attention score and value-mixing dot products.
    Attention,
    /// Gate projections and gate applications.
    Gating,
    /// Everything else (embeddings, feed-forward, logits, ...).
    Other,
}

/// Running multiply-accumulate counters, plus top-k comparison count.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounters {
    pub qkv_macs: u64,
    pub indexer_macs: u64,
    pub attention_macs: u64,
    pub gating_macs: u64,
    pub other_macs: u64,
    /// Comparisons executed inside top-k selection (not MACs).
    pub topk_comparisons: u64,
}

impl MacCounters {
    pub fn add(&mut self, bucket: MacBucket, n: u64) {
        match bucket {
            MacBucket::Qkv => self.qkv_macs += n,
            MacBucket::Indexer => self.indexer_macs += n,
            MacBucket::Attention => self.attention_macs += n,
            MacBucket::Gating => self.gating_macs += n,
            MacBucket::Other => self.other_macs += n,
        }
    }
}

/// Test fixture: scales the upstream gradient fed to every backward rule
/// whose name matches, deliberately breaking that rule so gradient checking
/// can demonstrate it catches bad rules.
#[derive(Debug, Clone)]
pub struct Corruption {
    pub op: String,
    pub factor: f64,
}

/// Backward rule for one tape node.
pub(crate) trait Backward<F: Real> {
    /// Stable name used in diagnostics and by the corruption fixture.
    fn name(&self) -> &'static str;
    fn backward(&self, args: &BackwardArgs<'_, F>, sink: &mut GradSink<'_, F>);
}

/// Read-only context handed to a backward rule.
pub(crate) struct BackwardArgs<'a, F: Real> {
    values: &'a [Tensor<F>],
    node: usize,
    pub out_grad: &'a [F],
}

impl<'a, F: Real> BackwardArgs<'a, F> {
    pub fn val(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }
    pub fn out_value(&self) -> &Tensor<F> {
        &self.values[self.node]
    }
}

/// Mutable gradient accumulation handle for a backward rule.
pub(crate) struct GradSink<'a, F: Real> {
    grads: &'a mut [Option<Vec<F>>],
    requires: &'a [bool],
    values: &'a [Tensor<F>],
}

impl<'a, F: Real> GradSink<'a, F> {
    /// Whether the given input participates in differentiation at all.
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient slot for `v`, allocated lazily as zeros.
    pub fn slot(&mut self, v: Var) -> &mut [F] {
        let n = self.values[v.0].numel();
        self.grads[v.0]
            .get_or_insert_with(|| vec![F::zero(); n])
            .as_mut_slice()
    }
}

struct BackStep<F: Real> {
    op: Box<dyn Backward<F>>,
}

/// Reverse-mode tape.
pub struct Tape<F: Real> {
    values: Vec<Tensor<F>>,
    grads: Vec<Option<Vec<F>>>,
    steps: Vec<Option<BackStep<F>>>,
    requires: Vec<bool>,
    grad_enabled: bool,
    counters: Option<MacCounters>,
    corrupt: Option<Corruption>,
    backward_done: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            steps: Vec::new(),
            requires: Vec::new(),
            grad_enabled: true,
            counters: None,
            corrupt: None,
            backward_done: false,
        }
    }

    /// A tape that records values only; backward rules are not stored and
    /// activations needed only for gradients are not saved.
    pub fn no_grad() -> Self {
        let mut t = Self::new();
        t.grad_enabled = false;
        t
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Turn on multiply-accumulate counting (off by default).
    pub fn enable_counting(&mut self) {
        self.counters = Some(MacCounters::default());
    }

    /// Snapshot of the counters; error when counting was never enabled.
    pub fn counters(&self) -> Result<&MacCounters> {
        self.counters
            .as_ref()
            .ok_or_else(|| Error::Config("MAC counters are disabled on this tape".to_string()))
    }

    pub(crate) fn count(&mut self, bucket: MacBucket, n: u64) {
        if let Some(c) = self.counters.as_mut() {
            c.add(bucket, n);
        }
    }

    pub(crate) fn count_topk(&mut self, n: u64) {
        if let Some(c) = self.counters.as_mut() {
            c.topk_comparisons += n;
        }
    }

    /// Whether gradients will flow into `v` during backward.
    pub fn requires_grad_of(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Install the backward-corruption test fixture.
    pub fn corrupt_backward(&mut self, c: Corruption) {
        self.corrupt = Some(c);
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Insert a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        let req = self.grad_enabled;
        self.push_raw(value, req, None)
    }

    /// Insert a non-differentiable value.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_raw(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`] call.
    /// `None` when no gradient reached it (or backward has not run).
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Clone out the value of `v` with its gradient (if any) attached.
    pub fn export(&self, v: Var) -> Tensor<F> {
        let mut t = self.values[v.0].clone();
        if let Some(g) = self.grads[v.0].as_ref() {
            t.set_grad(g.clone());
        }
        t
    }

    fn push_raw(&mut self, value: Tensor<F>, requires: bool, step: Option<BackStep<F>>) -> Var {
        self.values.push(value);
        self.requires.push(requires);
        self.grads.push(None);
        self.steps.push(step);
        Var(self.values.len() - 1)
    }

    /// Append a computed node with its backward rule. The rule is dropped
    /// when gradients are disabled or no input requires them.
    pub(crate) fn push_node(
        &mut self,
        value: Tensor<F>,
        inputs: &[Var],
        op: Box<dyn Backward<F>>,
    ) -> Var {
        let req = self.grad_enabled && inputs.iter().any(|v| self.requires[v.0]);
        let step = if req { Some(BackStep { op }) } else { None };
        self.push_raw(value, req, step)
    }

    /// Run reverse accumulation from a scalar root. Single-shot per tape.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Invariant(
                "backward already ran on this tape".to_string(),
            ));
        }
        if self.values[root.0].numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.values[root.0].shape()
            )));
        }
        if !self.grad_enabled {
            return Err(Error::Invariant(
                "backward on a no-grad tape".to_string(),
            ));
        }
        self.backward_done = true;
        self.grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let Some(step) = self.steps[i].take() else {
                continue;
            };
            let (lo, hi) = self.grads.split_at_mut(i);
            let out_grad = hi[0].as_ref().expect("grad present").as_slice();
            let corrupted;
            let out_grad = match &self.corrupt {
                Some(c) if c.op == step.op.name() => {
                    let f = F::from_f64(c.factor);
                    corrupted = out_grad.iter().map(|&g| g * f).collect::<Vec<F>>();
                    corrupted.as_slice()
                }
                _ => out_grad,
            };
            let args = BackwardArgs {
                values: &self.values,
                node: i,
                out_grad,
            };
            let mut sink = GradSink {
                grads: lo,
                requires: &self.requires,
                values: &self.values,
            };
            step.op.backward(&args, &mut sink);
        }
        Ok(())
    }

    // ── Primitive operations ────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        Ok(())
    }

    /// Element-wise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.values[a.0]
            .as_slice()
            .iter()
            .zip(self.values[b.0].as_slice())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.values[a.0].shape().to_vec(), data);
        Ok(self.push_node(value, &[a, b], Box::new(AddBack { a, b })))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mul_in(a, b, None)
    }

    /// Element-wise product whose multiplies are counted into `bucket`.
    pub fn mul_counted(&mut self, a: Var, b: Var, bucket: MacBucket) -> Result<Var> {
        self.mul_in(a, b, Some(bucket))
    }

    fn mul_in(&mut self, a: Var, b: Var, bucket: Option<MacBucket>) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<F> = self.values[a.0]
            .as_slice()
            .iter()
            .zip(self.values[b.0].as_slice())
            .map(|(&x, &y)| x * y)
            .collect();
        if let Some(bucket) = bucket {
            self.count(bucket, data.len() as u64);
        }
        let value = Tensor::from_parts(self.values[a.0].shape().to_vec(), data);
        Ok(self.push_node(value, &[a, b], Box::new(MulBack { a, b })))
    }

    /// Matrix product; multiply-accumulates are counted into `Other`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_counted(a, b, MacBucket::Other)
    }

    /// Matrix product with its `m*k*n` MACs attributed to `bucket`.
    pub fn matmul_counted(&mut self, a: Var, b: Var, bucket: MacBucket) -> Result<Var> {
        let (ash, bsh) = (self.values[a.0].shape(), self.values[b.0].shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::Shape(format!(
                "matmul: incompatible shapes {ash:?} @ {bsh:?}"
            )));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_into(
            self.values[a.0].as_slice(),
            self.values[b.0].as_slice(),
            m,
            k,
            n,
            &mut out,
        );
        self.count(bucket, (m * k * n) as u64);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push_node(value, &[a, b], Box::new(MatmulBack { a, b, m, k, n })))
    }

    /// Element-wise logistic function.
    pub fn sigmoid_op(&mut self, x: Var) -> Var {
        let data = self.values[x.0]
            .as_slice()
            .iter()
            .map(|&v| sigmoid(v))
            .collect();
        let value = Tensor::from_parts(self.values[x.0].shape().to_vec(), data);
        self.push_node(value, &[x], Box::new(SigmoidBack { x }))
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let f = F::from_f64(c);
        let data = self.values[x.0].as_slice().iter().map(|&v| v * f).collect();
        let value = Tensor::from_parts(self.values[x.0].shape().to_vec(), data);
        self.push_node(value, &[x], Box::new(ScaleBack { x, c }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.values[x.0].as_slice().iter().map(|v| v.to_f64()).sum();
        let value = Tensor::scalar(F::from_f64(total));
        self.push_node(value, &[x], Box::new(SumBack { x }))
    }

    /// Add a row vector to every row of a matrix.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xsh = self.values[x.0].shape().to_vec();
        let b = &self.values[bias.0];
        if xsh.len() != 2 || b.shape().len() != 1 || b.numel() != xsh[1] {
            return Err(Error::Shape(format!(
                "add_row_broadcast: {:?} + {:?}",
                xsh,
                b.shape()
            )));
        }
        let n = xsh[1];
        let data = self.values[x.0]
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + self.values[bias.0].as_slice()[i % n])
            .collect();
        let value = Tensor::from_parts(xsh, data);
        Ok(self.push_node(value, &[x, bias], Box::new(AddRowBack { x, bias })))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        self.constant(self.values[x.0].clone())
    }
}

// ── Backward rules for the primitives ───────────────────────────────────

struct AddBack {
    a: Var,
    b: Var,
}

impl<F: Real> Backward<F> for AddBack {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, args: &BackwardArgs<'_, F>, sink: &mut GradSink<'_, F>) {
        for &v in &[self.a, self.b] {
            if sink.wants(v) {
                for (g, &og) in sink.slot(v).iter_mut().zip(args.out_grad) {
                    *g += og;
                }
            }
        }
    }
}

struct MulBack {
    a: Var,
    b: Var,
}

impl<F: Real> Backward<F> for MulBack {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, args: &BackwardArgs<'_, F>, sink: &mut GradSink<'_, F>) {
        if sink.wants(self.a) {
            let bv: Vec<F> = args.val(self.b).as_slice().to_vec();
            for ((g, &og), &b) in sink.slot(self.a).iter_mut().zip(args.out_grad).zip(&bv) {
                *g += og * b;
            }
        }
        if sink.wants(self.b) {
            let av: Vec<F> = args.val(self.a).as_slice().to_vec();
            for ((g, &og), &a) in sink.slot(self.b).iter_mut().zip(args.out_grad).zip(&av) {
                *g += og * a;
            }
        }
    }
}

struct MatmulBack {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
}

impl<F: Real> Backward<F> for MatmulBack {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, args: &BackwardArgs<'_, F>, sink: &mut GradSink<'_, F>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if sink.wants(self.a) {
            // dA += G @ B^T
            let b: Vec<F> = args.val(self.b).as_slice().to_vec();
            matmul_a_bt_acc(args.out_grad, &b, m, k, n, sink.slot(self.a));
        }
        if sink.wants(self.b) {
            // dB += A^T @ G
            let a: Vec<F> = args.val(self.a).as_slice().to_vec();
            matmul_at_b_acc(&a, args.out_grad, m, k, n, sink.slot(self.b));
        }
    }
}

struct SigmoidBack {
    x: Var,
}

impl<F: Real> Backward<F> for SigmoidBack {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, args: &BackwardArgs<'_, F>, sink: &mut GradSink<'_, F>) {
        if sink.wants(self.x) {
            let y: Vec<F> = args.out_value().as_slice().to_vec();
            for ((g, &og), &y) in sink.slot(self.x).iter_mut().zip(args.out_grad).zip(&y) {
                *g += og * y * (F::one() - y);
            }
        }
    }
}

struct ScaleBack {
    x: Var,
    c: f64,
}

impl<F: Real> Backward<F> for ScaleBack {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, args: &BackwardArgs<'_, F>, sink: &mut GradSink<'_, F>) {
        if sink.wants(self.x) {
            let c = F::from_f64(self.c);
            for (g, &og) in sink.slot(self.x).iter_mut().zip(args.out_grad) {
                *g += og * c;
            }
        }
    }
}

struct SumBack {
    x: Var,
}

impl<F: Real> Backward<F> for SumBack {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, args: &BackwardArgs<'_, F>, sink: &mut GradSink<'_, F>) {
        if sink.wants(self.x) {
            let og = args.out_grad[0];
            for g in sink.slot(self.x).iter_mut() {
                *g += og;
            }
        }
    }
}

struct AddRowBack {
    x: Var,
    bias: Var,
}

impl<F: Real> Backward<F> for AddRowBack {
    fn name(&self) -> &'static str {
        "add_row_broadcast"
    }
    fn backward(&self, args: &BackwardArgs<'_, F>, sink: &mut GradSink<'_, F>) {
        if sink.wants(self.x) {
            for (g, &og) in sink.slot(self.x).iter_mut().zip(args.out_grad) {
                *g += og;
            }
        }
        if sink.wants(self.bias) {
            let n = args.val(self.bias).numel();
            let slot = sink.slot(self.bias);
            for (i, &og) in args.out_grad.iter().enumerate() {
                slot[i % n] += og;
            }
        }
    }
}
