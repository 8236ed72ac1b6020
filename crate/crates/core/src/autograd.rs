//! Minimal reverse-mode autodiff over dense f32 tensors, built so the
//! optimizer step can run *inside* the backward pass.
//!
//! The tape records ops in execution order; backward sweeps them in
//! reverse. Each parameter leaf counts its consumers, and the moment its
//! last gradient contribution lands, [`Tape::backward_fused`] fires
//! `step_param` and releases the gradient buffer before the sweep
//! continues — at no point do two parameter gradients need to coexist on a
//! chain-shaped model. [`Tape::backward_conventional`] is the classical
//! two-phase baseline (all gradients retained, caller steps afterwards)
//! kept as the equivalence oracle and for configurations that need it.
//!
//! Every buffer the tape creates is charged to a [`MemoryLedger`];
//! parameter gradients go under `grads`, interior gradients and saved
//! activations under `activations`, matching how a profiler of the real
//! system lumps them.

use alloc::vec;
use alloc::vec::Vec;

use crate::floatbits::{round_nearest, FloatFormat};
use crate::ledger::{MemCategory, MemoryLedger};
use crate::math;
use crate::optim::{OptimError, Optimizer, StepOutcome};

// ── Configuration ────────────────────────────────────────────────────

/// Precision of forward compute: plain f32, or every op output rounded to
/// a 16-bit format to emulate low-precision forward math.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ComputePrecision {
    Fp32,
    Through(FloatFormat),
}

/// Precision gradients are stored at. `Fmt` rounds every accumulated
/// gradient element through the format and bills the ledger at its width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradPrecision {
    Fp32,
    Fmt(FloatFormat),
}

/// Which values a parameter leaf feeds into the forward pass: the stored
/// high words (what the low-precision compute of the real system sees) or
/// the full reconstruction (fp32-equivalent compute).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardSource {
    HighView,
    Reconstruct,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TapeConfig {
    pub compute: ComputePrecision,
    pub grad_precision: GradPrecision,
    pub forward_source: ForwardSource,
}

impl Default for TapeConfig {
    fn default() -> Self {
        Self {
            compute: ComputePrecision::Fp32,
            grad_precision: GradPrecision::Fp32,
            forward_source: ForwardSource::HighView,
        }
    }
}

// ── Errors ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub enum AutogradError {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Loss must be a single element.
    NotScalar { len: usize },
    /// The tape has already run a backward pass.
    BackwardConsumed,
    SlotOutOfRange { slot: usize, count: usize },
    Optim(OptimError),
}

impl From<OptimError> for AutogradError {
    fn from(e: OptimError) -> Self {
        Self::Optim(e)
    }
}

impl core::fmt::Display for AutogradError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Self::NotScalar { len } => write!(f, "loss must be scalar, got {len} elements"),
            Self::BackwardConsumed => write!(f, "backward already ran on this tape"),
            Self::SlotOutOfRange { slot, count } => {
                write!(f, "parameter slot {slot} not registered ({count} slots)")
            }
            Self::Optim(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for AutogradError {}

// ── Graph ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Input,
    Param { slot: usize },
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    Mean { a: NodeId },
    MseLoss { pred: NodeId, target: NodeId },
    BceWithLogits { logits: NodeId, targets: NodeId },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Option<Vec<f32>>,
    /// Bytes this node's value was billed at (0 for aliased param views).
    charged: u64,
    requires_grad: bool,
}

/// Recorded computation graph plus its memory ledger.
pub struct Tape {
    cfg: TapeConfig,
    nodes: Vec<Node>,
    /// slot index -> existing param node, so sharing a parameter reuses
    /// one leaf and accumulates both contributions before stepping
    param_nodes: Vec<(usize, NodeId)>,
    ledger: MemoryLedger,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::with_config(TapeConfig::default())
    }

    pub fn with_config(cfg: TapeConfig) -> Self {
        Self {
            cfg,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            ledger: MemoryLedger::new(),
            backward_done: false,
        }
    }

    pub fn config(&self) -> &TapeConfig {
        &self.cfg
    }

    pub fn ledger(&self) -> &MemoryLedger {
        &self.ledger
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Forward value of a node; `None` once backward released it.
    pub fn value(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].value.as_deref()
    }

    fn activation_width(&self) -> u64 {
        match self.cfg.compute {
            ComputePrecision::Fp32 => 4,
            ComputePrecision::Through(fmt) => fmt.storage_bytes() as u64,
        }
    }

    fn grad_width(&self) -> u64 {
        match self.cfg.grad_precision {
            GradPrecision::Fp32 => 4,
            GradPrecision::Fmt(fmt) => fmt.storage_bytes() as u64,
        }
    }

    fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        mut value: Vec<f32>,
        requires_grad: bool,
        charge: bool,
    ) -> NodeId {
        if charge {
            if let ComputePrecision::Through(fmt) = self.cfg.compute {
                for v in &mut value {
                    *v = round_nearest(*v, fmt);
                }
            }
        }
        let charged = if charge {
            value.len() as u64 * self.activation_width()
        } else {
            0
        };
        self.ledger.alloc(MemCategory::Activations, charged);
        self.nodes.push(Node {
            op,
            shape,
            value: Some(value),
            charged,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn guard_open(&self) -> Result<(), AutogradError> {
        if self.backward_done {
            Err(AutogradError::BackwardConsumed)
        } else {
            Ok(())
        }
    }

    /// Constant leaf (inputs, labels): never receives a gradient.
    pub fn input(&mut self, values: &[f32], shape: &[usize]) -> Result<NodeId, AutogradError> {
        self.guard_open()?;
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(AutogradError::ShapeMismatch {
                op: "input",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        Ok(self.push(Op::Input, shape.to_vec(), values.to_vec(), false, true))
    }

    /// Differentiable leaf bound to an optimizer slot. The forward value
    /// comes from the slot per [`ForwardSource`]; calling this twice for
    /// one slot returns the same node (weight sharing). A `HighView` leaf
    /// aliases parameter storage and is not billed as an activation; a
    /// `Reconstruct` leaf materializes an f32 view and is.
    pub fn param(&mut self, opt: &Optimizer, slot: usize) -> Result<NodeId, AutogradError> {
        self.guard_open()?;
        if slot >= opt.slot_count() {
            return Err(AutogradError::SlotOutOfRange {
                slot,
                count: opt.slot_count(),
            });
        }
        if let Some(&(_, id)) = self.param_nodes.iter().find(|(s, _)| *s == slot) {
            return Ok(id);
        }
        let tensor = opt.slot(slot).param();
        let (values, charge) = match self.cfg.forward_source {
            ForwardSource::HighView => (tensor.high_view(), false),
            ForwardSource::Reconstruct => (tensor.to_f32(), true),
        };
        let shape = tensor.shape().to_vec();
        let id = self.push(Op::Param { slot }, shape, values, true, charge);
        self.param_nodes.push((slot, id));
        Ok(id)
    }

    fn binary_reqs(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), AutogradError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(AutogradError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn val(&self, id: NodeId) -> &[f32] {
        self.nodes[id.0]
            .value
            .as_deref()
            .expect("forward value still live")
    }

    /// 2-D matrix product `[m,p] x [p,n] -> [m,n]`, f32 accumulation in
    /// ascending inner order.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutogradError> {
        self.guard_open()?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutogradError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, p, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.val(a), self.val(b));
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for t in 0..p {
                    acc += va[i * p + t] * vb[t * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        let req = self.binary_reqs(a, b);
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], out, req, true))
    }

    /// Elementwise add; a rank-1 `[n]` right operand broadcasts over the
    /// rows of a `[m,n]` left operand (bias add).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutogradError> {
        self.guard_open()?;
        let (sa, sb) = (self.nodes[a.0].shape.clone(), &self.nodes[b.0].shape);
        let broadcast = sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1];
        if !broadcast {
            self.same_shape("add", a, b)?;
        }
        let (va, vb) = (self.val(a), self.val(b));
        let out: Vec<f32> = if broadcast {
            let n = sb[0];
            va.iter()
                .enumerate()
                .map(|(idx, &x)| x + vb[idx % n])
                .collect()
        } else {
            va.iter().zip(vb).map(|(&x, &y)| x + y).collect()
        };
        let req = self.binary_reqs(a, b);
        Ok(self.push(Op::Add { a, b }, sa, out, req, true))
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutogradError> {
        self.guard_open()?;
        self.same_shape("mul", a, b)?;
        let out: Vec<f32> = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| x * y).collect();
        let req = self.binary_reqs(a, b);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Mul { a, b }, shape, out, req, true))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutogradError> {
        self.guard_open()?;
        let out: Vec<f32> = self.val(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let req = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Relu { a }, shape, out, req, true))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutogradError> {
        self.guard_open()?;
        let out: Vec<f32> = self.val(a).iter().map(|&x| stable_sigmoid(x)).collect();
        let req = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Sigmoid { a }, shape, out, req, true))
    }

    /// Mean over all elements, scalar output.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutogradError> {
        self.guard_open()?;
        let v = self.val(a);
        let sum: f32 = v.iter().sum();
        let out = vec![sum / v.len() as f32];
        let req = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Mean { a }, vec![1], out, req, true))
    }

    /// Mean squared error of same-shaped tensors, scalar output.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, AutogradError> {
        self.guard_open()?;
        self.same_shape("mse_loss", pred, target)?;
        let (vp, vt) = (self.val(pred), self.val(target));
        let mut acc = 0.0f32;
        for (&p, &t) in vp.iter().zip(vt) {
            let d = p - t;
            acc += d * d;
        }
        let out = vec![acc / vp.len() as f32];
        let req = self.binary_reqs(pred, target);
        Ok(self.push(Op::MseLoss { pred, target }, vec![1], out, req, true))
    }

    /// Numerically stable binary cross-entropy on logits:
    /// `mean(max(z,0) - z*y + ln(1 + exp(-|z|)))`.
    pub fn bce_with_logits_loss(
        &mut self,
        logits: NodeId,
        targets: NodeId,
    ) -> Result<NodeId, AutogradError> {
        self.guard_open()?;
        self.same_shape("bce_with_logits_loss", logits, targets)?;
        let (vz, vy) = (self.val(logits), self.val(targets));
        let mut acc = 0.0f32;
        for (&z, &y) in vz.iter().zip(vy) {
            let pos = if z > 0.0 { z } else { 0.0 };
            acc += pos - z * y + math::ln(1.0 + math::exp(-math::abs(z)));
        }
        let out = vec![acc / vz.len() as f32];
        let req = self.binary_reqs(logits, targets);
        Ok(self.push(Op::BceWithLogits { logits, targets }, vec![1], out, req, true))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep that fires `opt.step_param` the moment a parameter's
    /// gradient is fully accumulated and frees the buffer before moving
    /// on. After it returns no parameter gradient exists anywhere; a hook
    /// skip propagates as [`StepOutcome::Skipped`] with every parameter
    /// rolled back.
    pub fn backward_fused(
        &mut self,
        loss: NodeId,
        opt: &mut Optimizer,
    ) -> Result<StepOutcome, AutogradError> {
        for &(slot, _) in &self.param_nodes {
            if slot >= opt.slot_count() {
                return Err(AutogradError::SlotOutOfRange {
                    slot,
                    count: opt.slot_count(),
                });
            }
        }
        opt.begin_step()?;
        let result = self.sweep(loss, &mut Sink::Fused(opt));
        match result {
            Ok(()) => Ok(opt.end_step()?),
            Err(e) => {
                // close the iteration so the optimizer is reusable
                let _ = opt.end_step();
                Err(e)
            }
        }
    }

    /// Classical two-phase backward: every parameter gradient is retained
    /// and returned (ownership leaves the tape's ledger at that point);
    /// the caller steps the optimizer afterwards.
    pub fn backward_conventional(
        &mut self,
        loss: NodeId,
    ) -> Result<Vec<(usize, Vec<f32>)>, AutogradError> {
        let mut grads = Vec::new();
        self.sweep(loss, &mut Sink::Retain(&mut grads))?;
        Ok(grads)
    }

    fn sweep(&mut self, loss: NodeId, sink: &mut Sink) -> Result<(), AutogradError> {
        self.guard_open()?;
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(AutogradError::SlotOutOfRange { slot: loss.0, count: n });
        }
        if self.nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(AutogradError::NotScalar {
                len: self.nodes[loss.0].shape.iter().product(),
            });
        }
        self.backward_done = true;

        // reachability: nodes on a grad path from the loss
        let mut reachable = vec![false; n];
        reachable[loss.0] = self.nodes[loss.0].requires_grad;
        for idx in (0..=loss.0).rev() {
            if !reachable[idx] {
                continue;
            }
            for input in self.nodes[idx].op_inputs() {
                if self.nodes[input.0].requires_grad {
                    reachable[input.0] = true;
                }
            }
        }

        // pending contribution counts and forward-value read counts
        let mut pending = vec![0usize; n];
        let mut value_refs = vec![0usize; n];
        value_refs[loss.0] += 1; // caller reads the loss afterwards
        for idx in 0..n {
            if !reachable[idx] {
                continue;
            }
            for input in self.nodes[idx].op_inputs() {
                if reachable[input.0] {
                    pending[input.0] += 1;
                }
            }
            for read in self.backward_reads(idx) {
                value_refs[read.0] += 1;
            }
        }

        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        let mut grad_charged = vec![0u64; n];
        self.seed_grad(loss, &mut grads, &mut grad_charged);
        if let (0, true) = (pending[loss.0], matches!(self.nodes[loss.0].op, Op::Param { .. })) {
            // degenerate: the loss is itself a scalar parameter
            self.finalize_param(loss, &mut grads, &mut grad_charged, sink)?;
        }

        for idx in (0..=loss.0).rev() {
            if !reachable[idx] || grads[idx].is_none() {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Param { .. } | Op::Input) {
                continue; // leaves finalize during accumulation
            }
            let grad = grads[idx].take().expect("checked above");
            self.propagate(idx, &grad, &mut grads, &mut grad_charged, &mut pending, sink)?;
            // release this interior gradient and any forward values whose
            // last backward reader was this node
            self.ledger.free(MemCategory::Activations, grad_charged[idx]);
            grad_charged[idx] = 0;
            for read in self.backward_reads(idx) {
                value_refs[read.0] -= 1;
                if value_refs[read.0] == 0 {
                    self.release_value(read);
                }
            }
        }

        // whatever forward values remain (no backward reader) are done now
        for idx in 0..n {
            if idx != loss.0 && self.nodes[idx].value.is_some() {
                self.release_value(NodeId(idx));
            }
        }
        Ok(())
    }

    fn seed_grad(
        &mut self,
        loss: NodeId,
        grads: &mut [Option<Vec<f32>>],
        grad_charged: &mut [u64],
    ) {
        let is_param = matches!(self.nodes[loss.0].op, Op::Param { .. });
        let cat = if is_param {
            MemCategory::Grads
        } else {
            MemCategory::Activations
        };
        let bytes = self.grad_width();
        self.ledger.alloc(cat, bytes);
        grads[loss.0] = Some(vec![1.0]);
        grad_charged[loss.0] = bytes;
    }

    fn release_value(&mut self, id: NodeId) {
        let node = &mut self.nodes[id.0];
        if node.value.take().is_some() {
            self.ledger.free(MemCategory::Activations, node.charged);
            node.charged = 0;
        }
    }

    /// Add `delta * scale` into `target`'s gradient, allocating it on
    /// first touch, and finalize the target if that was its last pending
    /// contribution.
    #[allow(clippy::too_many_arguments)]
    fn accumulate(
        &mut self,
        target: NodeId,
        contribution: ContributionSource<'_>,
        grads: &mut Vec<Option<Vec<f32>>>,
        grad_charged: &mut [u64],
        pending: &mut [usize],
        sink: &mut Sink,
    ) -> Result<(), AutogradError> {
        let len: usize = self.nodes[target.0].shape.iter().product();
        if grads[target.0].is_none() {
            let is_param = matches!(self.nodes[target.0].op, Op::Param { .. });
            let cat = if is_param {
                MemCategory::Grads
            } else {
                MemCategory::Activations
            };
            let bytes = len as u64 * self.grad_width();
            self.ledger.alloc(cat, bytes);
            grad_charged[target.0] = bytes;
            grads[target.0] = Some(vec![0.0; len]);
        }
        {
            let buf = grads[target.0].as_mut().expect("just allocated");
            match self.cfg.grad_precision {
                GradPrecision::Fp32 => contribution.apply(buf, |acc, c| acc + c),
                GradPrecision::Fmt(fmt) => {
                    contribution.apply(buf, |acc, c| round_nearest(acc + c, fmt))
                }
            }
        }
        pending[target.0] -= 1;
        if pending[target.0] == 0 && matches!(self.nodes[target.0].op, Op::Param { .. }) {
            self.finalize_param(target, grads, grad_charged, sink)?;
        }
        Ok(())
    }

    fn finalize_param(
        &mut self,
        id: NodeId,
        grads: &mut Vec<Option<Vec<f32>>>,
        grad_charged: &mut [u64],
        sink: &mut Sink,
    ) -> Result<(), AutogradError> {
        let Op::Param { slot } = self.nodes[id.0].op else {
            unreachable!("finalize_param on a non-parameter node");
        };
        let mut grad = grads[id.0].take().expect("gradient accumulated");
        match sink {
            Sink::Fused(opt) => {
                opt.step_param(slot, &mut grad)?;
                // gradient dies here, before the sweep continues
                drop(grad);
                self.ledger.free(MemCategory::Grads, grad_charged[id.0]);
                grad_charged[id.0] = 0;
            }
            Sink::Retain(out) => {
                // conventional: keep it; the ledger bills it until the
                // whole sweep finishes so peaks show the coexistence
                out.push((slot, grad));
            }
        }
        Ok(())
    }

    fn propagate(
        &mut self,
        idx: usize,
        grad: &[f32],
        grads: &mut Vec<Option<Vec<f32>>>,
        grad_charged: &mut [u64],
        pending: &mut [usize],
        sink: &mut Sink,
    ) -> Result<(), AutogradError> {
        let op = self.nodes[idx].op;
        match op {
            Op::Input | Op::Param { .. } => {}
            Op::MatMul { a, b } => {
                let (m, p) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    let vb = self.val(b);
                    let mut da = vec![0.0f32; m * p];
                    for i in 0..m {
                        for t in 0..p {
                            let mut acc = 0.0f32;
                            for j in 0..n {
                                acc += grad[i * n + j] * vb[t * n + j];
                            }
                            da[i * p + t] = acc;
                        }
                    }
                    self.accumulate(a, ContributionSource::Owned(da), grads, grad_charged, pending, sink)?;
                }
                if self.nodes[b.0].requires_grad {
                    let va = self.val(a);
                    let mut db = vec![0.0f32; p * n];
                    for t in 0..p {
                        for j in 0..n {
                            let mut acc = 0.0f32;
                            for i in 0..m {
                                acc += va[i * p + t] * grad[i * n + j];
                            }
                            db[t * n + j] = acc;
                        }
                    }
                    self.accumulate(b, ContributionSource::Owned(db), grads, grad_charged, pending, sink)?;
                }
            }
            Op::Add { a, b } => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(a, ContributionSource::Slice(grad), grads, grad_charged, pending, sink)?;
                }
                if self.nodes[b.0].requires_grad {
                    let blen: usize = self.nodes[b.0].shape.iter().product();
                    if blen == grad.len() {
                        self.accumulate(b, ContributionSource::Slice(grad), grads, grad_charged, pending, sink)?;
                    } else {
                        // bias broadcast: sum over rows, ascending
                        let mut db = vec![0.0f32; blen];
                        for (idx, &g) in grad.iter().enumerate() {
                            db[idx % blen] += g;
                        }
                        self.accumulate(b, ContributionSource::Owned(db), grads, grad_charged, pending, sink)?;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f32> = grad.iter().zip(self.val(b)).map(|(&g, &y)| g * y).collect();
                    self.accumulate(a, ContributionSource::Owned(da), grads, grad_charged, pending, sink)?;
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f32> = grad.iter().zip(self.val(a)).map(|(&g, &x)| g * x).collect();
                    self.accumulate(b, ContributionSource::Owned(db), grads, grad_charged, pending, sink)?;
                }
            }
            Op::Relu { a } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f32> = grad
                        .iter()
                        .zip(self.val(a))
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    self.accumulate(a, ContributionSource::Owned(da), grads, grad_charged, pending, sink)?;
                }
            }
            Op::Sigmoid { a } => {
                if self.nodes[a.0].requires_grad {
                    let own = NodeId(idx);
                    let da: Vec<f32> = grad
                        .iter()
                        .zip(self.val(own))
                        .map(|(&g, &s)| g * s * (1.0 - s))
                        .collect();
                    self.accumulate(a, ContributionSource::Owned(da), grads, grad_charged, pending, sink)?;
                }
            }
            Op::Mean { a } => {
                if self.nodes[a.0].requires_grad {
                    let len: usize = self.nodes[a.0].shape.iter().product();
                    let g = grad[0] / len as f32;
                    self.accumulate(a, ContributionSource::Fill(g), grads, grad_charged, pending, sink)?;
                }
            }
            Op::MseLoss { pred, target } => {
                let len: usize = self.nodes[pred.0].shape.iter().product();
                let scale = grad[0] * 2.0 / len as f32;
                if self.nodes[pred.0].requires_grad {
                    let d: Vec<f32> = self
                        .val(pred)
                        .iter()
                        .zip(self.val(target))
                        .map(|(&p, &t)| scale * (p - t))
                        .collect();
                    self.accumulate(pred, ContributionSource::Owned(d), grads, grad_charged, pending, sink)?;
                }
                if self.nodes[target.0].requires_grad {
                    let d: Vec<f32> = self
                        .val(pred)
                        .iter()
                        .zip(self.val(target))
                        .map(|(&p, &t)| -scale * (p - t))
                        .collect();
                    self.accumulate(target, ContributionSource::Owned(d), grads, grad_charged, pending, sink)?;
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let len: usize = self.nodes[logits.0].shape.iter().product();
                let scale = grad[0] / len as f32;
                if self.nodes[logits.0].requires_grad {
                    let d: Vec<f32> = self
                        .val(logits)
                        .iter()
                        .zip(self.val(targets))
                        .map(|(&z, &y)| scale * (stable_sigmoid(z) - y))
                        .collect();
                    self.accumulate(logits, ContributionSource::Owned(d), grads, grad_charged, pending, sink)?;
                }
                if self.nodes[targets.0].requires_grad {
                    let d: Vec<f32> = self.val(logits).iter().map(|&z| -scale * z).collect();
                    self.accumulate(targets, ContributionSource::Owned(d), grads, grad_charged, pending, sink)?;
                }
            }
        }
        Ok(())
    }

    /// Forward values each node's backward rule reads (conditional on the
    /// corresponding input needing a gradient at all).
    fn backward_reads(&self, idx: usize) -> Vec<NodeId> {
        let node = &self.nodes[idx];
        if !node.requires_grad {
            return Vec::new();
        }
        let mut reads = Vec::new();
        match node.op {
            Op::Input | Op::Param { .. } | Op::Mean { .. } => {}
            Op::MatMul { a, b } | Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    reads.push(b);
                }
                if self.nodes[b.0].requires_grad {
                    reads.push(a);
                }
            }
            Op::Add { .. } => {}
            Op::Relu { a } => reads.push(a),
            Op::Sigmoid { .. } => reads.push(NodeId(idx)),
            Op::MseLoss { pred, target } => {
                reads.push(pred);
                reads.push(target);
            }
            Op::BceWithLogits { logits, targets } => {
                reads.push(logits);
                reads.push(targets);
            }
        }
        reads
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Node {
    fn op_inputs(&self) -> Vec<NodeId> {
        match self.op {
            Op::Input | Op::Param { .. } => Vec::new(),
            Op::Relu { a } | Op::Sigmoid { a } | Op::Mean { a } => vec![a],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::MseLoss { pred: a, target: b } | Op::BceWithLogits { logits: a, targets: b } => {
                vec![a, b]
            }
        }
    }
}

enum Sink<'a> {
    Fused(&'a mut Optimizer),
    Retain(&'a mut Vec<(usize, Vec<f32>)>),
}

enum ContributionSource<'a> {
    Owned(Vec<f32>),
    Slice(&'a [f32]),
    Fill(f32),
}

impl ContributionSource<'_> {
    fn apply(self, buf: &mut [f32], combine: impl Fn(f32, f32) -> f32) {
        match self {
            Self::Owned(v) => {
                for (acc, c) in buf.iter_mut().zip(v) {
                    *acc = combine(*acc, c);
                }
            }
            Self::Slice(v) => {
                for (acc, &c) in buf.iter_mut().zip(v) {
                    *acc = combine(*acc, c);
                }
            }
            Self::Fill(c) => {
                for acc in buf.iter_mut() {
                    *acc = combine(*acc, c);
                }
            }
        }
    }
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}
