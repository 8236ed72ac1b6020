//! Optimizers that act directly on split tensors.
//!
//! There is no whole-model `step`: the unit of work is one parameter
//! (`step_param`), called once per parameter per iteration — by hand, or by
//! the backward pass as each gradient finishes. Gradient surgery that
//! classically happens between backward and step (clipping, loss-scale
//! unscaling) is expressed as per-parameter [`GradTransform`] hooks instead,
//! because by the time a fused backward finishes the gradients are gone.
//!
//! Loss-scaling skip semantics: a hook may signal [`HookSignal::Skip`]
//! (non-finite gradient found while unscaling). Since parameters step one
//! by one, earlier parameters may already have moved, so inside an open
//! iteration the optimizer snapshots each parameter (and its state) before
//! stepping and rolls everything back at [`Optimizer::end_step`] if any
//! hook fired. Snapshots are only taken when a skip-capable hook is
//! registered; without one the fast path keeps nothing.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::floatbits::{FloatFormat, RoundMode};
use crate::ledger::{MemCategory, MemoryLedger};
use crate::math;
use crate::splitstore::SplitTensor;

// ── Errors ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OptimError {
    /// Learning rate (or another hyperparameter) is NaN/Inf.
    NonFiniteLr,
    GradShapeMismatch {
        param: String,
        expected: usize,
        got: usize,
    },
    /// Slot state does not match the step rule (SGD step on an Adam slot).
    StateMismatch { param: String },
    SlotOutOfRange { slot: usize, count: usize },
    /// Fused streams only support 8 or 16 extra bits.
    UnsupportedFusedK { param: String, k: u32 },
    /// Fused streams need every parameter in the same format and mode.
    MixedFusedConfig { param: String },
    GradCountMismatch { expected: usize, got: usize },
    /// `step_param` outside `begin_step`/`end_step`.
    NoOpenIteration,
    IterationAlreadyOpen,
    /// Stream descriptor does not match the optimizer's current slots.
    StaleStream,
}

impl core::fmt::Display for OptimError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::NonFiniteLr => write!(f, "learning rate must be finite"),
            Self::GradShapeMismatch {
                param,
                expected,
                got,
            } => write!(f, "gradient for '{param}' has {got} elements, expected {expected}"),
            Self::StateMismatch { param } => {
                write!(f, "optimizer state of '{param}' does not match the update rule")
            }
            Self::SlotOutOfRange { slot, count } => {
                write!(f, "parameter slot {slot} out of range ({count} registered)")
            }
            Self::UnsupportedFusedK { param, k } => write!(
                f,
                "fused optimizer supports only 8 or 16 extra bits, parameter '{param}' has k={k}"
            ),
            Self::MixedFusedConfig { param } => write!(
                f,
                "fused optimizer requires one (format, mode) for all parameters; '{param}' differs"
            ),
            Self::GradCountMismatch { expected, got } => {
                write!(f, "got {got} gradient tensors for {expected} parameters")
            }
            Self::NoOpenIteration => write!(f, "step_param called outside begin_step/end_step"),
            Self::IterationAlreadyOpen => write!(f, "begin_step while an iteration is open"),
            Self::StaleStream => write!(f, "fused stream does not match the optimizer's slots"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for OptimError {}

// ── Gradient hooks ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HookSignal {
    Continue,
    /// Abandon this iteration's updates for every parameter.
    Skip,
}

/// Elementwise gradient transform applied before the update rule.
pub trait GradTransform: Send {
    fn apply(&mut self, grad: &mut [f32]) -> HookSignal;

    /// Whether this hook can ever signal [`HookSignal::Skip`]; drives the
    /// snapshot fast path.
    fn can_skip(&self) -> bool {
        false
    }
}

impl<F: FnMut(&mut [f32]) -> HookSignal + Send> GradTransform for F {
    fn apply(&mut self, grad: &mut [f32]) -> HookSignal {
        self(grad)
    }
}

/// Clamp every gradient element to `[-limit, limit]`.
pub struct Clip {
    pub limit: f32,
}

impl GradTransform for Clip {
    fn apply(&mut self, grad: &mut [f32]) -> HookSignal {
        for g in grad {
            *g = g.clamp(-self.limit, self.limit);
        }
        HookSignal::Continue
    }
}

/// Divide gradients by the loss scale; skips the iteration when a
/// non-finite value shows up (overflowed scaled loss).
pub struct Unscale {
    pub scale: f32,
}

impl GradTransform for Unscale {
    fn apply(&mut self, grad: &mut [f32]) -> HookSignal {
        let inv = 1.0 / self.scale;
        let mut finite = true;
        for g in grad.iter_mut() {
            *g *= inv;
            finite &= g.is_finite();
        }
        if finite {
            HookSignal::Continue
        } else {
            HookSignal::Skip
        }
    }

    fn can_skip(&self) -> bool {
        true
    }
}

// ── Update rules ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub nesterov: bool,
}

impl SgdConfig {
    pub fn plain(lr: f32) -> Self {
        Self {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            nesterov: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rule {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

/// Optimizer state buffers, kept in f32.
#[derive(Clone, Debug)]
pub enum OptState {
    Sgd {
        velocity: Vec<f32>,
    },
    Adam {
        m: Vec<f32>,
        v: Vec<f32>,
        step: u64,
        // running beta powers; cheaper and bit-reproducible vs powi
        beta1_pow: f32,
        beta2_pow: f32,
    },
}

impl OptState {
    fn bytes(&self) -> u64 {
        match self {
            Self::Sgd { velocity } => velocity.len() as u64 * 4,
            Self::Adam { m, v, .. } => (m.len() + v.len()) as u64 * 4,
        }
    }
}

/// One registered parameter: the split tensor, its optimizer state and its
/// ordered gradient hooks.
pub struct ParamSlot {
    name: String,
    param: SplitTensor,
    state: OptState,
    hooks: Vec<Box<dyn GradTransform>>,
}

impl ParamSlot {
    pub fn sgd(name: &str, param: SplitTensor) -> Self {
        let n = param.len();
        Self {
            name: String::from(name),
            param,
            state: OptState::Sgd {
                velocity: vec![0.0; n],
            },
            hooks: Vec::new(),
        }
    }

    pub fn adam(name: &str, param: SplitTensor) -> Self {
        let n = param.len();
        Self {
            name: String::from(name),
            param,
            state: OptState::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
                beta1_pow: 1.0,
                beta2_pow: 1.0,
            },
            hooks: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn param(&self) -> &SplitTensor {
        &self.param
    }

    pub fn state(&self) -> &OptState {
        &self.state
    }

    fn check_grad(&self, grad: &[f32]) -> Result<(), OptimError> {
        if grad.len() != self.param.len() {
            return Err(OptimError::GradShapeMismatch {
                param: self.name.clone(),
                expected: self.param.len(),
                got: grad.len(),
            });
        }
        Ok(())
    }
}

/// SGD with momentum as one fused reconstruct-update-resplit pass:
/// `g_eff = g + wd*p; v = mu*v + g_eff; p -= lr*(g_eff + mu*v | v)`.
/// Hooks are not applied here; that is `step_param`'s job.
pub fn sgd_step(slot: &mut ParamSlot, grad: &[f32], cfg: &SgdConfig) -> Result<(), OptimError> {
    if !cfg.lr.is_finite() {
        return Err(OptimError::NonFiniteLr);
    }
    slot.check_grad(grad)?;
    let ParamSlot { name, param, state, .. } = slot;
    let OptState::Sgd { velocity } = state else {
        return Err(OptimError::StateMismatch { param: name.clone() });
    };
    let SgdConfig {
        lr,
        momentum,
        weight_decay,
        nesterov,
    } = *cfg;
    param.apply_update(|i, p| {
        let g_eff = grad[i] + weight_decay * p;
        velocity[i] = momentum * velocity[i] + g_eff;
        let d = if nesterov {
            g_eff + momentum * velocity[i]
        } else {
            velocity[i]
        };
        p - lr * d
    });
    Ok(())
}

/// Adam with bias correction, parameter reconstructed at full precision:
/// `m = b1*m + (1-b1)*g_eff; v = b2*v + (1-b2)*g_eff^2;
///  p -= lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)`
/// with `g_eff = g + wd*p`.
pub fn adam_step(slot: &mut ParamSlot, grad: &[f32], cfg: &AdamConfig) -> Result<(), OptimError> {
    if !cfg.lr.is_finite() {
        return Err(OptimError::NonFiniteLr);
    }
    slot.check_grad(grad)?;
    let ParamSlot { name, param, state, .. } = slot;
    let OptState::Adam {
        m,
        v,
        step,
        beta1_pow,
        beta2_pow,
    } = state
    else {
        return Err(OptimError::StateMismatch { param: name.clone() });
    };
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = *cfg;
    *step += 1;
    *beta1_pow *= beta1;
    *beta2_pow *= beta2;
    let c1 = 1.0 / (1.0 - *beta1_pow);
    let c2 = 1.0 / (1.0 - *beta2_pow);
    param.apply_update(|i, p| {
        let g_eff = grad[i] + weight_decay * p;
        m[i] = beta1 * m[i] + (1.0 - beta1) * g_eff;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g_eff * g_eff;
        let m_hat = m[i] * c1;
        let v_hat = v[i] * c2;
        p - lr * m_hat / (math::sqrt(v_hat) + eps)
    });
    Ok(())
}

// ── Optimizer ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A hook flagged the iteration; every parameter was left (or rolled
    /// back to) its pre-iteration state.
    Skipped,
}

struct Snapshot {
    slot: usize,
    highs: Vec<u8>,
    extras_words: Option<Vec<u32>>,
    state: OptState,
    bytes: u64,
}

struct Iteration {
    skip: bool,
    snapshots: Vec<Snapshot>,
    /// Any registered hook can skip; without one, snapshots are pointless.
    fallible: bool,
}

/// Owns the parameter slots and drives per-parameter steps with the
/// deferred-skip contract.
pub struct Optimizer {
    rule: Rule,
    slots: Vec<ParamSlot>,
    ledger: MemoryLedger,
    iteration: Option<Iteration>,
}

impl Optimizer {
    pub fn new(rule: Rule) -> Self {
        Self {
            rule,
            slots: Vec::new(),
            ledger: MemoryLedger::new(),
            iteration: None,
        }
    }

    pub fn sgd(cfg: SgdConfig) -> Self {
        Self::new(Rule::Sgd(cfg))
    }

    pub fn adam(cfg: AdamConfig) -> Self {
        Self::new(Rule::Adam(cfg))
    }

    pub fn rule(&self) -> &Rule {
        &self.rule
    }

    pub fn rule_mut(&mut self) -> &mut Rule {
        &mut self.rule
    }

    /// Register a parameter; returns its slot index.
    pub fn register(&mut self, name: &str, param: SplitTensor) -> usize {
        self.register_with_hooks(name, param, Vec::new())
    }

    pub fn register_with_hooks(
        &mut self,
        name: &str,
        param: SplitTensor,
        hooks: Vec<Box<dyn GradTransform>>,
    ) -> usize {
        self.ledger.alloc(MemCategory::ParamHigh, param.high_bytes());
        self.ledger.alloc(MemCategory::ParamExtra, param.extra_bytes());
        let mut slot = match self.rule {
            Rule::Sgd(_) => ParamSlot::sgd(name, param),
            Rule::Adam(_) => ParamSlot::adam(name, param),
        };
        slot.hooks = hooks;
        self.ledger.alloc(MemCategory::OptimizerState, slot.state.bytes());
        self.slots.push(slot);
        self.slots.len() - 1
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, i: usize) -> &ParamSlot {
        &self.slots[i]
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn ledger(&self) -> &MemoryLedger {
        &self.ledger
    }

    /// Open an iteration; every parameter gets at most one `step_param`
    /// before [`end_step`](Self::end_step) commits or rolls back.
    pub fn begin_step(&mut self) -> Result<(), OptimError> {
        if self.iteration.is_some() {
            return Err(OptimError::IterationAlreadyOpen);
        }
        let fallible = self
            .slots
            .iter()
            .any(|s| s.hooks.iter().any(|h| h.can_skip()));
        self.iteration = Some(Iteration {
            skip: false,
            snapshots: Vec::new(),
            fallible,
        });
        Ok(())
    }

    /// Apply the slot's hooks in order to `grad`, then the update rule.
    /// The gradient is consumed in place and not retained. If any hook
    /// (here or on another slot this iteration) signals skip, the whole
    /// iteration becomes a no-op at `end_step`.
    pub fn step_param(&mut self, slot_idx: usize, grad: &mut [f32]) -> Result<(), OptimError> {
        if slot_idx >= self.slots.len() {
            return Err(OptimError::SlotOutOfRange {
                slot: slot_idx,
                count: self.slots.len(),
            });
        }
        if self.iteration.is_none() {
            return Err(OptimError::NoOpenIteration);
        }
        self.slots[slot_idx].check_grad(grad)?;

        // hooks always observe the gradient, exactly as a per-parameter
        // hook would during backward, even if the iteration ends skipped
        let mut skip = false;
        for hook in &mut self.slots[slot_idx].hooks {
            if hook.apply(grad) == HookSignal::Skip {
                skip = true;
                break;
            }
        }
        let iter = self.iteration.as_mut().expect("checked above");
        if skip {
            iter.skip = true;
        }
        if iter.skip {
            return Ok(());
        }
        if iter.fallible {
            let slot = &self.slots[slot_idx];
            let snap = Snapshot {
                slot: slot_idx,
                highs: slot.param.highs_bytes().to_vec(),
                extras_words: slot.param.extras().map(|b| b.words().to_vec()),
                state: slot.state.clone(),
                bytes: slot.param.high_bytes() + slot.param.extra_bytes() + slot.state.bytes(),
            };
            self.ledger.alloc(MemCategory::OptimizerState, snap.bytes);
            self.iteration.as_mut().unwrap().snapshots.push(snap);
        }
        let slot = &mut self.slots[slot_idx];
        match self.rule {
            Rule::Sgd(ref cfg) => sgd_step(slot, grad, cfg),
            Rule::Adam(ref cfg) => adam_step(slot, grad, cfg),
        }
    }

    /// Commit the iteration, or roll every stepped parameter back if a
    /// hook signalled skip.
    pub fn end_step(&mut self) -> Result<StepOutcome, OptimError> {
        let iter = self.iteration.take().ok_or(OptimError::NoOpenIteration)?;
        let outcome = if iter.skip {
            StepOutcome::Skipped
        } else {
            StepOutcome::Applied
        };
        for snap in iter.snapshots {
            self.ledger.free(MemCategory::OptimizerState, snap.bytes);
            if iter.skip {
                let slot = &mut self.slots[snap.slot];
                let restored = SplitTensor::from_raw_parts(
                    slot.param.fmt(),
                    slot.param.k(),
                    slot.param.mode(),
                    slot.param.shape(),
                    slot.param.seed(),
                    snap.highs,
                    snap.extras_words.unwrap_or_default(),
                )
                .expect("snapshot came from a valid tensor");
                slot.param = restored;
                slot.state = snap.state;
            }
        }
        Ok(outcome)
    }

    /// begin / step each parameter in order / end, as one call.
    pub fn step_all(&mut self, grads: &mut [Vec<f32>]) -> Result<StepOutcome, OptimError> {
        if grads.len() != self.slots.len() {
            return Err(OptimError::GradCountMismatch {
                expected: self.slots.len(),
                got: grads.len(),
            });
        }
        self.begin_step()?;
        for (i, g) in grads.iter_mut().enumerate() {
            if let Err(e) = self.step_param(i, g) {
                self.iteration = None;
                return Err(e);
            }
        }
        self.end_step()
    }

    /// One pass over the fused stream: hooks and update rule per slot, in
    /// registration order, bitwise-identical to per-parameter `step_param`.
    pub fn fused_step(
        &mut self,
        stream: &FusedStream,
        grads: &mut [Vec<f32>],
    ) -> Result<StepOutcome, OptimError> {
        if stream.offsets.len() != self.slots.len()
            || stream
                .offsets
                .iter()
                .zip(&self.slots)
                .any(|(&off, s)| off > stream.total_len || s.param.len() > stream.total_len - off)
        {
            return Err(OptimError::StaleStream);
        }
        self.step_all(grads)
    }
}

// ── Fused stream ─────────────────────────────────────────────────────

/// Concatenation descriptor treating every registered parameter as one
/// stream of values. Only constructible when all parameters store 8 or 16
/// extra bits (entries then pack whole numbers per word and parameter
/// boundaries stay word-aligned) in one shared (format, mode).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusedStream {
    offsets: Vec<usize>,
    total_len: usize,
    fmt: FloatFormat,
    k: u32,
    mode: RoundMode,
}

impl FusedStream {
    pub fn new(opt: &Optimizer) -> Result<Self, OptimError> {
        let mut offsets = Vec::with_capacity(opt.slots.len());
        let mut total = 0usize;
        let mut shared: Option<(FloatFormat, u32, RoundMode)> = None;
        for slot in &opt.slots {
            let p = slot.param();
            if p.k() != 8 && p.k() != 16 {
                return Err(OptimError::UnsupportedFusedK {
                    param: slot.name.clone(),
                    k: p.k(),
                });
            }
            match shared {
                None => shared = Some((p.fmt(), p.k(), p.mode())),
                Some(cfg) if cfg != (p.fmt(), p.k(), p.mode()) => {
                    return Err(OptimError::MixedFusedConfig {
                        param: slot.name.clone(),
                    });
                }
                _ => {}
            }
            offsets.push(total);
            total += p.len();
        }
        let (fmt, k, mode) = shared.unwrap_or((FloatFormat::FP16, 8, RoundMode::Rtz));
        Ok(Self {
            offsets,
            total_len: total,
            fmt,
            k,
            mode,
        })
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }
}
