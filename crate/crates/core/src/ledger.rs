//! Byte accounting for training memory: current and peak usage per
//! category, driven purely by alloc/free events so tests can replay and
//! check lifetimes. Reports fold the packed extra bits into the optimizer
//! state, which is where a profiler of the real system sees them.

use alloc::vec::Vec;

/// Where a buffer is charged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemCategory {
    /// High halves of the parameters.
    ParamHigh,
    /// Packed extra mantissa bits (and stochastic flags).
    ParamExtra,
    /// Parameter gradients. Backward temporaries for interior nodes are
    /// charged as activations instead.
    Grads,
    /// Optimizer state buffers (momentum, Adam moments, rollback snapshots).
    OptimizerState,
    /// Forward activations and backward temporaries.
    Activations,
}

pub const CATEGORIES: [MemCategory; 5] = [
    MemCategory::ParamHigh,
    MemCategory::ParamExtra,
    MemCategory::Grads,
    MemCategory::OptimizerState,
    MemCategory::Activations,
];

impl MemCategory {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ParamHigh => "param_high",
            Self::ParamExtra => "param_extra",
            Self::Grads => "grads",
            Self::OptimizerState => "optimizer_state",
            Self::Activations => "activations",
        }
    }

    fn index(&self) -> usize {
        match self {
            Self::ParamHigh => 0,
            Self::ParamExtra => 1,
            Self::Grads => 2,
            Self::OptimizerState => 3,
            Self::Activations => 4,
        }
    }
}

/// Per-category current/peak byte counters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemoryLedger {
    current: [u64; 5],
    peak: [u64; 5],
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, cat: MemCategory, bytes: u64) {
        let i = cat.index();
        self.current[i] += bytes;
        if self.current[i] > self.peak[i] {
            self.peak[i] = self.current[i];
        }
    }

    pub fn free(&mut self, cat: MemCategory, bytes: u64) {
        let i = cat.index();
        debug_assert!(self.current[i] >= bytes, "free exceeds live bytes");
        self.current[i] = self.current[i].saturating_sub(bytes);
    }

    pub fn current(&self, cat: MemCategory) -> u64 {
        self.current[cat.index()]
    }

    pub fn peak(&self, cat: MemCategory) -> u64 {
        self.peak[cat.index()]
    }

    pub fn current_total(&self) -> u64 {
        self.current.iter().sum()
    }

    /// Sum counters from another ledger. Exact as long as the two ledgers
    /// track disjoint categories, which is how the tape (activations,
    /// grads) and the optimizer (params, state) divide the work.
    pub fn merge(&mut self, other: &MemoryLedger) {
        for i in 0..5 {
            self.current[i] += other.current[i];
            self.peak[i] += other.peak[i];
        }
    }
}

/// One row of a ledger report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LedgerRow {
    pub category: MemCategory,
    pub current: u64,
    pub peak: u64,
}

/// Deterministic snapshot of one or more ledgers. Extra-bit bytes are
/// reported under `optimizer_state` (the optimizer owns them), so the
/// `param_extra` row is always zero here; the raw split is still available
/// on the ledgers themselves.
pub fn ledger_report(ledgers: &[&MemoryLedger]) -> Vec<LedgerRow> {
    let mut merged = MemoryLedger::new();
    for l in ledgers {
        merged.merge(l);
    }
    CATEGORIES
        .iter()
        .map(|&category| match category {
            MemCategory::ParamExtra => LedgerRow {
                category,
                current: 0,
                peak: 0,
            },
            MemCategory::OptimizerState => LedgerRow {
                category,
                current: merged.current(MemCategory::OptimizerState)
                    + merged.current(MemCategory::ParamExtra),
                peak: merged.peak(MemCategory::OptimizerState)
                    + merged.peak(MemCategory::ParamExtra),
            },
            _ => LedgerRow {
                category,
                current: merged.current(category),
                peak: merged.peak(category),
            },
        })
        .collect()
}
