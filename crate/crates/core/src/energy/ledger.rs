use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Operation counters fed by the array, arithmetic and search primitives.
///
/// Counters are atomic so a ledger can be shared between blocks through an
/// `Arc` and bumped from parallel lanes.
#[derive(Debug, Default)]
pub struct EnergyLedger {
    gate_evals: AtomicU64,
    shift_add_passes: AtomicU64,
    accumulations: AtomicU64,
    macs: AtomicU64,
    cell_writes: AtomicU64,
    cell_reads: AtomicU64,
    search_passes: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerCounts {
    /// One-bit RU gate evaluations.
    pub gate_evals: u64,
    /// Shift-and-adder group passes.
    pub shift_add_passes: u64,
    /// Accumulator additions.
    pub accumulations: u64,
    /// Multiply-accumulates (one MAC = two ops).
    pub macs: u64,
    /// Program attempts (one per verify cycle).
    pub cell_writes: u64,
    /// Reference-comparator reads.
    pub cell_reads: u64,
    /// Search-in-memory pair evaluations.
    pub search_passes: u64,
}

impl LedgerCounts {
    /// Ops in the multiply-and-accumulate sense (two per MAC).
    pub fn ops(&self) -> u64 {
        2 * self.macs
    }

    /// Parallel 64-lane gate operations.
    pub fn lane64_ops(&self) -> u64 {
        self.gate_evals.div_ceil(64)
    }

    pub fn since(&self, earlier: &LedgerCounts) -> LedgerCounts {
        LedgerCounts {
            gate_evals: self.gate_evals - earlier.gate_evals,
            shift_add_passes: self.shift_add_passes - earlier.shift_add_passes,
            accumulations: self.accumulations - earlier.accumulations,
            macs: self.macs - earlier.macs,
            cell_writes: self.cell_writes - earlier.cell_writes,
            cell_reads: self.cell_reads - earlier.cell_reads,
            search_passes: self.search_passes - earlier.search_passes,
        }
    }
}

macro_rules! counter {
    ($add:ident, $field:ident) => {
        pub fn $add(&self, n: u64) {
            self.$field.fetch_add(n, Ordering::Relaxed);
        }
    };
}

impl EnergyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    counter!(add_gate_evals, gate_evals);
    counter!(add_shift_add_passes, shift_add_passes);
    counter!(add_accumulations, accumulations);
    counter!(add_macs, macs);
    counter!(add_cell_writes, cell_writes);
    counter!(add_cell_reads, cell_reads);
    counter!(add_search_passes, search_passes);

    pub fn snapshot(&self) -> LedgerCounts {
        LedgerCounts {
            gate_evals: self.gate_evals.load(Ordering::Relaxed),
            shift_add_passes: self.shift_add_passes.load(Ordering::Relaxed),
            accumulations: self.accumulations.load(Ordering::Relaxed),
            macs: self.macs.load(Ordering::Relaxed),
            cell_writes: self.cell_writes.load(Ordering::Relaxed),
            cell_reads: self.cell_reads.load(Ordering::Relaxed),
            search_passes: self.search_passes.load(Ordering::Relaxed),
        }
    }
}
