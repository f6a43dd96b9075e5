use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::logic::{compute_gate, compute_gate_word, LogicOp};
use super::timing::TimingParams;
use super::ArrayError;
use crate::device::{CellStatus, DeviceError, DeviceParams, RramCell};
use crate::energy::EnergyLedger;
use crate::rng::{cell_stream, substream};

pub const BLOCK_ROWS: usize = 512;
pub const BLOCK_COLS: usize = 32;
/// 64-bit words needed to hold one bit per row.
pub const ROW_WORDS: usize = BLOCK_ROWS / 64;

/// One bit per row, packed little-endian (row `r` is bit `r % 64` of word `r / 64`).
pub type RowBits = [u64; ROW_WORDS];

pub fn pack_rows(bits: &[bool]) -> RowBits {
    assert!(bits.len() <= BLOCK_ROWS, "at most {BLOCK_ROWS} rows");
    let mut out = [0u64; ROW_WORDS];
    for (r, &b) in bits.iter().enumerate() {
        out[r / 64] |= (b as u64) << (r % 64);
    }
    out
}

pub fn row_bit(bits: &RowBits, row: usize) -> bool {
    bits[row / 64] >> (row % 64) & 1 == 1
}

pub fn set_row_bit(bits: &mut RowBits, row: usize, value: bool) {
    if value {
        bits[row / 64] |= 1 << (row % 64);
    } else {
        bits[row / 64] &= !(1 << (row % 64));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Coord {
    pub row: usize,
    pub col: usize,
}

impl Coord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// Placement of the redundancy resources inside a block.
///
/// Spare columns occupy the top column indices and the backup region the
/// bottom rows of the data columns, so logical data coordinates coincide with
/// physical ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockLayout {
    pub rows: usize,
    pub cols: usize,
    pub spare_cols: usize,
    pub backup_rows: usize,
}

impl Default for BlockLayout {
    fn default() -> Self {
        Self { rows: BLOCK_ROWS, cols: BLOCK_COLS, spare_cols: 2, backup_rows: 16 }
    }
}

impl BlockLayout {
    pub fn data_rows(&self) -> usize {
        self.rows - self.backup_rows
    }

    pub fn data_cols(&self) -> usize {
        self.cols - self.spare_cols
    }

    pub fn is_spare_col(&self, col: usize) -> bool {
        col >= self.data_cols()
    }

    pub fn in_backup_region(&self, c: Coord) -> bool {
        c.row >= self.data_rows() && !self.is_spare_col(c.col)
    }

    /// Spare-column and backup-region cells.
    pub fn is_reserved(&self, c: Coord) -> bool {
        self.is_spare_col(c.col) || self.in_backup_region(c)
    }

    pub fn validate(&self) -> Result<(), ArrayError> {
        if self.rows == 0 || self.rows > BLOCK_ROWS || self.cols == 0 || self.cols > BLOCK_COLS {
            return Err(ArrayError::ShapeMismatch(format!(
                "block must be at most {BLOCK_ROWS}x{BLOCK_COLS}, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.spare_cols >= self.cols || self.backup_rows >= self.rows {
            return Err(ArrayError::ShapeMismatch("redundancy leaves no data cells".into()));
        }
        Ok(())
    }
}

/// Outcome of programming a block (or part of one).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct YieldReport {
    /// Cells that verified inside the tolerance window.
    pub ok: u64,
    /// Cells that exhausted the verify budget (or their endurance).
    pub failed: u64,
    /// Failures that were remapped to a spare or backup cell.
    pub repaired: u64,
    /// `cycle_histogram[n]` counts runs that used `n` verify cycles.
    pub cycle_histogram: Vec<u64>,
}

impl YieldReport {
    fn record(&mut self, cycles: u32) {
        let idx = cycles as usize;
        if self.cycle_histogram.len() <= idx {
            self.cycle_histogram.resize(idx + 1, 0);
        }
        self.cycle_histogram[idx] += 1;
    }

    pub fn merge(&mut self, other: &YieldReport) {
        self.ok += other.ok;
        self.failed += other.failed;
        self.repaired += other.repaired;
        for (n, &count) in other.cycle_histogram.iter().enumerate() {
            if count > 0 {
                self.record_n(n, count);
            }
        }
    }

    fn record_n(&mut self, idx: usize, count: u64) {
        if self.cycle_histogram.len() <= idx {
            self.cycle_histogram.resize(idx + 1, 0);
        }
        self.cycle_histogram[idx] += count;
    }

    /// Fraction of programming runs that finished within `cycles` cycles.
    pub fn fraction_within(&self, cycles: usize) -> f64 {
        let total: u64 = self.cycle_histogram.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let within: u64 = self.cycle_histogram.iter().take(cycles + 1).sum();
        within as f64 / total as f64
    }
}

/// Which reference resistor the readout compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    /// Midpoint between level `b` and level `b + 1`.
    Boundary(usize),
    /// Midpoint between the two extreme levels (binary storage).
    Binary,
}

/// Binary-mode readout of the data region, rebuilt lazily after writes.
#[derive(Debug, Clone)]
struct SenseCache {
    bits: Vec<RowBits>,
    /// Rows whose cell is unreadable (failed without a replacement).
    poison: Vec<RowBits>,
}

/// A 512×32 1T1R array with its readout, reconfigurable logic and
/// redundancy bookkeeping.
#[derive(Debug, Clone)]
pub struct CimBlock {
    layout: BlockLayout,
    params: DeviceParams,
    timing: TimingParams,
    cells: Vec<RramCell>,
    /// Logical coordinate -> physical replacement.
    remap: BTreeMap<Coord, Coord>,
    in_use: BTreeSet<Coord>,
    sense: Option<SenseCache>,
    ledger: Arc<EnergyLedger>,
    seed: u64,
    op_seq: u64,
}

impl CimBlock {
    /// A block of unformed cells.
    pub fn new(layout: BlockLayout, params: DeviceParams, timing: TimingParams, seed: u64) -> Result<Self, ArrayError> {
        layout.validate()?;
        params.validate()?;
        timing.validate().map_err(ArrayError::Config)?;
        let cells = vec![RramCell::new(); layout.rows * layout.cols];
        Ok(Self {
            layout,
            params,
            timing,
            cells,
            remap: BTreeMap::new(),
            in_use: BTreeSet::new(),
            sense: None,
            ledger: Arc::new(EnergyLedger::new()),
            seed,
            op_seq: 0,
        })
    }

    /// A default-layout block with every cell formed.
    pub fn formed(params: DeviceParams, timing: TimingParams, seed: u64) -> Result<Self, ArrayError> {
        let mut block = Self::new(BlockLayout::default(), params, timing, seed)?;
        block.form_all()?;
        Ok(block)
    }

    pub fn with_ledger(mut self, ledger: Arc<EnergyLedger>) -> Self {
        self.ledger = ledger;
        self
    }

    pub fn ledger(&self) -> &Arc<EnergyLedger> {
        &self.ledger
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn params(&self) -> &DeviceParams {
        &self.params
    }

    pub fn timing(&self) -> &TimingParams {
        &self.timing
    }

    pub fn set_compute_delay(&mut self, delay_us: f64) {
        self.timing.compute_delay_us = delay_us;
    }

    pub fn data_rows(&self) -> usize {
        self.layout.data_rows()
    }

    pub fn data_cols(&self) -> usize {
        self.layout.data_cols()
    }

    pub fn remap_table(&self) -> &BTreeMap<Coord, Coord> {
        &self.remap
    }

    pub fn cell(&self, c: Coord) -> &RramCell {
        &self.cells[c.row * self.layout.cols + c.col]
    }

    fn cell_mut(&mut self, c: Coord) -> &mut RramCell {
        self.sense = None;
        &mut self.cells[c.row * self.layout.cols + c.col]
    }

    pub fn cells(&self) -> &[RramCell] {
        &self.cells
    }

    fn coords(&self) -> impl Iterator<Item = Coord> {
        let cols = self.layout.cols;
        (0..self.layout.rows * cols).map(move |i| Coord::new(i / cols, i % cols))
    }

    fn next_stream(&mut self) -> rand_chacha::ChaCha8Rng {
        self.op_seq += 1;
        substream(self.seed ^ 0x5e_ed0f_b10c, self.op_seq)
    }

    /// Forms every cell; spare-column and backup cells become `Spare`.
    /// Returns the forming voltages in row-major order.
    pub fn form_all(&mut self) -> Result<Vec<f64>, ArrayError> {
        let mut voltages = Vec::with_capacity(self.cells.len());
        let coords: Vec<Coord> = self.coords().collect();
        for c in coords {
            let mut rng = substream(self.seed, cell_stream(c.row, c.col));
            let params = self.params.clone();
            let reserved = self.layout.is_reserved(c);
            let cell = self.cell_mut(c);
            let v = cell.form(&params, &mut rng).map_err(|e| ArrayError::Device { coord: c, source: e })?;
            if reserved {
                cell.status = CellStatus::Spare;
            }
            voltages.push(v);
        }
        Ok(voltages)
    }

    /// Marks a physical cell as permanently defective.
    pub fn inject_fault(&mut self, c: Coord) -> Result<(), ArrayError> {
        self.check_physical(c)?;
        self.cell_mut(c).inject_stuck_fault();
        Ok(())
    }

    fn check_physical(&self, c: Coord) -> Result<(), ArrayError> {
        if c.row >= self.layout.rows || c.col >= self.layout.cols {
            return Err(ArrayError::OutOfBounds(c));
        }
        Ok(())
    }

    fn check_logical(&self, c: Coord) -> Result<(), ArrayError> {
        if c.row >= self.data_rows() || c.col >= self.data_cols() {
            return Err(ArrayError::OutOfBounds(c));
        }
        Ok(())
    }

    /// Physical cell currently holding logical coordinate `c`.
    pub fn resolve(&self, c: Coord) -> Coord {
        self.remap.get(&c).copied().unwrap_or(c)
    }

    /// Programs every cell of the block to `levels[row][col]` with
    /// program-and-verify, repairing each cell that fails.
    ///
    /// Entries at reserved (spare/backup) coordinates program the spare cell
    /// itself unless it already stands in for a failed data cell.
    pub fn program_block<R: RngCore + ?Sized>(
        &mut self,
        levels: &[Vec<usize>],
        rng: &mut R,
    ) -> Result<YieldReport, ArrayError> {
        if levels.len() != self.layout.rows || levels.iter().any(|r| r.len() != self.layout.cols) {
            return Err(ArrayError::ShapeMismatch(format!(
                "level matrix must be {}x{}",
                self.layout.rows, self.layout.cols
            )));
        }
        let base = rng.next_u64();
        let mut report = YieldReport::default();
        for row in 0..self.data_rows() {
            for col in 0..self.data_cols() {
                self.program_logical(Coord::new(row, col), levels[row][col], base, &mut report)?;
            }
        }
        let reserved: Vec<Coord> = self.coords().filter(|&c| self.layout.is_reserved(c)).collect();
        for c in reserved {
            if self.in_use.contains(&c) || self.cell(c).status == CellStatus::Failed {
                continue;
            }
            let mut cell_rng = substream(base, cell_stream(c.row, c.col));
            let params = self.params.clone();
            let level = levels[c.row][c.col];
            let outcome = self.cell_mut(c).program_verify(level, &params, &mut cell_rng);
            self.ledger.add_cell_writes(self.cell(c).verify_cycles_last as u64);
            match outcome {
                Ok(o) if o.succeeded() => {
                    report.ok += 1;
                    report.record(o.cycles);
                }
                Ok(o) => {
                    report.failed += 1;
                    report.record(o.cycles);
                }
                Err(DeviceError::EnduranceExceeded { .. }) => {
                    report.failed += 1;
                    report.record(self.cell(c).verify_cycles_last);
                }
                Err(e) => return Err(ArrayError::Device { coord: c, source: e }),
            }
        }
        Ok(report)
    }

    /// Programs a single logical data cell, repairing it on failure.
    pub fn program_cell<R: RngCore + ?Sized>(
        &mut self,
        c: Coord,
        level: usize,
        rng: &mut R,
    ) -> Result<YieldReport, ArrayError> {
        self.check_logical(c)?;
        let base = rng.next_u64();
        let mut report = YieldReport::default();
        self.program_logical(c, level, base, &mut report)?;
        Ok(report)
    }

    fn program_logical(&mut self, c: Coord, level: usize, base: u64, report: &mut YieldReport) -> Result<(), ArrayError> {
        let phys = self.resolve(c);
        if self.cell(phys).status == CellStatus::Failed {
            // Failed cell whose earlier repair was lost (e.g. restored image).
            self.cell_mut(phys).target_level = Some(level);
            self.repair_into(c, report)?;
            return Ok(());
        }
        let mut cell_rng = substream(base, cell_stream(phys.row, phys.col));
        if self.write_verify(phys, level, &mut cell_rng, report)? {
            return Ok(());
        }
        self.repair_into(c, report)?;
        Ok(())
    }

    /// Runs program-and-verify on a physical cell; `Ok(false)` means it failed.
    fn write_verify<R: Rng + ?Sized>(
        &mut self,
        phys: Coord,
        level: usize,
        rng: &mut R,
        report: &mut YieldReport,
    ) -> Result<bool, ArrayError> {
        let params = self.params.clone();
        let outcome = self.cell_mut(phys).program_verify(level, &params, rng);
        let cycles = self.cell(phys).verify_cycles_last;
        self.ledger.add_cell_writes(cycles as u64);
        report.record(cycles);
        match outcome {
            Ok(o) if o.succeeded() => {
                report.ok += 1;
                Ok(true)
            }
            Ok(_) | Err(DeviceError::EnduranceExceeded { .. }) => {
                report.failed += 1;
                Ok(false)
            }
            Err(e) => Err(ArrayError::Device { coord: phys, source: e }),
        }
    }

    /// Replaces the failed cell behind logical coordinate `c`.
    ///
    /// First choice is an unused spare-column cell in the same row, second the
    /// next free backup-region cell. The replacement is programmed to the
    /// failed cell's target level; if it fails too the search continues.
    pub fn repair(&mut self, c: Coord) -> Result<Coord, ArrayError> {
        self.check_logical(c)?;
        let phys = self.resolve(c);
        if self.cell(phys).status != CellStatus::Failed {
            return Err(ArrayError::NotFailed(c));
        }
        let mut report = YieldReport::default();
        self.repair_into(c, &mut report)
    }

    fn repair_into(&mut self, c: Coord, report: &mut YieldReport) -> Result<Coord, ArrayError> {
        let target = self.cell(self.resolve(c)).target_level.unwrap_or(0);
        loop {
            let replacement = self.allocate_replacement(c.row).ok_or(ArrayError::RepairExhausted(c))?;
            let old = self.resolve(c);
            self.in_use.remove(&old);
            self.in_use.insert(replacement);
            self.remap.insert(c, replacement);
            let mut rng = self.next_stream();
            let ok = self.write_verify(replacement, target, &mut rng, report)?;
            report.repaired += 1;
            if ok {
                self.cell_mut(replacement).status = CellStatus::Ok;
                return Ok(replacement);
            }
        }
    }

    fn allocate_replacement(&self, row: usize) -> Option<Coord> {
        let free = |c: &Coord| self.cell(*c).status == CellStatus::Spare && !self.in_use.contains(c);
        let spare = (self.data_cols()..self.layout.cols).map(|col| Coord::new(row, col)).find(free);
        spare.or_else(|| {
            (self.data_rows()..self.layout.rows)
                .flat_map(|r| (0..self.data_cols()).map(move |col| Coord::new(r, col)))
                .find(free)
        })
    }

    fn reference_kohm(&self, reference: Reference) -> Result<f64, ArrayError> {
        match reference {
            Reference::Binary => Ok(self.params.binary_threshold()),
            Reference::Boundary(b) => {
                let th = self.params.thresholds();
                th.get(b).copied().ok_or(ArrayError::BadReference(b))
            }
        }
    }

    /// RR-module readout of a logical data cell: 1 iff it conducts better than
    /// the selected reference.
    pub fn read_bit(&self, row: usize, col: usize, reference: Reference) -> Result<bool, ArrayError> {
        let c = Coord::new(row, col);
        self.check_logical(c)?;
        let rref = self.reference_kohm(reference)?;
        let phys = self.resolve(c);
        self.ledger.add_cell_reads(1);
        self.cell(phys).compare(rref).map_err(|e| ArrayError::Device { coord: c, source: e })
    }

    /// Multi-bit readout by successive reference comparisons (binary search
    /// over the level boundaries). Agrees with [`Self::read_level`].
    pub fn read_value(&self, row: usize, col: usize) -> Result<usize, ArrayError> {
        let (mut lo, mut hi) = (0usize, self.params.n_levels - 1);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.read_bit(row, col, Reference::Boundary(mid))? {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        Ok(lo)
    }

    /// Direct level quantization of a logical data cell.
    pub fn read_level(&self, row: usize, col: usize) -> Result<usize, ArrayError> {
        let c = Coord::new(row, col);
        self.check_logical(c)?;
        self.cell(self.resolve(c)).read_level(&self.params).map_err(|e| ArrayError::Device { coord: c, source: e })
    }

    fn sense(&mut self) -> &SenseCache {
        if self.sense.is_none() {
            let rref = self.params.binary_threshold();
            let mut bits = vec![[0u64; ROW_WORDS]; self.data_cols()];
            let mut poison = vec![[0u64; ROW_WORDS]; self.data_cols()];
            for col in 0..self.data_cols() {
                for row in 0..self.data_rows() {
                    let cell = self.cell(self.resolve(Coord::new(row, col)));
                    match cell.compare(rref) {
                        Ok(b) => set_row_bit(&mut bits[col], row, b),
                        Err(_) => set_row_bit(&mut poison[col], row, true),
                    }
                }
            }
            self.sense = Some(SenseCache { bits, poison });
        }
        self.sense.as_ref().expect("just built")
    }

    /// Binary-reference readout of a whole data column.
    pub fn column_bits(&mut self, col: usize) -> Result<RowBits, ArrayError> {
        if col >= self.data_cols() {
            return Err(ArrayError::OutOfBounds(Coord::new(0, col)));
        }
        let rows = self.data_rows();
        let sense = self.sense();
        if let Some(row) = (0..rows).find(|&r| row_bit(&sense.poison[col], r)) {
            return Err(ArrayError::Device { coord: Coord::new(row, col), source: DeviceError::ReadFromFailed });
        }
        let bits = sense.bits[col];
        self.ledger.add_cell_reads(rows as u64);
        Ok(bits)
    }

    /// Evaluates one row on all data columns in parallel: bit `c` of the
    /// result is `x AND op(w[row][c], k)`, where `w` is the binary-reference
    /// readout. Past the critical delay each output bit flips independently
    /// with the leakage error rate. Spare-column bits are always 0.
    pub fn compute_row_parallel<R: Rng + ?Sized>(
        &self,
        row: usize,
        x: bool,
        k: bool,
        op: LogicOp,
        delay_us: f64,
        rng: &mut R,
    ) -> Result<u32, ArrayError> {
        let ber = self.timing.ber(delay_us);
        let mut out = 0u32;
        for col in 0..self.data_cols() {
            let w = self.read_bit(row, col, Reference::Binary)?;
            let mut bit = compute_gate(x, w, k, op);
            if ber > 0.0 && rng.random_bool(ber) {
                bit = !bit;
            }
            out |= (bit as u32) << col;
        }
        self.ledger.add_gate_evals(self.data_cols() as u64);
        Ok(out)
    }

    /// Hadamard product `X ⊙ (W ◎ K)` over the driven rows followed by
    /// column-wise accumulation. Rows beyond `x.len()` are not driven. The
    /// result has one count per physical column; spare columns report 0.
    pub fn ternary_vmm(&mut self, x: &[bool], k: &[bool], op: LogicOp) -> Result<Vec<u32>, ArrayError> {
        if x.len() != k.len() || x.len() > self.data_rows() {
            return Err(ArrayError::ShapeMismatch(format!(
                "x/k must have equal length <= {} (got {} and {})",
                self.data_rows(),
                x.len(),
                k.len()
            )));
        }
        self.ternary_vmm_packed(&pack_rows(x), &pack_rows(k), x.len(), op)
    }

    /// Packed form of [`Self::ternary_vmm`]: only the first `rows` rows are
    /// driven, the remaining bits of `x` and `k` are ignored.
    pub fn ternary_vmm_packed(&mut self, x: &RowBits, k: &RowBits, rows: usize, op: LogicOp) -> Result<Vec<u32>, ArrayError> {
        if rows > self.data_rows() {
            return Err(ArrayError::ShapeMismatch(format!("{rows} rows driven, block has {}", self.data_rows())));
        }
        let mut driven = [0u64; ROW_WORDS];
        for (w, d) in driven.iter_mut().enumerate() {
            let live = rows.saturating_sub(w * 64).min(64);
            *d = if live == 64 { u64::MAX } else { (1u64 << live) - 1 };
        }
        let ber = self.timing.ber(self.timing.compute_delay_us);
        let mut flips = if ber > 0.0 { Some(self.next_stream()) } else { None };
        let data_cols = self.data_cols();
        let cols = self.layout.cols;
        let sense = self.sense();
        let mut out = vec![0u32; cols];
        for col in 0..data_cols {
            let mut count = 0u32;
            for w in 0..ROW_WORDS {
                let xw = x[w] & driven[w];
                if xw & sense.poison[col][w] != 0 {
                    let row = w * 64 + (xw & sense.poison[col][w]).trailing_zeros() as usize;
                    return Err(ArrayError::Device { coord: Coord::new(row, col), source: DeviceError::ReadFromFailed });
                }
                let gated = compute_gate_word(xw, sense.bits[col][w], k[w], op);
                match flips.as_mut() {
                    None => count += gated.count_ones(),
                    Some(rng) => {
                        let mut lanes = driven[w];
                        while lanes != 0 {
                            let lane = lanes.trailing_zeros();
                            lanes &= lanes - 1;
                            let bit = (gated >> lane & 1 == 1) ^ rng.random_bool(ber);
                            count += bit as u32;
                        }
                    }
                }
            }
            out[col] = count;
        }
        self.ledger.add_gate_evals((rows * data_cols) as u64);
        self.ledger.add_accumulations(data_cols as u64);
        Ok(out)
    }

    /// Flip rate and a fresh flip stream when the configured compute delay
    /// is past the leakage threshold.
    pub(crate) fn leakage(&mut self) -> Option<(f64, crate::rng::SimRng)> {
        let ber = self.timing.ber(self.timing.compute_delay_us);
        (ber > 0.0).then(|| (ber, self.next_stream()))
    }

    pub(crate) fn restore(
        layout: BlockLayout,
        params: DeviceParams,
        timing: TimingParams,
        seed: u64,
        cells: Vec<RramCell>,
    ) -> Result<Self, ArrayError> {
        let mut block = Self::new(layout, params, timing, seed)?;
        if cells.len() != block.cells.len() {
            return Err(ArrayError::ShapeMismatch("cell count differs from layout".into()));
        }
        block.cells = cells;
        Ok(block)
    }

    /// Re-installs a remap table (e.g. from a checkpoint manifest).
    pub fn set_remap_table(&mut self, remap: BTreeMap<Coord, Coord>) -> Result<(), ArrayError> {
        for (&from, &to) in &remap {
            self.check_logical(from)?;
            self.check_physical(to)?;
            if !self.layout.is_reserved(to) {
                return Err(ArrayError::ShapeMismatch(format!("remap target {to} is not a reserved cell")));
            }
        }
        self.in_use = remap.values().copied().collect();
        self.remap = remap;
        self.sense = None;
        Ok(())
    }
}

/// Level matrix covering a whole block, built from a function of the
/// coordinate.
pub fn level_matrix(layout: &BlockLayout, f: impl Fn(Coord) -> usize) -> Vec<Vec<usize>> {
    (0..layout.rows).map(|r| (0..layout.cols).map(|c| f(Coord::new(r, c))).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn noiseless() -> DeviceParams {
        DeviceParams { program_sigma: 0.0, ..Default::default() }
    }

    fn block(params: DeviceParams) -> CimBlock {
        CimBlock::formed(params, TimingParams::default(), 11).unwrap()
    }

    #[test]
    fn noiseless_block_programs_in_one_cycle() {
        let mut b = block(noiseless());
        let levels = level_matrix(b.layout(), |c| (c.row + c.col) % 4);
        let report = b.program_block(&levels, &mut substream(1, 0)).unwrap();
        assert_eq!(report.ok, 16384);
        assert_eq!(report.failed, 0);
        assert_eq!(report.cycle_histogram, vec![0, 16384]);
        for r in 0..b.data_rows() {
            for c in 0..b.data_cols() {
                assert_eq!(b.read_level(r, c).unwrap(), (r + c) % 4);
            }
        }
    }

    #[test]
    fn injected_failures_are_repaired_transparently() {
        let mut b = block(DeviceParams::default());
        let faults: Vec<Coord> = (0..10).map(|i| Coord::new(i * 37 % 496, i * 7 % 30)).collect();
        for &f in &faults {
            b.inject_fault(f).unwrap();
        }
        let levels = level_matrix(b.layout(), |c| (c.row * 3 + c.col) % 4);
        let report = b.program_block(&levels, &mut substream(2, 0)).unwrap();
        assert_eq!(report.repaired, 10);
        assert_eq!(b.remap_table().len(), 10);
        for r in 0..b.data_rows() {
            for c in 0..b.data_cols() {
                assert_eq!(b.read_value(r, c).unwrap(), (r * 3 + c) % 4);
            }
        }
        for (from, to) in b.remap_table() {
            assert!(b.layout().is_reserved(*to));
            assert_eq!(b.cell(*to).status, CellStatus::Ok);
            assert_eq!(to.row, from.row, "one failure per row goes to a same-row spare");
        }
    }

    #[test]
    fn repair_strategy_order_and_exhaustion() {
        let layout = BlockLayout { rows: 8, cols: 6, spare_cols: 2, backup_rows: 1 };
        let mut b = CimBlock::new(layout, noiseless(), TimingParams::default(), 3).unwrap();
        b.form_all().unwrap();
        // three failures in row 0: two spares, then the backup row
        for col in 0..3 {
            b.inject_fault(Coord::new(0, col)).unwrap();
        }
        let levels = level_matrix(b.layout(), |_| 2);
        let report = b.program_block(&levels, &mut substream(3, 0)).unwrap();
        assert_eq!(report.repaired, 3);
        assert_eq!(b.resolve(Coord::new(0, 0)), Coord::new(0, 4));
        assert_eq!(b.resolve(Coord::new(0, 1)), Coord::new(0, 5));
        assert_eq!(b.resolve(Coord::new(0, 2)), Coord::new(7, 0));

        // the backup row has one free cell per data column (3 left); rows 1
        // and 2 need 2 + 2 of them after their own spares are used
        for col in 0..4 {
            b.inject_fault(Coord::new(1, col)).unwrap();
        }
        for col in 0..4 {
            b.inject_fault(Coord::new(2, col)).unwrap();
        }
        let err = b.program_block(&levels, &mut substream(3, 1)).unwrap_err();
        assert!(matches!(err, ArrayError::RepairExhausted(_)));
    }

    #[test]
    fn explicit_repair_requires_failed_cell() {
        let mut b = block(noiseless());
        assert!(matches!(b.repair(Coord::new(0, 0)), Err(ArrayError::NotFailed(_))));
        b.inject_fault(Coord::new(5, 5)).unwrap();
        let mut report = YieldReport::default();
        let mut rng = substream(0, 0);
        assert!(!b.write_verify(Coord::new(5, 5), 1, &mut rng, &mut report).unwrap());
        assert!(b.read_bit(5, 5, Reference::Binary).is_err());
        let to = b.repair(Coord::new(5, 5)).unwrap();
        assert_eq!(to, Coord::new(5, 30));
        assert_eq!(b.read_level(5, 5).unwrap(), 1);
    }

    #[test]
    fn read_bit_extremes_and_two_step_readout() {
        let mut b = block(DeviceParams::default());
        let levels = level_matrix(b.layout(), |c| c.col % 4);
        b.program_block(&levels, &mut substream(4, 0)).unwrap();
        for row in [0, 100, 495] {
            for col in 0..28 {
                let level = col % 4;
                for boundary in 0..3 {
                    let bit = b.read_bit(row, col, Reference::Boundary(boundary)).unwrap();
                    if level == 3 {
                        assert!(bit);
                    }
                    if level == 0 {
                        assert!(!bit);
                    }
                }
                // two reads: middle reference, then the upper or lower one
                let hi = b.read_bit(row, col, Reference::Boundary(1)).unwrap();
                let lo = b.read_bit(row, col, Reference::Boundary(if hi { 2 } else { 0 })).unwrap();
                assert_eq!((hi as usize) << 1 | lo as usize, b.read_level(row, col).unwrap());
            }
        }
    }

    #[test]
    fn vmm_edge_cases() {
        let mut b = block(DeviceParams::default());
        let levels = level_matrix(b.layout(), |c| if (c.row * 7 + c.col * 3) % 5 < 2 { 3 } else { 0 });
        b.program_block(&levels, &mut substream(5, 0)).unwrap();
        let n = b.data_rows();
        let zeros = vec![false; n];
        let ones = vec![true; n];
        assert!(b.ternary_vmm(&zeros, &ones, LogicOp::Or).unwrap().iter().all(|&v| v == 0));
        let counts = b.ternary_vmm(&ones, &ones, LogicOp::And).unwrap();
        for col in 0..b.data_cols() {
            let weight = (0..n).filter(|&r| levels[r][col] == 3).count() as u32;
            assert_eq!(counts[col], weight);
        }
        assert_eq!(&counts[30..], &[0, 0]);
        assert!(b.ternary_vmm(&ones, &zeros[..10], LogicOp::And).is_err());
    }

    #[test]
    fn spare_bits_are_zero_in_row_output() {
        let mut b = block(noiseless());
        let levels = level_matrix(b.layout(), |_| 3);
        b.program_block(&levels, &mut substream(6, 0)).unwrap();
        let out = b.compute_row_parallel(0, true, true, LogicOp::And, 1.0, &mut substream(6, 1)).unwrap();
        assert_eq!(out, (1 << 30) - 1);
    }
}
