//! Equivalence suites checking the in-array logic and arithmetic against
//! plain boolean and integer references, optionally with injected cell
//! failures.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::{level_matrix, ArrayError, BlockLayout, CimBlock, Coord, LogicOp, TimingParams};
use crate::bitslice::{cim_dot, conv2d_lowered, conv2d_oracle, BitsliceError, BlockSet, Int8Map, StoredKernels, GROUP_COLS};
use crate::device::DeviceParams;
use crate::rng::substream;
use crate::similarity::{euclid_sq_int8_cim, SimilarityError};

pub const LOGIC_SCHEMA: &str = "cim-verify-logic/1";
pub const MAC_SCHEMA: &str = "cim-mac-oracle/1";

/// Boolean reference for `OUT = X ∧ op(W, K)`.
pub fn reference_gate(op: LogicOp, x: bool, w: bool, k: bool) -> bool {
    let inner = match op {
        LogicOp::Nand => !(w && k),
        LogicOp::And => w && k,
        LogicOp::Xor => w ^ k,
        LogicOp::Or => w || k,
    };
    x && inner
}

/// `(cases, mismatches)` of `gate` against [`reference_gate`] over all
/// 32 `(op, x, w, k)` combinations.
pub fn truth_table_check(gate: impl Fn(bool, bool, bool, LogicOp) -> bool) -> (usize, usize) {
    let mut cases = 0;
    let mut mismatches = 0;
    for op in LogicOp::ALL {
        for bits in 0..8u8 {
            let (x, w, k) = (bits & 4 != 0, bits & 2 != 0, bits & 1 != 0);
            cases += 1;
            if gate(x, w, k, op) != reference_gate(op, x, w, k) {
                mismatches += 1;
            }
        }
    }
    (cases, mismatches)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicReport {
    pub schema: String,
    pub truth_table_cases: usize,
    pub truth_table_mismatches: usize,
    pub delay_us: f64,
    pub gate_evals: u64,
    pub bit_errors: u64,
    pub empirical_ber: f64,
    pub expected_ber: f64,
    /// Three-sigma binomial band around `expected_ber` for `gate_evals`.
    pub ber_low: f64,
    pub ber_high: f64,
    pub faults_injected: usize,
    pub cells_repaired: u64,
}

impl LogicReport {
    pub fn within_band(&self) -> bool {
        (self.ber_low..=self.ber_high).contains(&self.empirical_ber)
    }
}

/// Distinct random data-region coordinates.
fn random_cells<R: Rng + ?Sized>(n: usize, rows: usize, cols: usize, rng: &mut R) -> BTreeSet<(usize, usize)> {
    let mut set = BTreeSet::new();
    while set.len() < n.min(rows * cols) {
        set.insert((rng.random_range(0..rows), rng.random_range(0..cols)));
    }
    set
}

/// Row-parallel gate evaluations on a binary block holding random bits,
/// compared bit by bit against [`reference_gate`] on the bits as written.
pub fn logic_ber(
    device: &DeviceParams,
    timing: &TimingParams,
    delay_us: f64,
    samples: u64,
    faults: usize,
    seed: u64,
) -> Result<LogicReport, ArrayError> {
    let params = DeviceParams { n_levels: 2, level_resistances: None, ..device.clone() };
    let mut block = CimBlock::new(BlockLayout::default(), params.clone(), timing.clone(), seed)?;
    block.form_all()?;
    let (rows, cols) = (block.data_rows(), block.data_cols());
    let mut rng = substream(seed, 1);
    for (r, c) in random_cells(faults, rows, cols, &mut rng) {
        block.inject_fault(Coord::new(r, c))?;
    }
    let bits: Vec<Vec<bool>> = (0..rows).map(|_| (0..cols).map(|_| rng.random()).collect()).collect();
    let levels = level_matrix(block.layout(), |c| {
        params.binary_level(c.row < rows && c.col < cols && bits[c.row][c.col])
    });
    let report = block.program_block(&levels, &mut rng)?;

    let mut flips = substream(seed, 2);
    let mut evals = 0u64;
    let mut errors = 0u64;
    while evals < samples {
        let row = rng.random_range(0..rows);
        let (x, k) = (rng.random(), rng.random());
        let op = LogicOp::ALL[rng.random_range(0..4)];
        let out = block.compute_row_parallel(row, x, k, op, delay_us, &mut flips)?;
        for (c, &w) in bits[row].iter().enumerate() {
            if (out >> c & 1 == 1) != reference_gate(op, x, w, k) {
                errors += 1;
            }
        }
        evals += cols as u64;
    }
    let (cases, mismatches) = truth_table_check(crate::array::compute_gate);
    let p = timing.ber(delay_us);
    let band = 3.0 * (p * (1.0 - p) / evals as f64).sqrt();
    Ok(LogicReport {
        schema: LOGIC_SCHEMA.into(),
        truth_table_cases: cases,
        truth_table_mismatches: mismatches,
        delay_us,
        gate_evals: evals,
        bit_errors: errors,
        empirical_ber: errors as f64 / evals as f64,
        expected_ber: p,
        ber_low: (p - band).max(0.0),
        ber_high: p + band,
        faults_injected: faults,
        cells_repaired: report.repaired,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    pub schema: String,
    pub multiply_cases: usize,
    pub multiply_mismatches: usize,
    pub euclid_cases: usize,
    pub euclid_mismatches: usize,
    pub dot_cases: usize,
    pub dot_mismatches: usize,
    pub conv_cases: usize,
    pub conv_mismatches: usize,
    pub faults_injected: usize,
    pub cells_repaired: u64,
    /// `7 · (−27)` and `(7 − (−27))²` through the array.
    pub spot_multiply: i64,
    pub spot_euclid: u64,
}

impl MacReport {
    pub fn mismatches(&self) -> usize {
        self.multiply_mismatches + self.euclid_mismatches + self.dot_mismatches + self.conv_mismatches
    }
}

pub const DOT_LEN: usize = 64;
const DOT_COLUMNS: usize = 100;

/// Multiply and squared-distance equivalence over all INT8 pairs (or
/// `pairs` random ones), `dot_samples` random dot products of length 64 and
/// a small random convolution.
///
/// Injected faults land on cells the suite will program.
pub fn mac_oracle(
    device: &DeviceParams,
    timing: &TimingParams,
    exhaustive: bool,
    pairs: usize,
    dot_samples: usize,
    faults: usize,
    seed: u64,
) -> Result<MacReport, SimilarityError> {
    let params = DeviceParams { n_levels: 4, level_resistances: None, ..device.clone() };
    let mut set = BlockSet::new(params, timing.clone(), seed)?;
    let mut rng = substream(seed, 1);
    let values: Vec<i64> = (-127..=127).collect();
    let dot_columns = dot_samples.div_ceil(DOT_COLUMNS).clamp(1, DOT_COLUMNS);
    let (conv_c, conv_k, conv_hw) = (2, 4, 6);
    let used_slots = values.len() + dot_columns * DOT_LEN + conv_k * conv_c * 9;

    let rows = BlockLayout::default().data_rows();
    let per_block = rows * set.groups_per_block();
    set.ensure_blocks(used_slots.div_ceil(per_block))?;
    let mut fault_cells = BTreeSet::new();
    while fault_cells.len() < faults.min(used_slots * GROUP_COLS) {
        fault_cells.insert((rng.random_range(0..used_slots), rng.random_range(0..GROUP_COLS)));
    }
    for &(slot, seg) in &fault_cells {
        let (block, group, row) = (slot / per_block, slot % per_block / rows, slot % rows);
        set.block_mut(block).inject_fault(Coord::new(row, group * GROUP_COLS + seg)).map_err(BitsliceError::from)?;
    }

    let (stored, mut yields) = set.store_column(&values, &mut rng)?;
    let mut multiply_cases = 0;
    let mut multiply_mismatches = 0;
    let mut euclid_cases = 0;
    let mut euclid_mismatches = 0;
    let mut check = |set: &mut BlockSet, i: usize, y: i64| -> Result<(), SimilarityError> {
        let w = values[i];
        multiply_cases += 1;
        if set.multiply(stored.slots[i], y)?.value() != w * y {
            multiply_mismatches += 1;
        }
        euclid_cases += 1;
        if euclid_sq_int8_cim(set, stored.slots[i], y)? != ((w - y) * (w - y)) as u64 {
            euclid_mismatches += 1;
        }
        Ok(())
    };
    if exhaustive {
        for i in 0..values.len() {
            for &y in &values {
                check(&mut set, i, y)?;
            }
        }
    } else {
        for _ in 0..pairs {
            let (i, y) = (rng.random_range(0..values.len()), rng.random_range(-127..=127));
            check(&mut set, i, y)?;
        }
    }
    let spot_multiply = set.multiply(stored.slots[134], -27)?.value();
    let spot_euclid = euclid_sq_int8_cim(&mut set, stored.slots[134], -27)?;

    let mut dot_cases = 0;
    let mut dot_mismatches = 0;
    let mut columns = Vec::with_capacity(dot_columns);
    for _ in 0..dot_columns {
        let w: Vec<i64> = (0..DOT_LEN).map(|_| rng.random_range(-127..=127)).collect();
        let (col, r) = set.store_column(&w, &mut rng)?;
        yields.merge(&r);
        columns.push((w, col));
    }
    for s in 0..dot_samples {
        let (w, col) = &columns[s % columns.len()];
        let x: Vec<i64> = (0..DOT_LEN).map(|_| rng.random_range(-127..=127)).collect();
        dot_cases += 1;
        let expected: i64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
        if cim_dot(&mut set, &x, col)?.value() != expected {
            dot_mismatches += 1;
        }
    }

    let input = Int8Map::new(
        conv_c,
        conv_hw,
        conv_hw,
        (0..conv_c * conv_hw * conv_hw).map(|_| rng.random_range(-127..=127)).collect(),
    )?;
    let kernels: Vec<Vec<i64>> =
        (0..conv_k).map(|_| (0..conv_c * 9).map(|_| rng.random_range(-127..=127)).collect()).collect();
    let (mut stored_k, r) = StoredKernels::store(&mut set, &kernels, (conv_c, 3, 3), &mut rng)?;
    yields.merge(&r);
    stored_k.active[1] = false;
    let got = conv2d_lowered(&input, &stored_k, 1, 1, &mut set)?;
    let want = conv2d_oracle(&input, &kernels, &stored_k.active, (3, 3), 1, 1)?;
    let conv_cases = want.data.len();
    let conv_mismatches = if got.channels != want.channels || got.data.len() != conv_cases {
        conv_cases
    } else {
        got.data.iter().zip(&want.data).filter(|(a, b)| a != b).count()
    };

    Ok(MacReport {
        schema: MAC_SCHEMA.into(),
        multiply_cases,
        multiply_mismatches,
        euclid_cases,
        euclid_mismatches,
        dot_cases,
        dot_mismatches,
        conv_cases,
        conv_mismatches,
        faults_injected: fault_cells.len(),
        cells_repaired: yields.repaired,
        spot_multiply,
        spot_euclid,
    })
}
