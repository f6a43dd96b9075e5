use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{encode_int8, Accumulator, BitsliceError, MacResult, SlicedWeight, DEFAULT_ACC_BITS};
use crate::array::{compute_gate, ArrayError, BlockLayout, CimBlock, Coord, LogicOp, RowBits, TimingParams, YieldReport};
use crate::device::DeviceParams;
use crate::energy::EnergyLedger;
use crate::rng::substream;

/// Columns per stored weight.
pub const GROUP_COLS: usize = 4;

fn check_group(block: &CimBlock, row: usize, group: usize) -> Result<(), BitsliceError> {
    if block.params().n_levels != 4 {
        return Err(BitsliceError::ShapeMismatch(format!(
            "INT8 weights need four-level cells, block has {}",
            block.params().n_levels
        )));
    }
    if row >= block.data_rows() || (group + 1) * GROUP_COLS > block.data_cols() {
        return Err(ArrayError::OutOfBounds(Coord::new(row, group * GROUP_COLS)).into());
    }
    Ok(())
}

/// Programs the four segments of `w` into `row` of column group `group`.
pub fn store_weight<R: RngCore + ?Sized>(
    block: &mut CimBlock,
    row: usize,
    group: usize,
    w: SlicedWeight,
    rng: &mut R,
) -> Result<YieldReport, BitsliceError> {
    check_group(block, row, group)?;
    let mut report = YieldReport::default();
    for (s, seg) in w.segments().into_iter().enumerate() {
        report.merge(&block.program_cell(Coord::new(row, group * GROUP_COLS + s), seg as usize, rng)?);
    }
    Ok(report)
}

/// Reads a stored weight back through the reference comparators.
pub fn load_weight(block: &CimBlock, row: usize, group: usize) -> Result<SlicedWeight, BitsliceError> {
    check_group(block, row, group)?;
    let mut segments = [0u8; 4];
    for (s, seg) in segments.iter_mut().enumerate() {
        *seg = block.read_value(row, group * GROUP_COLS + s)? as u8;
    }
    Ok(SlicedWeight::from_segments(segments))
}

/// Bit-serial product of `x` with the weight stored at `(row, group)`.
///
/// Per input magnitude bit (LSB-first) the seven weight magnitude bits are
/// ANDed in parallel and the shift-and-adder folds the partial product in at
/// place value `2^(b + bitpos)`. The sign is the XOR gate of the two sign
/// bits; a zero magnitude is reported as +0.
pub fn cim_multiply(block: &mut CimBlock, row: usize, group: usize, x: i64) -> Result<MacResult, BitsliceError> {
    let xs = encode_int8(x)?;
    let w = load_weight(block, row, group)?;
    let mut leak = block.leakage();
    let mut gate = |a: bool, b: bool, op: LogicOp| {
        let out = compute_gate(true, a, b, op);
        match leak.as_mut() {
            Some((ber, rng)) => out ^ rng.random_bool(*ber),
            None => out,
        }
    };
    let w_bits: Vec<(u32, bool)> = (0..7).map(|j| (j, w.magnitude() >> j & 1 == 1)).collect();
    let mut magnitude = 0u64;
    for b in 0..7 {
        let x_bit = xs.magnitude() >> b & 1 == 1;
        let mut partial = 0u64;
        for &(j, w_bit) in &w_bits {
            partial |= (gate(x_bit, w_bit, LogicOp::And) as u64) << j;
        }
        magnitude += partial << b;
    }
    let sign = gate(xs.sign(), w.sign(), LogicOp::Xor);
    let ledger = block.ledger();
    ledger.add_gate_evals(7 * 7 + 1);
    ledger.add_shift_add_passes(7);
    ledger.add_macs(1);
    Ok(MacResult { negative: sign && magnitude != 0, magnitude })
}

/// Position of one stored weight inside a [`BlockSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub block: usize,
    pub row: usize,
    pub group: usize,
}

/// A weight vector spread over consecutive slots.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredColumn {
    pub slots: Vec<Slot>,
}

impl StoredColumn {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Four-level blocks holding INT8 weights, allocated on demand.
///
/// Slots fill a group top to bottom, then the next group, then the next
/// block. All blocks share one ledger.
#[derive(Debug)]
pub struct BlockSet {
    blocks: Vec<CimBlock>,
    layout: BlockLayout,
    params: DeviceParams,
    timing: TimingParams,
    seed: u64,
    ledger: Arc<EnergyLedger>,
    acc_bits: u32,
    next: Slot,
}

impl BlockSet {
    pub fn new(params: DeviceParams, timing: TimingParams, seed: u64) -> Result<Self, BitsliceError> {
        Self::with_layout(BlockLayout::default(), params, timing, seed)
    }

    pub fn with_layout(
        layout: BlockLayout,
        params: DeviceParams,
        timing: TimingParams,
        seed: u64,
    ) -> Result<Self, BitsliceError> {
        if params.n_levels != 4 {
            return Err(BitsliceError::ShapeMismatch("INT8 block sets need four-level cells".into()));
        }
        layout.validate()?;
        if layout.data_cols() < GROUP_COLS {
            return Err(BitsliceError::ShapeMismatch("block has no complete column group".into()));
        }
        Ok(Self {
            blocks: Vec::new(),
            layout,
            params,
            timing,
            seed,
            ledger: Arc::new(EnergyLedger::new()),
            acc_bits: DEFAULT_ACC_BITS,
            next: Slot { block: 0, row: 0, group: 0 },
        })
    }

    pub fn with_ledger(mut self, ledger: Arc<EnergyLedger>) -> Self {
        for b in &mut self.blocks {
            *b = b.clone().with_ledger(ledger.clone());
        }
        self.ledger = ledger;
        self
    }

    pub fn ledger(&self) -> &Arc<EnergyLedger> {
        &self.ledger
    }

    pub fn acc_bits(&self) -> u32 {
        self.acc_bits
    }

    pub fn set_acc_bits(&mut self, bits: u32) {
        self.acc_bits = bits;
    }

    pub fn set_compute_delay(&mut self, delay_us: f64) {
        self.timing.compute_delay_us = delay_us;
        for b in &mut self.blocks {
            b.set_compute_delay(delay_us);
        }
    }

    pub fn groups_per_block(&self) -> usize {
        self.layout.data_cols() / GROUP_COLS
    }

    pub fn blocks(&self) -> &[CimBlock] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &CimBlock {
        &self.blocks[i]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut CimBlock {
        &mut self.blocks[i]
    }

    /// Forms blocks until at least `n` exist.
    pub fn ensure_blocks(&mut self, n: usize) -> Result<(), BitsliceError> {
        while self.blocks.len() < n {
            let seed = substream(self.seed, self.blocks.len() as u64).next_u64();
            let mut block = CimBlock::new(self.layout.clone(), self.params.clone(), self.timing.clone(), seed)?
                .with_ledger(self.ledger.clone());
            block.form_all()?;
            self.blocks.push(block);
        }
        Ok(())
    }

    fn allocate(&mut self) -> Result<Slot, BitsliceError> {
        let slot = self.next;
        self.ensure_blocks(slot.block + 1)?;
        self.next.row += 1;
        if self.next.row == self.layout.data_rows() {
            self.next.row = 0;
            self.next.group += 1;
            if self.next.group == self.groups_per_block() {
                self.next.group = 0;
                self.next.block += 1;
            }
        }
        Ok(slot)
    }

    /// Encodes and programs `weights` into fresh slots.
    pub fn store_column<R: RngCore + ?Sized>(
        &mut self,
        weights: &[i64],
        rng: &mut R,
    ) -> Result<(StoredColumn, YieldReport), BitsliceError> {
        let encoded = weights.iter().map(|&w| encode_int8(w)).collect::<Result<Vec<_>, _>>()?;
        let mut column = StoredColumn::default();
        let mut report = YieldReport::default();
        for w in encoded {
            let slot = self.allocate()?;
            report.merge(&store_weight(&mut self.blocks[slot.block], slot.row, slot.group, w, rng)?);
            column.slots.push(slot);
        }
        Ok((column, report))
    }

    pub fn load_column(&self, column: &StoredColumn) -> Result<Vec<i32>, BitsliceError> {
        column.slots.iter().map(|s| Ok(load_weight(&self.blocks[s.block], s.row, s.group)?.value())).collect()
    }

    pub fn multiply(&mut self, slot: Slot, x: i64) -> Result<MacResult, BitsliceError> {
        let block = self
            .blocks
            .get_mut(slot.block)
            .ok_or_else(|| BitsliceError::ShapeMismatch(format!("no block {}", slot.block)))?;
        cim_multiply(block, slot.row, slot.group, x)
    }
}

/// Signed dot product of `x` with a stored column through the accumulator.
pub fn cim_dot(set: &mut BlockSet, x: &[i64], column: &StoredColumn) -> Result<MacResult, BitsliceError> {
    if x.len() != column.len() {
        return Err(BitsliceError::ShapeMismatch(format!(
            "input length {} != stored column length {}",
            x.len(),
            column.len()
        )));
    }
    let mut acc = Accumulator::new(set.acc_bits);
    for (&xi, &slot) in x.iter().zip(&column.slots) {
        acc.add(set.multiply(slot, xi)?)?;
    }
    set.ledger.add_accumulations(x.len() as u64);
    Ok(acc.result())
}

/// AND-mode VMM of binary inputs against a binary-stored block: per column,
/// the number of driven rows where both input and stored bit are 1.
pub fn binary_vmm(block: &mut CimBlock, x: &[bool]) -> Result<Vec<u32>, ArrayError> {
    let k = vec![true; x.len()];
    block.ternary_vmm(x, &k, LogicOp::And)
}

/// Packed form of [`binary_vmm`] over the first `rows` rows.
pub fn binary_vmm_packed(block: &mut CimBlock, x: &RowBits, rows: usize) -> Result<Vec<u32>, ArrayError> {
    block.ternary_vmm_packed(x, &[u64::MAX; crate::array::ROW_WORDS], rows, LogicOp::And)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn noiseless() -> DeviceParams {
        DeviceParams { program_sigma: 0.0, ..Default::default() }
    }

    fn int8_block(params: DeviceParams, seed: u64) -> CimBlock {
        CimBlock::formed(params, TimingParams::default(), seed).unwrap()
    }

    #[test]
    fn noiseless_store_is_four_single_cycle_writes() {
        let mut b = int8_block(noiseless(), 1);
        let report = store_weight(&mut b, 3, 2, encode_int8(-27).unwrap(), &mut substream(1, 1)).unwrap();
        assert_eq!(report.ok, 4);
        assert_eq!(report.cycle_histogram, vec![0, 4]);
        assert_eq!(load_weight(&b, 3, 2).unwrap().value(), -27);
    }

    #[test]
    fn every_value_round_trips_through_cells() {
        let mut b = int8_block(DeviceParams::default(), 2);
        let mut rng = substream(2, 0);
        for (i, v) in (-127..=127).enumerate() {
            let (row, group) = (i % 496, i / 496);
            store_weight(&mut b, row, group, encode_int8(v).unwrap(), &mut rng).unwrap();
            assert_eq!(load_weight(&b, row, group).unwrap().value() as i64, v);
        }
    }

    #[test]
    fn failed_cell_is_transparent() {
        let mut b = int8_block(DeviceParams::default(), 3);
        b.inject_fault(Coord::new(10, 5)).unwrap();
        store_weight(&mut b, 10, 1, encode_int8(-101).unwrap(), &mut substream(3, 0)).unwrap();
        assert_eq!(b.remap_table().len(), 1);
        assert_eq!(load_weight(&b, 10, 1).unwrap().value(), -101);
        assert_eq!(cim_multiply(&mut b, 10, 1, 3).unwrap().value(), -303);
    }

    #[test]
    fn multiply_examples() {
        let mut b = int8_block(noiseless(), 4);
        let mut rng = substream(4, 0);
        store_weight(&mut b, 0, 0, encode_int8(-27).unwrap(), &mut rng).unwrap();
        assert_eq!(cim_multiply(&mut b, 0, 0, 7).unwrap().value(), -189);
        assert_eq!(cim_multiply(&mut b, 0, 0, 0).unwrap(), MacResult::default());
        assert_eq!(cim_multiply(&mut b, 0, 0, -1).unwrap().value(), 27);
        assert!(matches!(cim_multiply(&mut b, 0, 0, -128), Err(BitsliceError::OutOfRange(-128))));
    }

    #[test]
    fn two_level_block_is_rejected() {
        let mut b = int8_block(DeviceParams::with_levels(2), 5);
        assert!(store_weight(&mut b, 0, 0, encode_int8(1).unwrap(), &mut substream(5, 0)).is_err());
        assert!(BlockSet::new(DeviceParams::with_levels(2), TimingParams::default(), 0).is_err());
    }

    #[test]
    fn group_outside_data_columns_is_rejected() {
        let mut b = int8_block(noiseless(), 6);
        assert!(store_weight(&mut b, 0, 7, encode_int8(1).unwrap(), &mut substream(6, 0)).is_err());
        assert!(store_weight(&mut b, 496, 0, encode_int8(1).unwrap(), &mut substream(6, 0)).is_err());
    }

    #[test]
    fn dot_examples() {
        let mut set = BlockSet::new(noiseless(), TimingParams::default(), 7).unwrap();
        let mut rng = substream(7, 0);
        let w: Vec<i64> = (0..16).map(|i| i * 8 - 60).collect();
        let (col, _) = set.store_column(&w, &mut rng).unwrap();
        let mut x = vec![0i64; 16];
        x[5] = -3;
        assert_eq!(cim_dot(&mut set, &x, &col).unwrap().value(), -3 * w[5]);
        assert!(cim_dot(&mut set, &x[..4], &col).is_err());

        let (col, _) = set.store_column(&[127; 512], &mut rng).unwrap();
        assert_eq!(cim_dot(&mut set, &[1; 512], &col).unwrap().value(), 65_024);
        assert_eq!(cim_dot(&mut set, &[127; 512], &col).unwrap().value(), 512 * 127 * 127);
        set.set_acc_bits(16);
        assert!(matches!(
            cim_dot(&mut set, &[127; 512], &col),
            Err(BitsliceError::AccumulatorOverflow { bits: 16 })
        ));
    }

    #[test]
    fn columns_spill_across_groups_and_blocks() {
        let layout = BlockLayout { rows: 8, cols: 10, spare_cols: 2, backup_rows: 2 };
        let mut set = BlockSet::with_layout(layout, noiseless(), TimingParams::default(), 8).unwrap();
        let w: Vec<i64> = (0..20).map(|i| i - 10).collect();
        let (col, _) = set.store_column(&w, &mut substream(8, 0)).unwrap();
        assert_eq!(set.blocks().len(), 2);
        assert_eq!(col.slots[6], Slot { block: 0, row: 0, group: 1 });
        assert_eq!(col.slots[12], Slot { block: 1, row: 0, group: 0 });
        let back: Vec<i64> = set.load_column(&col).unwrap().into_iter().map(i64::from).collect();
        assert_eq!(back, w);
    }

    #[test]
    fn ledger_counts_macs() {
        let mut set = BlockSet::new(noiseless(), TimingParams::default(), 9).unwrap();
        let (col, _) = set.store_column(&[1, 2, 3], &mut substream(9, 0)).unwrap();
        let before = set.ledger().snapshot();
        cim_dot(&mut set, &[4, 5, 6], &col).unwrap();
        let d = set.ledger().snapshot().since(&before);
        assert_eq!(d.macs, 3);
        assert_eq!(d.shift_add_passes, 21);
        assert_eq!(d.accumulations, 3);
    }

    #[test]
    fn binary_vmm_is_popcount_of_and() {
        let mut b = CimBlock::formed(DeviceParams::with_levels(2), TimingParams::default(), 10).unwrap();
        let kernel = [1, 0, 1, 1, 0, 0, 1, 0, 1];
        let levels = crate::array::level_matrix(b.layout(), |c| if c.row < 9 && c.col == 0 { kernel[c.row] } else { 0 });
        b.program_block(&levels, &mut substream(10, 0)).unwrap();
        let patch = [true, true, false, true, false, true, true, true, false];
        let counts = binary_vmm(&mut b, &patch).unwrap();
        let oracle = kernel.iter().zip(&patch).filter(|(&k, &p)| k == 1 && p).count() as u32;
        assert_eq!(counts[0], oracle);
        assert!(binary_vmm(&mut b, &[false; 9]).unwrap().iter().all(|&c| c == 0));
    }
}
