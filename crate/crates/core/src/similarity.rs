//! Search-in-memory distances between kernels.
//!
//! Binary kernels are compared by Hamming distance: one kernel is stored in a
//! column, the other is driven on the K lines with the RU in XOR mode and
//! every row enabled, and the column count is the distance. INT8 kernels use
//! squared Euclidean distance rebuilt from per-bit AND (`P_j`) and XOR (`R_j`)
//! gate outputs.

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::{
    compute_gate, level_matrix, pack_rows, ArrayError, BlockLayout, CimBlock, Coord, LogicOp, RowBits, TimingParams,
};
use crate::bitslice::{encode_int8, load_weight, BitsliceError, BlockSet, Slot, SlicedWeight};
use crate::device::DeviceParams;
use crate::energy::EnergyLedger;
use crate::rng::substream;

pub const HEATMAP_SCHEMA: &str = "cim-similarity/1";

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("kernel modes differ")]
    ModeMismatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Array(#[from] ArrayError),
    #[error(transparent)]
    Bitslice(#[from] BitsliceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Hamming,
    EuclidSq,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelData {
    Binary(Vec<bool>),
    Int8(Vec<i64>),
}

/// A flattened kernel and where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelVector {
    /// `(layer, kernel)`.
    pub source: (usize, usize),
    pub data: KernelData,
}

impl KernelVector {
    pub fn binary(source: (usize, usize), bits: Vec<bool>) -> Self {
        Self { source, data: KernelData::Binary(bits) }
    }

    pub fn int8(source: (usize, usize), values: Vec<i64>) -> Result<Self, SimilarityError> {
        for &v in &values {
            encode_int8(v)?;
        }
        Ok(Self { source, data: KernelData::Int8(values) })
    }

    pub fn len(&self) -> usize {
        match &self.data {
            KernelData::Binary(b) => b.len(),
            KernelData::Int8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn metric(&self) -> Metric {
        match self.data {
            KernelData::Binary(_) => Metric::Hamming,
            KernelData::Int8(_) => Metric::EuclidSq,
        }
    }
}

/// Symmetric pairwise distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub metric: Metric,
    pub sources: Vec<(usize, usize)>,
    /// Row-major `n × n`.
    pub d: Vec<u64>,
}

impl SimilarityMatrix {
    fn zeros(metric: Metric, sources: Vec<(usize, usize)>) -> Self {
        let n = sources.len();
        Self { n, metric, sources, d: vec![0; n * n] }
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.d[i * self.n + j]
    }

    fn set_pair(&mut self, i: usize, j: usize, v: u64) {
        self.d[i * self.n + j] = v;
        self.d[j * self.n + i] = v;
    }

    /// `row,col,distance` for every ordered pair.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,distance\n");
        for i in 0..self.n {
            for j in 0..self.n {
                out.push_str(&format!("{i},{j},{}\n", self.get(i, j)));
            }
        }
        out
    }

    /// Heatmap payload for external plotting.
    pub fn to_heatmap_json(&self) -> serde_json::Value {
        let rows: Vec<Vec<u64>> = (0..self.n).map(|i| self.d[i * self.n..(i + 1) * self.n].to_vec()).collect();
        serde_json::json!({
            "schema": HEATMAP_SCHEMA,
            "metric": self.metric,
            "n": self.n,
            "labels": self.sources.iter().map(|(l, k)| format!("L{l}K{k}")).collect::<Vec<_>>(),
            "d": rows,
        })
    }
}

fn xor_pass(block: &mut CimBlock, k: &RowBits, rows: usize) -> Result<Vec<u32>, ArrayError> {
    block.ternary_vmm_packed(&[u64::MAX; crate::array::ROW_WORDS], k, rows, LogicOp::Xor)
}

/// Hamming distance with `a` stored in column 0 of `block` and `b` driven as
/// K. Vectors longer than the data region are processed in row tiles, each
/// reprogramming the column.
pub fn hamming_cim<R: RngCore + ?Sized>(
    block: &mut CimBlock,
    a: &[bool],
    b: &[bool],
    rng: &mut R,
) -> Result<u64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::ShapeMismatch(format!("lengths {} and {}", a.len(), b.len())));
    }
    let tile = block.data_rows();
    let mut total = 0u64;
    for (ta, tb) in a.chunks(tile).zip(b.chunks(tile)) {
        for (r, &bit) in ta.iter().enumerate() {
            let level = block.params().binary_level(bit);
            block.program_cell(Coord::new(r, 0), level, rng)?;
        }
        total += xor_pass(block, &pack_rows(tb), tb.len())?[0] as u64;
    }
    Ok(total)
}

/// Squared Euclidean distance between the INT8 weight stored at `slot` and
/// `y`, via bit-level gates.
///
/// With equal signs (`R_7 = 0`) the magnitudes subtract:
/// `|x| − |y| = Σ_j 2^j R_j (2x_j − 1)`. With opposite signs they add:
/// `|x| + |y| = Σ_j 2^j (2P_j + R_j)`.
pub fn euclid_sq_int8_cim(set: &mut BlockSet, slot: Slot, y: i64) -> Result<u64, SimilarityError> {
    let ys = encode_int8(y)?;
    let block = set.block_mut(slot.block);
    let xs = load_weight(block, slot.row, slot.group)?;
    let mut leak = block.leakage();
    let mut gate = |a: bool, b: bool, op: LogicOp| {
        let out = compute_gate(true, a, b, op);
        match leak.as_mut() {
            Some((ber, rng)) => out ^ rng.random_bool(*ber),
            None => out,
        }
    };
    let bit = |w: SlicedWeight, j: u32| w.pattern() >> j & 1 == 1;
    let mut p = [false; 8];
    let mut r = [false; 8];
    for j in 0..8 {
        p[j as usize] = gate(bit(xs, j), bit(ys, j), LogicOp::And);
        r[j as usize] = gate(bit(xs, j), bit(ys, j), LogicOp::Xor);
    }
    block.ledger().add_gate_evals(16);
    let diff: i64 = if !r[7] {
        (0..7).filter(|&j| r[j]).map(|j| if bit(xs, j as u32) { 1i64 << j } else { -(1i64 << j) }).sum()
    } else {
        (0..7).map(|j| (2 * p[j] as i64 + r[j] as i64) << j).sum()
    };
    Ok((diff * diff) as u64)
}

/// Scratch arrays for distance computations, sharing one ledger.
#[derive(Debug)]
pub struct SearchEngine {
    binary: CimBlock,
    int8: BlockSet,
    seed: u64,
    op_seq: u64,
    ledger: Arc<EnergyLedger>,
}

impl SearchEngine {
    /// `params` drives the binary scratch block; the INT8 set uses the same
    /// device with four levels.
    pub fn new(params: DeviceParams, timing: TimingParams, seed: u64) -> Result<Self, SimilarityError> {
        let ledger = Arc::new(EnergyLedger::new());
        let mut binary = CimBlock::new(BlockLayout::default(), params.clone(), timing.clone(), seed)?
            .with_ledger(ledger.clone());
        binary.form_all()?;
        let int8 = BlockSet::new(DeviceParams { n_levels: 4, level_resistances: None, ..params }, timing, seed ^ 1)?
            .with_ledger(ledger.clone());
        Ok(Self { binary, int8, seed, op_seq: 0, ledger })
    }

    pub fn with_ledger(mut self, ledger: Arc<EnergyLedger>) -> Self {
        self.binary = self.binary.with_ledger(ledger.clone());
        self.int8 = self.int8.with_ledger(ledger.clone());
        self.ledger = ledger;
        self
    }

    pub fn ledger(&self) -> &Arc<EnergyLedger> {
        &self.ledger
    }

    pub fn set_compute_delay(&mut self, delay_us: f64) {
        self.binary.set_compute_delay(delay_us);
        self.int8.set_compute_delay(delay_us);
    }

    pub fn binary_block_mut(&mut self) -> &mut CimBlock {
        &mut self.binary
    }

    pub fn int8_set_mut(&mut self) -> &mut BlockSet {
        &mut self.int8
    }

    fn next_rng(&mut self) -> crate::rng::SimRng {
        self.op_seq += 1;
        substream(self.seed, self.op_seq)
    }

    pub fn hamming(&mut self, a: &[bool], b: &[bool]) -> Result<u64, SimilarityError> {
        let mut rng = self.next_rng();
        hamming_cim(&mut self.binary, a, b, &mut rng)
    }

    /// Squared distance of two INT8 vectors: `a` is stored, `b` driven.
    pub fn euclid_sq(&mut self, a: &[i64], b: &[i64]) -> Result<u64, SimilarityError> {
        if a.len() != b.len() {
            return Err(SimilarityError::ShapeMismatch(format!("lengths {} and {}", a.len(), b.len())));
        }
        let mut rng = self.next_rng();
        let (column, _) = self.int8.store_column(a, &mut rng)?;
        let mut total = 0;
        for (&slot, &y) in column.slots.iter().zip(b) {
            total += euclid_sq_int8_cim(&mut self.int8, slot, y)?;
        }
        Ok(total)
    }

    pub fn kernel_distance(&mut self, a: &KernelVector, b: &KernelVector) -> Result<u64, SimilarityError> {
        let d = match (&a.data, &b.data) {
            (KernelData::Binary(x), KernelData::Binary(y)) => self.hamming(x, y)?,
            (KernelData::Int8(x), KernelData::Int8(y)) => self.euclid_sq(x, y)?,
            _ => return Err(SimilarityError::ModeMismatch),
        };
        self.ledger.add_search_passes(1);
        Ok(d)
    }

    /// All pairwise distances. Binary kernels are stored up to one per data
    /// column and every kernel is driven against a whole block of them in one
    /// pass; INT8 kernels are compared pair by pair.
    pub fn similarity_matrix(&mut self, kernels: &[KernelVector]) -> Result<SimilarityMatrix, SimilarityError> {
        let Some(first) = kernels.first() else {
            return Err(SimilarityError::ShapeMismatch("no kernels".into()));
        };
        let (metric, len) = (first.metric(), first.len());
        for k in kernels {
            if k.metric() != metric {
                return Err(SimilarityError::ModeMismatch);
            }
            if k.len() != len {
                return Err(SimilarityError::ShapeMismatch(format!("kernel lengths {} and {len}", k.len())));
            }
        }
        let n = kernels.len();
        let mut sm = SimilarityMatrix::zeros(metric, kernels.iter().map(|k| k.source).collect());
        match metric {
            Metric::Hamming => {
                let bits: Vec<&[bool]> = kernels
                    .iter()
                    .map(|k| match &k.data {
                        KernelData::Binary(b) => b.as_slice(),
                        KernelData::Int8(_) => unreachable!("checked homogeneous"),
                    })
                    .collect();
                self.hamming_tiles(&bits, &mut sm)?;
            }
            Metric::EuclidSq => {
                for i in 0..n {
                    for j in i + 1..n {
                        let (KernelData::Int8(a), KernelData::Int8(b)) = (&kernels[i].data, &kernels[j].data) else {
                            unreachable!("checked homogeneous")
                        };
                        let d = self.euclid_sq(a, b)?;
                        sm.set_pair(i, j, d);
                    }
                }
            }
        }
        self.ledger.add_search_passes((n * n.saturating_sub(1) / 2) as u64);
        Ok(sm)
    }

    fn hamming_tiles(&mut self, bits: &[&[bool]], sm: &mut SimilarityMatrix) -> Result<(), SimilarityError> {
        let n = bits.len();
        let len = bits[0].len();
        let rows = self.binary.data_rows();
        let cols = self.binary.data_cols();
        let params = self.binary.params().clone();
        let mut sums = vec![0u64; n * n];
        for col0 in (0..n).step_by(cols) {
            let stored = col0..(col0 + cols).min(n);
            for row0 in (0..len).step_by(rows) {
                let tile = row0..(row0 + rows).min(len);
                let levels = level_matrix(self.binary.layout(), |c| {
                    let k = col0 + c.col;
                    let bit = c.col < cols && stored.contains(&k) && c.row < tile.len() && bits[k][row0 + c.row];
                    params.binary_level(bit)
                });
                let mut rng = self.next_rng();
                self.binary.program_block(&levels, &mut rng)?;
                // Only kernels below the stored range's end have pairs left.
                for (j, driven) in bits.iter().enumerate().take(stored.end - 1) {
                    let counts = xor_pass(&mut self.binary, &pack_rows(&driven[tile.clone()]), tile.len())?;
                    for k in stored.clone().filter(|&k| k > j) {
                        sums[j * n + k] += counts[k - col0] as u64;
                    }
                }
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                sm.set_pair(i, j, sums[i * n + j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn engine(seed: u64) -> SearchEngine {
        SearchEngine::new(DeviceParams::default(), TimingParams::default(), seed).unwrap()
    }

    fn bits(s: &str) -> Vec<bool> {
        s.bytes().map(|c| c == b'1').collect()
    }

    #[test]
    fn hamming_examples() {
        let mut e = engine(1);
        assert_eq!(e.hamming(&bits("101100111"), &bits("101100111")).unwrap(), 0);
        assert_eq!(e.hamming(&bits("111111111"), &bits("000000000")).unwrap(), 9);
        assert_eq!(e.hamming(&bits("110"), &bits("011")).unwrap(), 2);
        assert!(e.hamming(&bits("11"), &bits("1")).is_err());
    }

    #[test]
    fn hamming_over_row_tiles() {
        let mut e = engine(2);
        let mut rng = substream(2, 0);
        let a: Vec<bool> = (0..1200).map(|_| rng.random()).collect();
        let b: Vec<bool> = (0..1200).map(|_| rng.random()).collect();
        let oracle = a.iter().zip(&b).filter(|(x, y)| x != y).count() as u64;
        assert_eq!(e.hamming(&a, &b).unwrap(), oracle);
    }

    #[test]
    fn euclid_examples() {
        let mut e = engine(3);
        assert_eq!(e.euclid_sq(&[7], &[-27]).unwrap(), 1156);
        assert_eq!(e.euclid_sq(&[-27], &[7]).unwrap(), 1156);
        assert_eq!(e.euclid_sq(&[50, -3], &[50, -3]).unwrap(), 0);
        assert_eq!(e.euclid_sq(&[1, 2, 3], &[-1, 0, 9]).unwrap(), 4 + 4 + 36);
    }

    #[test]
    fn mode_mismatch() {
        let mut e = engine(4);
        let a = KernelVector::binary((0, 0), bits("101"));
        let b = KernelVector::int8((0, 1), vec![1, 0, 1]).unwrap();
        assert!(matches!(e.kernel_distance(&a, &b), Err(SimilarityError::ModeMismatch)));
        assert!(matches!(e.similarity_matrix(&[a, b]), Err(SimilarityError::ModeMismatch)));
        assert!(KernelVector::int8((0, 0), vec![-128]).is_err());
    }

    #[test]
    fn small_binary_matrix_matches_hand_counts() {
        let mut e = engine(5);
        let ks: Vec<KernelVector> = ["110010011", "110010010", "001101100"]
            .iter()
            .enumerate()
            .map(|(i, s)| KernelVector::binary((0, i), bits(s)))
            .collect();
        let before = e.ledger().snapshot();
        let sm = e.similarity_matrix(&ks).unwrap();
        assert_eq!(sm.d, vec![0, 1, 9, 1, 0, 8, 9, 8, 0]);
        assert_eq!(e.ledger().snapshot().since(&before).search_passes, 3);
        assert!(sm.to_csv().starts_with("row,col,distance\n0,0,0\n0,1,1\n"));
        assert_eq!(sm.to_heatmap_json()["d"][2][1], 8);
    }

    #[test]
    fn identical_pair_gives_zero_matrix() {
        let mut e = engine(6);
        let k = KernelVector::binary((1, 0), bits("0110"));
        let sm = e.similarity_matrix(&[k.clone(), KernelVector { source: (1, 1), ..k }]).unwrap();
        assert_eq!(sm.d, vec![0; 4]);
    }

    #[test]
    fn wide_binary_matrix_spans_column_and_row_tiles() {
        let mut e = engine(7);
        let mut rng = substream(7, 0);
        let ks: Vec<KernelVector> =
            (0..40).map(|i| KernelVector::binary((2, i), (0..576).map(|_| rng.random()).collect())).collect();
        let sm = e.similarity_matrix(&ks).unwrap();
        for i in 0..40 {
            for j in 0..40 {
                let (KernelData::Binary(a), KernelData::Binary(b)) = (&ks[i].data, &ks[j].data) else { unreachable!() };
                let oracle = a.iter().zip(b).filter(|(x, y)| x != y).count() as u64;
                assert_eq!(sm.get(i, j), oracle, "({i}, {j})");
            }
        }
    }
}
