//! `CIMB` block images.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "CIMB"
//! version u16      1
//! rows    u16
//! cols    u16
//! cells   rows*cols × { status u8, resistance_kohm f64 }   row-major
//! ```
//!
//! Status bytes: 0 unformed, 1 ok, 2 failed, 3 spare. Only the physical
//! state is stored; the remap table travels in the weight manifest.

use std::io::{Read, Write};

use super::{ArrayError, BlockLayout, CimBlock, TimingParams};
use crate::device::{CellStatus, DeviceParams, RramCell};

pub const MAGIC: &[u8; 4] = b"CIMB";
pub const VERSION: u16 = 1;

/// Physical cell state as stored in an image.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockImage {
    pub rows: u16,
    pub cols: u16,
    pub cells: Vec<(CellStatus, f64)>,
}

impl BlockImage {
    pub fn of(block: &CimBlock) -> Self {
        let layout = block.layout();
        Self {
            rows: layout.rows as u16,
            cols: layout.cols as u16,
            cells: block.cells().iter().map(|c| (c.status, c.resistance)).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ArrayError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.rows.to_le_bytes())?;
        w.write_all(&self.cols.to_le_bytes())?;
        for &(status, r) in &self.cells {
            w.write_all(&[status.to_byte()])?;
            w.write_all(&r.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 9 * self.cells.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ArrayError> {
        let mut header = [0u8; 10];
        r.read_exact(&mut header).map_err(|_| ArrayError::BadImage("truncated header".into()))?;
        if &header[..4] != MAGIC {
            return Err(ArrayError::BadImage("bad magic".into()));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != VERSION {
            return Err(ArrayError::BadImage(format!("unsupported version {version}")));
        }
        let rows = u16::from_le_bytes([header[6], header[7]]);
        let cols = u16::from_le_bytes([header[8], header[9]]);
        let n = rows as usize * cols as usize;
        let mut cells = Vec::with_capacity(n);
        let mut buf = [0u8; 9];
        for i in 0..n {
            r.read_exact(&mut buf).map_err(|_| ArrayError::BadImage(format!("truncated at cell {i}")))?;
            let status =
                CellStatus::from_byte(buf[0]).ok_or_else(|| ArrayError::BadImage(format!("bad status byte {}", buf[0])))?;
            let resistance = f64::from_le_bytes(buf[1..].try_into().expect("8 bytes"));
            cells.push((status, resistance));
        }
        Ok(Self { rows, cols, cells })
    }

    /// Rebuilds a block. Per-cell history (targets, counters) is not part of
    /// the image and starts fresh.
    pub fn into_block(
        self,
        layout: BlockLayout,
        params: DeviceParams,
        timing: TimingParams,
        seed: u64,
    ) -> Result<CimBlock, ArrayError> {
        if layout.rows != self.rows as usize || layout.cols != self.cols as usize {
            return Err(ArrayError::ShapeMismatch(format!(
                "image is {}x{}, layout is {}x{}",
                self.rows, self.cols, layout.rows, layout.cols
            )));
        }
        let cells = self
            .cells
            .into_iter()
            .map(|(status, resistance)| RramCell { status, resistance, ..RramCell::new() })
            .collect();
        CimBlock::restore(layout, params, timing, seed, cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::level_matrix;
    use crate::rng::substream;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let img = BlockImage { rows: 1, cols: 2, cells: vec![(CellStatus::Ok, 1.5), (CellStatus::Spare, -0.0)] };
        let bytes = img.to_bytes();
        assert_eq!(&bytes[..10], &[b'C', b'I', b'M', b'B', 1, 0, 1, 0, 2, 0]);
        assert_eq!(bytes[10], 1);
        assert_eq!(&bytes[11..19], &1.5f64.to_le_bytes());
        assert_eq!(bytes[19], 3);
        assert_eq!(bytes.len(), 10 + 18);
    }

    #[test]
    fn rejects_corrupt_images() {
        assert!(BlockImage::read_from(&b"CIMX\x01\x00\x01\x00\x01\x00"[..]).is_err());
        assert!(BlockImage::read_from(&b"CIMB\x02\x00\x01\x00\x01\x00"[..]).is_err());
        assert!(BlockImage::read_from(&b"CIMB\x01\x00\x01\x00\x01\x00\x01"[..]).is_err());
        let mut bytes = b"CIMB\x01\x00\x01\x00\x01\x00".to_vec();
        bytes.push(9);
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        assert!(BlockImage::read_from(&bytes[..]).is_err());
    }

    #[test]
    fn programmed_block_survives_a_round_trip() {
        let params = DeviceParams::default();
        let mut block = CimBlock::formed(params.clone(), TimingParams::default(), 9).unwrap();
        let levels = level_matrix(block.layout(), |c| (c.row ^ c.col) % 4);
        block.program_block(&levels, &mut substream(9, 1)).unwrap();
        let bytes = BlockImage::of(&block).to_bytes();
        let restored = BlockImage::read_from(&bytes[..])
            .unwrap()
            .into_block(BlockLayout::default(), params, TimingParams::default(), 9)
            .unwrap();
        for r in 0..block.data_rows() {
            for c in 0..block.data_cols() {
                assert_eq!(restored.read_level(r, c).unwrap(), block.read_level(r, c).unwrap());
            }
        }
    }

    fn status() -> impl Strategy<Value = CellStatus> {
        prop_oneof![
            Just(CellStatus::Unformed),
            Just(CellStatus::Ok),
            Just(CellStatus::Failed),
            Just(CellStatus::Spare)
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_identity(rows in 1u16..6, cols in 1u16..6, seed in any::<u64>(), st in status()) {
            let n = rows as usize * cols as usize;
            let cells: Vec<_> = (0..n).map(|i| (st, f64::from_bits(seed.rotate_left(i as u32)))).collect();
            let img = BlockImage { rows, cols, cells };
            let back = BlockImage::read_from(&img.to_bytes()[..]).unwrap();
            prop_assert_eq!(back.rows, rows);
            prop_assert_eq!(back.cols, cols);
            for (a, b) in img.cells.iter().zip(&back.cells) {
                prop_assert_eq!(a.0, b.0);
                prop_assert_eq!(a.1.to_bits(), b.1.to_bits());
            }
        }
    }
}
