//! The 512×32 compute-in-memory block: programming, reference readout, the
//! reconfigurable logic unit, leakage timing and redundancy repair.

mod block;
pub mod image;
pub mod logic;
pub mod timing;

pub use block::{
    level_matrix, pack_rows, row_bit, set_row_bit, BlockLayout, CimBlock, Coord, Reference, RowBits, YieldReport,
    BLOCK_COLS, BLOCK_ROWS, ROW_WORDS,
};
pub use logic::{compute_gate, compute_gate_word, LogicOp, RuConfig};
pub use timing::TimingParams;

use thiserror::Error;

use crate::device::DeviceError;

#[derive(Debug, Error)]
pub enum ArrayError {
    #[error("cell {coord}: {source}")]
    Device { coord: Coord, source: DeviceError },
    #[error(transparent)]
    Params(#[from] DeviceError),
    #[error("no spare or backup cell left to repair {0}")]
    RepairExhausted(Coord),
    #[error("cell {0} has not failed")]
    NotFailed(Coord),
    #[error("coordinate {0} outside the addressable region")]
    OutOfBounds(Coord),
    #[error("no reference boundary {0}")]
    BadReference(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad block image: {0}")]
    BadImage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
