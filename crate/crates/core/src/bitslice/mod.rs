//! Sign-magnitude INT8 arithmetic on INT2 cells.
//!
//! A weight occupies one row of a four-column group; column `4g + s` holds
//! segment `s` (bits `2s+1..2s` of the pattern) as a four-level cell whose
//! level index equals the segment value. Multiplication streams the input
//! magnitude LSB-first through AND gates against the stored segment bits and
//! combines the partial products in a shift-and-add pass per input bit.

mod conv;
mod store;

pub use conv::{conv2d_lowered, conv2d_oracle, FeatureMap, Int8Map, StoredKernels};
pub use store::{
    binary_vmm, binary_vmm_packed, cim_dot, cim_multiply, load_weight, store_weight, BlockSet, Slot, StoredColumn,
    GROUP_COLS,
};

use std::fmt;

use thiserror::Error;

use crate::array::ArrayError;

/// Default accumulator magnitude width. Length-512 dot products of 14-bit
/// products need 23 bits.
pub const DEFAULT_ACC_BITS: u32 = 24;

#[derive(Debug, Error)]
pub enum BitsliceError {
    #[error("{0} is outside the sign-magnitude INT8 range [-127, 127]")]
    OutOfRange(i64),
    #[error("accumulator overflow: |sum| exceeds {bits}-bit magnitude")]
    AccumulatorOverflow { bits: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Array(#[from] ArrayError),
}

/// An 8-bit sign-magnitude pattern split into four 2-bit segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlicedWeight {
    pattern: u8,
}

impl SlicedWeight {
    /// `segments[s]` holds bits `2s+1..2s`. Segment 3's upper bit is the sign.
    pub fn from_segments(segments: [u8; 4]) -> Self {
        let pattern = segments.iter().enumerate().fold(0u8, |p, (s, &seg)| p | (seg & 3) << (2 * s));
        Self { pattern }
    }

    pub fn from_pattern(pattern: u8) -> Self {
        Self { pattern }
    }

    pub fn pattern(self) -> u8 {
        self.pattern
    }

    pub fn sign(self) -> bool {
        self.pattern & 0x80 != 0
    }

    pub fn magnitude(self) -> u8 {
        self.pattern & 0x7f
    }

    pub fn segments(self) -> [u8; 4] {
        [0, 1, 2, 3].map(|s| (self.pattern >> (2 * s)) & 3)
    }

    /// Segment value with the sign bit masked out of segment 3.
    pub fn seg_mag(self, s: usize) -> u8 {
        let seg = (self.pattern >> (2 * s)) & 3;
        if s == 3 {
            seg & 1
        } else {
            seg
        }
    }

    pub fn value(self) -> i32 {
        let m = self.magnitude() as i32;
        if self.sign() {
            -m
        } else {
            m
        }
    }
}

impl fmt::Display for SlicedWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08b}", self.pattern)
    }
}

/// Sign-magnitude encoding; zero always encodes as +0.
pub fn encode_int8(v: i64) -> Result<SlicedWeight, BitsliceError> {
    if !(-127..=127).contains(&v) {
        return Err(BitsliceError::OutOfRange(v));
    }
    let sign = if v < 0 { 0x80 } else { 0 };
    Ok(SlicedWeight { pattern: sign | v.unsigned_abs() as u8 })
}

/// Decodes a pattern; a stored −0 reads as 0.
pub fn decode(w: SlicedWeight) -> i32 {
    w.value()
}

/// Clamps and rounds a real value into the representable range.
pub fn quantize_int8(v: f64) -> i32 {
    v.round().clamp(-127.0, 127.0) as i32
}

/// Signed result with a sign-magnitude view. Zero is always positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct MacResult {
    pub negative: bool,
    pub magnitude: u64,
}

impl MacResult {
    pub fn from_value(v: i64) -> Self {
        Self { negative: v < 0, magnitude: v.unsigned_abs() }
    }

    pub fn value(self) -> i64 {
        let m = self.magnitude as i64;
        if self.negative {
            -m
        } else {
            m
        }
    }

    /// The 16-bit product container: bit 15 sign, bits 14..0 magnitude.
    /// `None` if the magnitude does not fit.
    pub fn to_bits16(self) -> Option<u16> {
        (self.magnitude < 1 << 15).then_some((self.negative as u16) << 15 | self.magnitude as u16)
    }
}

/// Signed accumulator with a bounded magnitude. Exceeding the bound is an
/// error at the step where it happens, never a wrap or saturation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accumulator {
    bits: u32,
    sum: i64,
}

impl Default for Accumulator {
    fn default() -> Self {
        Self::new(DEFAULT_ACC_BITS)
    }
}

impl Accumulator {
    pub fn new(bits: u32) -> Self {
        assert!((1..=62).contains(&bits), "accumulator width must be 1..=62 bits");
        Self { bits, sum: 0 }
    }

    pub fn add(&mut self, r: MacResult) -> Result<(), BitsliceError> {
        let sum = self.sum + r.value();
        if sum.unsigned_abs() >= 1 << self.bits {
            return Err(BitsliceError::AccumulatorOverflow { bits: self.bits });
        }
        self.sum = sum;
        Ok(())
    }

    pub fn result(&self) -> MacResult {
        MacResult::from_value(self.sum)
    }
}
