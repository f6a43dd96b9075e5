//! Simulator for an RRAM compute-in-memory accelerator: device physics,
//! 512×32 array blocks with in-array logic, bit-sliced int8 arithmetic,
//! in-memory kernel similarity, similarity-driven pruning, a binary CNN
//! harness and energy accounting.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod array;
pub mod bitslice;
pub mod config;
pub mod device;
pub mod energy;
pub mod montecarlo;
pub mod nn;
pub mod oracle;
pub mod pruning;
pub mod rng;
pub mod similarity;
