//! Reconfigurable-unit logic: `OUT = X AND (W op K)`.
//!
//! The RU never sees `op` directly. The input-logic stage folds `op` and `K`
//! into two control bits, INR and INL, and the RU then evaluates
//! `X AND ((W AND INR) OR (NOT W AND INL))`. For a fixed `K` every two-input
//! gate reduces to one of four unary functions of `W` (0, 1, W, NOT W), which
//! is exactly what the two control bits select.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LogicOp {
    Nand,
    And,
    Xor,
    Or,
}

impl LogicOp {
    pub const ALL: [LogicOp; 4] = [LogicOp::Nand, LogicOp::And, LogicOp::Xor, LogicOp::Or];

    /// Plain boolean definition of the two-input gate.
    pub fn eval(self, w: bool, k: bool) -> bool {
        match self {
            LogicOp::Nand => !(w && k),
            LogicOp::And => w && k,
            LogicOp::Xor => w ^ k,
            LogicOp::Or => w || k,
        }
    }
}

/// Control bits driven into the reconfigurable unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuConfig {
    pub op: LogicOp,
    /// Output when the stored bit is 1.
    pub inr: bool,
    /// Output when the stored bit is 0.
    pub inl: bool,
}

impl RuConfig {
    pub fn derive(op: LogicOp, k: bool) -> Self {
        Self { op, inr: op.eval(true, k), inl: op.eval(false, k) }
    }

    pub fn evaluate(&self, x: bool, w: bool) -> bool {
        x && ((w && self.inr) || (!w && self.inl))
    }
}

/// One RU gate evaluation: `x AND op(w, k)`.
pub fn compute_gate(x: bool, w: bool, k: bool, op: LogicOp) -> bool {
    RuConfig::derive(op, k).evaluate(x, w)
}

/// 64 lanes of [`compute_gate`] at once. Lane `i` of each word is one gate.
pub fn compute_gate_word(x: u64, w: u64, k: u64, op: LogicOp) -> u64 {
    // Per-lane INR = op(1, k), INL = op(0, k).
    let (inr, inl) = match op {
        LogicOp::Nand => (!k, !0),
        LogicOp::And => (k, 0),
        LogicOp::Xor => (!k, k),
        LogicOp::Or => (!0, k),
    };
    x & ((w & inr) | (!w & inl))
}
