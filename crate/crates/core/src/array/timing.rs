//! Precharge-compute timing and the leakage error model.
//!
//! The output line is precharged and then conditionally discharged. If the
//! compute phase runs longer than the critical delay, charge leaks away and
//! output bits start to flip. Up to and including the critical delay the error
//! rate is exactly zero; beyond it the rate rises as
//! `0.5 * (1 - exp(-leak_slope * (delay - leak_critical_us)))`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingParams {
    /// Compute cycle time, ns.
    pub cycle_ns: f64,
    /// Delay beyond which leakage corrupts results, µs (inclusive bound).
    pub leak_critical_us: f64,
    /// Growth rate of the error rate past the critical delay, 1/µs. The
    /// default puts the error rate at 0.499 by 5 µs.
    pub leak_slope: f64,
    /// Operating compute delay used by array operations, µs.
    pub compute_delay_us: f64,
}

impl Default for TimingParams {
    fn default() -> Self {
        Self { cycle_ns: 22.5, leak_critical_us: 2.7, leak_slope: 2.7, compute_delay_us: 0.0225 }
    }
}

impl TimingParams {
    pub fn with_delay(delay_us: f64) -> Self {
        Self { compute_delay_us: delay_us, ..Self::default() }
    }

    /// Per-bit flip probability at `delay_us`.
    pub fn ber(&self, delay_us: f64) -> f64 {
        if delay_us <= self.leak_critical_us {
            return 0.0;
        }
        0.5 * (1.0 - (-self.leak_slope * (delay_us - self.leak_critical_us)).exp())
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.cycle_ns > 0.0) {
            return Err("cycle_ns must be positive".into());
        }
        if !(self.leak_critical_us > 0.0) {
            return Err("leak_critical_us must be positive".into());
        }
        if !(self.leak_slope >= 0.0) {
            return Err("leak_slope must be non-negative".into());
        }
        if !(self.compute_delay_us >= 0.0) {
            return Err("compute_delay_us must be non-negative".into());
        }
        Ok(())
    }
}
