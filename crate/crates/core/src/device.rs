//! Behavioral model of a multilevel 1T1R RRAM cell.
//!
//! The model is statistical: forming always succeeds at a voltage drawn from a
//! normal distribution, and every write attempt re-draws the resistance as the
//! target level's nominal value plus Gaussian programming noise. A closed
//! program-and-verify loop repeats the write until the readback lands inside
//! the tolerance window or the cycle budget runs out. Retention drift is zero.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Resistance reported by a cell that was never formed (and by stuck-at-HRS
/// defects), in kΩ.
pub const VIRGIN_RESISTANCE_KOHM: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("cell is already formed")]
    AlreadyFormed,
    #[error("read from a failed cell")]
    ReadFromFailed,
    #[error("read from an unformed cell")]
    ReadFromUnformed,
    #[error("cell is not programmable in state {0:?}")]
    NotProgrammable(CellStatus),
    #[error("endurance limit of {limit} switching cycles exceeded")]
    EnduranceExceeded { limit: u64 },
    #[error("target level {target} out of range for {n_levels} levels")]
    LevelOutOfRange { target: usize, n_levels: usize },
    #[error("invalid device parameters: {0}")]
    InvalidParams(String),
}

/// Device-level parameters, loadable from the `[device]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceParams {
    /// Std-dev of the programmed resistance around its target, kΩ.
    pub program_sigma: f64,
    /// Half-width of the verify window, kΩ.
    pub tolerance: f64,
    pub form_mean_v: f64,
    pub form_sigma_v: f64,
    pub max_verify_cycles: u32,
    pub endurance_limit: u64,
    pub n_levels: usize,
    /// Lowest nominal resistance (highest conductance level), kΩ.
    pub r_min_kohm: f64,
    /// Highest nominal resistance (lowest conductance level), kΩ.
    pub r_max_kohm: f64,
    /// Explicit nominal resistances, kΩ. Index 0 is the highest resistance;
    /// the list is strictly decreasing in resistance, i.e. conductance grows
    /// with the level index. When absent the levels are spaced linearly in
    /// conductance between `r_max_kohm` and `r_min_kohm`.
    pub level_resistances: Option<Vec<f64>>,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self {
            program_sigma: 0.8793,
            tolerance: 2.0,
            form_mean_v: 1.89,
            form_sigma_v: 0.18,
            max_verify_cycles: 8,
            endurance_limit: 1_000_000,
            n_levels: 4,
            r_min_kohm: 100.0,
            r_max_kohm: 1000.0,
            level_resistances: None,
        }
    }
}

impl DeviceParams {
    pub fn with_levels(n_levels: usize) -> Self {
        Self { n_levels, ..Self::default() }
    }

    /// Nominal resistance of every level, kΩ, strictly decreasing.
    pub fn levels(&self) -> Vec<f64> {
        if let Some(levels) = &self.level_resistances {
            return levels.clone();
        }
        let g_min = 1.0 / self.r_max_kohm;
        let g_max = 1.0 / self.r_min_kohm;
        let n = self.n_levels;
        (0..n)
            .map(|i| {
                let g = g_min + (g_max - g_min) * i as f64 / (n - 1) as f64;
                1.0 / g
            })
            .collect()
    }

    /// Read thresholds, one between each adjacent pair of levels (resistance
    /// midpoints). `thresholds()[b]` separates level `b` from level `b + 1`.
    pub fn thresholds(&self) -> Vec<f64> {
        self.levels().windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Reference between the two extreme levels, used for binary-mode reads.
    pub fn binary_threshold(&self) -> f64 {
        let levels = self.levels();
        0.5 * (levels[0] + levels[levels.len() - 1])
    }

    /// Level used for a binary bit: the two extremes.
    pub fn binary_level(&self, bit: bool) -> usize {
        if bit {
            self.n_levels - 1
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let bad = |m: &str| Err(DeviceError::InvalidParams(m.to_string()));
        if !(self.program_sigma >= 0.0 && self.program_sigma.is_finite()) {
            return bad("program_sigma must be finite and non-negative");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if !(self.form_sigma_v >= 0.0) {
            return bad("form_sigma_v must be non-negative");
        }
        if self.max_verify_cycles == 0 {
            return bad("max_verify_cycles must be at least 1");
        }
        if self.n_levels < 2 || self.n_levels > 128 {
            return bad("n_levels must lie in 2..=128");
        }
        if self.level_resistances.is_none() && !(0.0 < self.r_min_kohm && self.r_min_kohm < self.r_max_kohm) {
            return bad("need 0 < r_min_kohm < r_max_kohm");
        }
        let levels = self.levels();
        if levels.len() != self.n_levels {
            return bad("level_resistances length differs from n_levels");
        }
        for w in levels.windows(2) {
            if !(w[0] > w[1]) {
                return bad("level_resistances must be strictly decreasing");
            }
            if w[0] - w[1] <= 2.0 * self.tolerance {
                return Err(DeviceError::InvalidParams(format!(
                    "levels {:.3} and {:.3} kΩ are not separable at tolerance ±{}",
                    w[0], w[1], self.tolerance
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellStatus {
    Unformed,
    Ok,
    Failed,
    /// Formed and programmable, but reserved for redundancy repair.
    Spare,
}

impl CellStatus {
    pub fn to_byte(self) -> u8 {
        match self {
            CellStatus::Unformed => 0,
            CellStatus::Ok => 1,
            CellStatus::Failed => 2,
            CellStatus::Spare => 3,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => CellStatus::Unformed,
            1 => CellStatus::Ok,
            2 => CellStatus::Failed,
            3 => CellStatus::Spare,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RramCell {
    pub status: CellStatus,
    pub target_level: Option<usize>,
    /// kΩ.
    pub resistance: f64,
    pub verify_cycles_last: u32,
    pub switch_count: u64,
    /// Injected permanent defect: writes have no effect and the cell stays at
    /// this resistance.
    pub stuck_at: Option<f64>,
}

impl Default for RramCell {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of one program-and-verify run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProgramOutcome {
    pub cycles: u32,
    /// `Ok`/`Spare` on success, `Failed` when the verify budget ran out.
    pub status: CellStatus,
}

impl ProgramOutcome {
    pub fn succeeded(&self) -> bool {
        self.status != CellStatus::Failed
    }
}

impl RramCell {
    pub fn new() -> Self {
        Self {
            status: CellStatus::Unformed,
            target_level: None,
            resistance: VIRGIN_RESISTANCE_KOHM,
            verify_cycles_last: 0,
            switch_count: 0,
            stuck_at: None,
        }
    }

    /// Marks the cell as permanently defective (stuck in the high-resistance
    /// state). The defect only shows up when the cell is next programmed.
    pub fn inject_stuck_fault(&mut self) {
        self.stuck_at = Some(VIRGIN_RESISTANCE_KOHM);
        if self.status != CellStatus::Unformed {
            self.resistance = VIRGIN_RESISTANCE_KOHM;
        }
    }

    /// Electroforming. Returns the forming voltage. The cell lands on a random
    /// level's nominal resistance plus programming noise.
    pub fn form<R: Rng + ?Sized>(&mut self, params: &DeviceParams, rng: &mut R) -> Result<f64, DeviceError> {
        if self.status != CellStatus::Unformed {
            return Err(DeviceError::AlreadyFormed);
        }
        let voltage = gaussian(rng, params.form_mean_v, params.form_sigma_v);
        let levels = params.levels();
        let level = rng.random_range(0..levels.len());
        let r = gaussian(rng, levels[level], params.program_sigma);
        self.resistance = self.stuck_at.unwrap_or(r);
        self.status = CellStatus::Ok;
        Ok(voltage)
    }

    /// Closed-loop program-and-verify towards `target`.
    ///
    /// Every cycle is one write attempt followed by one verify read; the first
    /// write is unconditional. A cell that exhausts `max_verify_cycles` comes
    /// back with status `Failed` and must be repaired by the caller.
    pub fn program_verify<R: Rng + ?Sized>(
        &mut self,
        target: usize,
        params: &DeviceParams,
        rng: &mut R,
    ) -> Result<ProgramOutcome, DeviceError> {
        match self.status {
            CellStatus::Ok | CellStatus::Spare => {}
            other => return Err(DeviceError::NotProgrammable(other)),
        }
        let levels = params.levels();
        if target >= levels.len() {
            return Err(DeviceError::LevelOutOfRange { target, n_levels: levels.len() });
        }
        let nominal = levels[target];
        let settled = self.status;
        self.target_level = Some(target);

        let mut cycles = 0;
        while cycles < params.max_verify_cycles {
            // set when the cell reads too resistive, reset when too conductive;
            // both land on the same terminal distribution
            self.switch_count += 1;
            cycles += 1;
            if self.switch_count > params.endurance_limit {
                self.status = CellStatus::Failed;
                self.verify_cycles_last = cycles;
                return Err(DeviceError::EnduranceExceeded { limit: params.endurance_limit });
            }
            let drawn = gaussian(rng, nominal, params.program_sigma);
            self.resistance = self.stuck_at.unwrap_or(drawn);
            if (self.resistance - nominal).abs() <= params.tolerance {
                self.verify_cycles_last = cycles;
                self.status = settled;
                return Ok(ProgramOutcome { cycles, status: settled });
            }
        }
        self.verify_cycles_last = cycles;
        self.status = CellStatus::Failed;
        Ok(ProgramOutcome { cycles, status: CellStatus::Failed })
    }

    /// Quantized readout: index of the resistance interval holding the cell.
    pub fn read_level(&self, params: &DeviceParams) -> Result<usize, DeviceError> {
        self.check_readable()?;
        Ok(level_of(self.resistance, &params.thresholds()))
    }

    /// Reference comparison: `true` iff the cell conducts better than a
    /// reference resistor of `reference_kohm`.
    pub fn compare(&self, reference_kohm: f64) -> Result<bool, DeviceError> {
        self.check_readable()?;
        Ok(self.resistance < reference_kohm)
    }

    pub fn is_readable(&self) -> bool {
        matches!(self.status, CellStatus::Ok | CellStatus::Spare)
    }

    fn check_readable(&self) -> Result<(), DeviceError> {
        match self.status {
            CellStatus::Ok | CellStatus::Spare => Ok(()),
            CellStatus::Failed => Err(DeviceError::ReadFromFailed),
            CellStatus::Unformed => Err(DeviceError::ReadFromUnformed),
        }
    }
}

/// Interval index for a resistance given ascending-level thresholds (which are
/// decreasing in resistance).
pub fn level_of(resistance: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().take_while(|&&t| resistance < t).count()
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, mean: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return mean;
    }
    Normal::new(mean, sigma).expect("validated sigma").sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn formed(params: &DeviceParams, seed: u64) -> RramCell {
        let mut cell = RramCell::new();
        cell.form(params, &mut substream(seed, 0)).unwrap();
        cell
    }

    #[test]
    fn default_levels_are_separable_up_to_sixteen() {
        for n in [2, 4, 8, 16] {
            DeviceParams::with_levels(n).validate().unwrap();
        }
        assert!(DeviceParams::with_levels(128).validate().is_err());
    }

    #[test]
    fn forming_twice_is_rejected() {
        let params = DeviceParams::default();
        let mut cell = formed(&params, 1);
        assert_eq!(cell.form(&params, &mut substream(1, 1)), Err(DeviceError::AlreadyFormed));
    }

    #[test]
    fn degenerate_forming_distribution() {
        let params = DeviceParams { form_sigma_v: 0.0, ..Default::default() };
        for s in 0..50 {
            let mut cell = RramCell::new();
            assert_eq!(cell.form(&params, &mut substream(s, 0)).unwrap(), 1.89);
            assert_eq!(cell.status, CellStatus::Ok);
        }
    }

    #[test]
    fn noiseless_write_takes_one_cycle() {
        let params = DeviceParams { program_sigma: 0.0, ..Default::default() };
        let mut rng = substream(2, 0);
        for target in 0..4 {
            let mut cell = formed(&params, target as u64);
            let out = cell.program_verify(target, &params, &mut rng).unwrap();
            assert_eq!(out, ProgramOutcome { cycles: 1, status: CellStatus::Ok });
            assert_eq!(cell.read_level(&params).unwrap(), target);
        }
    }

    #[test]
    fn unformed_and_failed_reads_error() {
        let params = DeviceParams::default();
        let cell = RramCell::new();
        assert_eq!(cell.resistance, VIRGIN_RESISTANCE_KOHM);
        assert_eq!(cell.read_level(&params), Err(DeviceError::ReadFromUnformed));

        let mut cell = formed(&params, 3);
        cell.inject_stuck_fault();
        let out = cell.program_verify(2, &params, &mut substream(3, 1)).unwrap();
        assert_eq!(out, ProgramOutcome { cycles: 8, status: CellStatus::Failed });
        assert_eq!(cell.target_level, Some(2));
        assert_eq!(cell.read_level(&params), Err(DeviceError::ReadFromFailed));
    }

    #[test]
    fn endurance_is_a_hard_cutoff() {
        let params = DeviceParams { endurance_limit: 3, program_sigma: 0.0, ..Default::default() };
        let mut cell = formed(&params, 4);
        let mut rng = substream(4, 1);
        for _ in 0..3 {
            cell.program_verify(1, &params, &mut rng).unwrap();
        }
        assert_eq!(cell.program_verify(1, &params, &mut rng), Err(DeviceError::EnduranceExceeded { limit: 3 }));
        assert_eq!(cell.status, CellStatus::Failed);
        assert_eq!(cell.switch_count, 4);
    }

    #[test]
    fn on_target_and_threshold_boundary_reads() {
        let params = DeviceParams::default();
        let levels = params.levels();
        let mut cell = formed(&params, 5);
        cell.resistance = levels[3];
        assert_eq!(cell.read_level(&params).unwrap(), 3);

        let mid = 0.5 * (levels[1] + levels[2]);
        let eps = 1e-6;
        cell.resistance = mid + eps; // more resistive: level 1's side
        assert_eq!(cell.read_level(&params).unwrap(), 1);
        cell.resistance = mid - eps;
        assert_eq!(cell.read_level(&params).unwrap(), 2);
    }

    #[test]
    fn out_of_range_target() {
        let params = DeviceParams::default();
        let mut cell = formed(&params, 6);
        assert_eq!(
            cell.program_verify(4, &params, &mut substream(6, 1)),
            Err(DeviceError::LevelOutOfRange { target: 4, n_levels: 4 })
        );
    }
}
