//! Op counting and energy accounting.
//!
//! Ops follow the MAC convention: a convolution costs
//! `2 · C_in · C_out · k_h · k_w · H_out · W_out` ops and a dense layer
//! `2 · w_h · w_w`. Chip energy per op comes from one of two ledgers that do
//! not agree with each other: the summed module power over one 22.5 ns cycle
//! spread across 64 lanes (`PowerTimed`), or the per-module energies of one
//! 64-lane AND operation (`TablePerOp`). Both are always reported.

mod ledger;
mod report;

pub use ledger::{EnergyLedger, LedgerCounts};
pub use report::{
    inference_energy_report, EnergyReport, LayerEntry, ManifestError, NetworkManifest, PlatformRow, MANIFEST_SCHEMA,
    REPORT_SCHEMA,
};

use serde::{Deserialize, Serialize};

use crate::array::TimingParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModuleName {
    /// WL driver & RU controller.
    #[serde(rename = "WRC")]
    Wrc,
    /// BL/SL driver circuits & input controller.
    #[serde(rename = "BSIC")]
    Bsic,
    #[serde(rename = "RRAM")]
    Rram,
    /// Rref read module.
    #[serde(rename = "RR")]
    Rr,
    /// Reconfigurable unit.
    #[serde(rename = "RU")]
    Ru,
    /// Shift-and-adder group.
    #[serde(rename = "S&A")]
    ShiftAdd,
    /// Accumulator.
    #[serde(rename = "ACC")]
    Acc,
}

impl ModuleName {
    pub const ALL: [ModuleName; 7] = [
        ModuleName::Wrc,
        ModuleName::Bsic,
        ModuleName::Rram,
        ModuleName::Rr,
        ModuleName::Ru,
        ModuleName::ShiftAdd,
        ModuleName::Acc,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ModuleName::Wrc => "WRC",
            ModuleName::Bsic => "BSIC",
            ModuleName::Rram => "RRAM",
            ModuleName::Rr => "RR",
            ModuleName::Ru => "RU",
            ModuleName::ShiftAdd => "S&A",
            ModuleName::Acc => "ACC",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulePower {
    pub name: ModuleName,
    pub power_mw: f64,
    /// Energy of one parallel 64-bit AND operation including shift and
    /// accumulation, pJ.
    pub energy_pj_per_64bit_op: f64,
    pub area_mm2: f64,
}

pub fn default_modules() -> Vec<ModulePower> {
    use ModuleName::*;
    let row = |name, power_mw, energy_pj_per_64bit_op, area_mm2| ModulePower {
        name,
        power_mw,
        energy_pj_per_64bit_op,
        area_mm2,
    };
    vec![
        row(Wrc, 134.52, 2690.400, 0.106),
        row(Bsic, 3.4341, 68.682, 0.028),
        row(Rram, 0.0288, 0.576, 0.534),
        row(Rr, 1.6992, 34.001, 0.005),
        row(Ru, 1.104, 22.056, 0.001),
        row(ShiftAdd, 13.456, 269.12, 0.037),
        row(Acc, 45.3568, 907.136, 0.155),
    ]
}

/// `[energy]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyParams {
    pub lanes: u32,
    pub modules: Vec<ModulePower>,
    /// Supply voltage and clock of the measured chip.
    pub v0: f64,
    pub f0_mhz: f64,
    /// Operating point the chip energy is normalized to.
    pub v_target: f64,
    pub f_target_mhz: f64,
    pub gpu_power_w: f64,
    pub gpu_tops: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            lanes: 64,
            modules: default_modules(),
            v0: 3.3,
            f0_mhz: 100.0,
            v_target: 0.8,
            f_target_mhz: 1800.0,
            gpu_power_w: 450.0,
            gpu_tops: 660.6,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.lanes == 0 {
            return Err("lanes must be positive".into());
        }
        let mut names: Vec<ModuleName> = self.modules.iter().map(|m| m.name).collect();
        names.sort_by_key(|n| n.label());
        names.dedup();
        if names.len() != 7 || self.modules.len() != 7 {
            return Err("modules must list each of the seven chip modules exactly once".into());
        }
        if self.modules.iter().any(|m| !(m.power_mw > 0.0 && m.energy_pj_per_64bit_op > 0.0 && m.area_mm2 > 0.0)) {
            return Err("module power, energy and area must be positive".into());
        }
        for v in [self.v0, self.f0_mhz, self.v_target, self.f_target_mhz, self.gpu_power_w, self.gpu_tops] {
            if !(v > 0.0) {
                return Err("voltages, frequencies and GPU constants must be positive".into());
            }
        }
        Ok(())
    }

    /// Chip energy per op at the measured operating point, pJ.
    pub fn chip_pj_per_op(&self, timing: &TimingParams) -> f64 {
        system_energy_per_op(&self.modules, timing, self.lanes)
    }

    /// Chip energy per op normalized to the target voltage and clock, pJ.
    pub fn chip_scaled_pj_per_op(&self, timing: &TimingParams) -> f64 {
        scale_energy(self.chip_pj_per_op(timing), self.v_target, self.v0, self.f0_mhz, self.f_target_mhz)
    }

    pub fn gpu_pj_per_op(&self) -> f64 {
        gpu_energy_per_op(self.gpu_power_w, self.gpu_tops)
    }
}

pub fn ops_conv(c_in: u64, c_out: u64, kh: u64, kw: u64, h_out: u64, w_out: u64) -> u64 {
    2 * c_in * c_out * kh * kw * h_out * w_out
}

pub fn ops_fc(w_h: u64, w_w: u64) -> u64 {
    2 * w_h * w_w
}

pub fn total_power_mw(modules: &[ModulePower]) -> f64 {
    modules.iter().map(|m| m.power_mw).sum()
}

/// `PowerTimed` accounting: summed module power over one compute cycle,
/// shared by `lanes` parallel ops. mW × ns = pJ.
pub fn system_energy_per_op(modules: &[ModulePower], timing: &TimingParams, lanes: u32) -> f64 {
    total_power_mw(modules) * timing.cycle_ns / lanes as f64
}

/// `TablePerOp` accounting: summed per-module energy of one 64-lane
/// operation divided over its lanes.
pub fn table_energy_per_op(modules: &[ModulePower], lanes: u32) -> f64 {
    modules.iter().map(|m| m.energy_pj_per_64bit_op).sum::<f64>() / lanes as f64
}

/// Dynamic-power scaling: `e · (v/v0)² · (f0/f)`.
pub fn scale_energy(e_pj: f64, v: f64, v0: f64, f0_mhz: f64, f_mhz: f64) -> f64 {
    e_pj * (v / v0).powi(2) * (f0_mhz / f_mhz)
}

/// GPU energy per op from board power (W) and peak throughput (TOPS), pJ.
pub fn gpu_energy_per_op(power_w: f64, tops: f64) -> f64 {
    power_w / (tops * 1e12) * 1e12
}

/// Energy of the counted ledger activity under both accounting modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEnergy {
    pub ops: u64,
    pub power_timed_pj: f64,
    pub table_per_op_pj: f64,
    /// Per-module share under `TablePerOp`, pJ.
    pub table_by_module: Vec<(String, f64)>,
}

pub fn ledger_energy(counts: &LedgerCounts, params: &EnergyParams, timing: &TimingParams) -> LedgerEnergy {
    let ops = counts.ops();
    let lanes = params.lanes as f64;
    LedgerEnergy {
        ops,
        power_timed_pj: ops as f64 * params.chip_pj_per_op(timing),
        table_per_op_pj: ops as f64 * table_energy_per_op(&params.modules, params.lanes),
        table_by_module: params
            .modules
            .iter()
            .map(|m| (m.name.label().to_string(), ops as f64 * m.energy_pj_per_64bit_op / lanes))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_ops_examples() {
        assert_eq!(ops_conv(1, 32, 3, 3, 28, 28), 451_584);
        assert_eq!(ops_conv(1, 1, 1, 1, 1, 1), 2);
        assert_eq!(ops_conv(32, 32, 3, 3, 14, 14) * 2, ops_conv(32, 64, 3, 3, 14, 14));
    }

    #[test]
    fn fc_ops_examples() {
        assert_eq!(ops_fc(1568, 10), 31_360);
        assert_eq!(ops_fc(1, 1), 2);
        assert_eq!(ops_fc(1024, 512), 1_048_576);
    }

    #[test]
    fn power_timed_energy() {
        let modules = default_modules();
        let total = total_power_mw(&modules);
        assert!((total - 199.5989).abs() < 1e-9);
        assert_eq!(format!("{total:.2}"), "199.60");
        let e = system_energy_per_op(&modules, &TimingParams::default(), 64);
        assert!((e - 70.17).abs() < 0.01, "{e}");
        let half = system_energy_per_op(&modules, &TimingParams::default(), 128);
        assert!((half - e / 2.0).abs() < 1e-12);
    }

    #[test]
    fn table_energy_differs_from_power_timed() {
        let t = table_energy_per_op(&default_modules(), 64);
        assert!((t * 64.0 - 3991.971).abs() < 1e-6);
        assert!((t - 62.37).abs() < 0.01);
    }

    #[test]
    fn scaling_law() {
        let e = scale_energy(70.17, 0.8, 3.3, 100.0, 1800.0);
        assert!((e - 0.229).abs() < 0.001, "{e}");
        assert_eq!(scale_energy(70.17, 3.3, 3.3, 100.0, 100.0), 70.17);
        assert!(scale_energy(1.0, 1.0, 1.0, 100.0, 200.0) > scale_energy(1.0, 1.0, 1.0, 100.0, 300.0));
    }

    #[test]
    fn gpu_baseline() {
        assert!((gpu_energy_per_op(450.0, 660.6) - 0.6812).abs() < 1e-4);
        assert!((gpu_energy_per_op(900.0, 660.6) - 1.3624).abs() < 1e-4);
        let joules: f64 = 450.0 / 660.6e12;
        assert!((joules - 0.68120e-12).abs() < 1e-16);
    }

    #[test]
    fn ledger_energy_is_linear() {
        let params = EnergyParams::default();
        let timing = TimingParams::default();
        let one = LedgerCounts { macs: 1000, ..Default::default() };
        let two = LedgerCounts { macs: 2000, ..Default::default() };
        let a = ledger_energy(&one, &params, &timing);
        let b = ledger_energy(&two, &params, &timing);
        assert!((b.power_timed_pj - 2.0 * a.power_timed_pj).abs() < 1e-6);
        assert!((b.table_per_op_pj - 2.0 * a.table_per_op_pj).abs() < 1e-6);
        let by_module: f64 = a.table_by_module.iter().map(|(_, e)| e).sum();
        assert!((by_module - a.table_per_op_pj).abs() < 1e-6);
    }

    #[test]
    fn default_params_validate() {
        EnergyParams::default().validate().unwrap();
        let mut p = EnergyParams::default();
        p.modules.pop();
        assert!(p.validate().is_err());
    }
}
