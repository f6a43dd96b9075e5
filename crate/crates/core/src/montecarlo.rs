//! Monte Carlo over whole blocks: forming, then program-and-verify of every
//! cell to a random level.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erf_inv};
use std::f64::consts::SQRT_2;

use crate::array::{ArrayError, BlockLayout, CimBlock, Coord, TimingParams, YieldReport};
use crate::device::DeviceParams;
use crate::rng::substream;

pub const MC_SCHEMA: &str = "cim-device-mc/1";

/// Per-cell outcome, in block-major, row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub form_voltage: f64,
    pub target_level: Option<usize>,
    pub resistance_kohm: f64,
    pub verify_cycles: u32,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub schema: String,
    pub requested_cells: usize,
    /// Whole blocks are simulated, so this rounds the request up.
    pub cells: usize,
    pub blocks: usize,
    pub levels: usize,
    pub program_sigma: f64,
    pub tolerance: f64,
    pub max_verify_cycles: u32,
    /// Programming runs, including runs on replacement cells.
    pub runs: u64,
    pub yield_in_tolerance: f64,
    pub single_cycle_rate: f64,
    pub analytic_single_cycle_rate: f64,
    pub analytic_yield: f64,
    /// σ implied by the single-cycle rate.
    pub sigma_estimate: f64,
    pub form_voltage_mean: f64,
    pub form_voltage_std: f64,
    pub repaired: u64,
    pub cycle_histogram: Vec<u64>,
}

/// Probability that one write lands inside the verify window.
pub fn analytic_single_cycle(sigma: f64, tolerance: f64) -> f64 {
    if sigma == 0.0 {
        1.0
    } else {
        erf(tolerance / (sigma * SQRT_2))
    }
}

pub fn run_device_mc(
    device: &DeviceParams,
    timing: &TimingParams,
    cells: usize,
    levels: usize,
    seed: u64,
) -> Result<(Vec<McCell>, McSummary), ArrayError> {
    if cells == 0 {
        return Err(ArrayError::Config("cell count must be positive".into()));
    }
    let params = DeviceParams { n_levels: levels, ..device.clone() };
    params.validate()?;
    let layout = BlockLayout::default();
    let per_block = layout.rows * layout.cols;
    let blocks = cells.div_ceil(per_block);
    let mut level_rng = substream(seed, 1);
    let mut report = YieldReport::default();
    let mut out = Vec::with_capacity(blocks * per_block);
    let mut voltages = Vec::with_capacity(blocks * per_block);
    for b in 0..blocks {
        let mut block = CimBlock::new(layout.clone(), params.clone(), timing.clone(), substream(seed, 100 + b as u64).random())?;
        let v = block.form_all()?;
        let levels_m: Vec<Vec<usize>> =
            (0..layout.rows).map(|_| (0..layout.cols).map(|_| level_rng.random_range(0..levels)).collect()).collect();
        report.merge(&block.program_block(&levels_m, &mut substream(seed, 2 + b as u64))?);
        for (i, &volt) in v.iter().enumerate() {
            let c = Coord::new(i / layout.cols, i % layout.cols);
            let cell = block.cell(c);
            out.push(McCell {
                block: b,
                row: c.row,
                col: c.col,
                form_voltage: volt,
                target_level: cell.target_level,
                resistance_kohm: cell.resistance,
                verify_cycles: cell.verify_cycles_last,
                status: format!("{:?}", cell.status),
            });
        }
        voltages.extend(v);
    }
    let runs: u64 = report.cycle_histogram.iter().sum();
    let single = report.cycle_histogram.get(1).copied().unwrap_or(0) as f64 / runs as f64;
    let n = voltages.len() as f64;
    let mean = voltages.iter().sum::<f64>() / n;
    let std = (voltages.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let p1 = analytic_single_cycle(params.program_sigma, params.tolerance);
    let sigma_estimate = if single >= 1.0 { 0.0 } else { params.tolerance / (SQRT_2 * erf_inv(single)) };
    let summary = McSummary {
        schema: MC_SCHEMA.into(),
        requested_cells: cells,
        cells: out.len(),
        blocks,
        levels,
        program_sigma: params.program_sigma,
        tolerance: params.tolerance,
        max_verify_cycles: params.max_verify_cycles,
        runs,
        yield_in_tolerance: report.ok as f64 / (report.ok + report.failed) as f64,
        single_cycle_rate: single,
        analytic_single_cycle_rate: p1,
        analytic_yield: 1.0 - (1.0 - p1).powi(params.max_verify_cycles as i32),
        sigma_estimate,
        form_voltage_mean: mean,
        form_voltage_std: std,
        repaired: report.repaired,
        cycle_histogram: report.cycle_histogram,
    };
    Ok((out, summary))
}

pub fn cells_to_csv(cells: &[McCell]) -> Result<String, ArrayError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in cells {
        w.serialize(c).map_err(|e| ArrayError::Io(std::io::Error::other(e)))?;
    }
    let bytes = w.into_inner().map_err(|e| ArrayError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_matches_analytic_values() {
        let (cells, s) = run_device_mc(&DeviceParams::default(), &TimingParams::default(), 20_000, 4, 3).unwrap();
        assert_eq!((s.blocks, s.cells, cells.len()), (2, 32_768, 32_768));
        assert!((s.analytic_single_cycle_rate - 0.9772).abs() < 1e-3);
        assert!((s.single_cycle_rate - s.analytic_single_cycle_rate).abs() < 0.01);
        assert!((s.sigma_estimate - 0.8793).abs() < 0.05);
        assert!(s.yield_in_tolerance > 0.998);
        assert!((s.form_voltage_mean - 1.89).abs() < 0.01);
    }

    #[test]
    fn deterministic_csv_and_bad_inputs() {
        let p = DeviceParams::default();
        let t = TimingParams::default();
        let a = cells_to_csv(&run_device_mc(&p, &t, 10, 2, 9).unwrap().0).unwrap();
        assert_eq!(a, cells_to_csv(&run_device_mc(&p, &t, 10, 2, 9).unwrap().0).unwrap());
        assert!(a.starts_with("block,row,col,form_voltage,target_level"));
        assert!(run_device_mc(&p, &t, 0, 4, 1).is_err());
        assert!(run_device_mc(&p, &t, 10, 1, 1).is_err());
    }

    #[test]
    fn noiseless_device_is_single_cycle() {
        let p = DeviceParams { program_sigma: 0.0, ..Default::default() };
        let (_, s) = run_device_mc(&p, &TimingParams::default(), 1, 16, 1).unwrap();
        assert_eq!(s.single_cycle_rate, 1.0);
        assert_eq!(s.sigma_estimate, 0.0);
        assert_eq!(s.analytic_yield, 1.0);
    }
}
