use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cim_core::array::{compute_gate, LogicOp};
use cim_core::config::{ConfigError, RunConfig};
use cim_core::energy::{inference_energy_report, NetworkManifest};
use cim_core::montecarlo::{cells_to_csv, run_device_mc};
use cim_core::nn::mnist::MnistError;
use cim_core::nn::train::{draw_subsets, export_features, save_checkpoint, train_with};
use cim_core::nn::{load_mnist, NnError};
use cim_core::oracle::{logic_ber, mac_oracle, truth_table_check};

use crate::{Cli, Command};

const LOCK_FILE: &str = ".cim-sim.lock";
/// Seed for commands that do not require one.
const DEFAULT_SEED: u64 = 1;

#[derive(Debug)]
pub struct CmdError {
    pub code: u8,
    pub message: String,
}

fn usage(message: impl Into<String>) -> CmdError {
    CmdError { code: 2, message: message.into() }
}

fn internal(e: impl std::fmt::Display) -> CmdError {
    CmdError { code: 1, message: e.to_string() }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        usage(e.to_string())
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        internal(e)
    }
}

/// Keeps other `cim-sim` processes out of the output directory.
struct OutLock(PathBuf);

impl OutLock {
    fn acquire(dir: &Path) -> Result<Self, CmdError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(usage(format!("{} is in use by another run ({} exists)", dir.display(), path.display())))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CmdError> {
    fs::write(path, serde_json::to_string_pretty(value).map_err(internal)? + "\n")?;
    Ok(())
}

fn verdict(ok: bool) -> ExitCode {
    if ok {
        println!("PASS");
        ExitCode::SUCCESS
    } else {
        println!("FAIL");
        ExitCode::from(1)
    }
}

pub fn run(cli: Cli) -> Result<ExitCode, CmdError> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let out = cli.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    match cli.command {
        Command::DeviceMc { cells, levels } => {
            if cells == 0 {
                return Err(usage("--cells must be positive"));
            }
            let seed = cfg.require_seed()?;
            let (cells_out, summary) =
                run_device_mc(&cfg.device, &cfg.timing, cells, levels, seed).map_err(|e| usage(e.to_string()))?;
            let _lock = OutLock::acquire(&out)?;
            fs::write(out.join("device_mc.csv"), cells_to_csv(&cells_out).map_err(internal)?)?;
            write_json(&out.join("device_mc.json"), &summary)?;
            println!(
                "cells {} levels {} yield {:.5} single-cycle {:.5} (analytic {:.5}) sigma {:.4} kOhm form {:.3}/{:.3} V",
                summary.cells,
                levels,
                summary.yield_in_tolerance,
                summary.single_cycle_rate,
                summary.analytic_single_cycle_rate,
                summary.sigma_estimate,
                summary.form_voltage_mean,
                summary.form_voltage_std
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyLogic { delay_us, samples, faults, negative_control } => {
            let delay = delay_us.unwrap_or(cfg.timing.compute_delay_us);
            if !(delay >= 0.0) {
                return Err(usage("--delay-us must be non-negative"));
            }
            let seed = cfg.seed()?.unwrap_or(DEFAULT_SEED);
            let _lock = OutLock::acquire(&out)?;
            if negative_control {
                let broken = |x: bool, w: bool, k: bool, op: LogicOp| {
                    let v = compute_gate(x, w, k, op);
                    if op == LogicOp::Xor && x && w && k {
                        !v
                    } else {
                        v
                    }
                };
                let (cases, mismatches) = truth_table_check(broken);
                println!("truth table: {cases} cases, {mismatches} mismatches");
                return Ok(verdict(mismatches == 0));
            }
            let report = logic_ber(&cfg.device, &cfg.timing, delay, samples, faults, seed).map_err(internal)?;
            write_json(&out.join("verify_logic.json"), &report)?;
            println!("truth table: {} cases, {} mismatches", report.truth_table_cases, report.truth_table_mismatches);
            println!(
                "gate evals {} at {delay} us: {} bit errors, BER {:.3e} (configured {:.3e})",
                report.gate_evals, report.bit_errors, report.empirical_ber, report.expected_ber
            );
            if report.truth_table_mismatches > 0 {
                return Ok(verdict(false));
            }
            if report.expected_ber > 0.0 {
                eprintln!(
                    "warning: {delay} us is past the leakage threshold; nonzero BER is expected ({})",
                    if report.within_band() { "inside the 3-sigma band" } else { "outside the 3-sigma band" }
                );
                return Ok(verdict(true));
            }
            Ok(verdict(report.bit_errors == 0))
        }
        Command::MacOracle { exhaustive, pairs, dots, faults } => {
            let seed = cfg.seed()?.unwrap_or(DEFAULT_SEED);
            let _lock = OutLock::acquire(&out)?;
            let report =
                mac_oracle(&cfg.device, &cfg.timing, exhaustive, pairs, dots, faults, seed).map_err(internal)?;
            write_json(&out.join("mac_oracle.json"), &report)?;
            println!("spot: 7 * -27 = {}, (7 - -27)^2 = {}", report.spot_multiply, report.spot_euclid);
            println!("multiply: {} cases, {} mismatches", report.multiply_cases, report.multiply_mismatches);
            println!("euclid_sq: {} cases, {} mismatches", report.euclid_cases, report.euclid_mismatches);
            println!("dot64: {} cases, {} mismatches", report.dot_cases, report.dot_mismatches);
            println!("conv: {} outputs, {} mismatches", report.conv_cases, report.conv_mismatches);
            Ok(verdict(report.mismatches() == 0))
        }
        Command::Train { no_prune, epochs, features } => {
            let seed = cfg.require_seed()?;
            let mut setup = cfg.train_setup(seed);
            if no_prune {
                setup.prune.enabled = false;
            }
            if let Some(e) = epochs {
                setup.train.epochs = e;
            }
            setup.train.validate().map_err(|e| usage(e.to_string()))?;
            let (train_set, test_set) = load_mnist(&setup.train.data_dir).map_err(|e| match e {
                MnistError::Missing(_) => CmdError { code: 3, message: e.to_string() },
                other => usage(other.to_string()),
            })?;
            let _lock = OutLock::acquire(&out)?;
            let mut outcome = train_with(&setup, &train_set, &test_set, |e| {
                println!(
                    "epoch {:>3}  loss {:.4}  train {:.4}  test {:.4}  active {:?}  mismatches {}",
                    e.epoch,
                    e.train_loss,
                    e.train_accuracy,
                    e.test_accuracy,
                    e.active_kernels,
                    e.backend_mismatches.map_or("-".into(), |m| m.to_string())
                )
            })
            .map_err(|e| match e {
                NnError::Config(_) | NnError::Mnist(_) => usage(e.to_string()),
                other => internal(other),
            })?;
            let history = &outcome.history;
            fs::write(out.join("history.json"), history.to_json() + "\n")?;
            let (_, test) = draw_subsets(&setup, &train_set, &test_set).map_err(internal)?;
            let last = outcome.net.convs.len() - 1;
            let csv = export_features(&outcome.net, Some(&mut outcome.hw), &test, last, features).map_err(internal)?;
            fs::write(out.join("features.csv"), csv)?;
            let manifest = outcome.net.energy_manifest("task1-trained");
            write_json(&out.join("energy.json"), &inference_energy_report(&manifest, &cfg.energy, &cfg.timing))?;
            save_checkpoint(&out, &outcome.net, &outcome.hw).map_err(internal)?;

            let full = setup.spec.ops(&setup.spec.convs.iter().map(|c| c.c_out).collect::<Vec<_>>()).0
                * setup.train.train_subset as u64
                * setup.train.epochs as u64;
            println!(
                "final test accuracy {:.4}  prune fraction {:.4}  conv training ops reduction {:.2}%",
                history.final_test_accuracy,
                history.final_pruned_fraction,
                100.0 * (1.0 - history.total_conv_ops as f64 / full as f64)
            );
            let mismatched = history.epochs.iter().filter_map(|e| e.backend_mismatches).sum::<usize>();
            if mismatched > 0 && setup.timing.ber(setup.timing.compute_delay_us) == 0.0 {
                eprintln!("error: {mismatched} test samples differ between simulated and software inference");
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Energy { network } => {
            let manifest = NetworkManifest::load(&network).map_err(|e| usage(e.to_string()))?;
            cfg.energy.validate().map_err(usage)?;
            let report = inference_energy_report(&manifest, &cfg.energy, &cfg.timing);
            let _lock = OutLock::acquire(&out)?;
            write_json(&out.join("energy.json"), &report)?;
            fs::write(out.join("energy.csv"), report.to_csv())?;
            for row in &report.rows {
                println!(
                    "{:<14} conv {:>16} fc {:>12}  scaled {:>14.3} pJ  vs gpu {}  vs unpruned {}",
                    row.platform,
                    row.conv_ops,
                    row.fc_ops,
                    row.energy_pj_scaled,
                    row.reduction_vs_gpu_pct.map_or("-".into(), |p| format!("{p:.2}%")),
                    row.reduction_vs_unpruned_pct.map_or("-".into(), |p| format!("{p:.2}%"))
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::LeakageSweep { from_us, to_us, step_us, samples } => {
            if !(step_us > 0.0 && from_us >= 0.0 && to_us >= from_us) {
                return Err(usage("need 0 <= from-us <= to-us and step-us > 0"));
            }
            let seed = cfg.seed()?.unwrap_or(DEFAULT_SEED);
            let _lock = OutLock::acquire(&out)?;
            let mut csv = String::from("delay_us,gate_evals,bit_errors,empirical_ber,expected_ber,ber_low,ber_high\n");
            let steps = ((to_us - from_us) / step_us + 1e-9).floor() as usize;
            for i in 0..=steps {
                let delay = from_us + i as f64 * step_us;
                let r = logic_ber(&cfg.device, &cfg.timing, delay, samples, 0, seed).map_err(internal)?;
                csv.push_str(&format!(
                    "{delay},{},{},{},{},{},{}\n",
                    r.gate_evals, r.bit_errors, r.empirical_ber, r.expected_ber, r.ber_low, r.ber_high
                ));
                println!("{delay:>6.2} us  BER {:.4e}  configured {:.4e}", r.empirical_ber, r.expected_ber);
            }
            fs::write(out.join("leakage.csv"), csv)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
