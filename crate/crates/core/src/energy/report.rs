use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ops_conv, ops_fc, EnergyParams};
use crate::array::TimingParams;

pub const MANIFEST_SCHEMA: &str = "cim-network/1";
pub const REPORT_SCHEMA: &str = "cim-energy-report/1";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("reading manifest: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing manifest: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

/// One layer of a network description used for op/energy accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerEntry {
    Conv {
        name: String,
        c_in: u64,
        c_out: u64,
        kh: u64,
        kw: u64,
        h_out: u64,
        w_out: u64,
        /// Surviving input channels after pruning (defaults to `c_in`).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        active_in: Option<u64>,
        /// Surviving kernels after pruning (defaults to `c_out`).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        active_out: Option<u64>,
    },
    Fc {
        name: String,
        w_h: u64,
        w_w: u64,
        /// Surviving input features after pruning (defaults to `w_h`).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        active_h: Option<u64>,
    },
    /// Convolution work given directly as op totals, e.g. accumulated over a
    /// training run.
    ConvOps { name: String, unpruned: u64, pruned: u64 },
}

impl LayerEntry {
    /// `(unpruned, pruned)` conv ops.
    fn conv_ops(&self) -> (u64, u64) {
        match *self {
            LayerEntry::Conv { c_in, c_out, kh, kw, h_out, w_out, active_in, active_out, .. } => (
                ops_conv(c_in, c_out, kh, kw, h_out, w_out),
                ops_conv(active_in.unwrap_or(c_in), active_out.unwrap_or(c_out), kh, kw, h_out, w_out),
            ),
            LayerEntry::ConvOps { unpruned, pruned, .. } => (unpruned, pruned),
            LayerEntry::Fc { .. } => (0, 0),
        }
    }

    fn fc_ops(&self) -> (u64, u64) {
        match *self {
            LayerEntry::Fc { w_h, w_w, active_h, .. } => (ops_fc(w_h, w_w), ops_fc(active_h.unwrap_or(w_h), w_w)),
            _ => (0, 0),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            LayerEntry::Conv { ref name, c_in, c_out, kh, kw, h_out, w_out, active_in, active_out } => {
                if [c_in, c_out, kh, kw, h_out, w_out].contains(&0) {
                    return Err(format!("{name}: dimensions must be positive"));
                }
                if active_in.is_some_and(|a| a > c_in) || active_out.is_some_and(|a| a > c_out) {
                    return Err(format!("{name}: active channels exceed layer width"));
                }
            }
            LayerEntry::Fc { ref name, w_h, w_w, active_h } => {
                if w_h == 0 || w_w == 0 {
                    return Err(format!("{name}: dimensions must be positive"));
                }
                if active_h.is_some_and(|a| a > w_h) {
                    return Err(format!("{name}: active inputs exceed layer width"));
                }
            }
            LayerEntry::ConvOps { ref name, unpruned, pruned } => {
                if pruned > unpruned {
                    return Err(format!("{name}: pruned ops exceed unpruned ops"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkManifest {
    pub schema: String,
    pub name: String,
    pub layers: Vec<LayerEntry>,
}

impl NetworkManifest {
    pub fn new(name: impl Into<String>, layers: Vec<LayerEntry>) -> Self {
        Self { schema: MANIFEST_SCHEMA.to_string(), name: name.into(), layers }
    }

    pub fn from_json(text: &str) -> Result<Self, ManifestError> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.schema != MANIFEST_SCHEMA {
            return Err(ManifestError::Invalid(format!("schema {:?}, expected {MANIFEST_SCHEMA:?}", self.schema)));
        }
        for layer in &self.layers {
            layer.validate().map_err(ManifestError::Invalid)?;
        }
        Ok(())
    }

    /// `(unpruned, pruned)` conv ops summed over layers.
    pub fn conv_ops(&self) -> (u64, u64) {
        self.layers.iter().map(LayerEntry::conv_ops).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
    }

    pub fn fc_ops(&self) -> (u64, u64) {
        self.layers.iter().map(LayerEntry::fc_ops).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformRow {
    pub platform: String,
    pub conv_ops: u64,
    pub fc_ops: u64,
    /// At the measured operating point (`PowerTimed` for the chip).
    pub energy_pj_raw: f64,
    /// Normalized to the target voltage and clock (GPU rows are unscaled).
    pub energy_pj_scaled: f64,
    /// Chip rows only: `TablePerOp` accounting at the measured point.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy_pj_table: Option<f64>,
    pub reduction_vs_gpu_pct: Option<f64>,
    pub reduction_vs_unpruned_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub schema: String,
    pub network: String,
    pub gpu_pj_per_op: f64,
    pub chip_pj_per_op: f64,
    pub chip_scaled_pj_per_op: f64,
    pub chip_table_pj_per_op: f64,
    pub rows: Vec<PlatformRow>,
    pub note: String,
}

impl EnergyReport {
    pub fn row(&self, platform: &str) -> Option<&PlatformRow> {
        self.rows.iter().find(|r| r.platform == platform)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "platform,conv_ops,fc_ops,energy_pj_raw,energy_pj_scaled,reduction_vs_gpu_pct,reduction_vs_unpruned_pct\n",
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4},{},{}\n",
                r.platform,
                r.conv_ops,
                r.fc_ops,
                r.energy_pj_raw,
                r.energy_pj_scaled,
                opt(r.reduction_vs_gpu_pct),
                opt(r.reduction_vs_unpruned_pct)
            ));
        }
        out
    }
}

fn reduction_pct(new: f64, base: f64) -> Option<f64> {
    (base > 0.0).then(|| 100.0 * (1.0 - new / base))
}

/// Inference energy on the GPU baseline and on the chip with and without the
/// manifest's pruning mask. The chip model is linear in ops, so the
/// pruned-vs-unpruned energy reduction equals the op reduction.
pub fn inference_energy_report(manifest: &NetworkManifest, params: &EnergyParams, timing: &TimingParams) -> EnergyReport {
    let gpu = params.gpu_pj_per_op();
    let chip = params.chip_pj_per_op(timing);
    let scaled = params.chip_scaled_pj_per_op(timing);
    let table = super::table_energy_per_op(&params.modules, params.lanes);
    let (conv_full, conv_pruned) = manifest.conv_ops();
    let (fc_full, fc_pruned) = manifest.fc_ops();

    let gpu_energy = (conv_full + fc_full) as f64 * gpu;
    let chip_row = |platform: &str, conv: u64, fc: u64| {
        let ops = (conv + fc) as f64;
        PlatformRow {
            platform: platform.to_string(),
            conv_ops: conv,
            fc_ops: fc,
            energy_pj_raw: ops * chip,
            energy_pj_scaled: ops * scaled,
            energy_pj_table: Some(ops * table),
            reduction_vs_gpu_pct: reduction_pct(ops * scaled, gpu_energy),
            reduction_vs_unpruned_pct: None,
        }
    };
    let unpruned = chip_row("cim_unpruned", conv_full, fc_full);
    let mut pruned = chip_row("cim_pruned", conv_pruned, fc_pruned);
    pruned.reduction_vs_unpruned_pct = reduction_pct(pruned.energy_pj_scaled, unpruned.energy_pj_scaled);

    EnergyReport {
        schema: REPORT_SCHEMA.to_string(),
        network: manifest.name.clone(),
        gpu_pj_per_op: gpu,
        chip_pj_per_op: chip,
        chip_scaled_pj_per_op: scaled,
        chip_table_pj_per_op: table,
        rows: vec![
            PlatformRow {
                platform: "gpu".to_string(),
                conv_ops: conv_full,
                fc_ops: fc_full,
                energy_pj_raw: gpu_energy,
                energy_pj_scaled: gpu_energy,
                energy_pj_table: None,
                reduction_vs_gpu_pct: None,
                reduction_vs_unpruned_pct: None,
            },
            unpruned,
            pruned,
        ],
        note: "chip energy is linear in op count; the pruned-vs-unpruned energy reduction equals the op \
               reduction. PowerTimed (raw) and TablePerOp (table) ledgers are independent estimates and \
               differ by about 11%."
            .to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(name: &str, c_in: u64, c_out: u64, hw: u64, active_in: u64, active_out: u64) -> LayerEntry {
        LayerEntry::Conv {
            name: name.into(),
            c_in,
            c_out,
            kh: 3,
            kw: 3,
            h_out: hw,
            w_out: hw,
            active_in: Some(active_in),
            active_out: Some(active_out),
        }
    }

    #[test]
    fn empty_network_reports_zero() {
        let m = NetworkManifest::new("empty", vec![]);
        let r = inference_energy_report(&m, &EnergyParams::default(), &TimingParams::default());
        for row in &r.rows {
            assert_eq!(row.conv_ops + row.fc_ops, 0);
            assert_eq!(row.energy_pj_raw, 0.0);
            assert_eq!(row.reduction_vs_gpu_pct, None);
        }
    }

    #[test]
    fn pruned_energy_reduction_tracks_conv_ops() {
        let m = NetworkManifest::new("two", vec![conv("a", 4, 8, 5, 4, 6), conv("b", 8, 8, 5, 6, 8)]);
        let r = inference_energy_report(&m, &EnergyParams::default(), &TimingParams::default());
        let (full, pruned) = m.conv_ops();
        let p = 100.0 * (1.0 - pruned as f64 / full as f64);
        let got = r.row("cim_pruned").unwrap().reduction_vs_unpruned_pct.unwrap();
        assert!((got - p).abs() < 1e-9);
    }

    #[test]
    fn manifest_json_round_trip_and_validation() {
        let m = NetworkManifest::new(
            "x",
            vec![
                conv("c", 1, 2, 3, 1, 2),
                LayerEntry::Fc { name: "fc".into(), w_h: 18, w_w: 10, active_h: None },
                LayerEntry::ConvOps { name: "ops".into(), unpruned: 10, pruned: 4 },
            ],
        );
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(NetworkManifest::from_json(&text).unwrap(), m);
        let bad = text.replace("\"pruned\":4", "\"pruned\":40");
        assert!(NetworkManifest::from_json(&bad).is_err());
        assert!(NetworkManifest::from_json(r#"{"schema":"cim-network/1","name":"x","layers":[],"extra":1}"#).is_err());
    }
}
