//! The alternating weight-update / prune-sweep loop, feature export and
//! checkpoints.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::dense::argmax;
use super::hardware::{forward_quantized, Backend, Hardware, HardwareManifest, HardwareMode, HwModel};
use super::mnist::Dataset;
use super::network::{Network, NetworkSpec};
use super::NnError;
use crate::array::image::BlockImage;
use crate::array::{BlockLayout, Coord, TimingParams};
use crate::device::DeviceParams;
use crate::energy::LedgerCounts;
use crate::pruning::{prune_sweep, PruneConfig, PruneState};
use crate::rng::substream;
use crate::similarity::SearchEngine;

pub const HISTORY_SCHEMA: &str = "cim-train-history/1";
pub const WEIGHTS_SCHEMA: &str = "cim-weights/1";

/// `[train]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub train_subset: usize,
    pub test_subset: usize,
    pub hardware_mode: HardwareMode,
    /// Also evaluate the other backend and count disagreeing samples.
    pub cross_check: bool,
    pub data_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            train_subset: 2000,
            test_subset: 500,
            hardware_mode: HardwareMode::Simulated,
            cross_check: true,
            data_dir: PathBuf::from("data/mnist"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.into()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 || self.train_subset < 1 || self.test_subset < 1 {
            return bad("batch and subset sizes must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Everything a run depends on.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub spec: NetworkSpec,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub device: DeviceParams,
    pub timing: TimingParams,
    pub seed: u64,
    /// Cells failed at random before the first programming.
    pub faults: usize,
}

impl TrainSetup {
    pub fn new(seed: u64) -> Self {
        Self {
            spec: NetworkSpec::task1(),
            train: TrainConfig::default(),
            prune: PruneConfig::default(),
            device: DeviceParams::default(),
            timing: TimingParams::default(),
            seed,
            faults: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Conv and dense ops of this epoch's training passes, at the kernel
    /// counts in force while training.
    pub conv_ops: u64,
    pub fc_ops: u64,
    /// Active kernels per conv layer after the sweep.
    pub active_kernels: Vec<usize>,
    pub pruned_fraction: f64,
    pub pruned: Vec<Vec<usize>>,
    pub candidate_pairs: Vec<usize>,
    /// Test samples whose logits differ between the two backends; `None`
    /// when not cross-checked.
    pub backend_mismatches: Option<usize>,
    pub cells_repaired: u64,
    pub cells_failed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub schema: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub prune: PruneConfig,
    pub epochs: Vec<EpochRecord>,
    pub final_test_accuracy: f64,
    pub final_pruned_fraction: f64,
    pub total_conv_ops: u64,
    pub total_fc_ops: u64,
    pub ledger: LedgerCounts,
}

impl TrainHistory {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }
}

pub struct TrainOutcome {
    pub net: Network,
    pub hw: Hardware,
    pub state: PruneState,
    pub history: TrainHistory,
}

/// Training and test subsets as drawn for a run.
pub fn draw_subsets(setup: &TrainSetup, train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset), NnError> {
    Ok((train.subset(setup.train.train_subset, setup.seed)?, test.subset(setup.train.test_subset, setup.seed ^ 1)?))
}

pub fn train(setup: &TrainSetup, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome, NnError> {
    train_with(setup, train_set, test_set, |_| {})
}

/// Runs the full loop; `on_epoch` sees each record as it is produced.
pub fn train_with(
    setup: &TrainSetup,
    train_set: &Dataset,
    test_set: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, NnError> {
    let cfg = &setup.train;
    cfg.validate()?;
    setup.prune.validate()?;
    let (train_data, test_data) = draw_subsets(setup, train_set, test_set)?;
    let mut net = Network::new(setup.spec.clone(), setup.seed)?;
    let mut hw = Hardware::new(&setup.device, setup.timing.clone(), setup.seed ^ 0x4857)?;
    let mut engine = SearchEngine::new(setup.device.clone(), setup.timing.clone(), setup.seed ^ 0x5345)
        .map_err(crate::pruning::PruneError::from)?
        .with_ledger(hw.ledger().clone());
    let layers: Vec<(usize, usize)> = net.convs.iter().map(|c| (c.spec.c_out, c.fan_in())).collect();
    let mut state = PruneState::new(&layers);

    hw.program(&net)?;
    if setup.faults > 0 {
        inject_random_faults(&mut hw, setup.faults, setup.seed ^ 0xfa17)?;
    }

    let mut epochs = Vec::with_capacity(cfg.epochs as usize);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut substream(setup.seed, 0x100 + epoch as u64));
        let (conv_per, fc_per) = net.ops();
        let mut loss = 0.0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<&[u8]> = batch.iter().map(|&i| train_data.image(i)).collect();
            let labels: Vec<u8> = batch.iter().map(|&i| train_data.labels[i]).collect();
            let stats = net.train_batch(&images, &labels, cfg.learning_rate, cfg.momentum)?;
            loss += stats.loss;
            correct += stats.correct;
        }
        let n = train_data.len() as u64;

        let mut report = hw.program(&net)?;
        let mut pruned = vec![Vec::new(); layers.len()];
        let mut candidate_pairs = vec![0; layers.len()];
        if setup.prune.sweep_due(epoch) {
            let sweep = prune_sweep(&mut HwModel { net: &mut net, hw: &mut hw }, &mut engine, &setup.prune, &mut state, epoch)?;
            for s in &sweep {
                pruned[s.layer] = s.pruned.clone();
                candidate_pairs[s.layer] = s.candidates;
            }
            if pruned.iter().any(|p| !p.is_empty()) {
                report = hw.program(&net)?;
            }
        }

        let (test_accuracy, backend_mismatches) = evaluate(&net, &mut hw, &test_data, cfg.hardware_mode, cfg.cross_check)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss / n as f64,
            train_accuracy: correct as f64 / n as f64,
            test_accuracy,
            conv_ops: conv_per * n,
            fc_ops: fc_per * n,
            active_kernels: net.active_counts(),
            pruned_fraction: state.pruned_fraction(),
            pruned,
            candidate_pairs,
            backend_mismatches,
            cells_repaired: report.repaired,
            cells_failed: report.failed,
        };
        on_epoch(&record);
        epochs.push(record);
    }

    let last = epochs.last().expect("at least one epoch");
    let history = TrainHistory {
        schema: HISTORY_SCHEMA.into(),
        seed: setup.seed,
        config: cfg.clone(),
        prune: setup.prune.clone(),
        final_test_accuracy: last.test_accuracy,
        final_pruned_fraction: last.pruned_fraction,
        total_conv_ops: epochs.iter().map(|e| e.conv_ops).sum(),
        total_fc_ops: epochs.iter().map(|e| e.fc_ops).sum(),
        ledger: hw.ledger().snapshot(),
        epochs,
    };
    Ok(TrainOutcome { net, hw, state, history })
}

/// Fails `n` distinct data cells spread over the pool.
pub fn inject_random_faults(hw: &mut Hardware, n: usize, seed: u64) -> Result<(), NnError> {
    use rand::Rng;
    let layout = BlockLayout::default();
    let (rows, cols) = (layout.data_rows(), layout.data_cols());
    let blocks = hw.blocks().len();
    if blocks == 0 {
        return Err(NnError::Config("no blocks to inject faults into".into()));
    }
    let mut rng = substream(seed, 0);
    let mut chosen = std::collections::BTreeSet::new();
    while chosen.len() < n.min(blocks * rows * cols) {
        chosen.insert((rng.random_range(0..blocks), rng.random_range(0..rows), rng.random_range(0..cols)));
    }
    for (b, r, c) in chosen {
        hw.block_mut(b).inject_fault(Coord::new(r, c))?;
    }
    Ok(())
}

/// Test accuracy under `mode` and, when `cross_check`, the number of
/// samples whose logits differ in any bit from the other backend.
pub fn evaluate(
    net: &Network,
    hw: &mut Hardware,
    data: &Dataset,
    mode: HardwareMode,
    cross_check: bool,
) -> Result<(f64, Option<usize>), NnError> {
    let mut correct = 0;
    let mut mismatches = 0;
    for i in 0..data.len() {
        let image = data.image(i);
        let sim = (mode == HardwareMode::Simulated || cross_check)
            .then(|| forward_quantized(net, image, &mut Backend::Simulated(hw)))
            .transpose()?;
        let ora = (mode == HardwareMode::SoftwareOracle || cross_check)
            .then(|| forward_quantized(net, image, &mut Backend::SoftwareOracle))
            .transpose()?;
        let primary = match mode {
            HardwareMode::Simulated => sim.as_ref(),
            HardwareMode::SoftwareOracle => ora.as_ref(),
        }
        .expect("primary backend ran");
        if argmax(&primary.logits) == data.labels[i] as usize {
            correct += 1;
        }
        if let (Some(a), Some(b)) = (&sim, &ora) {
            if a.logits.iter().map(|v| v.to_bits()).ne(b.logits.iter().map(|v| v.to_bits())) {
                mismatches += 1;
            }
        }
    }
    Ok((correct as f64 / data.len() as f64, cross_check.then_some(mismatches)))
}

/// CSV of the outputs of conv layer `layer` (the last one is the flattened
/// dense input) for the first `n` samples, one row per sample.
pub fn export_features(
    net: &Network,
    hw: Option<&mut Hardware>,
    data: &Dataset,
    layer: usize,
    n: usize,
) -> Result<String, NnError> {
    if layer >= net.convs.len() {
        return Err(NnError::Shape(format!("no conv layer {layer}")));
    }
    let mut backend = match hw {
        Some(h) => Backend::Simulated(h),
        None => Backend::SoftwareOracle,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for i in 0..n.min(data.len()) {
        let out = forward_quantized(net, data.image(i), &mut backend)?;
        let feats = &out.features[layer];
        if i == 0 {
            let mut header: Vec<String> = (0..feats.len()).map(|j| format!("f{j}")).collect();
            header.push("label".into());
            w.write_record(&header).map_err(csv_err)?;
        }
        let mut row: Vec<String> = feats.iter().map(|v| v.to_string()).collect();
        row.push(data.labels[i].to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| NnError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn csv_err(e: csv::Error) -> NnError {
    NnError::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub name: String,
    pub shape: [usize; 4],
    pub active: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub schema: String,
    pub layers: Vec<LayerSummary>,
    pub network: Network,
    pub hardware: HardwareManifest,
}

fn block_file(i: usize) -> String {
    format!("block_{i:03}.cimb")
}

/// Writes `weights.json` and `blocks/*.cimb` under `dir`.
pub fn save_checkpoint(dir: &Path, net: &Network, hw: &Hardware) -> Result<(), NnError> {
    let blocks = dir.join("blocks");
    fs::create_dir_all(&blocks)?;
    for (i, b) in hw.blocks().iter().enumerate() {
        BlockImage::of(b).write_to(BufWriter::new(fs::File::create(blocks.join(block_file(i)))?))?;
    }
    let manifest = WeightsManifest {
        schema: WEIGHTS_SCHEMA.into(),
        layers: net
            .convs
            .iter()
            .enumerate()
            .map(|(l, c)| LayerSummary {
                name: format!("conv{}", l + 1),
                shape: [c.spec.c_out, c.spec.c_in, 3, 3],
                active: c.active.clone(),
            })
            .collect(),
        network: net.clone(),
        hardware: hw.manifest(),
    };
    fs::write(dir.join("weights.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(
    dir: &Path,
    device: &DeviceParams,
    timing: TimingParams,
    seed: u64,
) -> Result<(Network, Hardware), NnError> {
    let manifest: WeightsManifest = serde_json::from_slice(&fs::read(dir.join("weights.json"))?)?;
    if manifest.schema != WEIGHTS_SCHEMA {
        return Err(NnError::Config(format!("unknown weights schema {}", manifest.schema)));
    }
    manifest.network.spec.validate()?;
    let mut hw = Hardware::new(device, timing, seed)?;
    let mut blocks = Vec::with_capacity(manifest.hardware.remap.len());
    for i in 0..manifest.hardware.remap.len() {
        let file = fs::File::open(dir.join("blocks").join(block_file(i)))?;
        let image = BlockImage::read_from(std::io::BufReader::new(file))?;
        blocks.push(image.into_block(
            BlockLayout::default(),
            hw.params().clone(),
            hw.timing().clone(),
            substream(seed, i as u64).next_u64(),
        )?);
    }
    hw.restore(blocks, manifest.hardware)?;
    Ok((manifest.network, hw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::ConvSpec;
    use rand::Rng;

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = substream(seed, 0);
        let mut images = Vec::with_capacity(n * 64);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as u8;
            for p in 0..64 {
                let lit = if label == 0 { p % 8 < 4 } else { p / 8 < 4 };
                images.push(if lit { rng.random_range(150..=255) } else { rng.random_range(0..40) });
            }
            labels.push(label);
        }
        Dataset { rows: 8, cols: 8, images, labels }
    }

    fn toy_setup(seed: u64) -> TrainSetup {
        let spec = NetworkSpec {
            input_channels: 1,
            input_hw: 8,
            convs: vec![ConvSpec { c_in: 1, c_out: 8, pool: true }, ConvSpec { c_in: 8, c_out: 8, pool: false }],
            classes: 2,
        };
        let mut setup = TrainSetup::new(seed);
        setup.spec = spec;
        setup.train = TrainConfig { epochs: 3, train_subset: 64, test_subset: 32, ..Default::default() };
        setup.prune = PruneConfig {
            distance_threshold: 0.4,
            normalized: true,
            max_prune_fraction: 0.25,
            ..Default::default()
        };
        setup
    }

    #[test]
    fn toy_run_is_deterministic_and_consistent() {
        let (train_set, test_set) = (toy_data(100, 1), toy_data(50, 2));
        let setup = toy_setup(5);
        let a = train(&setup, &train_set, &test_set).unwrap();
        let b = train(&setup, &train_set, &test_set).unwrap();
        assert_eq!(a.history.to_json(), b.history.to_json());
        let h = &a.history;
        assert_eq!(h.epochs.len(), 3);
        for w in h.epochs.windows(2) {
            assert!(w[1].active_kernels.iter().zip(&w[0].active_kernels).all(|(x, y)| x <= y));
        }
        assert!(h.epochs.iter().all(|e| e.backend_mismatches == Some(0)));
        assert!(h.final_pruned_fraction <= 0.25);
        assert!(h.final_test_accuracy > 0.8, "{}", h.final_test_accuracy);
        let first = &h.epochs[0];
        assert_eq!(first.conv_ops, setup.spec.ops(&[8, 8]).0 * 64);
    }

    #[test]
    fn pruning_reduces_later_ops() {
        let (train_set, test_set) = (toy_data(100, 1), toy_data(50, 2));
        let mut setup = toy_setup(6);
        setup.prune.distance_threshold = 0.6;
        let pruned = train(&setup, &train_set, &test_set).unwrap().history;
        setup.prune.enabled = false;
        let full = train(&setup, &train_set, &test_set).unwrap().history;
        assert!(full.epochs.iter().all(|e| e.active_kernels == vec![8, 8]));
        assert!(pruned.final_pruned_fraction > 0.0);
        assert!(pruned.total_conv_ops < full.total_conv_ops);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        let setup = TrainSetup { train: TrainConfig { train_subset: 1000, ..Default::default() }, ..toy_setup(1) };
        assert!(train(&setup, &toy_data(10, 1), &toy_data(10, 2)).is_err());
    }

    #[test]
    fn features_have_one_row_per_sample() {
        let setup = toy_setup(7);
        let net = Network::new(setup.spec.clone(), 7).unwrap();
        let data = toy_data(10, 3);
        let csv = export_features(&net, None, &data, 1, 10).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 11);
        assert_eq!(lines[0].split(',').count(), 8 * 4 * 4 + 1);
        assert_eq!(csv, export_features(&net, None, &data, 1, 10).unwrap());
        let mut hw = Hardware::new(&DeviceParams::default(), TimingParams::default(), 7).unwrap();
        hw.program(&net).unwrap();
        assert_eq!(csv, export_features(&net, Some(&mut hw), &data, 1, 10).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let setup = toy_setup(8);
        let out = train(&setup, &toy_data(100, 1), &toy_data(50, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &out.net, &out.hw).unwrap();
        let (net, mut hw) = load_checkpoint(dir.path(), &setup.device, setup.timing.clone(), 8).unwrap();
        for (a, b) in net.convs.iter().zip(&out.net.convs) {
            assert_eq!((&a.latent, &a.active), (&b.latent, &b.active));
        }
        let data = toy_data(5, 9);
        for i in 0..data.len() {
            let a = forward_quantized(&net, data.image(i), &mut Backend::Simulated(&mut hw)).unwrap();
            let b = forward_quantized(&out.net, data.image(i), &mut Backend::SoftwareOracle).unwrap();
            assert_eq!(a.logits, b.logits);
        }
    }
}
