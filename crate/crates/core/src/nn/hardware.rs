//! Binary conv layers mapped onto array blocks, and the quantized forward
//! pass that runs on them.
//!
//! A layer's weights occupy `rows = active_in · 9` rows (channel-major, then
//! `ky`, `kx`) and one column per active kernel, cut into tiles of at most
//! one block's data region. Activations are quantized per image and layer to
//! 8 bits; the ±1 dot product of `q` with a kernel is assembled from AND-mode
//! VMMs of the bit planes of `q`:
//! `Σ_i q_i w_i = Σ_b 2^b (2·popcount(x_b ∧ w) − popcount(x_b))`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::network::{Network, KERNEL};
use super::NnError;
use crate::array::{level_matrix, ArrayError, BlockLayout, set_row_bit, CimBlock, Coord, RowBits, TimingParams, YieldReport, ROW_WORDS};
use crate::bitslice::binary_vmm_packed;
use crate::device::DeviceParams;
use crate::energy::EnergyLedger;
use crate::pruning::{PrunableNetwork, PruneError};
use crate::rng::substream;
use crate::similarity::KernelVector;

const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum HardwareMode {
    /// Dot products from the simulated arrays.
    #[default]
    Simulated,
    /// Dot products from the binarized weights in software.
    SoftwareOracle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    /// Index into the active-kernel list of the layer.
    pub col0: usize,
    pub cols: usize,
    /// Index into the block pool.
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Band {
    pub row0: usize,
    pub rows: usize,
    pub tiles: Vec<Tile>,
}

/// Placement of one conv layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HwLayer {
    pub in_channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub bands: Vec<Band>,
}

impl HwLayer {
    pub fn rows(&self) -> usize {
        self.in_channels.len() * TAPS
    }

    /// Layout implied by the network's current masks.
    fn plan(net: &Network, l: usize, data_rows: usize, data_cols: usize, next_block: &mut usize) -> Self {
        let in_channels: Vec<usize> = if l == 0 {
            (0..net.spec.input_channels).collect()
        } else {
            (0..net.convs[l - 1].active.len()).filter(|&c| net.convs[l - 1].active[c]).collect()
        };
        let kernels: Vec<usize> = (0..net.convs[l].active.len()).filter(|&k| net.convs[l].active[k]).collect();
        let rows = in_channels.len() * TAPS;
        let mut bands = Vec::new();
        for row0 in (0..rows).step_by(data_rows) {
            let tiles = (0..kernels.len())
                .step_by(data_cols)
                .map(|col0| {
                    let t = Tile { col0, cols: data_cols.min(kernels.len() - col0), block: *next_block };
                    *next_block += 1;
                    t
                })
                .collect();
            bands.push(Band { row0, rows: data_rows.min(rows - row0), tiles });
        }
        Self { in_channels, kernels, bands }
    }
}

/// The blocks holding the network's conv weights.
///
/// Blocks form a pool reused in order on every reprogramming, so injected
/// faults and wear persist across epochs.
#[derive(Debug)]
pub struct Hardware {
    pool: Vec<CimBlock>,
    layers: Vec<HwLayer>,
    params: DeviceParams,
    timing: TimingParams,
    seed: u64,
    ledger: Arc<EnergyLedger>,
    programs: u64,
}

impl Hardware {
    /// Weight cells are used as two-level cells of the given device.
    pub fn new(device: &DeviceParams, timing: TimingParams, seed: u64) -> Result<Self, NnError> {
        let params = DeviceParams { n_levels: 2, level_resistances: None, ..device.clone() };
        params.validate().map_err(ArrayError::from)?;
        timing.validate().map_err(ArrayError::Config)?;
        Ok(Self {
            pool: Vec::new(),
            layers: Vec::new(),
            params,
            timing,
            seed,
            ledger: Arc::new(EnergyLedger::new()),
            programs: 0,
        })
    }

    pub fn ledger(&self) -> &Arc<EnergyLedger> {
        &self.ledger
    }

    pub fn blocks(&self) -> &[CimBlock] {
        &self.pool
    }

    pub fn layers(&self) -> &[HwLayer] {
        &self.layers
    }

    pub fn set_compute_delay(&mut self, delay_us: f64) {
        self.timing.compute_delay_us = delay_us;
        for b in &mut self.pool {
            b.set_compute_delay(delay_us);
        }
    }

    /// Forms blocks until at least `n` exist.
    pub fn ensure_blocks(&mut self, n: usize) -> Result<(), NnError> {
        while self.pool.len() < n {
            let seed = substream(self.seed, self.pool.len() as u64).next_u64();
            let mut block = CimBlock::new(BlockLayout::default(), self.params.clone(), self.timing.clone(), seed)?
                .with_ledger(self.ledger.clone());
            block.form_all()?;
            self.pool.push(block);
        }
        Ok(())
    }

    pub fn block_mut(&mut self, i: usize) -> &mut CimBlock {
        &mut self.pool[i]
    }

    /// Lays out every conv layer for the current masks and programs the
    /// binarized weights.
    pub fn program(&mut self, net: &Network) -> Result<YieldReport, NnError> {
        let layout = BlockLayout::default();
        let (data_rows, data_cols) = (layout.data_rows(), layout.data_cols());
        let mut next_block = 0;
        let layers: Vec<HwLayer> =
            (0..net.convs.len()).map(|l| HwLayer::plan(net, l, data_rows, data_cols, &mut next_block)).collect();
        self.ensure_blocks(next_block)?;
        self.programs += 1;
        let mut rng = substream(self.seed ^ 0x9e37, self.programs);
        let mut report = YieldReport::default();
        for (l, hl) in layers.iter().enumerate() {
            let conv = &net.convs[l];
            for band in &hl.bands {
                for tile in &band.tiles {
                    let block = &mut self.pool[tile.block];
                    let levels = level_matrix(block.layout(), |c: Coord| {
                        let bit = c.row < band.rows && c.col < tile.cols && {
                            let r = band.row0 + c.row;
                            conv.bit(hl.kernels[tile.col0 + c.col], hl.in_channels[r / TAPS] * TAPS + r % TAPS)
                        };
                        self.params.binary_level(bit)
                    });
                    report.merge(&block.program_block(&levels, &mut rng)?);
                }
            }
        }
        self.layers = layers;
        Ok(report)
    }

    /// Reads kernel `kernel` of layer `l` back from the arrays, one bit per
    /// placed row.
    pub fn kernel_bits(&mut self, l: usize, kernel: usize) -> Result<Vec<bool>, NnError> {
        let hl = self.layers.get(l).ok_or_else(|| NnError::Shape(format!("layer {l} is not programmed")))?;
        let j = hl
            .kernels
            .iter()
            .position(|&k| k == kernel)
            .ok_or_else(|| NnError::Shape(format!("kernel {kernel} of layer {l} is not placed")))?;
        let mut bits = Vec::with_capacity(hl.rows());
        for band in &hl.bands {
            let tile = band.tiles.iter().find(|t| (t.col0..t.col0 + t.cols).contains(&j)).expect("tiles cover kernels");
            let col = self.pool[tile.block].column_bits(j - tile.col0)?;
            bits.extend((0..band.rows).map(|r| col[r / 64] >> (r % 64) & 1 == 1));
        }
        Ok(bits)
    }

    /// ±1 dot products of `patch` (one value per placed row) with every
    /// placed kernel of layer `l`.
    pub fn dots(&mut self, l: usize, patch: &[u8], out: &mut [i64]) -> Result<(), NnError> {
        let Self { pool, layers, .. } = self;
        let hl = &layers[l];
        debug_assert_eq!(patch.len(), hl.rows());
        out.fill(0);
        for band in &hl.bands {
            let mut planes = [[0u64; ROW_WORDS]; 8];
            for r in 0..band.rows {
                let q = patch[band.row0 + r];
                if q == 0 {
                    continue;
                }
                for (b, plane) in planes.iter_mut().enumerate() {
                    if q >> b & 1 == 1 {
                        set_row_bit(plane, r, true);
                    }
                }
            }
            for (b, plane) in planes.iter().enumerate() {
                let pop: u32 = plane.iter().map(|w| w.count_ones()).sum();
                if pop == 0 {
                    continue;
                }
                for tile in &band.tiles {
                    let counts = binary_vmm_packed(&mut pool[tile.block], plane as &RowBits, band.rows)?;
                    for c in 0..tile.cols {
                        out[tile.col0 + c] += (2 * counts[c] as i64 - pop as i64) << b;
                    }
                }
            }
        }
        Ok(())
    }

    /// Placement and remap tables for a checkpoint manifest.
    pub fn manifest(&self) -> HardwareManifest {
        HardwareManifest {
            layers: self.layers.clone(),
            remap: self.pool.iter().map(|b| b.remap_table().iter().map(|(&k, &v)| (k, v)).collect()).collect(),
        }
    }

    /// Rebuilds the arrays from block images and a manifest.
    pub fn restore(&mut self, blocks: Vec<CimBlock>, manifest: HardwareManifest) -> Result<(), NnError> {
        if blocks.len() != manifest.remap.len() {
            return Err(NnError::Shape("block count differs from manifest".into()));
        }
        let mut pool = Vec::with_capacity(blocks.len());
        for (block, remap) in blocks.into_iter().zip(manifest.remap) {
            let mut block = block.with_ledger(self.ledger.clone());
            block.set_remap_table(remap.into_iter().collect::<BTreeMap<_, _>>())?;
            pool.push(block);
        }
        self.pool = pool;
        self.layers = manifest.layers;
        Ok(())
    }

    pub fn params(&self) -> &DeviceParams {
        &self.params
    }

    pub fn timing(&self) -> &TimingParams {
        &self.timing
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareManifest {
    pub layers: Vec<HwLayer>,
    /// Per block: `(logical, physical)` replacements.
    pub remap: Vec<Vec<(Coord, Coord)>>,
}

/// Logits and per-layer outputs of a quantized forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantForward {
    pub logits: Vec<f32>,
    /// Output of each conv layer after ReLU and pooling, `(c, y, x)` order.
    pub features: Vec<Vec<f32>>,
}

/// Where the integer dot products come from.
pub enum Backend<'a> {
    Simulated(&'a mut Hardware),
    SoftwareOracle,
}

fn oracle_dots(net: &Network, l: usize, in_channels: &[usize], kernels: &[usize], patch: &[u8], out: &mut [i64]) {
    let conv = &net.convs[l];
    for (j, &k) in kernels.iter().enumerate() {
        let mut sum = 0i64;
        for (r, &q) in patch.iter().enumerate() {
            let w = conv.bit(k, in_channels[r / TAPS] * TAPS + r % TAPS);
            sum += if w { q as i64 } else { -(q as i64) };
        }
        out[j] = sum;
    }
}

/// Forward pass with 8-bit activations and integer ±1 dot products. Both
/// backends share all arithmetic except the dot products, so they agree
/// bit-for-bit whenever the arrays hold the binarized weights.
pub fn forward_quantized(net: &Network, image: &[u8], backend: &mut Backend<'_>) -> Result<QuantForward, NnError> {
    let spec = &net.spec;
    let mut hw = spec.input_hw;
    if image.len() != spec.input_channels * hw * hw {
        return Err(NnError::Shape(format!("image of {} values", image.len())));
    }
    let mut q: Vec<u8> = image.to_vec();
    let mut scale = 1.0f32 / 255.0;
    let mut features = Vec::with_capacity(net.convs.len());
    for (l, conv) in net.convs.iter().enumerate() {
        let (in_channels, kernels) = match backend {
            Backend::Simulated(h) => {
                let hl = h.layers.get(l).ok_or_else(|| NnError::Shape("hardware is not programmed".into()))?;
                (hl.in_channels.clone(), hl.kernels.clone())
            }
            Backend::SoftwareOracle => {
                let in_ch = if l == 0 {
                    (0..spec.input_channels).collect()
                } else {
                    (0..net.convs[l - 1].active.len()).filter(|&c| net.convs[l - 1].active[c]).collect()
                };
                (in_ch, (0..conv.active.len()).filter(|&k| conv.active[k]).collect::<Vec<_>>())
            }
        };
        let c_out = conv.spec.c_out;
        let mut out = vec![0.0f32; c_out * hw * hw];
        let mut patch = vec![0u8; in_channels.len() * TAPS];
        let mut d = vec![0i64; kernels.len()];
        let gain = conv.alpha() * scale;
        for y in 0..hw {
            for x in 0..hw {
                for (ci, &ch) in in_channels.iter().enumerate() {
                    for ky in 0..KERNEL {
                        for kx in 0..KERNEL {
                            let (iy, ix) = (y + ky, x + kx);
                            patch[ci * TAPS + ky * KERNEL + kx] = if iy < 1 || ix < 1 || iy > hw || ix > hw {
                                0
                            } else {
                                q[(ch * hw + iy - 1) * hw + ix - 1]
                            };
                        }
                    }
                }
                match backend {
                    Backend::Simulated(h) => h.dots(l, &patch, &mut d)?,
                    Backend::SoftwareOracle => oracle_dots(net, l, &in_channels, &kernels, &patch, &mut d),
                }
                for (j, &k) in kernels.iter().enumerate() {
                    out[(k * hw + y) * hw + x] = (gain * d[j] as f32 + conv.bias[k]).max(0.0);
                }
            }
        }
        if conv.spec.pool {
            let half = hw / 2;
            let mut pooled = vec![0.0f32; c_out * half * half];
            for c in 0..c_out {
                for y in 0..half {
                    for x in 0..half {
                        let at = |dy: usize, dx: usize| out[(c * hw + 2 * y + dy) * hw + 2 * x + dx];
                        pooled[(c * half + y) * half + x] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                    }
                }
            }
            out = pooled;
            hw = half;
        }
        let max = out.iter().copied().fold(0.0f32, f32::max);
        if max > 0.0 {
            scale = max / 255.0;
            q = out.iter().map(|&v| (v / scale).round().min(255.0) as u8).collect();
        } else {
            scale = 1.0;
            q = vec![0; out.len()];
        }
        features.push(out);
    }
    let logits = net.dense_logits(features.last().expect("at least one conv layer"));
    Ok(QuantForward { logits, features })
}

/// A network together with the arrays holding its weights, as seen by a
/// prune sweep.
pub struct HwModel<'a> {
    pub net: &'a mut Network,
    pub hw: &'a mut Hardware,
}

impl PrunableNetwork for HwModel<'_> {
    fn prunable_layers(&self) -> Vec<(usize, usize)> {
        self.net.convs.iter().map(|c| (c.spec.c_out, c.fan_in())).collect()
    }

    /// Hardware-resident bits, restricted to rows whose input channel is
    /// still active.
    fn kernel_vectors(&mut self, layer: usize, ids: &[usize]) -> Result<Vec<KernelVector>, PruneError> {
        let net_err = |e: NnError| PruneError::Network(Box::new(e));
        let in_channels = self.hw.layers.get(layer).map(|h| h.in_channels.clone()).unwrap_or_default();
        let keep: Vec<bool> = in_channels
            .iter()
            .flat_map(|&ch| {
                let live = layer == 0 || self.net.convs[layer - 1].active[ch];
                std::iter::repeat_n(live, TAPS)
            })
            .collect();
        ids.iter()
            .map(|&k| {
                let bits = self.hw.kernel_bits(layer, k).map_err(net_err)?;
                let bits = bits.into_iter().zip(&keep).filter(|(_, &live)| live).map(|(b, _)| b).collect();
                Ok(KernelVector::binary((layer, k), bits))
            })
            .collect()
    }

    fn mask_kernels(&mut self, layer: usize, ids: &[usize]) -> Result<(), PruneError> {
        for &k in ids {
            self.net.mask_kernel(layer, k).map_err(|e| PruneError::Network(Box::new(e)))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::NetworkSpec;
    use rand::Rng;

    fn image(seed: u64) -> Vec<u8> {
        let mut rng = substream(seed, 0);
        (0..784).map(|i| if (i / 28 + i % 28) % 5 < 2 { rng.random() } else { 0 }).collect()
    }

    fn setup(seed: u64) -> (Network, Hardware) {
        let net = Network::new(NetworkSpec::task1(), seed).unwrap();
        let mut hw = Hardware::new(&DeviceParams::default(), TimingParams::default(), seed).unwrap();
        hw.program(&net).unwrap();
        (net, hw)
    }

    #[test]
    fn layout_covers_task1() {
        let (_, hw) = setup(1);
        let shape: Vec<(usize, usize)> = hw.layers().iter().map(|l| (l.bands.len(), l.bands[0].tiles.len())).collect();
        assert_eq!(shape, vec![(1, 2), (1, 3), (2, 2)]);
        assert_eq!(hw.blocks().len(), 2 + 3 + 4);
    }

    #[test]
    fn simulated_matches_oracle_bit_for_bit() {
        let (net, mut hw) = setup(2);
        for s in 0..3 {
            let img = image(s);
            let sim = forward_quantized(&net, &img, &mut Backend::Simulated(&mut hw)).unwrap();
            let ora = forward_quantized(&net, &img, &mut Backend::SoftwareOracle).unwrap();
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&sim.logits), bits(&ora.logits));
            assert_eq!(sim.features.last().unwrap().len(), 1568);
        }
    }

    #[test]
    fn pruned_layout_compacts_and_still_matches() {
        let (mut net, mut hw) = setup(3);
        net.mask_kernel(0, 3).unwrap();
        for k in 0..40 {
            net.mask_kernel(1, k).unwrap();
        }
        hw.program(&net).unwrap();
        assert_eq!(hw.layers()[1].in_channels.len(), 31);
        assert_eq!(hw.layers()[2].bands.len(), 1);
        let img = image(9);
        let sim = forward_quantized(&net, &img, &mut Backend::Simulated(&mut hw)).unwrap();
        let ora = forward_quantized(&net, &img, &mut Backend::SoftwareOracle).unwrap();
        assert_eq!(sim.logits, ora.logits);
        assert!(sim.features[1][..40 * 49].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_image_gives_dense_bias() {
        let (mut net, mut hw) = setup(4);
        net.fc_b = (0..10).map(|i| i as f32 * 0.5).collect();
        let out = forward_quantized(&net, &[0; 784], &mut Backend::Simulated(&mut hw)).unwrap();
        assert_eq!(out.logits, net.fc_b);
    }

    #[test]
    fn read_back_bits_equal_binarized_weights() {
        let (net, mut hw) = setup(5);
        for (l, k) in [(0, 31), (1, 40), (2, 7)] {
            assert_eq!(hw.kernel_bits(l, k).unwrap(), net.convs[l].kernel_bits(k));
        }
    }

    #[test]
    fn faulty_cells_are_repaired_before_inference() {
        let (net, mut hw) = setup(6);
        for i in 0..20 {
            hw.block_mut(i % 9).inject_fault(Coord::new(i * 13 % 200, i % 30)).unwrap();
        }
        let report = hw.program(&net).unwrap();
        assert!(report.repaired >= 20);
        let img = image(7);
        let sim = forward_quantized(&net, &img, &mut Backend::Simulated(&mut hw)).unwrap();
        let ora = forward_quantized(&net, &img, &mut Backend::SoftwareOracle).unwrap();
        assert_eq!(sim.logits, ora.logits);
    }
}
