//! The binary CNN and its floating-point training path.
//!
//! Convolutions are 3×3, stride 1, padding 1. A layer computes
//! `α · (sign(W) ⊛ a) + b` with `α = 1/√fan_in` fixed, followed by ReLU and an
//! optional 2×2 max-pool. The dense head stays in floating point. Activations
//! are kept NHWC as `(batch·H·W) × C` matrices so each convolution is one
//! im2col GEMM.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::dense::{argmax, dense_backward, dense_forward, softmax_cross_entropy};
use super::NnError;
use crate::energy::{ops_conv, ops_fc, LayerEntry, NetworkManifest};
use crate::rng::substream;

pub const KERNEL: usize = 3;
/// Clip bound of the straight-through estimator and of the latent weights.
pub const STE_CLIP: f32 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_hw: usize,
    pub convs: Vec<ConvSpec>,
    pub classes: usize,
}

impl NetworkSpec {
    /// 1→32→64→32 binary convolutions on 28×28 inputs, pooling after the
    /// first two, then a 1568→10 dense layer.
    pub fn task1() -> Self {
        Self {
            input_channels: 1,
            input_hw: 28,
            convs: vec![
                ConvSpec { c_in: 1, c_out: 32, pool: true },
                ConvSpec { c_in: 32, c_out: 64, pool: true },
                ConvSpec { c_in: 64, c_out: 32, pool: false },
            ],
            classes: 10,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let mut c = self.input_channels;
        let mut hw = self.input_hw;
        if self.convs.is_empty() || self.classes < 2 || hw == 0 {
            return Err(NnError::Shape("need at least one conv layer, two classes and a non-empty input".into()));
        }
        for (i, l) in self.convs.iter().enumerate() {
            if l.c_in != c || l.c_out == 0 {
                return Err(NnError::Shape(format!("conv{} expects {} input channels, gets {c}", i + 1, l.c_in)));
            }
            if l.pool {
                if !hw.is_multiple_of(2) {
                    return Err(NnError::Shape(format!("conv{} pools an odd {hw}×{hw} map", i + 1)));
                }
                hw /= 2;
            }
            c = l.c_out;
        }
        Ok(())
    }

    /// Input side length of each conv layer (outputs keep it before pooling).
    pub fn conv_hw(&self) -> Vec<usize> {
        let mut hw = self.input_hw;
        self.convs
            .iter()
            .map(|l| {
                let h = hw;
                if l.pool {
                    hw /= 2;
                }
                h
            })
            .collect()
    }

    pub fn output_hw(&self) -> usize {
        let last = self.convs.last().expect("validated");
        let hw = *self.conv_hw().last().expect("validated");
        if last.pool {
            hw / 2
        } else {
            hw
        }
    }

    pub fn flatten_size(&self) -> usize {
        self.convs.last().expect("validated").c_out * self.output_hw().pow(2)
    }

    /// Per-sample `(conv ops, dense ops)` with `active[l]` surviving kernels
    /// per conv layer; a layer's input channels are the previous layer's
    /// survivors.
    pub fn ops(&self, active: &[usize]) -> (u64, u64) {
        let hws = self.conv_hw();
        let mut c_in = self.input_channels;
        let mut conv = 0;
        for (l, &hw) in hws.iter().enumerate() {
            let k = KERNEL as u64;
            conv += ops_conv(c_in as u64, active[l] as u64, k, k, hw as u64, hw as u64);
            c_in = active[l];
        }
        let fc = ops_fc((c_in * self.output_hw().pow(2)) as u64, self.classes as u64);
        (conv, fc)
    }
}

/// Sign binarization: `w ≥ 0 → 1 (+1)`, `w < 0 → 0 (−1)`.
pub fn binarize(weights: &[f32]) -> Vec<bool> {
    weights.iter().map(|&w| w >= 0.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    /// `c_out × (c_in·9)`, columns ordered `(channel, ky, kx)`.
    pub latent: Array2<f32>,
    pub bias: Vec<f32>,
    pub active: Vec<bool>,
    #[serde(skip)]
    vel_w: Option<Array2<f32>>,
    #[serde(skip)]
    vel_b: Option<Vec<f32>>,
}

impl ConvLayer {
    pub fn fan_in(&self) -> usize {
        self.spec.c_in * KERNEL * KERNEL
    }

    pub fn alpha(&self) -> f32 {
        1.0 / (self.fan_in() as f32).sqrt()
    }

    /// Binarized kernel `k`.
    pub fn kernel_bits(&self, k: usize) -> Vec<bool> {
        binarize(self.latent.row(k).as_slice().expect("standard layout"))
    }

    pub fn bit(&self, k: usize, i: usize) -> bool {
        self.latent[[k, i]] >= 0.0
    }

    fn sign_matrix(&self) -> Array2<f32> {
        self.latent.mapv(|w| if w >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Accumulated loss and hits over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub correct: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub convs: Vec<ConvLayer>,
    /// `classes × flatten_size`, inputs ordered `(channel, y, x)`.
    pub fc_w: Vec<f32>,
    pub fc_b: Vec<f32>,
    #[serde(skip)]
    vel_fc: Option<(Vec<f32>, Vec<f32>)>,
}

struct LayerCache {
    cols: Array2<f32>,
    pre: Array2<f32>,
    /// Source row of each pooled element, `(pooled row) * C + c`.
    pool_src: Option<Vec<usize>>,
    hw: usize,
}

fn im2col(act: &Array2<f32>, batch: usize, hw: usize) -> Array2<f32> {
    let c = act.ncols();
    let len = c * KERNEL * KERNEL;
    let mut cols = Array2::<f32>::zeros((batch * hw * hw, len));
    let src = act.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    for b in 0..batch {
        for y in 0..hw {
            for x in 0..hw {
                let row = (b * hw + y) * hw + x;
                let out = &mut dst[row * len..(row + 1) * len];
                for ky in 0..KERNEL {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= hw as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= hw as isize {
                            continue;
                        }
                        let s = ((b * hw + iy as usize) * hw + ix as usize) * c;
                        let off = ky * KERNEL + kx;
                        for ch in 0..c {
                            out[ch * 9 + off] = src[s + ch];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f32>, batch: usize, hw: usize, c: usize) -> Array2<f32> {
    let len = c * KERNEL * KERNEL;
    let mut act = Array2::<f32>::zeros((batch * hw * hw, c));
    let src = dcols.as_slice().expect("standard layout");
    let dst = act.as_slice_mut().expect("standard layout");
    for b in 0..batch {
        for y in 0..hw {
            for x in 0..hw {
                let row = (b * hw + y) * hw + x;
                let g = &src[row * len..(row + 1) * len];
                for ky in 0..KERNEL {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= hw as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= hw as isize {
                            continue;
                        }
                        let d = ((b * hw + iy as usize) * hw + ix as usize) * c;
                        let off = ky * KERNEL + kx;
                        for ch in 0..c {
                            dst[d + ch] += g[ch * 9 + off];
                        }
                    }
                }
            }
        }
    }
    act
}

fn maxpool2(act: &Array2<f32>, batch: usize, hw: usize) -> (Array2<f32>, Vec<usize>) {
    let c = act.ncols();
    let half = hw / 2;
    let mut out = Array2::<f32>::zeros((batch * half * half, c));
    let mut src_rows = vec![0usize; batch * half * half * c];
    for b in 0..batch {
        for y in 0..half {
            for x in 0..half {
                let orow = (b * half + y) * half + x;
                for ch in 0..c {
                    let mut best_row = (b * hw + 2 * y) * hw + 2 * x;
                    let mut best = act[[best_row, ch]];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let r = (b * hw + 2 * y + dy) * hw + 2 * x + dx;
                        if act[[r, ch]] > best {
                            best = act[[r, ch]];
                            best_row = r;
                        }
                    }
                    out[[orow, ch]] = best;
                    src_rows[orow * c + ch] = best_row;
                }
            }
        }
    }
    (out, src_rows)
}

fn momentum_step(p: &mut [f32], v: &mut [f32], g: &[f32], lr: f32, mu: f32) {
    for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}

impl Network {
    /// Random initialization: latent conv weights uniform in `[-0.5, 0.5]`,
    /// dense weights Glorot-uniform, biases zero.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let mut rng = substream(seed, 0x1417);
        let latent_dist = Uniform::new_inclusive(-0.5f32, 0.5).expect("valid range");
        let convs = spec
            .convs
            .iter()
            .map(|s| {
                let len = s.c_in * KERNEL * KERNEL;
                let latent = Array2::from_shape_fn((s.c_out, len), |_| latent_dist.sample(&mut rng));
                ConvLayer {
                    spec: s.clone(),
                    latent,
                    bias: vec![0.0; s.c_out],
                    active: vec![true; s.c_out],
                    vel_w: None,
                    vel_b: None,
                }
            })
            .collect();
        let n_in = spec.flatten_size();
        let limit = (6.0 / (n_in + spec.classes) as f32).sqrt();
        let fc_w = (0..n_in * spec.classes).map(|_| rng.random_range(-limit..limit)).collect();
        let fc_b = vec![0.0; spec.classes];
        Ok(Self { spec, convs, fc_w, fc_b, vel_fc: None })
    }

    pub fn active_counts(&self) -> Vec<usize> {
        self.convs.iter().map(ConvLayer::active_count).collect()
    }

    /// Per-sample `(conv ops, dense ops)` at the current pruning state.
    pub fn ops(&self) -> (u64, u64) {
        self.spec.ops(&self.active_counts())
    }

    /// Layer list for op and energy accounting at the current masks.
    pub fn energy_manifest(&self, name: &str) -> NetworkManifest {
        let hw = self.spec.conv_hw();
        let mut layers = Vec::with_capacity(self.convs.len() + 1);
        let mut active_in = self.spec.input_channels as u64;
        for (l, c) in self.convs.iter().enumerate() {
            let active_out = c.active_count() as u64;
            layers.push(LayerEntry::Conv {
                name: format!("conv{}", l + 1),
                c_in: c.spec.c_in as u64,
                c_out: c.spec.c_out as u64,
                kh: KERNEL as u64,
                kw: KERNEL as u64,
                h_out: hw[l] as u64,
                w_out: hw[l] as u64,
                active_in: Some(active_in),
                active_out: Some(active_out),
            });
            active_in = active_out;
        }
        let out_hw2 = self.spec.output_hw().pow(2) as u64;
        layers.push(LayerEntry::Fc {
            name: "fc".into(),
            w_h: self.spec.flatten_size() as u64,
            w_w: self.spec.classes as u64,
            active_h: Some(active_in * out_hw2),
        });
        NetworkManifest::new(name, layers)
    }

    fn input_matrix(&self, images: &[&[u8]]) -> Result<Array2<f32>, NnError> {
        let px = self.spec.input_hw * self.spec.input_hw * self.spec.input_channels;
        if let Some(bad) = images.iter().find(|i| i.len() != px) {
            return Err(NnError::Shape(format!("image of {} values, expected {px}", bad.len())));
        }
        let c = self.spec.input_channels;
        let hw2 = self.spec.input_hw * self.spec.input_hw;
        // Images are channel-major; rows here are pixels.
        Ok(Array2::from_shape_fn((images.len() * hw2, c), |(r, ch)| {
            let (b, p) = (r / hw2, r % hw2);
            images[b][ch * hw2 + p] as f32 / 255.0
        }))
    }

    fn forward_batch(&self, images: &[&[u8]]) -> Result<(Vec<LayerCache>, Array2<f32>), NnError> {
        let batch = images.len();
        let mut act = self.input_matrix(images)?;
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut hw = self.spec.input_hw;
        for layer in &self.convs {
            let cols = im2col(&act, batch, hw);
            let mut pre = cols.dot(&layer.sign_matrix().t());
            let alpha = layer.alpha();
            for mut row in pre.axis_iter_mut(Axis(0)) {
                for (k, v) in row.iter_mut().enumerate() {
                    *v = if layer.active[k] { alpha * *v + layer.bias[k] } else { 0.0 };
                }
            }
            let out = pre.mapv(|v| v.max(0.0));
            let (next, pool_src) = if layer.spec.pool {
                let (p, src) = maxpool2(&out, batch, hw);
                (p, Some(src))
            } else {
                (out, None)
            };
            caches.push(LayerCache { cols, pre, pool_src, hw });
            if layer.spec.pool {
                hw /= 2;
            }
            act = next;
        }
        Ok((caches, act))
    }

    /// Flattens the last conv output of sample `b` in `(channel, y, x)` order.
    fn flatten(&self, act: &Array2<f32>, b: usize) -> Vec<f32> {
        let hw2 = self.spec.output_hw().pow(2);
        let c = act.ncols();
        let mut feat = vec![0.0; c * hw2];
        for p in 0..hw2 {
            for ch in 0..c {
                feat[ch * hw2 + p] = act[[b * hw2 + p, ch]];
            }
        }
        feat
    }

    pub fn dense_logits(&self, features: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.spec.classes];
        dense_forward(&self.fc_w, &self.fc_b, features, &mut out);
        out
    }

    /// Floating-point logits for a batch.
    pub fn predict_float(&self, images: &[&[u8]]) -> Result<Vec<Vec<f32>>, NnError> {
        let (_, act) = self.forward_batch(images)?;
        Ok((0..images.len()).map(|b| self.dense_logits(&self.flatten(&act, b))).collect())
    }

    /// One SGD-with-momentum step on a batch. Conv gradients pass the sign
    /// function only where `|latent| ≤ 1`; pruned kernels are frozen.
    pub fn train_batch(&mut self, images: &[&[u8]], labels: &[u8], lr: f32, momentum: f32) -> Result<BatchStats, NnError> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(NnError::Shape("batch images and labels differ in length or are empty".into()));
        }
        let batch = images.len();
        let (caches, act) = self.forward_batch(images)?;
        let n_feat = self.spec.flatten_size();
        let classes = self.spec.classes;
        let mut stats = BatchStats { samples: batch, ..Default::default() };
        let mut g_fc_w = vec![0.0f32; self.fc_w.len()];
        let mut g_fc_b = vec![0.0f32; classes];
        let hw2 = self.spec.output_hw().pow(2);
        let c_last = act.ncols();
        let mut d_act = Array2::<f32>::zeros(act.raw_dim());
        let mut d_feat = vec![0.0f32; n_feat];
        for b in 0..batch {
            let feat = self.flatten(&act, b);
            let logits = self.dense_logits(&feat);
            let (loss, grad) = softmax_cross_entropy(&logits, labels[b] as usize);
            stats.loss += loss as f64;
            stats.correct += (argmax(&logits) == labels[b] as usize) as usize;
            let grad: Vec<f32> = grad.iter().map(|g| g / batch as f32).collect();
            dense_backward(&self.fc_w, &feat, &grad, &mut g_fc_w, &mut g_fc_b, Some(&mut d_feat));
            for p in 0..hw2 {
                for ch in 0..c_last {
                    d_act[[b * hw2 + p, ch]] = d_feat[ch * hw2 + p];
                }
            }
        }

        let mut grads = Vec::with_capacity(self.convs.len());
        for (l, cache) in caches.iter().enumerate().rev() {
            let layer = &self.convs[l];
            let mut d_pre = match &cache.pool_src {
                Some(src) => {
                    let mut d = Array2::<f32>::zeros(cache.pre.raw_dim());
                    let c = d.ncols();
                    for (i, &g) in d_act.iter().enumerate() {
                        d[[src[i], i % c]] += g;
                    }
                    d
                }
                None => d_act,
            };
            d_pre.zip_mut_with(&cache.pre, |d, &p| {
                if p <= 0.0 {
                    *d = 0.0;
                }
            });
            let alpha = layer.alpha();
            let mut g_w = d_pre.t().dot(&cache.cols);
            g_w.mapv_inplace(|g| g * alpha);
            let g_b: Vec<f32> = d_pre.sum_axis(Axis(0)).to_vec();
            d_act = if l > 0 {
                let mut d_cols = d_pre.dot(&layer.sign_matrix());
                d_cols.mapv_inplace(|g| g * alpha);
                col2im(&d_cols, batch, cache.hw, layer.spec.c_in)
            } else {
                Array2::zeros((0, 0))
            };
            grads.push((l, g_w, g_b));
        }

        for (l, mut g_w, mut g_b) in grads {
            let layer = &mut self.convs[l];
            for (k, mut row) in g_w.axis_iter_mut(Axis(0)).enumerate() {
                if !layer.active[k] {
                    row.fill(0.0);
                    g_b[k] = 0.0;
                    continue;
                }
                for (g, &w) in row.iter_mut().zip(layer.latent.row(k)) {
                    if w.abs() > STE_CLIP {
                        *g = 0.0;
                    }
                }
            }
            let vel_w = layer.vel_w.get_or_insert_with(|| Array2::zeros(layer.latent.raw_dim()));
            momentum_step(
                layer.latent.as_slice_mut().expect("standard layout"),
                vel_w.as_slice_mut().expect("standard layout"),
                g_w.as_slice().expect("standard layout"),
                lr,
                momentum,
            );
            let vel_b = layer.vel_b.get_or_insert_with(|| vec![0.0; layer.bias.len()]);
            momentum_step(&mut layer.bias, vel_b, &g_b, lr, momentum);
            for (k, mut row) in layer.latent.axis_iter_mut(Axis(0)).enumerate() {
                if layer.active[k] {
                    row.mapv_inplace(|w| w.clamp(-STE_CLIP, STE_CLIP));
                }
            }
        }
        let (vw, vb) = self.vel_fc.get_or_insert_with(|| (vec![0.0; g_fc_w.len()], vec![0.0; classes]));
        momentum_step(&mut self.fc_w, vw, &g_fc_w, lr, momentum);
        momentum_step(&mut self.fc_b, vb, &g_fc_b, lr, momentum);
        Ok(stats)
    }

    /// Drops kernel `k` of conv layer `l`. Its velocity is cleared so it
    /// stays frozen.
    pub fn mask_kernel(&mut self, l: usize, k: usize) -> Result<(), NnError> {
        let layer = self.convs.get_mut(l).ok_or_else(|| NnError::Shape(format!("no conv layer {l}")))?;
        if k >= layer.active.len() {
            return Err(NnError::Shape(format!("conv layer {l} has no kernel {k}")));
        }
        layer.active[k] = false;
        if let Some(v) = layer.vel_w.as_mut() {
            v.row_mut(k).fill(0.0);
        }
        Ok(())
    }
}
