use rand::RngCore;

use super::{cim_dot, BitsliceError, BlockSet, StoredColumn};
use crate::array::YieldReport;

/// Channel-major integer feature map, `data[(c * h + y) * w + x]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Int8Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<i64>,
}

impl Int8Map {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<i64>) -> Result<Self, BitsliceError> {
        if data.len() != c * h * w {
            return Err(BitsliceError::ShapeMismatch(format!("{} values for a {c}x{h}x{w} map", data.len())));
        }
        Ok(Self { c, h, w, data })
    }

    /// Zero outside the map (implicit padding).
    fn at(&self, c: usize, y: isize, x: isize) -> i64 {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            0
        } else {
            self.data[(c * self.h + y as usize) * self.w + x as usize]
        }
    }
}

/// Output of a convolution over the active kernels only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMap {
    /// Kernel id of each output channel.
    pub channels: Vec<usize>,
    pub h: usize,
    pub w: usize,
    pub data: Vec<i64>,
}

impl FeatureMap {
    pub fn get(&self, channel: usize, y: usize, x: usize) -> i64 {
        self.data[(channel * self.h + y) * self.w + x]
    }
}

/// A kernel set stored column-per-kernel, each flattened `(c_in, kh, kw)`.
#[derive(Debug, Clone)]
pub struct StoredKernels {
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub columns: Vec<StoredColumn>,
    pub active: Vec<bool>,
}

impl StoredKernels {
    pub fn store<R: RngCore + ?Sized>(
        set: &mut BlockSet,
        kernels: &[Vec<i64>],
        (c_in, kh, kw): (usize, usize, usize),
        rng: &mut R,
    ) -> Result<(Self, YieldReport), BitsliceError> {
        let len = c_in * kh * kw;
        if len == 0 {
            return Err(BitsliceError::ShapeMismatch("empty kernel".into()));
        }
        if let Some(k) = kernels.iter().find(|k| k.len() != len) {
            return Err(BitsliceError::ShapeMismatch(format!("kernel of {} values, expected {len}", k.len())));
        }
        let mut report = YieldReport::default();
        let mut columns = Vec::with_capacity(kernels.len());
        for k in kernels {
            let (col, r) = set.store_column(k, rng)?;
            report.merge(&r);
            columns.push(col);
        }
        let active = vec![true; kernels.len()];
        Ok((Self { c_in, kh, kw, columns, active }, report))
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

fn out_dim(n: usize, k: usize, stride: usize, padding: usize) -> Result<usize, BitsliceError> {
    if stride == 0 || n + 2 * padding < k {
        return Err(BitsliceError::ShapeMismatch(format!(
            "kernel {k} does not fit input {n} with padding {padding} and stride {stride}"
        )));
    }
    Ok((n + 2 * padding - k) / stride + 1)
}

/// Convolution lowered to one `cim_dot` per (output pixel, active kernel):
/// the receptive field is gathered im2col-style in `(c, ky, kx)` order.
/// Pruned kernels produce no output channel and issue no operations.
pub fn conv2d_lowered(
    input: &Int8Map,
    kernels: &StoredKernels,
    stride: usize,
    padding: usize,
    set: &mut BlockSet,
) -> Result<FeatureMap, BitsliceError> {
    if input.c != kernels.c_in {
        return Err(BitsliceError::ShapeMismatch(format!("input has {} channels, kernels expect {}", input.c, kernels.c_in)));
    }
    let h = out_dim(input.h, kernels.kh, stride, padding)?;
    let w = out_dim(input.w, kernels.kw, stride, padding)?;
    let channels: Vec<usize> = (0..kernels.len()).filter(|&k| kernels.active[k]).collect();
    let mut data = vec![0i64; channels.len() * h * w];
    let mut patch = Vec::with_capacity(kernels.c_in * kernels.kh * kernels.kw);
    for y in 0..h {
        for x in 0..w {
            patch.clear();
            for c in 0..input.c {
                for ky in 0..kernels.kh {
                    for kx in 0..kernels.kw {
                        let iy = (y * stride + ky) as isize - padding as isize;
                        let ix = (x * stride + kx) as isize - padding as isize;
                        patch.push(input.at(c, iy, ix));
                    }
                }
            }
            for (o, &k) in channels.iter().enumerate() {
                data[(o * h + y) * w + x] = cim_dot(set, &patch, &kernels.columns[k])?.value();
            }
        }
    }
    Ok(FeatureMap { channels, h, w, data })
}

/// Direct nested-loop integer convolution over the active kernels.
pub fn conv2d_oracle(
    input: &Int8Map,
    kernels: &[Vec<i64>],
    active: &[bool],
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<FeatureMap, BitsliceError> {
    let h = out_dim(input.h, kh, stride, padding)?;
    let w = out_dim(input.w, kw, stride, padding)?;
    let channels: Vec<usize> = (0..kernels.len()).filter(|&k| active[k]).collect();
    let mut data = Vec::with_capacity(channels.len() * h * w);
    for &k in &channels {
        let weight = |c: usize, ky: usize, kx: usize| kernels[k][(c * kh + ky) * kw + kx];
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0i64;
                for c in 0..input.c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * stride + ky) as isize - padding as isize;
                            let ix = (x * stride + kx) as isize - padding as isize;
                            sum += weight(c, ky, kx) * input.at(c, iy, ix);
                        }
                    }
                }
                data.push(sum);
            }
        }
    }
    Ok(FeatureMap { channels, h, w, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::TimingParams;
    use crate::device::DeviceParams;
    use crate::rng::substream;
    use rand::Rng;

    fn set(seed: u64) -> BlockSet {
        BlockSet::new(DeviceParams::default(), TimingParams::default(), seed).unwrap()
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut s = set(1);
        let input = Int8Map::new(1, 3, 4, (0..12).map(|v| v - 6).collect()).unwrap();
        let (k, _) = StoredKernels::store(&mut s, &[vec![1]], (1, 1, 1), &mut substream(1, 0)).unwrap();
        let out = conv2d_lowered(&input, &k, 1, 0, &mut s).unwrap();
        assert_eq!(out.data, input.data);
    }

    #[test]
    fn all_ones_kernel_sums_patch() {
        let mut s = set(2);
        let input = Int8Map::new(1, 3, 3, vec![1; 9]).unwrap();
        let (k, _) = StoredKernels::store(&mut s, &[vec![1; 9]], (1, 3, 3), &mut substream(2, 0)).unwrap();
        let out = conv2d_lowered(&input, &k, 1, 0, &mut s).unwrap();
        assert_eq!((out.h, out.w, out.data.clone()), (1, 1, vec![9]));
    }

    #[test]
    fn random_conv_matches_oracle() {
        let mut s = set(3);
        let mut rng = substream(3, 0);
        let input = Int8Map::new(2, 8, 8, (0..128).map(|_| rng.random_range(-127..=127)).collect()).unwrap();
        let kernels: Vec<Vec<i64>> = (0..4).map(|_| (0..18).map(|_| rng.random_range(-127..=127)).collect()).collect();
        let (mut stored, _) = StoredKernels::store(&mut s, &kernels, (2, 3, 3), &mut rng).unwrap();
        for (stride, pad) in [(1, 1), (2, 0)] {
            let got = conv2d_lowered(&input, &stored, stride, pad, &mut s).unwrap();
            let want = conv2d_oracle(&input, &kernels, &[true; 4], (3, 3), stride, pad).unwrap();
            assert_eq!(got, want);
        }
        stored.active[2] = false;
        let before = s.ledger().snapshot();
        let got = conv2d_lowered(&input, &stored, 1, 1, &mut s).unwrap();
        assert_eq!(got.channels, vec![0, 1, 3]);
        assert_eq!(s.ledger().snapshot().since(&before).macs, 3 * 64 * 18);
        assert_eq!(got, conv2d_oracle(&input, &kernels, &stored.active, (3, 3), 1, 1).unwrap());
    }

    #[test]
    fn shape_errors() {
        let mut s = set(4);
        let (k, _) = StoredKernels::store(&mut s, &[vec![1; 9]], (1, 3, 3), &mut substream(4, 0)).unwrap();
        let two_channel = Int8Map::new(2, 3, 3, vec![0; 18]).unwrap();
        assert!(conv2d_lowered(&two_channel, &k, 1, 0, &mut s).is_err());
        let small = Int8Map::new(1, 2, 2, vec![0; 4]).unwrap();
        assert!(conv2d_lowered(&small, &k, 1, 0, &mut s).is_err());
        assert!(Int8Map::new(1, 2, 2, vec![0; 3]).is_err());
        assert!(StoredKernels::store(&mut s, &[vec![1; 8]], (1, 3, 3), &mut substream(4, 1)).is_err());
    }
}
