//! Multi-level feature bank over randomly sampled 3D sub-volumes.
//!
//! A fixed-seed strided convolutional encoder stands in for a pretrained
//! medical foundation encoder. Four descriptor families are read off its
//! input and stage maps: block energies of the input, per-channel
//! mean/standard deviation of every stage, the per-site vectors of the
//! deepest stage, and window-pooled maps of a mid-level stage.

use ndarray::{s, Array3, Array4, Array5, ArrayView3, ArrayView4, ArrayView5, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::affinity::{FamilyId, FeatureTriplet};
use crate::error::{ensure_finite, DriftError, Result};

/// A single-channel 3D image with intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f64>,
    /// Voxel spacing in millimetres, when known.
    pub voxel_size: Option<[f64; 3]>,
}

impl Volume {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (d, h, w) = data.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(DriftError::invalid(format!("volume has empty shape {:?}", data.dim())));
        }
        ensure_finite(data.iter(), "volume")?;
        Ok(Volume {
            data,
            voxel_size: None,
        })
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// Patches cut from one or more volumes, stacked as `N x d x h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubVolumeBatch {
    pub patches: Array4<f64>,
    /// Corner of each patch inside its parent volume.
    pub origins: Vec<[usize; 3]>,
    /// Index of the parent volume of each patch.
    pub sources: Vec<usize>,
    pub seed: u64,
}

impl SubVolumeBatch {
    pub fn len(&self) -> usize {
        self.patches.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_shape(&self) -> [usize; 3] {
        let (_, d, h, w) = self.patches.dim();
        [d, h, w]
    }

    /// Cuts patches at the same origins from a different set of volumes,
    /// so that paired images are sampled at identical locations.
    pub fn resample_from(&self, volumes: &[Volume]) -> Result<SubVolumeBatch> {
        let shape = self.patch_shape();
        let mut patches = Array4::zeros(self.patches.dim());
        for (i, (origin, &src)) in self.origins.iter().zip(&self.sources).enumerate() {
            let vol = volumes
                .get(src)
                .ok_or_else(|| DriftError::invalid(format!("no volume {src} to resample from")))?;
            patches
                .index_axis_mut(Axis(0), i)
                .assign(&extract_patch(vol.data.view(), *origin, shape)?);
        }
        Ok(SubVolumeBatch {
            patches,
            origins: self.origins.clone(),
            sources: self.sources.clone(),
            seed: self.seed,
        })
    }

    /// Batch with patch `i` replaced by patch `(i + shift) mod N`.
    pub fn cyclic_shift(&self, shift: usize) -> SubVolumeBatch {
        let n = self.len();
        let idx: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        SubVolumeBatch {
            patches: self.patches.select(Axis(0), &idx),
            origins: idx.iter().map(|&i| self.origins[i]).collect(),
            sources: idx.iter().map(|&i| self.sources[i]).collect(),
            seed: self.seed,
        }
    }
}

fn extract_patch(vol: ArrayView3<f64>, origin: [usize; 3], shape: [usize; 3]) -> Result<Array3<f64>> {
    let (d, h, w) = vol.dim();
    let [oz, oy, ox] = origin;
    if oz + shape[0] > d || oy + shape[1] > h || ox + shape[2] > w {
        return Err(DriftError::invalid(format!(
            "patch {shape:?} at {origin:?} exceeds volume {:?}",
            vol.dim()
        )));
    }
    Ok(vol
        .slice(s![oz..oz + shape[0], oy..oy + shape[1], ox..ox + shape[2]])
        .to_owned())
}

/// Draws `count` patch origins uniformly inside a volume of `dims`.
pub fn sample_origins(dims: [usize; 3], count: usize, shape: [usize; 3], seed: u64) -> Result<Vec<[usize; 3]>> {
    if (0..3).any(|a| shape[a] == 0 || shape[a] > dims[a]) {
        return Err(DriftError::invalid(format!(
            "sub-volume {shape:?} does not fit in volume {dims:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            [
                rng.random_range(0..=dims[0] - shape[0]),
                rng.random_range(0..=dims[1] - shape[1]),
                rng.random_range(0..=dims[2] - shape[2]),
            ]
        })
        .collect())
}

/// Samples `count` sub-volumes of `shape` at seeded uniform origins.
pub fn sample_subvolumes(v: &Volume, count: usize, shape: [usize; 3], seed: u64) -> Result<SubVolumeBatch> {
    sample_batch_subvolumes(std::slice::from_ref(v), count, shape, seed)
}

/// Samples `count` sub-volumes from each volume. Volume `b` uses its own
/// origin stream derived from `seed` and `b`, so equally shaped paired
/// volume sets sampled with the same seed share origins.
pub fn sample_batch_subvolumes(
    volumes: &[Volume],
    count: usize,
    shape: [usize; 3],
    seed: u64,
) -> Result<SubVolumeBatch> {
    if volumes.is_empty() || count == 0 {
        return Err(DriftError::invalid("need at least one volume and one sub-volume"));
    }
    let total = volumes.len() * count;
    let mut patches = Array4::zeros((total, shape[0], shape[1], shape[2]));
    let mut origins = Vec::with_capacity(total);
    let mut sources = Vec::with_capacity(total);
    for (b, vol) in volumes.iter().enumerate() {
        let (d, h, w) = vol.dim();
        let stream_seed = seed ^ (b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for origin in sample_origins([d, h, w], count, shape, stream_seed)? {
            let i = origins.len();
            patches
                .index_axis_mut(Axis(0), i)
                .assign(&extract_patch(vol.data.view(), origin, shape)?);
            origins.push(origin);
            sources.push(b);
        }
    }
    Ok(SubVolumeBatch {
        patches,
        origins,
        sources,
        seed,
    })
}

/// Architecture of the surrogate encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output channels of each stage.
    pub channels: Vec<usize>,
    pub stride: usize,
    pub negative_slope: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: vec![8, 16, 32],
            stride: 2,
            negative_slope: 0.1,
            seed: 1234,
        }
    }
}

pub(crate) const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL * KERNEL;

/// Fixed-weight stack of 3x3x3 cross-correlations (padding 1) with leaky
/// rectification. No biases, no trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    /// Stage kernels shaped `C_out x C_in x 3 x 3 x 3`.
    kernels: Vec<Array5<f64>>,
    stride: usize,
    negative_slope: f64,
}

/// Forward trace of the encoder over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStages {
    /// Post-activation maps, stage `s` shaped `N x C_s x D_s x H_s x W_s`.
    pub stages: Vec<Array5<f64>>,
    /// Pre-activation maps, kept for the adjoint.
    pub pre: Vec<Array5<f64>>,
    pub seed: u64,
}

impl EncoderStages {
    pub fn deepest(&self) -> &Array5<f64> {
        self.stages.last().expect("encoder has at least one stage")
    }
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.channels.contains(&0) {
            return Err(DriftError::invalid("encoder needs nonempty, nonzero channel counts"));
        }
        if cfg.stride == 0 {
            return Err(DriftError::invalid("encoder stride must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut kernels = Vec::with_capacity(cfg.channels.len());
        let mut cin = 1;
        for &cout in &cfg.channels {
            let scale = 1.0 / ((cin * TAPS) as f64).sqrt();
            let k = Array5::from_shape_fn((cout, cin, KERNEL, KERNEL, KERNEL), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            });
            kernels.push(k);
            cin = cout;
        }
        Ok(Encoder {
            kernels,
            stride: cfg.stride,
            negative_slope: cfg.negative_slope,
        })
    }

    /// Encoder with explicit kernels; each kernel is `C_out x C_in x 3 x 3 x 3`
    /// and stage `0` takes a single input channel.
    pub fn from_kernels(kernels: Vec<Array5<f64>>, stride: usize, negative_slope: f64) -> Result<Self> {
        if kernels.is_empty() || stride == 0 {
            return Err(DriftError::invalid("encoder needs kernels and a positive stride"));
        }
        let mut cin = 1;
        for k in &kernels {
            let (cout, kin, a, b, c) = k.dim();
            if kin != cin || (a, b, c) != (KERNEL, KERNEL, KERNEL) || cout == 0 {
                return Err(DriftError::shape(format!("kernel {:?} after {cin} channels", k.dim())));
            }
            cin = cout;
        }
        Ok(Encoder {
            kernels,
            stride,
            negative_slope,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.kernels.len()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.kernels.iter().map(|k| k.dim().0).collect()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Spatial dims of every stage for a given patch shape.
    pub fn stage_dims(&self, patch: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let total = self.stride.pow(self.kernels.len() as u32);
        if patch.iter().any(|&d| d == 0 || d % total != 0) {
            return Err(DriftError::invalid(format!(
                "patch {patch:?} is not divisible by the cumulative stride {total}"
            )));
        }
        let mut dims = Vec::with_capacity(self.kernels.len());
        let mut cur = patch;
        for _ in &self.kernels {
            cur = cur.map(|d| d / self.stride);
            dims.push(cur);
        }
        Ok(dims)
    }

    /// Runs all stages on every patch of the batch.
    pub fn encode(&self, patches: ArrayView4<f64>) -> Result<EncoderStages> {
        let (n, d, h, w) = patches.dim();
        let dims = self.stage_dims([d, h, w])?;
        let mut stages = Vec::with_capacity(dims.len());
        let mut pre = Vec::with_capacity(dims.len());
        let mut input: Array5<f64> = patches
            .to_owned()
            .into_shape_with_order((n, 1, d, h, w))
            .map_err(|e| DriftError::shape(e.to_string()))?;
        for (k, od) in self.kernels.iter().zip(&dims) {
            let cout = k.dim().0;
            let mut z = Array5::zeros((n, cout, od[0], od[1], od[2]));
            for i in 0..n {
                let x = input.index_axis(Axis(0), i);
                let mut zi = z.index_axis_mut(Axis(0), i);
                conv_forward(
                    x.as_slice().expect("standard layout"),
                    x.dim(),
                    k.as_slice().expect("standard layout"),
                    cout,
                    self.stride,
                    zi.as_slice_mut().expect("standard layout"),
                    *od,
                );
            }
            let slope = self.negative_slope;
            let a = z.mapv(|v| if v > 0.0 { v } else { slope * v });
            pre.push(z);
            input = a.clone();
            stages.push(a);
        }
        Ok(EncoderStages {
            stages,
            pre,
            seed: 0,
        })
    }

    /// Adjoint of [`Encoder::encode`]: pulls cotangents on every stage output
    /// back to the input patches. Stages without a cotangent pass `None`.
    pub fn vjp(&self, trace: &EncoderStages, cotangents: &[Option<Array5<f64>>]) -> Result<Array4<f64>> {
        if trace.stages.len() != self.kernels.len() || cotangents.len() != self.kernels.len() {
            return Err(DriftError::invalid(format!(
                "encoder has {} stages, trace {}, cotangents {}",
                self.kernels.len(),
                trace.stages.len(),
                cotangents.len()
            )));
        }
        for (s, (g, a)) in cotangents.iter().zip(&trace.stages).enumerate() {
            if let Some(g) = g {
                if g.dim() != a.dim() {
                    return Err(DriftError::shape(format!(
                        "stage {s} cotangent {:?} vs map {:?}",
                        g.dim(),
                        a.dim()
                    )));
                }
            }
        }
        let n = trace.stages[0].dim().0;
        let mut carry: Option<Array5<f64>> = None;
        for s in (0..self.kernels.len()).rev() {
            let mut g = match (&cotangents[s], carry.take()) {
                (Some(a), Some(b)) => a + &b,
                (Some(a), None) => a.clone(),
                (None, Some(b)) => b,
                (None, None) => Array5::zeros(trace.stages[s].dim()),
            };
            let slope = self.negative_slope;
            ndarray::Zip::from(&mut g)
                .and(&trace.pre[s])
                .for_each(|gv, &z| {
                    if z <= 0.0 {
                        *gv *= slope;
                    }
                });
            let (_, _, dz, dy, dx) = g.dim();
            let in_dims = [dz * self.stride, dy * self.stride, dx * self.stride];
            let cin = self.kernels[s].dim().1;
            let mut gin = Array5::zeros((n, cin, in_dims[0], in_dims[1], in_dims[2]));
            for i in 0..n {
                let gi = g.index_axis(Axis(0), i);
                let mut out = gin.index_axis_mut(Axis(0), i);
                let od = gi.dim();
                conv_transpose(
                    gi.as_slice().expect("standard layout"),
                    (od.0, od.1, od.2, od.3),
                    self.kernels[s].as_slice().expect("standard layout"),
                    cin,
                    self.stride,
                    out.as_slice_mut().expect("standard layout"),
                    in_dims,
                );
            }
            carry = Some(gin);
        }
        let gin = carry.expect("at least one stage");
        let (n, _, d, h, w) = gin.dim();
        gin.into_shape_with_order((n, d, h, w))
            .map_err(|e| DriftError::shape(e.to_string()))
    }
}

/// Strided 3x3x3 cross-correlation with zero padding 1 for one sample.
fn conv_forward(
    input: &[f64],
    in_dims: (usize, usize, usize, usize),
    kernel: &[f64],
    cout: usize,
    stride: usize,
    out: &mut [f64],
    od: [usize; 3],
) {
    let (cin, d, h, w) = in_dims;
    let [oz_n, oy_n, ox_n] = od;
    for co in 0..cout {
        let out_c = &mut out[co * oz_n * oy_n * ox_n..(co + 1) * oz_n * oy_n * ox_n];
        for ci in 0..cin {
            let in_c = &input[ci * d * h * w..(ci + 1) * d * h * w];
            for kz in 0..KERNEL {
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let wv = kernel[(((co * cin + ci) * KERNEL + kz) * KERNEL + ky) * KERNEL + kx];
                        for oz in 0..oz_n {
                            let iz = (oz * stride + kz) as isize - 1;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for oy in 0..oy_n {
                                let iy = (oy * stride + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let in_row = (iz as usize * h + iy as usize) * w;
                                let out_row = (oz * oy_n + oy) * ox_n;
                                for ox in 0..ox_n {
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    out_c[out_row + ox] += wv * in_c[in_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of [`conv_forward`]: scatters output cotangents to the input.
fn conv_transpose(
    g_out: &[f64],
    out_dims: (usize, usize, usize, usize),
    kernel: &[f64],
    cin: usize,
    stride: usize,
    g_in: &mut [f64],
    in_dims: [usize; 3],
) {
    let (cout, oz_n, oy_n, ox_n) = out_dims;
    let [d, h, w] = in_dims;
    for co in 0..cout {
        let g_c = &g_out[co * oz_n * oy_n * ox_n..(co + 1) * oz_n * oy_n * ox_n];
        for ci in 0..cin {
            let in_c = &mut g_in[ci * d * h * w..(ci + 1) * d * h * w];
            for kz in 0..KERNEL {
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let wv = kernel[(((co * cin + ci) * KERNEL + kz) * KERNEL + ky) * KERNEL + kx];
                        for oz in 0..oz_n {
                            let iz = (oz * stride + kz) as isize - 1;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for oy in 0..oy_n {
                                let iy = (oy * stride + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let in_row = (iz as usize * h + iy as usize) * w;
                                let out_row = (oz * oy_n + oy) * ox_n;
                                for ox in 0..ox_n {
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    in_c[in_row + ix as usize] += wv * g_c[out_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Which families the bank produces and how they are read off the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    pub encoder: EncoderConfig,
    /// Energy blocks per axis.
    pub energy_blocks: usize,
    /// Stages feeding the global statistics.
    pub global_stages: Vec<usize>,
    /// Stage pooled by the spatial families.
    pub spatial_stage: usize,
    pub energy: bool,
    pub global: bool,
    pub local: bool,
    pub spatial_2: bool,
    pub spatial_4: bool,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            encoder: EncoderConfig::default(),
            energy_blocks: 4,
            global_stages: vec![0, 1, 2],
            spatial_stage: 1,
            energy: true,
            global: true,
            local: true,
            spatial_2: true,
            spatial_4: true,
        }
    }
}

impl BankConfig {
    pub fn enabled_families(&self) -> Vec<FamilyId> {
        FamilyId::BANK
            .into_iter()
            .filter(|f| match f {
                FamilyId::Energy => self.energy,
                FamilyId::Global => self.global,
                FamilyId::Local => self.local,
                FamilyId::Spatial2 => self.spatial_2,
                FamilyId::Spatial4 => self.spatial_4,
                FamilyId::Raw => false,
            })
            .collect()
    }

    /// Bank with only `family` switched on.
    pub fn only(&self, family: FamilyId) -> BankConfig {
        BankConfig {
            energy: family == FamilyId::Energy,
            global: family == FamilyId::Global,
            local: family == FamilyId::Local,
            spatial_2: family == FamilyId::Spatial2,
            spatial_4: family == FamilyId::Spatial4,
            ..self.clone()
        }
    }

    pub fn validate(&self, encoder: &Encoder) -> Result<()> {
        let s = encoder.num_stages();
        if self.global_stages.iter().any(|&g| g >= s) || self.spatial_stage >= s {
            return Err(DriftError::invalid(format!(
                "bank refers to a stage beyond the encoder's {s}"
            )));
        }
        if self.energy_blocks == 0 {
            return Err(DriftError::invalid("energy_blocks must be positive"));
        }
        if self.global && self.global_stages.is_empty() {
            return Err(DriftError::invalid("global family enabled without stages"));
        }
        Ok(())
    }
}

/// Per-block root-mean-square intensity: `N x blocks³ x 1`.
pub fn energy_descriptors(patches: ArrayView4<f64>, blocks: usize) -> Result<Array3<f64>> {
    let (n, d, h, w) = patches.dim();
    if blocks == 0 || d % blocks != 0 || h % blocks != 0 || w % blocks != 0 {
        return Err(DriftError::invalid(format!(
            "patch ({d}, {h}, {w}) cannot be tiled by {blocks} blocks per axis"
        )));
    }
    let (bd, bh, bw) = (d / blocks, h / blocks, w / blocks);
    let k = (bd * bh * bw) as f64;
    let mut out = Array3::zeros((n, blocks * blocks * blocks, 1));
    for i in 0..n {
        for (m, [bz, by, bx]) in block_iter(blocks).enumerate() {
            let block = patches.slice(s![i, bz * bd..(bz + 1) * bd, by * bh..(by + 1) * bh, bx * bw..(bx + 1) * bw]);
            out[[i, m, 0]] = (block.iter().map(|v| v * v).sum::<f64>() / k).sqrt();
        }
    }
    Ok(out)
}

fn block_iter(blocks: usize) -> impl Iterator<Item = [usize; 3]> {
    (0..blocks).flat_map(move |z| (0..blocks).flat_map(move |y| (0..blocks).map(move |x| [z, y, x])))
}

/// Per-channel spatial mean and population standard deviation of the
/// selected stages, interleaved as `(mean, std)` per channel: `N x 1 x C`.
pub fn global_descriptors(e: &EncoderStages, selected: &[usize]) -> Result<Array3<f64>> {
    if selected.is_empty() || selected.iter().any(|&s| s >= e.stages.len()) {
        return Err(DriftError::invalid(format!("invalid global stage selection {selected:?}")));
    }
    let n = e.stages[0].dim().0;
    let c_total: usize = selected.iter().map(|&s| e.stages[s].dim().1).sum();
    let mut out = Array3::zeros((n, 1, 2 * c_total));
    for i in 0..n {
        let mut col = 0;
        for &s in selected {
            let maps = e.stages[s].index_axis(Axis(0), i);
            for ch in maps.outer_iter() {
                let k = ch.len() as f64;
                let mean = ch.sum() / k;
                let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
                out[[i, 0, col]] = mean;
                out[[i, 0, col + 1]] = var.sqrt();
                col += 2;
            }
        }
    }
    Ok(out)
}

/// Every site of the deepest stage as one location: `N x (D·H·W) x C`.
pub fn local_descriptors(e: &EncoderStages) -> Result<Array3<f64>> {
    let deep = e
        .stages
        .last()
        .ok_or_else(|| DriftError::invalid("encoder trace has no stages"))?;
    let (n, c, d, h, w) = deep.dim();
    let sites = d * h * w;
    let mut out = Array3::zeros((n, sites, c));
    for i in 0..n {
        for ch in 0..c {
            for (site, &v) in deep.slice(s![i, ch, .., .., ..]).iter().enumerate() {
                out[[i, site, ch]] = v;
            }
        }
    }
    Ok(out)
}

/// Non-overlapping `window³` mean pooling of a stage: `N x windows x C`.
pub fn spatial_descriptors(stage: ArrayView5<f64>, window: usize) -> Result<Array3<f64>> {
    let (n, c, d, h, w) = stage.dim();
    if window == 0 || d % window != 0 || h % window != 0 || w % window != 0 {
        return Err(DriftError::invalid(format!(
            "stage ({d}, {h}, {w}) is not divisible by window {window}"
        )));
    }
    let (pd, ph, pw) = (d / window, h / window, w / window);
    let k = (window * window * window) as f64;
    let mut out = Array3::zeros((n, pd * ph * pw, c));
    for i in 0..n {
        for ch in 0..c {
            let map = stage.slice(s![i, ch, .., .., ..]);
            let mut m = 0;
            for z in 0..pd {
                for y in 0..ph {
                    for x in 0..pw {
                        let win = map.slice(s![
                            z * window..(z + 1) * window,
                            y * window..(y + 1) * window,
                            x * window..(x + 1) * window
                        ]);
                        out[[i, m, ch]] = win.sum() / k;
                        m += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Encoder trace and per-family descriptors of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub stages: EncoderStages,
    pub features: Vec<(FamilyId, Array3<f64>)>,
}

impl Extraction {
    pub fn get(&self, family: FamilyId) -> Option<&Array3<f64>> {
        self.features.iter().find(|(f, _)| *f == family).map(|(_, x)| x)
    }
}

/// Runs the encoder and every enabled descriptor on a batch.
pub fn extract_features(encoder: &Encoder, batch: &SubVolumeBatch, cfg: &BankConfig) -> Result<Extraction> {
    cfg.validate(encoder)?;
    ensure_finite(batch.patches.iter(), "sub-volume patches")?;
    let mut stages = encoder.encode(batch.patches.view())?;
    stages.seed = batch.seed;
    let mut features = Vec::new();
    for family in cfg.enabled_families() {
        let x = match family {
            FamilyId::Energy => energy_descriptors(batch.patches.view(), cfg.energy_blocks)?,
            FamilyId::Global => global_descriptors(&stages, &cfg.global_stages)?,
            FamilyId::Local => local_descriptors(&stages)?,
            FamilyId::Spatial2 => spatial_descriptors(stages.stages[cfg.spatial_stage].view(), 2)?,
            FamilyId::Spatial4 => spatial_descriptors(stages.stages[cfg.spatial_stage].view(), 4)?,
            FamilyId::Raw => unreachable!("raw is not a bank family"),
        };
        features.push((family, x));
    }
    Ok(Extraction { stages, features })
}

/// One triplet per enabled family from generated, positive and negative
/// batches.
pub fn build_feature_bank(
    encoder: &Encoder,
    gen: &SubVolumeBatch,
    pos: &SubVolumeBatch,
    neg: &SubVolumeBatch,
    cfg: &BankConfig,
) -> Result<(Extraction, Vec<FeatureTriplet>)> {
    if gen.patches.dim() != pos.patches.dim() || gen.patches.dim() != neg.patches.dim() {
        return Err(DriftError::shape(format!(
            "batches differ: gen {:?}, pos {:?}, neg {:?}",
            gen.patches.dim(),
            pos.patches.dim(),
            neg.patches.dim()
        )));
    }
    let g = extract_features(encoder, gen, cfg)?;
    let p = extract_features(encoder, pos, cfg)?;
    let q = extract_features(encoder, neg, cfg)?;
    let mut triplets = Vec::with_capacity(g.features.len());
    for ((family, h), ((_, up), (_, un))) in g.features.iter().zip(p.features.iter().zip(q.features.iter())) {
        triplets.push(FeatureTriplet::new(*family, h.clone(), up.clone(), un.clone())?);
    }
    Ok((g, triplets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn rand_volume(seed: u64, dims: (usize, usize, usize)) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::new(Array3::from_shape_fn(dims, |_| rng.random::<f64>())).unwrap()
    }

    fn rand_patches(seed: u64, dims: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(dims, |_| rng.random::<f64>())
    }

    #[test]
    fn full_size_patch_is_whole_volume() {
        let v = rand_volume(1, (4, 6, 8));
        let b = sample_subvolumes(&v, 1, [4, 6, 8], 3).unwrap();
        assert_eq!(b.origins, vec![[0, 0, 0]]);
        assert_eq!(b.patches.index_axis(Axis(0), 0), v.data);
        assert!(sample_subvolumes(&v, 1, [5, 6, 8], 3).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_paired() {
        let v = rand_volume(2, (16, 16, 16));
        let a = sample_subvolumes(&v, 5, [4, 8, 8], 11).unwrap();
        let b = sample_subvolumes(&v, 5, [4, 8, 8], 11).unwrap();
        assert_eq!(a, b);
        let other = rand_volume(3, (16, 16, 16));
        let paired = sample_subvolumes(&other, 5, [4, 8, 8], 11).unwrap();
        assert_eq!(paired.origins, a.origins);
        assert_eq!(a.resample_from(std::slice::from_ref(&other)).unwrap(), paired);
    }

    #[test]
    fn origins_are_uniform_per_axis() {
        let origins = sample_origins([64, 64, 64], 1000, [16, 16, 16], 77).unwrap();
        // 49 bins per axis; chi-square critical value at p = 0.01 for 48
        // degrees of freedom.
        let critical = 73.683;
        for axis in 0..3 {
            let mut counts = [0usize; 49];
            for o in &origins {
                counts[o[axis]] += 1;
            }
            let expected = 1000.0 / 49.0;
            let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
            assert!(chi2 < critical, "axis {axis}: chi2 = {chi2}");
        }
    }

    #[test]
    fn cyclic_shift_rotates_batch() {
        let v = rand_volume(4, (8, 8, 8));
        let b = sample_subvolumes(&v, 3, [4, 4, 4], 1).unwrap();
        let s = b.cyclic_shift(1);
        assert_eq!(s.patches.index_axis(Axis(0), 0), b.patches.index_axis(Axis(0), 1));
        assert_eq!(s.patches.index_axis(Axis(0), 2), b.patches.index_axis(Axis(0), 0));
    }

    #[test]
    fn encoder_zero_and_homogeneity() {
        let enc = Encoder::new(&EncoderConfig::default()).unwrap();
        let zero = Array4::zeros((1, 16, 32, 32));
        let e = enc.encode(zero.view()).unwrap();
        assert!(e.stages.iter().all(|s| s.iter().all(|&v| v == 0.0)));

        // Leaky rectification is positively homogeneous, so the whole stack is.
        let x = rand_patches(5, (1, 8, 8, 8));
        let a = enc.encode(x.view()).unwrap();
        let b = enc.encode((&x * 0.01).view()).unwrap();
        for (sa, sb) in a.stages.iter().zip(&b.stages) {
            for (u, v) in sa.iter().zip(sb.iter()) {
                assert!((u * 0.01 - v).abs() <= 1e-12 * u.abs().max(1e-3));
            }
        }
        assert!(enc.encode(Array4::zeros((1, 12, 8, 8)).view()).is_err());
    }

    fn naive_stage(input: &Array4<f64>, kernel: &Array5<f64>, stride: usize, slope: f64) -> Array4<f64> {
        let (cin, d, h, w) = input.dim();
        let cout = kernel.dim().0;
        let (od, oh, ow) = (d / stride, h / stride, w / stride);
        let mut out = Array4::zeros((cout, od, oh, ow));
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (iz, iy, ix) = (
                                            (z * stride + kz) as isize - 1,
                                            (y * stride + ky) as isize - 1,
                                            (x * stride + kx) as isize - 1,
                                        );
                                        if iz >= 0 && iy >= 0 && ix >= 0 && (iz as usize) < d && (iy as usize) < h && (ix as usize) < w {
                                            acc += kernel[[co, ci, kz, ky, kx]] * input[[ci, iz as usize, iy as usize, ix as usize]];
                                        }
                                    }
                                }
                            }
                        }
                        out[[co, z, y, x]] = if acc > 0.0 { acc } else { slope * acc };
                    }
                }
            }
        }
        out
    }

    #[test]
    fn encoder_matches_naive_convolution() {
        let cfg = EncoderConfig::default();
        let enc = Encoder::new(&cfg).unwrap();
        let x = rand_patches(6, (1, 16, 32, 32));
        let e = enc.encode(x.view()).unwrap();
        let mut input = x.index_axis(Axis(0), 0).insert_axis(Axis(0)).to_owned();
        for (s, k) in enc.kernels.iter().enumerate() {
            let out = naive_stage(&input, k, 2, 0.1);
            let got = e.stages[s].index_axis(Axis(0), 0);
            for (a, b) in got.iter().zip(out.iter()) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-8), "stage {s}: {a} vs {b}");
            }
            input = out;
        }
        assert_eq!(e.stages.iter().map(|s| s.dim()).collect::<Vec<_>>(), vec![
            (1, 8, 8, 16, 16),
            (1, 16, 4, 8, 8),
            (1, 32, 2, 4, 4)
        ]);
    }

    #[test]
    fn energy_cases() {
        let c = Array4::from_elem((2, 8, 8, 8), -0.3);
        let e = energy_descriptors(c.view(), 4).unwrap();
        assert_eq!(e.dim(), (2, 64, 1));
        assert!(e.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(energy_descriptors(Array4::zeros((1, 8, 8, 8)).view(), 4).unwrap().iter().all(|&v| v == 0.0));
        assert!(energy_descriptors(Array4::zeros((1, 6, 8, 8)).view(), 4).is_err());

        let x = rand_patches(7, (2, 8, 8, 8));
        let e = energy_descriptors(x.view(), 2).unwrap();
        for i in 0..2 {
            for bz in 0..2 {
                for by in 0..2 {
                    for bx in 0..2 {
                        let mut acc = 0.0;
                        for z in 0..4 {
                            for y in 0..4 {
                                for xx in 0..4 {
                                    acc += x[[i, bz * 4 + z, by * 4 + y, bx * 4 + xx]].powi(2);
                                }
                            }
                        }
                        let m = (bz * 2 + by) * 2 + bx;
                        assert!((e[[i, m, 0]] - (acc / 64.0).sqrt()).abs() < 1e-10);
                    }
                }
            }
        }
    }

    fn stages_from(maps: Vec<Array5<f64>>) -> EncoderStages {
        EncoderStages {
            pre: maps.clone(),
            stages: maps,
            seed: 0,
        }
    }

    #[test]
    fn global_cases() {
        let e = stages_from(vec![Array5::from_elem((1, 2, 2, 2, 2), 0.7)]);
        let g = global_descriptors(&e, &[0]).unwrap();
        assert_eq!(g.dim(), (1, 1, 4));
        assert!((g[[0, 0, 0]] - 0.7).abs() < 1e-15 && g[[0, 0, 1]] == 0.0);

        let alt = Array::from_shape_fn((1, 1, 2, 2, 2), |(_, _, z, y, x)| if (z + y + x) % 2 == 0 { 0.0 } else { 2.0 });
        let g = global_descriptors(&stages_from(vec![alt]), &[0]).unwrap();
        assert_eq!((g[[0, 0, 0]], g[[0, 0, 1]]), (1.0, 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = Array5::from_shape_fn((2, 3, 2, 3, 2), |_| rng.random::<f64>());
        let g = global_descriptors(&stages_from(vec![m.clone()]), &[0]).unwrap();
        for i in 0..2 {
            for c in 0..3 {
                let vals: Vec<f64> = m.slice(s![i, c, .., .., ..]).iter().cloned().collect();
                let mean = vals.iter().sum::<f64>() / 12.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
                assert!((g[[i, 0, 2 * c]] - mean).abs() < 1e-9);
                assert!((g[[i, 0, 2 * c + 1]] - var.sqrt()).abs() < 1e-9);
            }
        }
        assert!(global_descriptors(&stages_from(vec![m]), &[1]).is_err());
    }

    #[test]
    fn local_cases() {
        let one = Array5::from_shape_fn((1, 3, 1, 1, 1), |(_, c, _, _, _)| c as f64);
        let l = local_descriptors(&stages_from(vec![one])).unwrap();
        assert_eq!(l.dim(), (1, 1, 3));
        assert_eq!(l.as_slice().unwrap(), &[0.0, 1.0, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Array5::from_shape_fn((2, 4, 2, 2, 2), |_| rng.random::<f64>());
        let l = local_descriptors(&stages_from(vec![m.clone()])).unwrap();
        for i in 0..2 {
            for c in 0..4 {
                for z in 0..2 {
                    for y in 0..2 {
                        for x in 0..2 {
                            assert_eq!(l[[i, (z * 2 + y) * 2 + x, c]], m[[i, c, z, y, x]]);
                        }
                    }
                }
            }
        }
        // Relabeling deepest sites relabels locations.
        let flipped = m.slice(s![.., .., ..;-1, .., ..]).to_owned();
        let lf = local_descriptors(&stages_from(vec![flipped])).unwrap();
        for i in 0..2 {
            for z in 0..2 {
                for yx in 0..4 {
                    assert_eq!(lf.slice(s![i, z * 4 + yx, ..]), l.slice(s![i, (1 - z) * 4 + yx, ..]));
                }
            }
        }
    }

    #[test]
    fn spatial_cases() {
        let c = Array5::from_elem((1, 2, 4, 4, 4), 1.5);
        let p = spatial_descriptors(c.view(), 2).unwrap();
        assert_eq!(p.dim(), (1, 8, 2));
        assert!(p.iter().all(|&v| v == 1.5));

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = Array5::from_shape_fn((2, 3, 4, 4, 4), |_| rng.random::<f64>());
        let full = spatial_descriptors(m.view(), 4).unwrap();
        let g = global_descriptors(&stages_from(vec![m.clone()]), &[0]).unwrap();
        for i in 0..2 {
            for ch in 0..3 {
                assert!((full[[i, 0, ch]] - g[[i, 0, 2 * ch]]).abs() < 1e-12);
            }
        }
        let p = spatial_descriptors(m.view(), 2).unwrap();
        for i in 0..2 {
            for ch in 0..3 {
                for wz in 0..2 {
                    for wy in 0..2 {
                        for wx in 0..2 {
                            let mut acc = 0.0;
                            for z in 0..2 {
                                for y in 0..2 {
                                    for x in 0..2 {
                                        acc += m[[i, ch, wz * 2 + z, wy * 2 + y, wx * 2 + x]];
                                    }
                                }
                            }
                            assert!((p[[i, (wz * 2 + wy) * 2 + wx, ch]] - acc / 8.0).abs() < 1e-10);
                        }
                    }
                }
            }
        }
        assert!(spatial_descriptors(m.view(), 3).is_err());
    }

    #[test]
    fn bank_shapes_and_toggles() {
        let enc = Encoder::new(&EncoderConfig::default()).unwrap();
        let v = rand_volume(12, (32, 32, 32));
        let gen = sample_subvolumes(&v, 8, [16, 32, 32], 5).unwrap();
        let cfg = BankConfig::default();
        let (_, bank) = build_feature_bank(&enc, &gen, &gen, &gen, &cfg).unwrap();
        let shapes: Vec<_> = bank.iter().map(|t| (t.family, t.dim())).collect();
        assert_eq!(
            shapes,
            vec![
                (FamilyId::Energy, (8, 64, 1)),
                (FamilyId::Global, (8, 1, 2 * (8 + 16 + 32))),
                (FamilyId::Local, (8, 2 * 4 * 4, 32)),
                (FamilyId::Spatial2, (8, 2 * 4 * 4, 16)),
                (FamilyId::Spatial4, (8, 4, 16)),
            ]
        );
        for t in &bank {
            assert_eq!(t.h, t.u_pos);
            assert_eq!(t.h, t.u_neg);
        }
        let only = BankConfig { global: false, spatial_4: false, ..cfg.clone() };
        let (_, bank) = build_feature_bank(&enc, &gen, &gen, &gen, &only).unwrap();
        assert_eq!(
            bank.iter().map(|t| t.family).collect::<Vec<_>>(),
            vec![FamilyId::Energy, FamilyId::Local, FamilyId::Spatial2]
        );
        let small = sample_subvolumes(&v, 8, [16, 16, 16], 5).unwrap();
        assert!(build_feature_bank(&enc, &gen, &small, &gen, &cfg).is_err());
    }

    #[test]
    fn descriptors_follow_batch_permutation() {
        let enc = Encoder::new(&EncoderConfig::default()).unwrap();
        let v = rand_volume(13, (24, 24, 24));
        let b = sample_subvolumes(&v, 4, [16, 16, 16], 2).unwrap();
        let cfg = BankConfig::default();
        let base = extract_features(&enc, &b, &cfg).unwrap();
        let shifted = extract_features(&enc, &b.cyclic_shift(1), &cfg).unwrap();
        for ((_, x), (_, y)) in base.features.iter().zip(&shifted.features) {
            for i in 0..4 {
                assert_eq!(y.index_axis(Axis(0), i), x.index_axis(Axis(0), (i + 1) % 4));
            }
        }
        assert_eq!(extract_features(&enc, &b, &cfg).unwrap(), base);
    }
}
