//! Synthetic paired phantoms: a clean target made of soft ellipsoids and
//! band-limited texture, and a blurred, noisy source.

use ndarray::{Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DriftError, Result};
use crate::feature_bank::Volume;

pub const MIN_DIMS: [usize; 3] = [16, 32, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Inclusive range of the ellipsoid count, body outline included.
    pub ellipsoids: [usize; 2],
    /// Inclusive range of the degradation blur, in voxels. `[0, 0]` disables it.
    pub blur_sigma: [f64; 2],
    pub noise_sigma: f64,
    pub texture_amplitude: f64,
    pub texture_sigma: f64,
    /// Edge width of the ellipsoids in normalized radius units.
    pub softness: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            ellipsoids: [3, 6],
            blur_sigma: [1.0, 2.0],
            noise_sigma: 0.02,
            texture_amplitude: 0.04,
            texture_sigma: 1.5,
            softness: 0.08,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.ellipsoids;
        if lo == 0 || lo > hi {
            return Err(DriftError::invalid(format!("bad ellipsoid range {:?}", self.ellipsoids)));
        }
        let [a, b] = self.blur_sigma;
        if !(a >= 0.0 && a <= b && b.is_finite()) {
            return Err(DriftError::invalid(format!("bad blur range {:?}", self.blur_sigma)));
        }
        if !(self.noise_sigma >= 0.0 && self.texture_amplitude >= 0.0 && self.texture_sigma > 0.0 && self.softness > 0.0)
        {
            return Err(DriftError::invalid("phantom noise, texture and softness must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    pub source: Volume,
    pub target: Volume,
    pub seed: u64,
}

pub fn generate_phantom_pair(seed: u64, dims: [usize; 3], cfg: &PhantomConfig) -> Result<PhantomPair> {
    cfg.validate()?;
    if (0..3).any(|a| dims[a] < MIN_DIMS[a]) {
        return Err(DriftError::invalid(format!("phantom dims {dims:?} below minimum {MIN_DIMS:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(cfg.ellipsoids[0]..=cfg.ellipsoids[1]);
    let shape = (dims[0], dims[1], dims[2]);
    let mut target = Array3::<f64>::zeros(shape);

    // Body outline first, then organs with stratified, hence distinct, intensities.
    for k in 0..count {
        let (centre, radii, intensity) = if k == 0 {
            let c: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * rng.random_range(0.45..0.55));
            let r: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * rng.random_range(0.36..0.46));
            (c, r, 0.2)
        } else {
            let c: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * rng.random_range(0.3..0.7));
            let r: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * rng.random_range(0.1..0.22));
            let slot = (k - 1) as f64 + rng.random_range(0.0..1.0);
            (c, r, 0.3 + 0.6 * slot / (count - 1).max(1) as f64)
        };
        let soft = cfg.softness;
        Zip::indexed(&mut target).for_each(|(z, y, x), t| {
            let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
            let rho = (0..3).map(|a| ((p[a] - centre[a]) / radii[a]).powi(2)).sum::<f64>().sqrt();
            *t += intensity / (1.0 + (-(1.0 - rho) / soft).exp());
        });
    }

    if cfg.texture_amplitude > 0.0 {
        let noise = Array3::from_shape_fn(shape, |_| StandardNormal.sample(&mut rng));
        let tex = gaussian_blur(&noise, cfg.texture_sigma);
        let mean = tex.mean().unwrap_or(0.0);
        let std = tex.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(0.0).sqrt().max(1e-12);
        target.zip_mut_with(&tex, |t, &n| *t += cfg.texture_amplitude * (n - mean) / std);
    }
    target.mapv_inplace(|v| v.clamp(0.0, 1.0));

    let sigma = if cfg.blur_sigma[1] > cfg.blur_sigma[0] {
        rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1])
    } else {
        cfg.blur_sigma[0]
    };
    let mut source = if sigma > 0.0 { gaussian_blur(&target, sigma) } else { target.clone() };
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| DriftError::invalid(e.to_string()))?;
        source.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    source.mapv_inplace(|v| v.clamp(0.0, 1.0));

    Ok(PhantomPair {
        source: Volume::new(source)?,
        target: Volume::new(target)?,
        seed,
    })
}

/// Separable Gaussian filter with edge-replicating borders.
pub fn gaussian_blur(x: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return x.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);

    let mut cur = x.clone();
    for axis in 0..3 {
        let mut out = Array3::zeros(cur.dim());
        for (src, mut dst) in cur.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
            let n = src.len() as isize;
            for i in 0..n {
                let mut acc = 0.0;
                for (j, &t) in taps.iter().enumerate() {
                    let k = (i + j as isize - radius).clamp(0, n - 1);
                    acc += t * src[k as usize];
                }
                dst[i as usize] = acc;
            }
        }
        cur = out;
    }
    cur
}
