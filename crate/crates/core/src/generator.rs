//! Residual per-voxel network over a 3x3x3 neighbourhood, its exact
//! parameter adjoint, and the adaptive-moment optimizer that trains it.

use ndarray::{Array1, Array3, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, DriftError, Result};

/// Inputs per voxel: the clamped 3x3x3 neighbourhood.
pub const RECEPTIVE: usize = 27;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub hidden: Vec<usize>,
    pub negative_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            hidden: vec![16, 16],
            negative_slope: 0.1,
        }
    }
}

impl GeneratorConfig {
    /// `(fan_in, fan_out)` of every dense layer, output head included.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = RECEPTIVE;
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, 1));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(DriftError::invalid("hidden widths must be positive"));
        }
        if !self.negative_slope.is_finite() {
            return Err(DriftError::invalid("negative_slope must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    /// Learning rate reached at the end of the cosine decay, as a fraction of `lr`.
    pub final_lr_ratio: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 10,
            final_lr_ratio: 0.0,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate for update number `t` (1-based) of `total`: linear
    /// warm-up, then cosine decay.
    pub fn lr_at(&self, t: u64, total: u64) -> f64 {
        if t <= self.warmup_steps {
            return self.lr * t as f64 / self.warmup_steps.max(1) as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((t - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.lr * self.final_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First and second moment estimates plus the number of updates applied.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Array1<f64>,
    pub v: Array1<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: Array1::zeros(n),
            v: Array1::zeros(n),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorState {
    pub config: GeneratorConfig,
    pub params: Array1<f64>,
    pub opt: AdamState,
}

impl GeneratorState {
    /// Fan-in scaled Gaussian weights, zero biases.
    pub fn init(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(config.param_count());
        for (fan_in, fan_out) in config.layers() {
            let scale = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let z: f64 = StandardNormal.sample(&mut rng);
                params.push(z * scale);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self::from_params(config, Array1::from(params))
    }

    pub fn from_params(config: &GeneratorConfig, params: Array1<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(DriftError::shape(format!(
                "{} parameters for an architecture with {}",
                params.len(),
                config.param_count()
            )));
        }
        ensure_finite(params.iter(), "generator parameters")?;
        Ok(GeneratorState {
            config: config.clone(),
            opt: AdamState::new(params.len()),
            params,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.config.param_count();
        if self.params.len() != n || self.opt.m.len() != n || self.opt.v.len() != n {
            return Err(DriftError::shape("generator state does not match its architecture"));
        }
        ensure_finite(self.params.iter(), "generator parameters")
    }

    /// One adaptive-moment update with gradient `grad` at learning rate `lr`.
    pub fn adam_update(&mut self, grad: ArrayView1<f64>, lr: f64, cfg: &OptimizerConfig) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(DriftError::shape(format!(
                "gradient has {} entries, parameters {}",
                grad.len(),
                self.params.len()
            )));
        }
        ensure_finite(grad.iter(), "parameter gradient")?;
        self.opt.t += 1;
        let t = self.opt.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..grad.len() {
            let g = grad[i];
            let m = cfg.beta1 * self.opt.m[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * self.opt.v[i] + (1.0 - cfg.beta2) * g * g;
            self.opt.m[i] = m;
            self.opt.v[i] = v;
            self.params[i] -= lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// Per-layer scratch for one voxel.
struct Scratch {
    x: [f64; RECEPTIVE],
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(cfg: &GeneratorConfig) -> Self {
        let pre: Vec<Vec<f64>> = cfg.hidden.iter().map(|&h| vec![0.0; h]).collect();
        Scratch {
            x: [0.0; RECEPTIVE],
            act: pre.clone(),
            delta: pre.clone(),
            pre,
        }
    }
}

fn gather(vol: &Array3<f64>, z: usize, y: usize, x: usize, out: &mut [f64; RECEPTIVE]) {
    let (d, h, w) = vol.dim();
    let data = vol.as_slice().expect("standard layout");
    let mut k = 0;
    for dz in [-1isize, 0, 1] {
        let zz = (z as isize + dz).clamp(0, d as isize - 1) as usize;
        for dy in [-1isize, 0, 1] {
            let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
            let row = (zz * h + yy) * w;
            for dx in [-1isize, 0, 1] {
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                out[k] = data[row + xx];
                k += 1;
            }
        }
    }
}

/// Network output (before the residual) for the neighbourhood in `s.x`.
fn mlp_forward(params: &[f64], layers: &[(usize, usize)], slope: f64, s: &mut Scratch) -> f64 {
    let mut off = 0;
    let last = layers.len() - 1;
    for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let w = &params[off..off + fan_in * fan_out];
        let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        off += fan_in * fan_out + fan_out;
        let (done, rest) = s.act.split_at_mut(l);
        let input: &[f64] = if l == 0 { &s.x } else { &done[l - 1] };
        if l == last {
            return w.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + b[0];
        }
        let (pre, act) = (&mut s.pre[l], &mut rest[0]);
        for o in 0..fan_out {
            let z = w[o * fan_in..(o + 1) * fan_in].iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + b[o];
            pre[o] = z;
            act[o] = if z > 0.0 { z } else { slope * z };
        }
    }
    unreachable!("layers always end with the output head")
}

fn accumulate(grad: &mut [f64], off: usize, fan_in: usize, delta: &[f64], input: &[f64]) {
    let fan_out = delta.len();
    for (o, &dz) in delta.iter().enumerate() {
        if dz == 0.0 {
            continue;
        }
        for (gw, &xi) in grad[off + o * fan_in..off + (o + 1) * fan_in].iter_mut().zip(input) {
            *gw += dz * xi;
        }
        grad[off + fan_in * fan_out + o] += dz;
    }
}

/// `prev = (Wᵀ delta) ⊙ leaky'(pre)`.
fn backprop_delta(w: &[f64], fan_in: usize, delta: &[f64], pre: &[f64], slope: f64, prev: &mut [f64]) {
    prev.iter_mut().for_each(|v| *v = 0.0);
    for (o, &dz) in delta.iter().enumerate() {
        for (p, &wv) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
            *p += dz * wv;
        }
    }
    for (p, &z) in prev.iter_mut().zip(pre) {
        if z <= 0.0 {
            *p *= slope;
        }
    }
}

/// Accumulates `g * d(out)/d(params)` for the voxel whose forward state is in `s`.
fn mlp_backward(params: &[f64], layers: &[(usize, usize)], slope: f64, s: &mut Scratch, g: f64, grad: &mut [f64]) {
    let last = layers.len() - 1;
    let mut off = params.len();
    for l in (0..=last).rev() {
        let (fan_in, fan_out) = layers[l];
        off -= fan_in * fan_out + fan_out;
        let input: &[f64] = if l == 0 { &s.x } else { &s.act[l - 1] };
        let (lower, upper) = s.delta.split_at_mut(l);
        let head = [g];
        let delta: &[f64] = if l == last { &head } else { &upper[0] };
        accumulate(grad, off, fan_in, delta, input);
        if l > 0 {
            let w = &params[off..off + fan_in * fan_out];
            backprop_delta(w, fan_in, delta, &s.pre[l - 1], slope, &mut lower[l - 1]);
        }
    }
}

fn check_batch(src: &[Array3<f64>], what: &str) -> Result<()> {
    if src.is_empty() {
        return Err(DriftError::invalid(format!("empty {what} batch")));
    }
    if src.iter().any(|v| v.is_empty() || !v.is_standard_layout()) {
        return Err(DriftError::invalid(format!("{what} volumes must be nonempty and contiguous")));
    }
    Ok(())
}

/// `y = x + f_θ(neighbourhood(x))` voxel by voxel; no clipping.
pub fn generator_forward(g: &GeneratorState, src: &[Array3<f64>]) -> Result<Vec<Array3<f64>>> {
    g.validate()?;
    check_batch(src, "source")?;
    let layers = g.config.layers();
    let params = g.params.as_slice().expect("contiguous parameters");
    let mut s = Scratch::new(&g.config);
    let mut out = Vec::with_capacity(src.len());
    for vol in src {
        let (d, h, w) = vol.dim();
        let mut y = vol.clone();
        for z in 0..d {
            for yy in 0..h {
                for x in 0..w {
                    gather(vol, z, yy, x, &mut s.x);
                    y[[z, yy, x]] += mlp_forward(params, &layers, g.config.negative_slope, &mut s);
                }
            }
        }
        out.push(y);
    }
    Ok(out)
}

/// Parameter cotangent `J_θᵀ c` of [`generator_forward`].
pub fn generator_vjp(g: &GeneratorState, src: &[Array3<f64>], cot: &[Array3<f64>]) -> Result<Array1<f64>> {
    g.validate()?;
    check_batch(src, "source")?;
    if cot.len() != src.len() || cot.iter().zip(src).any(|(c, v)| c.dim() != v.dim()) {
        return Err(DriftError::shape("output cotangent does not match the source batch"));
    }
    let layers = g.config.layers();
    let params = g.params.as_slice().expect("contiguous parameters");
    let mut grad = vec![0.0; params.len()];
    let mut s = Scratch::new(&g.config);
    for (vol, c) in src.iter().zip(cot) {
        let (d, h, w) = vol.dim();
        for z in 0..d {
            for yy in 0..h {
                for x in 0..w {
                    let cv = c[[z, yy, x]];
                    if cv == 0.0 {
                        continue;
                    }
                    gather(vol, z, yy, x, &mut s.x);
                    mlp_forward(params, &layers, g.config.negative_slope, &mut s);
                    mlp_backward(params, &layers, g.config.negative_slope, &mut s, cv, &mut grad);
                }
            }
        }
    }
    Ok(Array1::from(grad))
}

/// Mean absolute error over every voxel of the batch and its gradient
/// `sign(y - y_gt) / count`.
pub fn fidelity_loss(y: &[Array3<f64>], y_gt: &[Array3<f64>]) -> Result<(f64, Vec<Array3<f64>>)> {
    if y.is_empty() || y.len() != y_gt.len() || y.iter().zip(y_gt).any(|(a, b)| a.dim() != b.dim()) {
        return Err(DriftError::shape("prediction and target batches differ"));
    }
    let count: usize = y.iter().map(|v| v.len()).sum();
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(y.len());
    for (a, b) in y.iter().zip(y_gt) {
        let mut g = Array3::zeros(a.dim());
        ndarray::Zip::from(&mut g).and(a).and(b).for_each(|g, &p, &t| {
            let r = p - t;
            total += r.abs();
            *g = if r > 0.0 {
                inv
            } else if r < 0.0 {
                -inv
            } else {
                0.0
            };
        });
        grads.push(g);
    }
    Ok((total * inv, grads))
}

/// Signs of every hidden pre-activation over the batch, for detecting
/// rectifier kinks crossed by a finite-difference stencil.
pub fn activation_pattern(g: &GeneratorState, src: &[Array3<f64>]) -> Vec<bool> {
    let layers = g.config.layers();
    let params = g.params.as_slice().expect("contiguous parameters");
    let mut s = Scratch::new(&g.config);
    let mut out = Vec::new();
    for vol in src {
        let (d, h, w) = vol.dim();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    gather(vol, z, y, x, &mut s.x);
                    mlp_forward(params, &layers, g.config.negative_slope, &mut s);
                    out.extend(s.pre.iter().flatten().map(|&v| v > 0.0));
                }
            }
        }
    }
    out
}
