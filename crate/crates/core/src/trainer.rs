//! Desk-scale paired training loop: fidelity plus feature-space drift,
//! coordinated in output space, pulled through the generator and applied
//! with adaptive moments.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::DriftConfig;
use crate::descriptor_autodiff::pullback_drift_gradient;
use crate::drift_field::{compute_drift_field, DriftField};
use crate::error::{DriftError, Result};
use crate::feature_bank::{
    build_feature_bank, extract_features, sample_batch_subvolumes, BankConfig, Encoder, SubVolumeBatch, Volume,
};
use crate::generator::{
    fidelity_loss, generator_forward, generator_vjp, GeneratorConfig, GeneratorState, OptimizerConfig,
};
use crate::mgda::{coordinate, QpOptions, SimplexWeights};
use crate::phantom::{generate_phantom_pair, PhantomConfig, PhantomPair};
use crate::spectrum::radial_power_spectrum;
use crate::transport::energy_distance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub volume_dims: [usize; 3],
    pub batch_size: usize,
    /// Number of training phantom pairs; one epoch visits each once.
    pub train_pool: usize,
    pub epochs: usize,
    pub subvolumes_per_volume: usize,
    pub subvolume_shape: [usize; 3],
    pub eval_pool: usize,
    pub eval_subvolumes: usize,
    pub spectrum_bands: usize,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub drift: DriftConfig,
    pub bank: BankConfig,
    pub generator: GeneratorConfig,
    pub optimizer: OptimizerConfig,
    pub phantom: PhantomConfig,
    pub mgda: QpOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            volume_dims: [32, 32, 32],
            batch_size: 4,
            train_pool: 16,
            epochs: 50,
            subvolumes_per_volume: 4,
            subvolume_shape: [16, 16, 16],
            eval_pool: 8,
            eval_subvolumes: 8,
            spectrum_bands: 8,
            checkpoint_every: 50,
            drift: DriftConfig::default(),
            bank: BankConfig::default(),
            generator: GeneratorConfig::default(),
            optimizer: OptimizerConfig::default(),
            phantom: PhantomConfig::default(),
            mgda: QpOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(DriftError::invalid("batch_size must be at least 2"));
        }
        if self.train_pool < self.batch_size {
            return Err(DriftError::invalid("train_pool must hold at least one batch"));
        }
        if self.subvolumes_per_volume == 0 || self.eval_subvolumes == 0 || self.eval_pool == 0 {
            return Err(DriftError::invalid("sub-volume and evaluation counts must be positive"));
        }
        if (0..3).any(|a| self.subvolume_shape[a] > self.volume_dims[a]) {
            return Err(DriftError::invalid(format!(
                "sub-volume {:?} exceeds volume {:?}",
                self.subvolume_shape, self.volume_dims
            )));
        }
        if self.spectrum_bands < 2 {
            return Err(DriftError::invalid("spectrum_bands must be at least 2"));
        }
        self.drift.validate()?;
        self.generator.validate()?;
        self.phantom.validate()?;
        let encoder = Encoder::new(&self.bank.encoder)?;
        self.bank.validate(&encoder)?;
        encoder.stage_dims(self.subvolume_shape)?;
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.train_pool / self.batch_size.max(1)) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs as u64 * self.steps_per_epoch()
    }
}

/// Independent seed streams derived from one base seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum SeedStream {
    TrainData = 1,
    EvalData = 2,
    Init = 3,
    Sampling = 4,
    Shuffle = 5,
    EvalSampling = 6,
}

/// SplitMix64 over `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: SeedStream, index: u64) -> u64 {
    let mut z = base
        .wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn training_pool(cfg: &TrainConfig) -> Result<Vec<PhantomPair>> {
    (0..cfg.train_pool as u64)
        .map(|i| generate_phantom_pair(derive_seed(cfg.seed, SeedStream::TrainData, i), cfg.volume_dims, &cfg.phantom))
        .collect()
}

pub fn evaluation_pool(cfg: &TrainConfig) -> Result<Vec<PhantomPair>> {
    (0..cfg.eval_pool as u64)
        .map(|i| generate_phantom_pair(derive_seed(cfg.seed, SeedStream::EvalData, i), cfg.volume_dims, &cfg.phantom))
        .collect()
}

/// Drift targets held fixed while probing the total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenDrift {
    pub origins: Vec<[usize; 3]>,
    pub sources: Vec<usize>,
    pub fields: Vec<DriftField>,
    /// `h / S + V` per family.
    pub targets: Vec<Array3<f64>>,
}

/// Everything computed by one step before the parameter update.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub preds: Vec<Array3<f64>>,
    pub l_fid: f64,
    pub l_drift: f64,
    pub grad_fid: Vec<Array3<f64>>,
    /// Gradient of the unweighted drift loss with respect to the predictions.
    pub grad_drift: Vec<Array3<f64>>,
    pub weights: SimplexWeights,
    pub combined: Vec<Array3<f64>>,
    pub frozen: FrozenDrift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_fid: f64,
    pub l_drift: f64,
    pub alpha_fid: f64,
    pub alpha_drift: f64,
    pub grad_norm_fid: f64,
    /// Norm of the λ-scaled drift gradient, as seen by the coordination.
    pub grad_norm_drift: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,l_fid,l_drift,alpha_fid,alpha_drift,grad_norm_fid,grad_norm_drift";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.l_fid, self.l_drift, self.alpha_fid, self.alpha_drift, self.grad_norm_fid, self.grad_norm_drift
        )
    }
}

fn flatten(vols: &[Array3<f64>]) -> Array1<f64> {
    vols.iter().flat_map(|v| v.iter().copied()).collect()
}

fn unflatten(flat: &Array1<f64>, like: &[Array3<f64>]) -> Vec<Array3<f64>> {
    let mut off = 0;
    like.iter()
        .map(|v| {
            let n = v.len();
            let out = Array3::from_shape_vec(v.dim(), flat.slice(s![off..off + n]).to_vec()).expect("sizes agree");
            off += n;
            out
        })
        .collect()
}

fn norm(vols: &[Array3<f64>]) -> f64 {
    vols.iter().flat_map(|v| v.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

fn as_volumes(vols: &[Array3<f64>]) -> Result<Vec<Volume>> {
    vols.iter().map(|v| Volume::new(v.clone())).collect()
}

fn cut(vols: &[Array3<f64>], origins: &[[usize; 3]], sources: &[usize], shape: [usize; 3], seed: u64) -> SubVolumeBatch {
    let mut patches = ndarray::Array4::zeros((origins.len(), shape[0], shape[1], shape[2]));
    for (i, (o, &b)) in origins.iter().zip(sources).enumerate() {
        patches
            .index_axis_mut(Axis(0), i)
            .assign(&vols[b].slice(s![o[0]..o[0] + shape[0], o[1]..o[1] + shape[1], o[2]..o[2] + shape[2]]));
    }
    SubVolumeBatch {
        patches,
        origins: origins.to_vec(),
        sources: sources.to_vec(),
        seed,
    }
}

/// Steps (1)-(5) of a training step: forward, sub-volume sampling, drift
/// fields, output-space gradients and their coordination. Sampling is keyed
/// by the optimizer step count, so the step is a pure function of its inputs.
pub fn step_gradients(
    state: &GeneratorState,
    batch: &[PhantomPair],
    cfg: &TrainConfig,
    encoder: &Encoder,
) -> Result<StepGradients> {
    if batch.len() < 2 {
        return Err(DriftError::invalid("a training batch needs at least two pairs"));
    }
    let src: Vec<Array3<f64>> = batch.iter().map(|p| p.source.data.clone()).collect();
    let tgt: Vec<Array3<f64>> = batch.iter().map(|p| p.target.data.clone()).collect();
    let preds = generator_forward(state, &src).map_err(|e| e.context("generator forward"))?;
    let (l_fid, grad_fid) = fidelity_loss(&preds, &tgt)?;

    let sample_seed = derive_seed(cfg.seed, SeedStream::Sampling, state.opt.t);
    let pred_vols = as_volumes(&preds).map_err(|e| e.context("predictions"))?;
    let gen = sample_batch_subvolumes(&pred_vols, cfg.subvolumes_per_volume, cfg.subvolume_shape, sample_seed)?;
    let pos = gen.resample_from(&batch.iter().map(|p| p.target.clone()).collect::<Vec<_>>())?;
    let neg = gen.cyclic_shift(1);
    let (ext, bank) = build_feature_bank(encoder, &gen, &pos, &neg, &cfg.bank).map_err(|e| e.context("feature bank"))?;

    let mut fields = Vec::with_capacity(bank.len());
    let mut targets = Vec::with_capacity(bank.len());
    let mut l_drift = 0.0;
    for t in &bank {
        let f = compute_drift_field(t, &cfg.drift).map_err(|e| e.context(format!("drift field {}", t.family)))?;
        l_drift += 0.5 * f.v.iter().map(|v| v * v).sum::<f64>();
        targets.push(&t.h / f.scale + &f.v);
        fields.push(f);
    }
    let patch_grad = pullback_drift_gradient(encoder, gen.patches.view(), &ext, &cfg.bank, &fields)?;
    let mut grad_drift: Vec<Array3<f64>> = preds.iter().map(|p| Array3::zeros(p.dim())).collect();
    let sh = cfg.subvolume_shape;
    for (i, (o, &b)) in gen.origins.iter().zip(&gen.sources).enumerate() {
        let mut region = grad_drift[b].slice_mut(s![o[0]..o[0] + sh[0], o[1]..o[1] + sh[1], o[2]..o[2] + sh[2]]);
        region += &patch_grad.index_axis(Axis(0), i);
    }

    let lambda = cfg.drift.lambda_drift;
    let (weights, combined) = if lambda == 0.0 {
        (
            SimplexWeights {
                alpha: vec![1.0, 0.0],
            },
            grad_fid.clone(),
        )
    } else {
        let (w, c) = coordinate(flatten(&grad_fid).view(), flatten(&grad_drift).view(), lambda, &cfg.mgda)?;
        let c = unflatten(&c, &preds);
        (w, c)
    };

    Ok(StepGradients {
        preds,
        l_fid,
        l_drift,
        grad_fid,
        grad_drift,
        weights,
        combined,
        frozen: FrozenDrift {
            origins: gen.origins,
            sources: gen.sources,
            fields,
            targets,
        },
    })
}

/// `α₁ L_fid + α₂ λ Σ_d ½‖φ_d(y)/S_d − T_d‖²` with drift fields, scales,
/// targets, sub-volume origins and weights held fixed.
pub fn frozen_total_loss(
    state: &GeneratorState,
    batch: &[PhantomPair],
    cfg: &TrainConfig,
    encoder: &Encoder,
    frozen: &FrozenDrift,
    weights: &SimplexWeights,
) -> Result<f64> {
    let src: Vec<Array3<f64>> = batch.iter().map(|p| p.source.data.clone()).collect();
    let tgt: Vec<Array3<f64>> = batch.iter().map(|p| p.target.data.clone()).collect();
    let preds = generator_forward(state, &src)?;
    let (l_fid, _) = fidelity_loss(&preds, &tgt)?;
    let gen = cut(&preds, &frozen.origins, &frozen.sources, cfg.subvolume_shape, 0);
    let ext = extract_features(encoder, &gen, &cfg.bank)?;
    let mut surrogate = 0.0;
    for ((_, h), (f, t)) in ext.features.iter().zip(frozen.fields.iter().zip(&frozen.targets)) {
        surrogate += 0.5 * (h / f.scale - t).iter().map(|v| v * v).sum::<f64>();
    }
    Ok(weights.alpha[0] * l_fid + weights.alpha[1] * cfg.drift.lambda_drift * surrogate)
}

/// Steps (6)-(7): pulls the coordinated gradient into parameter space and
/// applies one adaptive-moment update.
pub fn train_step(
    state: &GeneratorState,
    batch: &[PhantomPair],
    cfg: &TrainConfig,
    encoder: &Encoder,
) -> Result<(GeneratorState, StepMetrics)> {
    let step = state.opt.t + 1;
    let run = || -> Result<(GeneratorState, StepMetrics)> {
        let out = step_gradients(state, batch, cfg, encoder)?;
        let src: Vec<Array3<f64>> = batch.iter().map(|p| p.source.data.clone()).collect();
        let pgrad = generator_vjp(state, &src, &out.combined)?;
        let mut next = state.clone();
        let lr = cfg.optimizer.lr_at(step, cfg.total_steps().max(step));
        next.adam_update(pgrad.view(), lr, &cfg.optimizer)?;
        let metrics = StepMetrics {
            step,
            l_fid: out.l_fid,
            l_drift: out.l_drift,
            alpha_fid: out.weights.alpha[0],
            alpha_drift: out.weights.alpha[1],
            grad_norm_fid: norm(&out.grad_fid),
            grad_norm_drift: cfg.drift.lambda_drift * norm(&out.grad_drift),
        };
        Ok((next, metrics))
    };
    run().map_err(|e| e.context(format!("training step {step}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    /// Mean residual power per radial band over the held-out set.
    pub band_energies: Vec<f64>,
    /// Sum of per-family energy distances between predicted and target
    /// descriptors.
    pub feature_energy_distance: f64,
    pub family_energy_distance: BTreeMap<String, f64>,
}

/// Held-out evaluation with predictions clipped to `[0, 1]`.
pub fn evaluate(state: &GeneratorState, cfg: &TrainConfig, encoder: &Encoder) -> Result<EvalReport> {
    let pairs = evaluation_pool(cfg)?;
    let src: Vec<Array3<f64>> = pairs.iter().map(|p| p.source.data.clone()).collect();
    let tgt: Vec<Array3<f64>> = pairs.iter().map(|p| p.target.data.clone()).collect();
    let preds: Vec<Array3<f64>> = generator_forward(state, &src)?
        .into_iter()
        .map(|p| p.mapv(|v| v.clamp(0.0, 1.0)))
        .collect();
    let (mae, _) = fidelity_loss(&preds, &tgt)?;

    let mut band_energies = vec![0.0; cfg.spectrum_bands];
    for (p, t) in preds.iter().zip(&tgt) {
        for (acc, e) in band_energies.iter_mut().zip(radial_power_spectrum(&(p - t), cfg.spectrum_bands)?) {
            *acc += e / pairs.len() as f64;
        }
    }

    let seed = derive_seed(cfg.seed, SeedStream::EvalSampling, 0);
    let gen = sample_batch_subvolumes(&as_volumes(&preds)?, cfg.eval_subvolumes, cfg.subvolume_shape, seed)?;
    let pos = gen.resample_from(&pairs.iter().map(|p| p.target.clone()).collect::<Vec<_>>())?;
    let fg = extract_features(encoder, &gen, &cfg.bank)?;
    let fp = extract_features(encoder, &pos, &cfg.bank)?;
    let mut family_energy_distance = BTreeMap::new();
    let mut total = 0.0;
    for ((family, a), (_, b)) in fg.features.iter().zip(&fp.features) {
        let (n, m, c) = a.dim();
        let rows = |x: &Array3<f64>| -> Array2<f64> {
            x.to_owned().into_shape_with_order((n, m * c)).expect("contiguous descriptors")
        };
        let e = energy_distance(rows(a).view(), rows(b).view())?;
        total += e;
        family_energy_distance.insert(family.as_str().to_string(), e);
    }
    Ok(EvalReport {
        mae,
        band_energies,
        feature_energy_distance: total,
        family_energy_distance,
    })
}

/// Owns the data pool, encoder and generator state of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub encoder: Encoder,
    pub pool: Vec<PhantomPair>,
    pub state: GeneratorState,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let state = GeneratorState::init(&cfg.generator, derive_seed(cfg.seed, SeedStream::Init, 0))?;
        Self::with_state(cfg, state)
    }

    pub fn with_state(cfg: TrainConfig, state: GeneratorState) -> Result<Self> {
        cfg.validate()?;
        if state.config != cfg.generator {
            return Err(DriftError::invalid("generator state does not match the configured architecture"));
        }
        state.validate()?;
        Ok(Trainer {
            encoder: Encoder::new(&cfg.bank.encoder)?,
            pool: training_pool(&cfg)?,
            cfg,
            state,
        })
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> u64 {
        self.state.opt.t
    }

    pub fn finished(&self) -> bool {
        self.step_count() >= self.cfg.total_steps()
    }

    /// Pairs used at step index `t` (0-based): epochs walk a seeded
    /// permutation of the pool.
    pub fn batch(&self, t: u64) -> Vec<PhantomPair> {
        let spe = self.cfg.steps_per_epoch();
        let epoch = t / spe;
        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, SeedStream::Shuffle, epoch)));
        let start = (t % spe) as usize * self.cfg.batch_size;
        order[start..start + self.cfg.batch_size]
            .iter()
            .map(|&i| self.pool[i].clone())
            .collect()
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = self.batch(self.step_count());
        let (next, metrics) = train_step(&self.state, &batch, &self.cfg, &self.encoder)?;
        self.state = next;
        Ok(metrics)
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(&self.state, &self.cfg, &self.encoder)
    }
}
