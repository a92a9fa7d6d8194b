//! Vector-Jacobian products of the descriptor families and the encoder,
//! used to pull feature-space drift back to voxel gradients.

use ndarray::{s, Array3, Array4, Array5, ArrayView3, ArrayView4};

use crate::affinity::FamilyId;
use crate::drift_field::DriftField;
use crate::error::{ensure_finite, DriftError, Result};
use crate::feature_bank::{BankConfig, Encoder, EncoderStages, Extraction};

/// Adjoint of the block energy descriptor. Blocks with zero energy get a
/// zero gradient.
pub fn vjp_energy(patches: ArrayView4<f64>, g: ArrayView3<f64>, blocks: usize) -> Result<Array4<f64>> {
    let (n, d, h, w) = patches.dim();
    let m = blocks * blocks * blocks;
    if g.dim() != (n, m, 1) || blocks == 0 || d % blocks != 0 || h % blocks != 0 || w % blocks != 0 {
        return Err(DriftError::shape(format!(
            "energy cotangent {:?} for patches {:?} and {blocks} blocks",
            g.dim(),
            patches.dim()
        )));
    }
    let (bd, bh, bw) = (d / blocks, h / blocks, w / blocks);
    let k = (bd * bh * bw) as f64;
    let mut out = Array4::zeros(patches.dim());
    for i in 0..n {
        let mut idx = 0;
        for bz in 0..blocks {
            for by in 0..blocks {
                for bx in 0..blocks {
                    let sl = s![i, bz * bd..(bz + 1) * bd, by * bh..(by + 1) * bh, bx * bw..(bx + 1) * bw];
                    let block = patches.slice(sl);
                    let rms = (block.iter().map(|v| v * v).sum::<f64>() / k).sqrt();
                    if rms > 0.0 {
                        let c = g[[i, idx, 0]] / (k * rms);
                        out.slice_mut(sl).zip_mut_with(&block, |o, &x| *o = c * x);
                    }
                    idx += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of the per-channel mean/std statistics. Returns one cotangent
/// slot per encoder stage, `None` for stages not selected.
pub fn vjp_global(e: &EncoderStages, g: ArrayView3<f64>, selected: &[usize]) -> Result<Vec<Option<Array5<f64>>>> {
    let n = e.stages[0].dim().0;
    let c_total: usize = selected.iter().map(|&s| e.stages.get(s).map_or(0, |m| m.dim().1)).sum();
    if selected.iter().any(|&s| s >= e.stages.len()) || g.dim() != (n, 1, 2 * c_total) {
        return Err(DriftError::shape(format!(
            "global cotangent {:?} for stages {selected:?}",
            g.dim()
        )));
    }
    let mut out: Vec<Option<Array5<f64>>> = vec![None; e.stages.len()];
    let mut col = 0;
    for &st in selected {
        let maps = &e.stages[st];
        let slot = out[st].get_or_insert_with(|| Array5::zeros(maps.dim()));
        let c = maps.dim().1;
        for i in 0..n {
            for ch in 0..c {
                let x = maps.slice(s![i, ch, .., .., ..]);
                let k = x.len() as f64;
                let mean = x.sum() / k;
                let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k).sqrt();
                let gm = g[[i, 0, col + 2 * ch]] / k;
                let gs = g[[i, 0, col + 2 * ch + 1]];
                let coef = if std > 0.0 { gs / (k * std) } else { 0.0 };
                slot.slice_mut(s![i, ch, .., .., ..])
                    .zip_mut_with(&x, |o, &v| *o += gm + coef * (v - mean));
            }
        }
        col += 2 * c;
    }
    Ok(out)
}

/// Adjoint of the deepest-stage site readout.
pub fn vjp_local(deep_dim: (usize, usize, usize, usize, usize), g: ArrayView3<f64>) -> Result<Array5<f64>> {
    let (n, c, d, h, w) = deep_dim;
    if g.dim() != (n, d * h * w, c) {
        return Err(DriftError::shape(format!("local cotangent {:?} for stage {deep_dim:?}", g.dim())));
    }
    let mut out = Array5::zeros(deep_dim);
    for i in 0..n {
        for ch in 0..c {
            for (site, o) in out.slice_mut(s![i, ch, .., .., ..]).iter_mut().enumerate() {
                *o = g[[i, site, ch]];
            }
        }
    }
    Ok(out)
}

/// Adjoint of window mean pooling: each window receives `g / window³`.
pub fn vjp_spatial(
    stage_dim: (usize, usize, usize, usize, usize),
    g: ArrayView3<f64>,
    window: usize,
) -> Result<Array5<f64>> {
    let (n, c, d, h, w) = stage_dim;
    if window == 0 || d % window != 0 || h % window != 0 || w % window != 0 {
        return Err(DriftError::invalid(format!("stage {stage_dim:?} not divisible by window {window}")));
    }
    let (pd, ph, pw) = (d / window, h / window, w / window);
    if g.dim() != (n, pd * ph * pw, c) {
        return Err(DriftError::shape(format!("spatial cotangent {:?} for stage {stage_dim:?}", g.dim())));
    }
    let k = (window * window * window) as f64;
    let mut out = Array5::zeros(stage_dim);
    for i in 0..n {
        for ch in 0..c {
            let mut m = 0;
            for z in 0..pd {
                for y in 0..ph {
                    for x in 0..pw {
                        let v = g[[i, m, ch]] / k;
                        out.slice_mut(s![
                            i,
                            ch,
                            z * window..(z + 1) * window,
                            y * window..(y + 1) * window,
                            x * window..(x + 1) * window
                        ])
                        .fill(v);
                        m += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of the whole bank: pulls per-family cotangents back to the
/// input patches of the batch that produced `ext`.
pub fn vjp_bank(
    encoder: &Encoder,
    patches: ArrayView4<f64>,
    ext: &Extraction,
    cfg: &BankConfig,
    cotangents: &[(FamilyId, Array3<f64>)],
) -> Result<Array4<f64>> {
    let n_stages = ext.stages.stages.len();
    let mut stage_g: Vec<Option<Array5<f64>>> = vec![None; n_stages];
    let mut add = |slot: usize, g: Array5<f64>| match &mut stage_g[slot] {
        Some(acc) => *acc += &g,
        none => *none = Some(g),
    };
    let mut voxel = Array4::zeros(patches.dim());
    for (family, g) in cotangents {
        if ext.get(*family).map(|x| x.dim()) != Some(g.dim()) {
            return Err(DriftError::shape(format!(
                "cotangent for {family} has shape {:?}, features {:?}",
                g.dim(),
                ext.get(*family).map(|x| x.dim())
            )));
        }
        match family {
            FamilyId::Energy => voxel += &vjp_energy(patches, g.view(), cfg.energy_blocks)?,
            FamilyId::Global => {
                for (st, gs) in vjp_global(&ext.stages, g.view(), &cfg.global_stages)?.into_iter().enumerate() {
                    if let Some(gs) = gs {
                        add(st, gs);
                    }
                }
            }
            FamilyId::Local => add(n_stages - 1, vjp_local(ext.stages.deepest().dim(), g.view())?),
            FamilyId::Spatial2 | FamilyId::Spatial4 => {
                let window = if *family == FamilyId::Spatial2 { 2 } else { 4 };
                let dim = ext.stages.stages[cfg.spatial_stage].dim();
                add(cfg.spatial_stage, vjp_spatial(dim, g.view(), window)?);
            }
            FamilyId::Raw => return Err(DriftError::invalid("raw family has no bank adjoint")),
        }
    }
    if stage_g.iter().any(Option::is_some) {
        voxel += &encoder.vjp(&ext.stages, &stage_g)?;
    }
    Ok(voxel)
}

/// Voxel gradient of the summed stop-gradient drift losses. Family `d`
/// contributes cotangent `-V_d / S_d` on its raw features, with the scale
/// treated as a constant.
pub fn pullback_drift_gradient(
    encoder: &Encoder,
    patches: ArrayView4<f64>,
    ext: &Extraction,
    cfg: &BankConfig,
    fields: &[DriftField],
) -> Result<Array4<f64>> {
    let cot: Vec<(FamilyId, Array3<f64>)> = fields
        .iter()
        .map(|f| (f.family, f.v.mapv(|v| -v / f.scale)))
        .collect();
    let g = vjp_bank(encoder, patches, ext, cfg, &cot)?;
    ensure_finite(g.iter(), "pulled-back drift gradient")?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::DriftConfig;
    use crate::drift_field::compute_drift_field;
    use crate::feature_bank::{
        build_feature_bank, energy_descriptors, extract_features, global_descriptors, local_descriptors,
        sample_subvolumes, spatial_descriptors, EncoderConfig, SubVolumeBatch, Volume,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(seed: u64, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(dim, |_| rng.random::<f64>() + 0.05)
    }

    fn rand3(seed: u64, dim: (usize, usize, usize)) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(dim, |_| rng.random::<f64>() - 0.5)
    }

    fn rand5(seed: u64, dim: (usize, usize, usize, usize, usize)) -> Array5<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array5::from_shape_fn(dim, |_| rng.random::<f64>() - 0.3)
    }

    fn dot<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    fn stages(maps: Vec<Array5<f64>>) -> EncoderStages {
        EncoderStages {
            pre: maps.clone(),
            stages: maps,
            seed: 0,
        }
    }

    /// Central-difference directional derivative.
    fn fd<F: Fn(f64) -> f64>(f: F, h: f64) -> f64 {
        (f(h) - f(-h)) / (2.0 * h)
    }

    #[test]
    fn energy_vjp_matches_finite_differences() {
        let x = rand4(1, (2, 4, 4, 4));
        let dir = rand4(2, (2, 4, 4, 4));
        let g = rand3(3, (2, 8, 1));
        let jt = vjp_energy(x.view(), g.view(), 2).unwrap();
        let num = fd(|t| dot(&energy_descriptors((&x + &(&dir * t)).view(), 2).unwrap(), &g), 1e-6);
        assert!((num - dot(&jt, &dir)).abs() < 1e-7 * num.abs().max(1.0));

        let mut z = x.clone();
        z.slice_mut(s![0, 0..2, 0..2, 0..2]).fill(0.0);
        let jt = vjp_energy(z.view(), g.view(), 2).unwrap();
        assert!(jt.slice(s![0, 0..2, 0..2, 0..2]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn global_vjp_matches_finite_differences() {
        let a = rand5(4, (2, 3, 2, 2, 2));
        let b = rand5(5, (2, 2, 2, 2, 2));
        let da = rand5(6, a.dim());
        let db = rand5(7, b.dim());
        let g = rand3(8, (2, 1, 10));
        let jt = vjp_global(&stages(vec![a.clone(), b.clone()]), g.view(), &[0, 1]).unwrap();
        let num = fd(
            |t| {
                let e = stages(vec![&a + &(&da * t), &b + &(&db * t)]);
                dot(&global_descriptors(&e, &[0, 1]).unwrap(), &g)
            },
            1e-6,
        );
        let ana = dot(jt[0].as_ref().unwrap(), &da) + dot(jt[1].as_ref().unwrap(), &db);
        assert!((num - ana).abs() < 1e-7 * num.abs().max(1.0), "{num} vs {ana}");

        // Mean-only cotangent spreads uniformly; constant maps give zero std gradient.
        let c = Array5::from_elem((1, 1, 2, 2, 2), 0.4);
        let mut g = Array3::zeros((1, 1, 2));
        g[[0, 0, 0]] = 8.0;
        g[[0, 0, 1]] = 5.0;
        let jt = vjp_global(&stages(vec![c]), g.view(), &[0]).unwrap();
        assert!(jt[0].as_ref().unwrap().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn local_and_spatial_adjoint_identities() {
        let m = rand5(9, (2, 3, 4, 4, 4));
        for w in [1, 2, 4] {
            let p = spatial_descriptors(m.view(), w).unwrap();
            let g = rand3(10 + w as u64, p.dim());
            let jt = vjp_spatial(m.dim(), g.view(), w).unwrap();
            assert!((dot(&p, &g) - dot(&jt, &m)).abs() < 1e-10);
        }
        let l = local_descriptors(&stages(vec![m.clone()])).unwrap();
        let g = rand3(20, l.dim());
        let jt = vjp_local(m.dim(), g.view()).unwrap();
        assert!((dot(&l, &g) - dot(&jt, &m)).abs() < 1e-10);
        assert!(vjp_spatial(m.dim(), g.view(), 3).is_err());
    }

    #[test]
    fn encoder_vjp_identity_kernel() {
        let mut k = Array5::zeros((1, 1, 3, 3, 3));
        k[[0, 0, 1, 1, 1]] = 1.0;
        let enc = Encoder::from_kernels(vec![k], 1, 0.1).unwrap();
        let x = rand4(21, (1, 4, 4, 4));
        let e = enc.encode(x.view()).unwrap();
        assert_eq!(e.stages[0].as_slice().unwrap(), x.as_slice().unwrap());
        let g = rand5(22, (1, 1, 4, 4, 4));
        let back = enc.vjp(&e, &[Some(g.clone())]).unwrap();
        assert_eq!(back.as_slice().unwrap(), g.as_slice().unwrap());
    }

    #[test]
    fn encoder_vjp_dot_product_and_errors() {
        let cfg = EncoderConfig {
            channels: vec![3, 4],
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(&cfg).unwrap();
        let x = rand4(23, (2, 4, 8, 8));
        let dir = rand4(24, x.dim());
        let e = enc.encode(x.view()).unwrap();
        let g0 = rand5(25, e.stages[0].dim());
        let g1 = rand5(26, e.stages[1].dim());
        let back = enc.vjp(&e, &[Some(g0.clone()), Some(g1.clone())]).unwrap();
        // Piecewise linear: small steps stay inside one linear region almost surely.
        let num = fd(
            |t| {
                let e = enc.encode((&x + &(&dir * t)).view()).unwrap();
                dot(&e.stages[0], &g0) + dot(&e.stages[1], &g1)
            },
            1e-7,
        );
        assert!((num - dot(&back, &dir)).abs() < 1e-6 * num.abs().max(1.0), "{num}");
        assert!(enc.vjp(&e, &[Some(g0.clone())]).is_err());
        assert!(enc.vjp(&e, &[Some(g1), None]).is_err());
    }

    fn setup() -> (Encoder, BankConfig, SubVolumeBatch, SubVolumeBatch) {
        let enc = Encoder::new(&EncoderConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let v = Volume::new(Array3::from_shape_fn((24, 24, 24), |_| rng.random::<f64>())).unwrap();
        let gen = sample_subvolumes(&v, 4, [16, 16, 16], 1).unwrap();
        let pos = sample_subvolumes(&v, 4, [16, 16, 16], 2).unwrap();
        (enc, BankConfig::default(), gen, pos)
    }

    #[test]
    fn bank_vjp_is_linear_and_additive() {
        let (enc, cfg, gen, _) = setup();
        let ext = extract_features(&enc, &gen, &cfg).unwrap();
        let cot: Vec<_> = ext
            .features
            .iter()
            .enumerate()
            .map(|(i, (f, x))| (*f, rand3(40 + i as u64, x.dim())))
            .collect();
        let all = vjp_bank(&enc, gen.patches.view(), &ext, &cfg, &cot).unwrap();
        let mut sum = Array4::zeros(all.dim());
        for c in &cot {
            sum += &vjp_bank(&enc, gen.patches.view(), &ext, &cfg, std::slice::from_ref(c)).unwrap();
        }
        assert!(all.iter().zip(sum.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        let scaled: Vec<_> = cot.iter().map(|(f, g)| (*f, g * 2.5)).collect();
        let twice = vjp_bank(&enc, gen.patches.view(), &ext, &cfg, &scaled).unwrap();
        assert!(all.iter().zip(twice.iter()).all(|(a, b)| (a * 2.5 - b).abs() < 1e-12));
        let zeros: Vec<_> = cot.iter().map(|(f, g)| (*f, Array3::zeros(g.dim()))).collect();
        assert!(vjp_bank(&enc, gen.patches.view(), &ext, &cfg, &zeros).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pullback_matches_surrogate_loss_derivative() {
        let (enc, cfg, gen, pos) = setup();
        let neg = gen.cyclic_shift(1);
        let (ext, bank) = build_feature_bank(&enc, &gen, &pos, &neg, &cfg).unwrap();
        let dcfg = DriftConfig::default();
        let fields: Vec<DriftField> = bank.iter().map(|t| compute_drift_field(t, &dcfg).unwrap()).collect();
        let grad = pullback_drift_gradient(&enc, gen.patches.view(), &ext, &cfg, &fields).unwrap();

        // L(x) = sum_d 1/2 |phi_d(x)/S_d - stopgrad(phi_d(x0)/S_d + V_d)|^2
        let targets: Vec<Array3<f64>> = bank
            .iter()
            .zip(&fields)
            .map(|(t, f)| &t.h / f.scale + &f.v)
            .collect();
        let loss = |x: &Array4<f64>| -> f64 {
            let b = SubVolumeBatch {
                patches: x.clone(),
                ..gen.clone()
            };
            let e = extract_features(&enc, &b, &cfg).unwrap();
            e.features
                .iter()
                .zip(targets.iter().zip(&fields))
                .map(|((_, h), (t, f))| 0.5 * (h / f.scale - t).mapv(|v| v * v).sum())
                .sum()
        };
        let dir = rand4(50, gen.patches.dim());
        let num = fd(|t| loss(&(&gen.patches + &(&dir * t))), 1e-6);
        let ana = dot(&grad, &dir);
        assert!((num - ana).abs() < 1e-4 * num.abs().max(1e-3), "{num} vs {ana}");

        let zero: Vec<DriftField> = fields
            .iter()
            .map(|f| DriftField {
                v: Array3::zeros(f.v.dim()),
                ..f.clone()
            })
            .collect();
        let g0 = pullback_drift_gradient(&enc, gen.patches.view(), &ext, &cfg, &zero).unwrap();
        assert!(g0.iter().all(|&v| v == 0.0));
    }
}
