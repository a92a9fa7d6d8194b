//! Empirical attractive-repulsive drift field over a feature triplet, its
//! continuous-kernel counterpart, and the stop-gradient drift loss.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

use crate::affinity::{
    joint_affinity, normalize_triplet, pairwise_distances, push_pull_weights, scale_from_mean,
    DriftConfig, FamilyId, FeatureTriplet,
};
use crate::error::{ensure_finite, DriftError, Result};

/// Drift vectors for every generated feature of one family, expressed in the
/// scale-normalized feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftField {
    pub family: FamilyId,
    pub v: Array3<f64>,
    /// Global distance scale `S` the features were divided by.
    pub scale: f64,
    /// Frobenius norm of each per-temperature field before aggregation.
    pub temperature_norms: Vec<f64>,
}

impl DriftField {
    pub fn zeros(family: FamilyId, dim: (usize, usize, usize), scale: f64) -> Self {
        DriftField {
            family,
            v: Array3::zeros(dim),
            scale,
            temperature_norms: Vec::new(),
        }
    }

    /// Root-mean-square entry of the field.
    pub fn rms(&self) -> f64 {
        rms(self.v.view())
    }

    /// Mean over all `(n, m)` of the per-vector Euclidean norm.
    pub fn mean_vector_norm(&self) -> f64 {
        let (n, m, _) = self.v.dim();
        let total: f64 = self
            .v
            .lanes(Axis(2))
            .into_iter()
            .map(|lane| lane.dot(&lane).sqrt())
            .sum();
        total / (n * m) as f64
    }

    /// Norm of the batch-averaged drift vector (net transport direction).
    pub fn net_drift_norm(&self) -> f64 {
        let (n, m, c) = self.v.dim();
        let flat = self.v.view().into_shape_with_order((n * m, c)).expect("contiguous");
        let mean = flat.mean_axis(Axis(0)).expect("nonempty");
        mean.dot(&mean).sqrt()
    }
}

/// Output of the stop-gradient drift regression.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftLossResult {
    pub loss: f64,
    /// Gradient with respect to the normalized generated features.
    pub grad_h: Array3<f64>,
    /// The detached regression target `h_norm + v`.
    pub target: Array3<f64>,
}

fn rms(v: ArrayView3<f64>) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn frobenius(v: ArrayView3<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `V = w_pos · u_pos − w_neg · u_neg`.
pub fn local_drift(
    w_pos: ArrayView2<f64>,
    w_neg: ArrayView2<f64>,
    u_pos: ArrayView2<f64>,
    u_neg: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if w_pos.dim() != w_neg.dim() {
        return Err(DriftError::shape(format!(
            "local_drift weights {:?} vs {:?}",
            w_pos.dim(),
            w_neg.dim()
        )));
    }
    if u_pos.dim() != u_neg.dim() {
        return Err(DriftError::shape(format!(
            "local_drift features {:?} vs {:?}",
            u_pos.dim(),
            u_neg.dim()
        )));
    }
    if w_pos.ncols() != u_pos.nrows() {
        return Err(DriftError::shape(format!(
            "local_drift: {} candidates weighted but {} features given",
            w_pos.ncols(),
            u_pos.nrows()
        )));
    }
    Ok(w_pos.dot(&u_pos) - w_neg.dot(&u_neg))
}

/// Sums per-temperature fields after dividing each by its RMS plus `eps`.
pub fn aggregate_temperatures(fields: &[Array3<f64>], eps: f64) -> Result<Array3<f64>> {
    let first = fields
        .first()
        .ok_or_else(|| DriftError::invalid("no temperature fields to aggregate"))?;
    let dim = first.dim();
    let mut out = Array3::zeros(dim);
    for f in fields {
        if f.dim() != dim {
            return Err(DriftError::shape(format!(
                "temperature field {:?} vs {:?}",
                f.dim(),
                dim
            )));
        }
        let denom = frobenius(f.view()) / (f.len() as f64).sqrt() + eps;
        out.scaled_add(1.0 / denom, f);
    }
    Ok(out)
}

/// Sum of `‖a_i − b_j‖` over all row pairs, without materializing the matrix.
fn distance_sum(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut total = 0.0;
    for ra in a.outer_iter() {
        for rb in b.outer_iter() {
            total += ra
                .iter()
                .zip(rb.iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
        }
    }
    total
}

/// Global scale `S` of a triplet, computed over the flattened feature sets.
pub fn triplet_scale(t: &FeatureTriplet, cfg: &DriftConfig) -> Result<f64> {
    t.validate()?;
    let (n, m, c) = t.dim();
    let rows = n * m;
    let flat = |x: &Array3<f64>| x.to_shape((rows, c)).map(|v| v.to_owned());
    let h = flat(&t.h).map_err(|e| DriftError::shape(e.to_string()))?;
    let up = flat(&t.u_pos).map_err(|e| DriftError::shape(e.to_string()))?;
    let un = flat(&t.u_neg).map_err(|e| DriftError::shape(e.to_string()))?;
    let mut total = distance_sum(h.view(), up.view()) + distance_sum(h.view(), un.view());
    if cfg.include_mask_in_scale {
        total += cfg.mu_mask * rows as f64;
    }
    let count = 2.0 * (rows * rows) as f64;
    Ok(scale_from_mean(total / count, c, cfg.eps))
}

/// Unnormalized per-temperature fields `V_τ` over an already normalized
/// triplet, in the order of `cfg.temperatures`.
pub fn temperature_fields(normalized: &FeatureTriplet, cfg: &DriftConfig) -> Result<Vec<Array3<f64>>> {
    let (n, m_d, c_d) = normalized.dim();
    let mut fields = vec![Array3::<f64>::zeros((n, m_d, c_d)); cfg.temperatures.len()];
    for m in 0..m_d {
        let h = normalized.h.slice(s![.., m, ..]);
        let u_pos = normalized.u_pos.slice(s![.., m, ..]);
        let u_neg = normalized.u_neg.slice(s![.., m, ..]);
        let d_pos = pairwise_distances(h, u_pos)?;
        let mut d_neg = pairwise_distances(h, u_neg)?;
        for i in 0..n {
            d_neg[[i, i]] += cfg.mu_mask;
        }
        for (k, &tau) in cfg.temperatures.iter().enumerate() {
            let temp = tau * (c_d as f64).sqrt();
            let z_pos = d_pos.mapv(|d| -d / temp);
            let z_neg = d_neg.mapv(|d| -d / temp);
            let a = joint_affinity(z_pos.view(), z_neg.view())?;
            let (a_pos, a_neg) = a.view().split_at(Axis(1), n);
            let (w_pos, w_neg) = push_pull_weights(a_pos, a_neg)?;
            let v = local_drift(w_pos.view(), w_neg.view(), u_pos, u_neg)?;
            fields[k].slice_mut(s![.., m, ..]).assign(&v);
        }
    }
    Ok(fields)
}

/// Empirical drift field of one family.
///
/// Distances over the flattened sets fix the scale `S`; features are divided
/// by `S`; for each location and temperature `T = τ·sqrt(C_d)` a bidirectional
/// softmax affinity yields cross-weighted local drifts, which are stacked per
/// temperature, RMS-normalized and summed.
pub fn compute_drift_field(triplet: &FeatureTriplet, cfg: &DriftConfig) -> Result<DriftField> {
    cfg.validate()?;
    triplet.validate()?;
    let (n, _, _) = triplet.dim();
    if n == 1 {
        log::warn!(
            "{} drift field with a single sample: the only negative candidate is self-masked",
            triplet.family
        );
    }
    let scale = triplet_scale(triplet, cfg)?;
    if scale <= cfg.eps || coincident(triplet) {
        // Every feature coincides: the field vanishes by symmetry, and
        // rounding noise must not be amplified by the RMS normalization.
        let mut field = DriftField::zeros(triplet.family, triplet.dim(), scale);
        field.temperature_norms = vec![0.0; cfg.temperatures.len()];
        return Ok(field);
    }
    let normalized = normalize_triplet(triplet, scale)?;
    let fields = temperature_fields(&normalized, cfg)?;
    let temperature_norms = fields.iter().map(|f| frobenius(f.view())).collect();
    let v = aggregate_temperatures(&fields, cfg.eps)?;
    ensure_finite(v.iter(), "drift field")?;
    Ok(DriftField {
        family: triplet.family,
        v,
        scale,
        temperature_norms,
    })
}

/// True when, at every location, all generated, positive and negative
/// features are the same vector.
fn coincident(t: &FeatureTriplet) -> bool {
    let first = t.h.index_axis(Axis(0), 0);
    [&t.h, &t.u_pos, &t.u_neg]
        .iter()
        .all(|x| x.outer_iter().all(|row| row == first))
}

/// Sum of the per-temperature fields without RMS normalization.
///
/// Unlike [`compute_drift_field`], whose per-temperature normalization fixes
/// the field's magnitude, this field shrinks toward zero as the generated and
/// positive distributions coincide. Used for equilibrium diagnostics and
/// particle transport.
pub fn unnormalized_drift_field(triplet: &FeatureTriplet, cfg: &DriftConfig) -> Result<DriftField> {
    cfg.validate()?;
    let scale = triplet_scale(triplet, cfg)?;
    let fields = temperature_fields(&normalize_triplet(triplet, scale)?, cfg)?;
    let temperature_norms = fields.iter().map(|f| frobenius(f.view())).collect();
    let v = fields
        .iter()
        .fold(Array3::zeros(triplet.dim()), |acc, f| acc + f);
    Ok(DriftField {
        family: triplet.family,
        v,
        scale,
        temperature_norms,
    })
}

/// Kernel-weighted attraction toward `positives` minus repulsion toward
/// `negatives`, with the Laplacian kernel `exp(−‖x − y‖ / eps_kernel)`.
pub fn continuous_drift_oracle(
    h: ArrayView1<f64>,
    positives: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    eps_kernel: f64,
) -> Result<Array1<f64>> {
    if !(eps_kernel > 0.0) {
        return Err(DriftError::invalid(format!(
            "kernel bandwidth must be positive, got {eps_kernel}"
        )));
    }
    if positives.nrows() == 0 || negatives.nrows() == 0 {
        return Err(DriftError::invalid("continuous drift needs samples on both sides"));
    }
    if positives.ncols() != h.len() || negatives.ncols() != h.len() {
        return Err(DriftError::shape("continuous drift channel mismatch"));
    }
    let displacement = |set: ArrayView2<f64>| -> Array1<f64> {
        let dists: Vec<f64> = set
            .outer_iter()
            .map(|u| u.iter().zip(h.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        let nearest = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut num = Array1::zeros(h.len());
        let mut den = 0.0;
        for (u, d) in set.outer_iter().zip(dists) {
            let k = (-(d - nearest) / eps_kernel).exp();
            num.scaled_add(k, &(&u - &h));
            den += k;
        }
        num / den
    };
    Ok(displacement(positives) - displacement(negatives))
}

/// Stop-gradient drift regression `½‖h − sg(h + v)‖²`.
///
/// The residual `h − sg(h + v)` is `−v` identically; the gradient and loss are
/// formed from that identity rather than by a rounding subtraction.
pub fn drift_loss(h_norm: ArrayView3<f64>, field: &DriftField) -> Result<DriftLossResult> {
    if h_norm.dim() != field.v.dim() {
        return Err(DriftError::shape(format!(
            "drift_loss: features {:?} vs field {:?}",
            h_norm.dim(),
            field.v.dim()
        )));
    }
    let target = &h_norm + &field.v;
    let grad_h = field.v.mapv(|x| -x);
    let loss = 0.5 * field.v.iter().map(|x| x * x).sum::<f64>();
    Ok(DriftLossResult {
        loss,
        grad_h,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn gaussian3(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(dim, |_| StandardNormal.sample(rng))
    }

    #[test]
    fn local_drift_cancels_and_hand_value() {
        let w = array![[0.2, 0.3], [0.1, 0.4]];
        let u = array![[1.0, -2.0], [0.5, 3.0]];
        let v = local_drift(w.view(), w.view(), u.view(), u.view()).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        let v = local_drift(
            array![[0.5]].view(),
            array![[0.5]].view(),
            array![[2.0]].view(),
            array![[-2.0]].view(),
        )
        .unwrap();
        assert_eq!(v, array![[2.0]]);
        assert!(local_drift(w.view(), w.view(), u.view(), array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn local_drift_matches_loop_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let unif = Uniform::new(0.0, 1.0).unwrap();
        let m = |rng: &mut ChaCha8Rng, r, c| Array2::from_shape_fn((r, c), |_| unif.sample(rng));
        let (wp, wn, up, un) = (m(&mut rng, 3, 3), m(&mut rng, 3, 3), m(&mut rng, 3, 2), m(&mut rng, 3, 2));
        let v = local_drift(wp.view(), wn.view(), up.view(), un.view()).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                let mut acc = 0.0;
                for j in 0..3 {
                    acc += wp[[i, j]] * up[[j, c]] - wn[[i, j]] * un[[j, c]];
                }
                assert!((v[[i, c]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_cases() {
        // Unit RMS field passes through scaled by 1/(1+eps).
        let f = Array3::from_elem((2, 2, 2), 1.0);
        let out = aggregate_temperatures(&[f.clone()], 0.5).unwrap();
        assert!(out.iter().all(|&x| (x - 1.0 / 1.5).abs() < 1e-15));
        let z = aggregate_temperatures(&[Array3::zeros((2, 1, 3))], 1e-8).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
        assert!(aggregate_temperatures(&[], 1e-8).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = gaussian3(&mut rng, (3, 2, 2));
        let b = gaussian3(&mut rng, (3, 2, 2)) * 7.0;
        let out = aggregate_temperatures(&[a.clone(), b.clone()], 1e-8).unwrap();
        let denom = |x: &Array3<f64>| (x.iter().map(|v| v * v).sum::<f64>() / 12.0).sqrt() + 1e-8;
        let (da, db) = (denom(&a), denom(&b));
        for ((o, x), y) in out.iter().zip(a.iter()).zip(b.iter()) {
            assert!((o - (x / da + y / db)).abs() < 1e-10);
        }
    }

    #[test]
    fn drift_field_deterministic_and_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let t = FeatureTriplet::new(
            FamilyId::Raw,
            gaussian3(&mut rng, (6, 3, 4)),
            gaussian3(&mut rng, (6, 3, 4)),
            gaussian3(&mut rng, (6, 3, 4)),
        )
        .unwrap();
        let cfg = DriftConfig::default();
        let a = compute_drift_field(&t, &cfg).unwrap();
        let b = compute_drift_field(&t, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.v.dim(), (6, 3, 4));
        assert_eq!(a.temperature_norms.len(), 3);
    }

    #[test]
    fn drift_field_rejects_bad_input() {
        let bad = FeatureTriplet {
            family: FamilyId::Raw,
            h: Array3::from_elem((2, 1, 1), f64::NAN),
            u_pos: Array3::zeros((2, 1, 1)),
            u_neg: Array3::zeros((2, 1, 1)),
        };
        assert!(compute_drift_field(&bad, &DriftConfig::default()).is_err());
        let empty = FeatureTriplet {
            family: FamilyId::Raw,
            h: Array3::zeros((2, 0, 1)),
            u_pos: Array3::zeros((2, 0, 1)),
            u_neg: Array3::zeros((2, 0, 1)),
        };
        assert!(compute_drift_field(&empty, &DriftConfig::default()).is_err());
    }

    #[test]
    fn degenerate_identical_batch_has_zero_field() {
        let x = Array3::from_elem((4, 2, 3), 0.25);
        let t = FeatureTriplet::new(FamilyId::Raw, x.clone(), x.clone(), x).unwrap();
        let cfg = DriftConfig {
            include_mask_in_scale: false,
            ..DriftConfig::default()
        };
        let f = compute_drift_field(&t, &cfg).unwrap();
        assert_eq!(f.scale, cfg.eps);
        assert!(f.v.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn drift_points_toward_shifted_positives() {
        // Positives are the generated set nudged along e1; negatives are the
        // generated set itself. Self-repulsion cancels on average, leaving a
        // net push along +e1.
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(31 + seed);
            let h = gaussian3(&mut rng, (16, 1, 3));
            let mut u_pos = h.clone();
            u_pos.slice_mut(s![.., .., 0]).mapv_inplace(|x| x + 0.05);
            let t = FeatureTriplet::new(FamilyId::Raw, h.clone(), u_pos, h).unwrap();
            let f = compute_drift_field(&t, &DriftConfig::default()).unwrap();
            let mean_e1 = f.v.slice(s![.., 0, 0]).mean().unwrap();
            assert!(mean_e1 > 0.0, "seed {seed}: {mean_e1}");
        }
    }

    #[test]
    fn location_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let dim = (5, 4, 2);
        let (h, p, q) = (gaussian3(&mut rng, dim), gaussian3(&mut rng, dim), gaussian3(&mut rng, dim));
        let perm = [2usize, 0, 3, 1];
        let permute = |x: &Array3<f64>| x.select(Axis(1), &perm);
        let cfg = DriftConfig::default();
        let base = compute_drift_field(&FeatureTriplet::new(FamilyId::Raw, h.clone(), p.clone(), q.clone()).unwrap(), &cfg).unwrap();
        let moved = compute_drift_field(
            &FeatureTriplet::new(FamilyId::Raw, permute(&h), permute(&p), permute(&q)).unwrap(),
            &cfg,
        )
        .unwrap();
        let expect = permute(&base.v);
        for (a, b) in moved.v.iter().zip(expect.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn common_scaling_leaves_field_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let dim = (6, 2, 3);
        let (h, p, q) = (gaussian3(&mut rng, dim), gaussian3(&mut rng, dim), gaussian3(&mut rng, dim));
        let cfg = DriftConfig {
            include_mask_in_scale: false,
            ..DriftConfig::default()
        };
        let t = FeatureTriplet::new(FamilyId::Raw, h.clone(), p.clone(), q.clone()).unwrap();
        let k = 37.5;
        let t2 = FeatureTriplet::new(FamilyId::Raw, h * k, p * k, q * k).unwrap();
        let a = compute_drift_field(&t, &cfg).unwrap();
        let b = compute_drift_field(&t2, &cfg).unwrap();
        assert!((b.scale / a.scale - k).abs() < 1e-9 * k);
        for (x, y) in a.v.iter().zip(b.v.iter()) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn scale_matches_matrix_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let dim = (3, 2, 2);
        let t = FeatureTriplet::new(
            FamilyId::Raw,
            gaussian3(&mut rng, dim),
            gaussian3(&mut rng, dim),
            gaussian3(&mut rng, dim),
        )
        .unwrap();
        for include in [true, false] {
            let cfg = DriftConfig {
                include_mask_in_scale: include,
                mu_mask: 3.0,
                ..DriftConfig::default()
            };
            let flat = |x: &Array3<f64>| x.to_shape((6, 2)).unwrap().to_owned();
            let dp = pairwise_distances(flat(&t.h).view(), flat(&t.u_pos).view()).unwrap();
            let dn = crate::affinity::mask_self_matches(
                pairwise_distances(flat(&t.h).view(), flat(&t.u_neg).view()).unwrap().view(),
                3.0,
            )
            .unwrap();
            let via_matrix =
                crate::affinity::global_scale(dp.view(), dn.view(), 2, include, 3.0, cfg.eps).unwrap();
            let streamed = triplet_scale(&t, &cfg).unwrap();
            assert!((via_matrix - streamed).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregated_terms_have_bounded_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let dim = (5, 3, 2);
        let t = FeatureTriplet::new(
            FamilyId::Raw,
            gaussian3(&mut rng, dim),
            gaussian3(&mut rng, dim),
            gaussian3(&mut rng, dim),
        )
        .unwrap();
        let cfg = DriftConfig::default();
        let s = triplet_scale(&t, &cfg).unwrap();
        let fields = temperature_fields(&normalize_triplet(&t, s).unwrap(), &cfg).unwrap();
        for f in &fields {
            let one = aggregate_temperatures(std::slice::from_ref(f), cfg.eps).unwrap();
            assert!(frobenius(one.view()) <= (30f64).sqrt() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn continuous_oracle_cases() {
        let h = array![0.0, 0.0];
        let v = continuous_drift_oracle(h.view(), array![[1.0, 2.0]].view(), array![[0.0, 0.0]].view(), 0.5)
            .unwrap();
        assert_eq!(v, array![1.0, 2.0]);
        let v = continuous_drift_oracle(
            h.view(),
            array![[1.5, 0.0], [-1.5, 0.0]].view(),
            array![[0.0, 0.0]].view(),
            0.3,
        )
        .unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-15));
        assert!(continuous_drift_oracle(h.view(), array![[1.0, 0.0]].view(), array![[1.0, 0.0]].view(), 0.0)
            .is_err());
    }

    #[test]
    fn continuous_oracle_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let pos = Array2::from_shape_fn((50, 3), |_| StandardNormal.sample(&mut rng));
        let neg = Array2::from_shape_fn((50, 3), |_| StandardNormal.sample(&mut rng)) + 0.5;
        let h = array![0.1, -0.2, 0.3];
        let eps = 0.8;
        let v = continuous_drift_oracle(h.view(), pos.view(), neg.view(), eps).unwrap();
        let naive = |set: &Array2<f64>| {
            let mut num = [0.0; 3];
            let mut den = 0.0;
            for r in 0..set.nrows() {
                let mut d = 0.0;
                for c in 0..3 {
                    d += (set[[r, c]] - h[c]).powi(2);
                }
                let k = (-d.sqrt() / eps).exp();
                den += k;
                for c in 0..3 {
                    num[c] += k * (set[[r, c]] - h[c]);
                }
            }
            num.map(|x| x / den)
        };
        let (a, r) = (naive(&pos), naive(&neg));
        for c in 0..3 {
            assert!((v[c] - (a[c] - r[c])).abs() < 1e-12);
        }
        let zero = continuous_drift_oracle(h.view(), pos.view(), pos.view(), eps).unwrap();
        assert!(zero.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn drift_loss_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let h = gaussian3(&mut rng, (3, 2, 2));
        let mut field = DriftField::zeros(FamilyId::Raw, (3, 2, 2), 1.0);
        let r = drift_loss(h.view(), &field).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grad_h.iter().all(|&g| g == 0.0));

        field.v = Array3::from_elem((2, 2, 2), 1.0);
        assert!(drift_loss(h.view(), &field).is_err());
        field.v = gaussian3(&mut rng, (3, 2, 2));
        let r = drift_loss(h.view(), &field).unwrap();
        for (g, v) in r.grad_h.iter().zip(field.v.iter()) {
            assert_eq!(g + v, 0.0);
        }
        // ‖v‖² = 8 → loss 4.
        field.v = Array3::from_elem((2, 1, 1), 2.0);
        let r = drift_loss(Array3::zeros((2, 1, 1)).view(), &field).unwrap();
        assert_eq!(r.loss, 4.0);
    }
}
