//! Distance matrices, global scale estimation and bidirectional softmax
//! affinities underlying the empirical drift field.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, DriftError, Result};

/// Descriptor family a feature tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyId {
    Energy,
    Global,
    Local,
    Spatial2,
    Spatial4,
    /// Raw coordinates, used by the particle simulator and ad-hoc tensors.
    Raw,
}

impl FamilyId {
    pub const BANK: [FamilyId; 5] = [
        FamilyId::Energy,
        FamilyId::Global,
        FamilyId::Local,
        FamilyId::Spatial2,
        FamilyId::Spatial4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FamilyId::Energy => "energy",
            FamilyId::Global => "global",
            FamilyId::Local => "local",
            FamilyId::Spatial2 => "spatial_2",
            FamilyId::Spatial4 => "spatial_4",
            FamilyId::Raw => "raw",
        }
    }
}

impl std::fmt::Display for FamilyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Generated, positive (paired target) and negative (generated reference)
/// features of one descriptor family, each shaped `N x M x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTriplet {
    pub family: FamilyId,
    pub h: Array3<f64>,
    pub u_pos: Array3<f64>,
    pub u_neg: Array3<f64>,
}

impl FeatureTriplet {
    pub fn new(
        family: FamilyId,
        h: Array3<f64>,
        u_pos: Array3<f64>,
        u_neg: Array3<f64>,
    ) -> Result<Self> {
        let t = FeatureTriplet {
            family,
            h,
            u_pos,
            u_neg,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.h.dim();
        if self.u_pos.dim() != shape || self.u_neg.dim() != shape {
            return Err(DriftError::shape(format!(
                "{} triplet: h {:?}, u_pos {:?}, u_neg {:?}",
                self.family,
                shape,
                self.u_pos.dim(),
                self.u_neg.dim()
            )));
        }
        let (n, m, c) = shape;
        if n == 0 || m == 0 || c == 0 {
            return Err(DriftError::invalid(format!(
                "{} triplet has empty shape {shape:?}",
                self.family
            )));
        }
        ensure_finite(self.h.iter(), "generated features")?;
        ensure_finite(self.u_pos.iter(), "positive features")?;
        ensure_finite(self.u_neg.iter(), "negative features")?;
        Ok(())
    }

    /// `(N, M_d, C_d)`.
    pub fn dim(&self) -> (usize, usize, usize) {
        self.h.dim()
    }
}

/// Parameters of the drift field computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftConfig {
    pub temperatures: Vec<f64>,
    pub mu_mask: f64,
    pub eps: f64,
    pub include_mask_in_scale: bool,
    /// Weight applied to the drift objective before gradient coordination.
    pub lambda_drift: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            temperatures: vec![0.004, 0.01, 0.04],
            mu_mask: 1e4,
            eps: 1e-8,
            include_mask_in_scale: true,
            lambda_drift: 3e-4,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperatures.is_empty() {
            return Err(DriftError::invalid("temperatures must be nonempty"));
        }
        if self.temperatures.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(DriftError::invalid(format!(
                "temperatures must be positive, got {:?}",
                self.temperatures
            )));
        }
        if !(self.mu_mask >= 0.0 && self.mu_mask.is_finite()) {
            return Err(DriftError::invalid("mu_mask must be a nonnegative number"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(DriftError::invalid("eps must be positive"));
        }
        if !(self.lambda_drift >= 0.0 && self.lambda_drift.is_finite()) {
            return Err(DriftError::invalid("lambda_drift must be nonnegative"));
        }
        Ok(())
    }
}

/// Euclidean distances between every row of `a` and every row of `b`.
///
/// Differences are formed explicitly, so identical rows give exactly zero.
pub fn pairwise_distances(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(DriftError::shape(format!(
            "pairwise_distances: {} vs {} channels",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.outer_iter().enumerate() {
        for (j, rb) in b.outer_iter().enumerate() {
            out[[i, j]] = ra
                .iter()
                .zip(rb.iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(out)
}

/// Adds `mu_mask` to the diagonal of a square distance matrix.
pub fn mask_self_matches(d: ArrayView2<f64>, mu_mask: f64) -> Result<Array2<f64>> {
    if d.nrows() != d.ncols() {
        return Err(DriftError::invalid(format!(
            "mask_self_matches needs a square matrix, got {:?}",
            d.dim()
        )));
    }
    let mut out = d.to_owned();
    for i in 0..out.nrows() {
        out[[i, i]] += mu_mask;
    }
    Ok(out)
}

/// Batch distance scale `S = mean(D_pos ∪ D_neg) / sqrt(C_d)`.
///
/// `d_neg_masked` already carries the `mu_mask` diagonal. When
/// `include_mask` is false the diagonal offset is removed before averaging.
/// A batch with all distances zero yields `eps`.
pub fn global_scale(
    d_pos: ArrayView2<f64>,
    d_neg_masked: ArrayView2<f64>,
    c_d: usize,
    include_mask: bool,
    mu_mask: f64,
    eps: f64,
) -> Result<f64> {
    if d_pos.is_empty() || d_neg_masked.is_empty() {
        return Err(DriftError::invalid("global_scale on empty distance matrix"));
    }
    if c_d == 0 {
        return Err(DriftError::invalid("global_scale with zero channels"));
    }
    ensure_finite(d_pos.iter(), "positive distances")?;
    ensure_finite(d_neg_masked.iter(), "negative distances")?;
    let mut total = d_pos.sum() + d_neg_masked.sum();
    if !include_mask {
        let diag = d_neg_masked.nrows().min(d_neg_masked.ncols());
        total -= mu_mask * diag as f64;
    }
    let count = (d_pos.len() + d_neg_masked.len()) as f64;
    Ok(scale_from_mean(total / count, c_d, eps))
}

pub(crate) fn scale_from_mean(mean: f64, c_d: usize, eps: f64) -> f64 {
    let s = mean / (c_d as f64).sqrt();
    if s > eps {
        s
    } else {
        eps
    }
}

/// Divides every tensor of the triplet by `s`.
pub fn normalize_triplet(t: &FeatureTriplet, s: f64) -> Result<FeatureTriplet> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(DriftError::invalid(format!("scale must be positive, got {s}")));
    }
    Ok(FeatureTriplet {
        family: t.family,
        h: &t.h / s,
        u_pos: &t.u_pos / s,
        u_neg: &t.u_neg / s,
    })
}

/// Softmax along each row, with per-row max subtraction.
pub fn softmax_rows(z: ArrayView2<f64>) -> Array2<f64> {
    let mut out = z.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Softmax along each column, with per-column max subtraction.
pub fn softmax_cols(z: ArrayView2<f64>) -> Array2<f64> {
    softmax_rows(z.t()).reversed_axes()
}

/// Bidirectional softmax affinity over the concatenated candidate set.
///
/// `z_pos` and `z_neg` are `N x N` logit blocks (queries by candidates). The
/// result is `N x 2N`: `sqrt(softmax_rows(Z) * softmax_cols(Z))` where the
/// row softmax runs over all `2N` candidates and the column softmax over the
/// `N` queries.
pub fn joint_affinity(z_pos: ArrayView2<f64>, z_neg: ArrayView2<f64>) -> Result<Array2<f64>> {
    if z_pos.dim() != z_neg.dim() {
        return Err(DriftError::shape(format!(
            "joint_affinity: z_pos {:?} vs z_neg {:?}",
            z_pos.dim(),
            z_neg.dim()
        )));
    }
    if z_pos.is_empty() {
        return Err(DriftError::invalid("joint_affinity on empty logits"));
    }
    let z = ndarray::concatenate(Axis(1), &[z_pos, z_neg])
        .map_err(|e| DriftError::shape(e.to_string()))?;
    let r = softmax_rows(z.view());
    let c = softmax_cols(z.view());
    Ok((r * c).mapv(f64::sqrt))
}

/// Cross push-pull weights: each positive affinity is scaled by the query's
/// total negative response and vice versa.
pub fn push_pull_weights(
    a_pos: ArrayView2<f64>,
    a_neg: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if a_pos.dim() != a_neg.dim() {
        return Err(DriftError::shape(format!(
            "push_pull_weights: a_pos {:?} vs a_neg {:?}",
            a_pos.dim(),
            a_neg.dim()
        )));
    }
    if a_pos.iter().chain(a_neg.iter()).any(|&v| v < 0.0 || v.is_nan()) {
        return Err(DriftError::invalid("affinities must be nonnegative"));
    }
    let s_pos = a_pos.sum_axis(Axis(1)).insert_axis(Axis(1));
    let s_neg = a_neg.sum_axis(Axis(1)).insert_axis(Axis(1));
    let w_pos = &a_pos * &s_neg;
    let w_neg = &a_neg * &s_pos;
    Ok((w_pos, w_neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random::<f64>())
    }

    #[test]
    fn three_four_five() {
        let d = pairwise_distances(array![[0.0, 0.0]].view(), array![[3.0, 4.0]].view()).unwrap();
        assert_eq!(d, array![[5.0]]);
        let a = array![[1.0, 2.0, 3.0]];
        assert_eq!(pairwise_distances(a.view(), a.view()).unwrap(), array![[0.0]]);
    }

    #[test]
    fn distances_match_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = uniform(&mut rng, 4, 3);
        let b = uniform(&mut rng, 5, 3);
        let d = pairwise_distances(a.view(), b.view()).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (a[[i, k]] - b[[j, k]]).powi(2);
                }
                assert!((d[[i, j]] - s.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distance_dim_mismatch() {
        let err = pairwise_distances(Array2::zeros((2, 3)).view(), Array2::zeros((2, 2)).view());
        assert!(matches!(err, Err(DriftError::ShapeMismatch(_))));
    }

    #[test]
    fn masking() {
        let d = Array2::<f64>::zeros((2, 2));
        assert_eq!(
            mask_self_matches(d.view(), 10.0).unwrap(),
            array![[10.0, 0.0], [0.0, 10.0]]
        );
        assert_eq!(mask_self_matches(d.view(), 0.0).unwrap(), d);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = uniform(&mut rng, 3, 3);
        let out = mask_self_matches(m.view(), 1e4).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { m[[i, j]] + 1e4 } else { m[[i, j]] };
                assert_eq!(out[[i, j]], expect);
            }
        }
        assert!(mask_self_matches(Array2::zeros((2, 3)).view(), 1.0).is_err());
    }

    #[test]
    fn scale_hand_values() {
        let s = global_scale(array![[2.0]].view(), array![[2.0]].view(), 4, true, 0.0, 1e-8);
        assert_eq!(s.unwrap(), 1.0);
        let c = 0.7;
        let dp = Array2::from_elem((3, 3), c);
        let s = global_scale(dp.view(), dp.view(), 9, true, 0.0, 1e-8).unwrap();
        assert!((s - c / 3.0).abs() < 1e-15);
        let z = Array2::zeros((2, 2));
        assert_eq!(global_scale(z.view(), z.view(), 2, true, 0.0, 1e-6).unwrap(), 1e-6);
        assert!(global_scale(Array2::zeros((0, 0)).view(), z.view(), 2, true, 0.0, 1e-6).is_err());
    }

    #[test]
    fn mask_inflates_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dp = uniform(&mut rng, 4, 4);
        let dn = mask_self_matches(uniform(&mut rng, 4, 4).view(), 1e4).unwrap();
        let with = global_scale(dp.view(), dn.view(), 3, true, 1e4, 1e-8).unwrap();
        let without = global_scale(dp.view(), dn.view(), 3, false, 1e4, 1e-8).unwrap();
        assert!(with > without);
        // Removing the mask recovers the plain mean.
        let plain = (dp.sum() + dn.sum() - 4e4) / 32.0 / 3f64.sqrt();
        assert!((without - plain).abs() < 1e-12);
    }

    #[test]
    fn normalize() {
        let t = FeatureTriplet::new(
            FamilyId::Raw,
            Array3::from_elem((2, 1, 2), 4.0),
            Array3::from_elem((2, 1, 2), 4.0),
            Array3::from_elem((2, 1, 2), 4.0),
        )
        .unwrap();
        assert_eq!(normalize_triplet(&t, 1.0).unwrap(), t);
        let half = normalize_triplet(&t, 2.0).unwrap();
        assert!(half.h.iter().all(|&v| v == 2.0));
        assert!(normalize_triplet(&t, 0.0).is_err());
        assert!(normalize_triplet(&t, -1.0).is_err());
    }

    #[test]
    fn uniform_logits_affinity() {
        let a = joint_affinity(array![[0.0]].view(), array![[0.0]].view()).unwrap();
        let r = 0.5f64.sqrt();
        assert!((a[[0, 0]] - r).abs() < 1e-15 && (a[[0, 1]] - r).abs() < 1e-15);
    }

    #[test]
    fn affinity_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let zp = uniform(&mut rng, 3, 3) * -4.0;
        let zn = uniform(&mut rng, 3, 3) * -4.0;
        let a = joint_affinity(zp.view(), zn.view()).unwrap();
        // Straightforward reference: no max subtraction.
        let z = |i: usize, j: usize| if j < 3 { zp[[i, j]] } else { zn[[i, j - 3]] };
        for i in 0..3 {
            for j in 0..6 {
                let row: f64 = (0..6).map(|k| z(i, k).exp()).sum();
                let col: f64 = (0..3).map(|k| z(k, j).exp()).sum();
                let expect = (z(i, j).exp() / row * z(i, j).exp() / col).sqrt();
                assert!((a[[i, j]] - expect).abs() < 1e-10);
            }
        }
        assert!(joint_affinity(zp.view(), Array2::zeros((3, 2)).view()).is_err());
    }

    #[test]
    fn push_pull_hand_values() {
        let (wp, wn) = push_pull_weights(array![[0.3]].view(), array![[0.6]].view()).unwrap();
        assert_eq!(wp, array![[0.3 * 0.6]]);
        assert_eq!(wp, wn);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ap = uniform(&mut rng, 4, 4);
        let (wp, _) = push_pull_weights(ap.view(), Array2::zeros((4, 4)).view()).unwrap();
        assert!(wp.iter().all(|&v| v == 0.0));
        assert!(push_pull_weights(array![[-0.1]].view(), array![[0.1]].view()).is_err());
    }

    #[test]
    fn push_pull_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ap = uniform(&mut rng, 4, 4);
        let an = uniform(&mut rng, 4, 4);
        let (wp, wn) = push_pull_weights(ap.view(), an.view()).unwrap();
        for i in 0..4 {
            let mut sp = 0.0;
            let mut sn = 0.0;
            for j in 0..4 {
                sp += ap[[i, j]];
                sn += an[[i, j]];
            }
            for j in 0..4 {
                assert!((wp[[i, j]] - ap[[i, j]] * sn).abs() < 1e-12);
                assert!((wn[[i, j]] - an[[i, j]] * sp).abs() < 1e-12);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(r: usize, c: usize) -> impl Strategy<Value = Array2<f64>> {
            proptest::collection::vec(-5.0f64..5.0, r * c)
                .prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
        }

        proptest! {
            #[test]
            fn self_distance_symmetric_zero_diag(a in matrix(5, 3)) {
                let d = pairwise_distances(a.view(), a.view()).unwrap();
                for i in 0..5 {
                    prop_assert_eq!(d[[i, i]], 0.0);
                    for j in 0..5 {
                        prop_assert_eq!(d[[i, j]], d[[j, i]]);
                    }
                }
            }

            #[test]
            fn distances_rotation_invariant(a in matrix(4, 2), b in matrix(3, 2), theta in 0.0f64..6.28) {
                let rot = array![[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]];
                let d0 = pairwise_distances(a.view(), b.view()).unwrap();
                let d1 = pairwise_distances(a.dot(&rot).view(), b.dot(&rot).view()).unwrap();
                for (x, y) in d0.iter().zip(d1.iter()) {
                    prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
                }
            }

            #[test]
            fn row_softmax_sums_to_one(z in matrix(3, 6)) {
                let s = softmax_rows(z.view());
                for row in s.outer_iter() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn affinity_in_unit_interval_and_shift_invariant(
                zp in matrix(3, 3), zn in matrix(3, 3), c in -50.0f64..50.0
            ) {
                let a = joint_affinity(zp.view(), zn.view()).unwrap();
                prop_assert!(a.iter().all(|&v| v > 0.0 && v <= 1.0));
                let b = joint_affinity((&zp + c).view(), (&zn + c).view()).unwrap();
                for (x, y) in a.iter().zip(b.iter()) {
                    prop_assert!((x - y).abs() < 1e-10);
                }
            }

            #[test]
            fn push_pull_swap_symmetry(ap in matrix(3, 3), an in matrix(3, 3)) {
                let ap = ap.mapv(f64::abs);
                let an = an.mapv(f64::abs);
                let (wp, wn) = push_pull_weights(ap.view(), an.view()).unwrap();
                let (wp2, wn2) = push_pull_weights(an.view(), ap.view()).unwrap();
                prop_assert_eq!(wp, wn2);
                prop_assert_eq!(wn, wp2);
            }
        }
    }
}
