//! Multiple-gradient descent: convex combination weights on the probability
//! simplex minimizing the norm of the combined gradient.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, DriftError, Result};

/// Symmetric positive semidefinite matrix of gradient inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    h: Array2<f64>,
}

impl GramMatrix {
    /// Validates symmetry and positive semidefiniteness.
    pub fn new(h: Array2<f64>) -> Result<Self> {
        let k = h.nrows();
        if k == 0 || h.ncols() != k {
            return Err(DriftError::invalid(format!("Gram matrix must be square, got {:?}", h.dim())));
        }
        ensure_finite(h.iter(), "Gram matrix")?;
        let scale = h.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..k {
            for j in 0..i {
                if (h[[i, j]] - h[[j, i]]).abs() > 1e-12 * scale {
                    return Err(DriftError::invalid("Gram matrix is not symmetric"));
                }
            }
        }
        let sym = (&h + &h.t()) * 0.5;
        let min_eig = symmetric_eigenvalues(&sym)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-9 * scale {
            return Err(DriftError::invalid(format!(
                "Gram matrix is not positive semidefinite (eigenvalue {min_eig})"
            )));
        }
        Ok(GramMatrix { h: sym })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.h
    }

    pub fn k(&self) -> usize {
        self.h.nrows()
    }

    /// `αᵀ H α`.
    pub fn objective(&self, alpha: ArrayView1<f64>) -> f64 {
        alpha.dot(&self.h.dot(&alpha))
    }
}

/// Convex weights: nonnegative, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights {
    pub alpha: Vec<f64>,
}

impl SimplexWeights {
    pub fn uniform(k: usize) -> Self {
        SimplexWeights {
            alpha: vec![1.0 / k as f64; k],
        }
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        self.alpha.iter().all(|&a| a >= 0.0) && (self.alpha.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QpOptions {
    pub max_iters: usize,
    /// Fixed step size; `None` selects the curvature-based default.
    pub step: Option<f64>,
    pub tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            max_iters: 500,
            step: None,
            tol: 1e-10,
        }
    }
}

/// `H[i][j] = ⟨g_i, g_j⟩`.
pub fn gram_matrix(grads: &[ArrayView1<f64>]) -> Result<GramMatrix> {
    let first = grads
        .first()
        .ok_or_else(|| DriftError::invalid("gram_matrix needs at least one gradient"))?;
    if grads.iter().any(|g| g.len() != first.len()) {
        return Err(DriftError::shape("gradients differ in length"));
    }
    let k = grads.len();
    let mut h = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..=i {
            let v = grads[i].dot(&grads[j]);
            h[[i, j]] = v;
            h[[j, i]] = v;
        }
    }
    ensure_finite(h.iter(), "gradients")?;
    Ok(GramMatrix { h })
}

/// Euclidean projection onto `{α ≥ 0, Σα = 1}` by sorting and thresholding.
pub fn project_to_simplex(v: ArrayView1<f64>) -> SimplexWeights {
    let k = v.len();
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    let mut alpha: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // Absorb rounding so the weights sum to one.
    let sum: f64 = alpha.iter().sum();
    if sum > 0.0 {
        alpha.iter_mut().for_each(|a| *a /= sum);
    } else {
        alpha = vec![1.0 / k as f64; k];
    }
    SimplexWeights { alpha }
}

/// Largest curvature of `αᵀHα` along the simplex's tangent space
/// `{d : Σ d = 0}`.
fn tangent_curvature(h: &Array2<f64>) -> f64 {
    let k = h.nrows();
    let p = Array2::from_shape_fn((k, k), |(i, j)| {
        if i == j {
            1.0 - 1.0 / k as f64
        } else {
            -1.0 / k as f64
        }
    });
    let php = p.dot(h).dot(&p);
    let sym = (&php + &php.t()) * 0.5;
    symmetric_eigenvalues(&sym)
        .into_iter()
        .fold(0.0f64, f64::max)
}

/// Minimizer of `αᵀHα` subject to `Σα = 1` on the support of `alpha`,
/// `α_S ∝ (H_S + δI)⁻¹ 1`. The tiny ridge `δ` keeps rank-deficient faces
/// solvable. `None` unless the result is finite and nonnegative.
fn face_minimizer(h: &Array2<f64>, alpha: &Array1<f64>) -> Option<(Array1<f64>, f64)> {
    let support: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] > 0.0).collect();
    let n = support.len();
    if n < 2 {
        return None;
    }
    let trace: f64 = support.iter().map(|&i| h[[i, i]]).sum();
    let ridge = 1e-13 * trace / n as f64 + f64::MIN_POSITIVE;
    // Augmented [H_S + δI | 1], eliminated with partial pivoting.
    let mut a = Array2::from_shape_fn((n, n + 1), |(r, c)| {
        if c == n {
            1.0
        } else {
            h[[support[r], support[c]]] + if r == c { ridge } else { 0.0 }
        }
    });
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[[x, col]].abs().total_cmp(&a[[y, col]].abs()))?;
        if a[[piv, col]] == 0.0 {
            return None;
        }
        for c in 0..=n {
            a.swap([col, c], [piv, c]);
        }
        for r in col + 1..n {
            let f = a[[r, col]] / a[[col, col]];
            for c in col..=n {
                a[[r, c]] -= f * a[[col, c]];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let tail: f64 = (r + 1..n).map(|c| a[[r, c]] * x[c]).sum();
        x[r] = (a[[r, n]] - tail) / a[[r, r]];
    }
    let total: f64 = x.iter().sum();
    if !total.is_finite() || total <= 0.0 || x.iter().any(|&v| !(v >= 0.0)) {
        return None;
    }
    let mut out = Array1::zeros(alpha.len());
    for (&i, v) in support.iter().zip(&x) {
        out[i] = v / total;
    }
    let obj = out.dot(&h.dot(&out));
    obj.is_finite().then_some((out, obj))
}

/// Minimizes `αᵀHα` over the simplex by projected gradient descent from the
/// uniform point.
///
/// The default step is `1 / (2·λ_max(PHP) + ε)`, where `P` projects onto the
/// simplex's tangent space: projection onto the simplex ignores any gradient
/// component along the all-ones direction, so this is the reciprocal
/// Lipschitz constant of the part of the gradient that moves the iterate.
pub fn solve_simplex_qp(h: &GramMatrix, opts: &QpOptions) -> Result<SimplexWeights> {
    ensure_finite(h.h.iter(), "Gram matrix")?;
    let k = h.k();
    let step = match opts.step {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(DriftError::invalid(format!("QP step must be positive, got {s}"))),
        None => 1.0 / (2.0 * tangent_curvature(&h.h) + f64::EPSILON),
    };
    let mut alpha = Array1::from_elem(k, 1.0 / k as f64);
    let mut best = h.objective(alpha.view());
    for _ in 0..opts.max_iters {
        let grad = h.h.dot(&alpha) * 2.0;
        let next = Array1::from(project_to_simplex((&alpha - &(grad * step)).view()).alpha);
        let obj = h.objective(next.view());
        if obj > best {
            // Only accept non-increasing iterates; a fixed step larger than
            // the curvature allows would otherwise oscillate.
            break;
        }
        let delta = (&next - &alpha).mapv(|d| d * d).sum().sqrt();
        alpha = next;
        best = obj;
        if delta < opts.tol {
            break;
        }
    }
    // PGD crawls along a face when H is ill-conditioned or rank-deficient;
    // finish with the exact minimizer on the face it reached.
    if let Some((polished, obj)) = face_minimizer(&h.h, &alpha) {
        // Strict beyond rounding, so flat objectives keep the PGD point.
        if best - obj > 1e-12 * best.abs() {
            alpha = polished;
            best = obj;
        }
    }
    // PGD approaches an optimal vertex only geometrically; snap to it.
    let (vertex, vertex_obj) = (0..k)
        .map(|i| (i, h.h[[i, i]]))
        .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
    if vertex_obj < best {
        alpha.fill(0.0);
        alpha[vertex] = 1.0;
    }
    Ok(SimplexWeights {
        alpha: alpha.to_vec(),
    })
}

/// Closed-form minimizer of the two-gradient problem:
/// `α₁ = clip(⟨g₂ − g₁, g₂⟩ / ‖g₁ − g₂‖², 0, 1)`.
pub fn two_objective_closed_form(g1: ArrayView1<f64>, g2: ArrayView1<f64>) -> Result<SimplexWeights> {
    if g1.len() != g2.len() {
        return Err(DriftError::shape("gradients differ in length"));
    }
    if g1.iter().all(|&x| x == 0.0) && g2.iter().all(|&x| x == 0.0) {
        return Err(DriftError::invalid("both gradients vanish"));
    }
    let diff = &g2 - &g1;
    let denom = diff.dot(&diff);
    if denom == 0.0 {
        return Ok(SimplexWeights::uniform(2));
    }
    let a1 = (diff.dot(&g2) / denom).clamp(0.0, 1.0);
    Ok(SimplexWeights {
        alpha: vec![a1, 1.0 - a1],
    })
}

/// Output-space gradient coordination of fidelity and λ-scaled drift.
pub fn coordinate(
    grad_fid: ArrayView1<f64>,
    grad_drift: ArrayView1<f64>,
    lambda: f64,
    opts: &QpOptions,
) -> Result<(SimplexWeights, Array1<f64>)> {
    if grad_fid.len() != grad_drift.len() {
        return Err(DriftError::shape(format!(
            "fidelity gradient has {} entries, drift gradient {}",
            grad_fid.len(),
            grad_drift.len()
        )));
    }
    let scaled = grad_drift.mapv(|g| g * lambda);
    let h = gram_matrix(&[grad_fid, scaled.view()])?;
    let w = solve_simplex_qp(&h, opts)?;
    let combined = grad_fid.mapv(|g| g * w.alpha[0]) + scaled.mapv(|g| g * w.alpha[1]);
    Ok((w, combined))
}

/// Coordination of `k ≥ 2` gradients: every gradient after the first is
/// scaled by `lambda` before the simplex QP.
pub fn coordinate_all(
    grads: &[ArrayView1<f64>],
    lambda: f64,
    opts: &QpOptions,
) -> Result<(SimplexWeights, Array1<f64>)> {
    if grads.len() < 2 {
        return Err(DriftError::invalid(format!("need at least 2 gradients, got {}", grads.len())));
    }
    let scaled: Vec<Array1<f64>> = grads
        .iter()
        .enumerate()
        .map(|(i, g)| if i == 0 { g.to_owned() } else { g.mapv(|x| x * lambda) })
        .collect();
    let views: Vec<ArrayView1<f64>> = scaled.iter().map(|g| g.view()).collect();
    let h = gram_matrix(&views)?;
    let w = solve_simplex_qp(&h, opts)?;
    let mut combined = Array1::zeros(grads[0].len());
    for (a, g) in w.alpha.iter().zip(&scaled) {
        combined.scaled_add(*a, g);
    }
    Ok((w, combined))
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
pub(crate) fn symmetric_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        if off <= 1e-30 * (1.0 + m.iter().map(|v| v * v).sum::<f64>()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[[p, q]] == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let (mrp, mrq) = (m[[r, p]], m[[r, q]]);
                    m[[r, p]] = c * mrp - s * mrq;
                    m[[r, q]] = s * mrp + c * mrq;
                }
                for r in 0..n {
                    let (mpr, mqr) = (m[[p, r]], m[[q, r]]);
                    m[[p, r]] = c * mpr - s * mqr;
                    m[[q, r]] = s * mpr + c * mqr;
                }
            }
        }
    }
    (0..n).map(|i| m[[i, i]]).collect()
}
