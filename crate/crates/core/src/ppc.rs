//! Point-to-plane correspondence model and the closed-form motion solve.
//!
//! Each correspondence constrains the displaced surface point `w` to the
//! plane through its matched image point `p` with unit normal `n`. First-order
//! expansion of a rigid motion `(dw, dv)` acting on the centroid-shifted point
//! `w~ = w - c` turns every constraint into one linear row
//!
//! ```text
//!   a = ((w~ x n)^T, n^T),   a . motion = d,   d = n . (p - w)
//! ```
//!
//! and the weighted, Tikhonov-regularized least squares over all rows has the
//! closed-form solution `(A^T S^2 A + N L I)^-1 A^T S^2 b`. Estimating about
//! the centroid keeps rotation and translation columns comparably scaled; the
//! caller re-embeds the result with [`RigidTransform::updated_about`].

use nalgebra::{Matrix6, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{MotionVector, Vec3, Vector6};

/// Unit-normal slack accepted by [`Correspondence::new`].
const NORMAL_TOL: f64 = 1e-9;

/// Condition estimate above which an unregularized system is rejected.
pub const CONDITION_LIMIT: f64 = 1e12;

/// One surface-point-to-plane constraint, camera frame, millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    /// Surface point on the apparent contour.
    pub w: Vec3,
    /// Matched point on the constraint plane (lifted image match).
    pub p: Vec3,
    /// Unit plane normal.
    pub n: Vec3,
    /// Signed point-to-plane distance `n . (p - w)`.
    pub d: f64,
    /// Match confidence in `[-1, 1]` (gradient-correlation style score).
    pub ngc: f64,
}

impl Correspondence {
    /// Builds a constraint; `d` is derived from the geometry so the stored
    /// distance can never disagree with the plane.
    pub fn new(w: Vec3, p: Vec3, n: Vec3, ngc: f64) -> Result<Self> {
        if (n.norm() - 1.0).abs() > NORMAL_TOL {
            return Err(Error::BadParams(format!(
                "plane normal must be unit length, |n| = {}",
                n.norm()
            )));
        }
        if !(-1.0..=1.0).contains(&ngc) || !ngc.is_finite() {
            return Err(Error::BadParams(format!("ngc {ngc} outside [-1, 1]")));
        }
        let d = n.dot(&(p - w));
        Ok(Self { w, p, n, d, ngc })
    }
}

/// A batch of correspondences plus the centroid of their surface points.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    items: Vec<Correspondence>,
    centroid: Vec3,
}

impl CorrespondenceSet {
    pub fn new(items: Vec<Correspondence>) -> Self {
        let centroid = if items.is_empty() {
            Vec3::zeros()
        } else {
            items.iter().map(|c| c.w).sum::<Vec3>() / items.len() as f64
        };
        Self { items, centroid }
    }

    pub fn items(&self) -> &[Correspondence] {
        &self.items
    }

    pub fn centroid(&self) -> Vec3 {
        self.centroid
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// New set holding the selected indices; the centroid is recomputed.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self::new(indices.iter().map(|&i| self.items[i]).collect())
    }
}

/// Non-negative, finite per-correspondence weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights(Vec<f64>);

impl Weights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::BadParams(
                "weights must be finite and non-negative".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Linearized constraint stack `A x = b` in the centroid-shifted frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PpcSystem {
    rows: Vec<Vector6>,
    rhs: Vec<f64>,
    centroid: Vec3,
    /// When set, translation along this unit axis is forced to zero and the
    /// solve runs in the remaining five degrees of freedom.
    depth_lock: Option<Vec3>,
}

impl PpcSystem {
    pub fn rows(&self) -> &[Vector6] {
        &self.rows
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn centroid(&self) -> Vec3 {
        self.centroid
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn depth_lock(&self) -> Option<Vec3> {
        self.depth_lock
    }

    /// Signed residuals `A x - b` for a candidate motion.
    pub fn residuals(&self, motion: &MotionVector) -> Vec<f64> {
        let x = motion.to_vector6();
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(a, b)| a.dot(&x) - b)
            .collect()
    }
}

/// Builds the linear system for a correspondence set.
pub fn build_system(set: &CorrespondenceSet) -> Result<PpcSystem> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let c = set.centroid();
    let mut rows = Vec::with_capacity(set.len());
    let mut rhs = Vec::with_capacity(set.len());
    for corr in set.items() {
        let shifted = corr.w - c;
        let lever = shifted.cross(&corr.n);
        rows.push(Vector6::new(
            lever.x, lever.y, lever.z, corr.n.x, corr.n.y, corr.n.z,
        ));
        rhs.push(corr.d);
    }
    Ok(PpcSystem {
        rows,
        rhs,
        centroid: c,
        depth_lock: None,
    })
}

/// Copy of the system with translation along `view_dir` excluded from the
/// solution space. Used on the coarsest level where depth is unobservable.
pub fn restrict_depth(sys: &PpcSystem, view_dir: &Vec3) -> Result<PpcSystem> {
    if view_dir.norm() < 1e-12 {
        return Err(Error::BadParams("depth lock axis is zero".into()));
    }
    Ok(PpcSystem {
        depth_lock: Some(view_dir.normalize()),
        ..sys.clone()
    })
}

fn accumulate_normal_equations(
    sys: &PpcSystem,
    weights: &Weights,
) -> (Matrix6<f64>, Vector6) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for ((a, &b), &s) in sys.rows.iter().zip(&sys.rhs).zip(weights.as_slice()) {
        let s2 = s * s;
        if s2 == 0.0 {
            continue;
        }
        h.syger(s2, a, a, 1.0);
        g.axpy(s2 * b, a, 1.0);
    }
    // syger fills the lower triangle only; mirror it.
    h.fill_upper_triangle_with_lower_triangle();
    (h, g)
}

fn condition_estimate<const D: usize>(h: &SMatrix<f64, D, D>) -> f64 {
    let dyn_h = nalgebra::DMatrix::from_iterator(D, D, h.iter().cloned());
    let eig = dyn_h.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 || !min.is_finite() || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

fn solve_spd<const D: usize>(
    h: SMatrix<f64, D, D>,
    g: SVector<f64, D>,
    unregularized: bool,
) -> Result<SVector<f64, D>> {
    if unregularized {
        let cond = condition_estimate(&h);
        if cond > CONDITION_LIMIT {
            return Err(Error::SingularSystem { cond });
        }
    }
    match h.cholesky() {
        Some(chol) => Ok(chol.solve(&g)),
        None => Err(Error::SingularSystem {
            cond: condition_estimate(&h),
        }),
    }
}

/// Orthonormal basis of the motion subspace with translation along `axis`
/// removed: rotation stays free, translation is spanned by two unit vectors
/// perpendicular to `axis`.
fn depth_lock_basis(axis: &Vec3) -> SMatrix<f64, 6, 5> {
    let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u1 = axis.cross(&helper).normalize();
    let u2 = axis.cross(&u1);
    let mut b = SMatrix::<f64, 6, 5>::zeros();
    b[(0, 0)] = 1.0;
    b[(1, 1)] = 1.0;
    b[(2, 2)] = 1.0;
    for i in 0..3 {
        b[(3 + i, 3)] = u1[i];
        b[(3 + i, 4)] = u2[i];
    }
    b
}

/// Closed-form weighted least-squares motion (data term averaged over rows,
/// plus `lambda * |motion|^2`). With a depth lock the solve runs in five
/// degrees of freedom and the locked translation component is re-embedded
/// as zero.
pub fn solve_weighted(sys: &PpcSystem, weights: &Weights, lambda: f64) -> Result<MotionVector> {
    if sys.len() == 0 {
        return Err(Error::EmptySet);
    }
    if weights.len() != sys.len() {
        return Err(Error::BadParams(format!(
            "{} weights for {} rows",
            weights.len(),
            sys.len()
        )));
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::BadParams("lambda must be finite and >= 0".into()));
    }
    let (mut h, g) = accumulate_normal_equations(sys, weights);
    let n_lambda = sys.len() as f64 * lambda;
    match sys.depth_lock {
        None => {
            for i in 0..6 {
                h[(i, i)] += n_lambda;
            }
            let x = solve_spd(h, g, lambda == 0.0)?;
            Ok(MotionVector::from_vector6(&x))
        }
        Some(axis) => {
            let basis = depth_lock_basis(&axis);
            let mut h_red = basis.transpose() * h * basis;
            let g_red = basis.transpose() * g;
            for i in 0..5 {
                h_red[(i, i)] += n_lambda;
            }
            let z = solve_spd(h_red, g_red, lambda == 0.0)?;
            Ok(MotionVector::from_vector6(&(basis * z)))
        }
    }
}

/// Sensitivity of [`solve_weighted`] to the per-row weights.
///
/// Given the solved motion `x` for weights `s` and a gradient `incoming` of
/// some loss with respect to `x`, returns the loss gradient with respect to
/// each weight. Derivation: with `H(s) x = g(s)`, perturbing one weight
/// gives `dx/ds_i = H^-1 * 2 s_i a_i (b_i - a_i . x)`, so the chained
/// gradient is `2 s_i (gbar . a_i)(b_i - a_i . x)` where `H gbar = incoming`
/// (projected through the reduced basis when a depth lock is active).
pub fn solve_weight_adjoint(
    sys: &PpcSystem,
    weights: &Weights,
    lambda: f64,
    solution: &MotionVector,
    incoming: &Vector6,
) -> Result<Vec<f64>> {
    if sys.len() == 0 {
        return Err(Error::EmptySet);
    }
    if weights.len() != sys.len() {
        return Err(Error::BadParams(format!(
            "{} weights for {} rows",
            weights.len(),
            sys.len()
        )));
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::BadParams("lambda must be finite and >= 0".into()));
    }
    let (mut h, _) = accumulate_normal_equations(sys, weights);
    let n_lambda = sys.len() as f64 * lambda;
    let gbar = match sys.depth_lock {
        None => {
            for i in 0..6 {
                h[(i, i)] += n_lambda;
            }
            solve_spd(h, *incoming, lambda == 0.0)?
        }
        Some(axis) => {
            let basis = depth_lock_basis(&axis);
            let mut h_red = basis.transpose() * h * basis;
            for i in 0..5 {
                h_red[(i, i)] += n_lambda;
            }
            let z = solve_spd(h_red, basis.transpose() * incoming, lambda == 0.0)?;
            basis * z
        }
    };
    let x = solution.to_vector6();
    Ok(sys
        .rows
        .iter()
        .zip(&sys.rhs)
        .zip(weights.as_slice())
        .map(|((a, &b), &s)| 2.0 * s * gbar.dot(a) * (b - a.dot(&x)))
        .collect())
}

/// Kernel width policy for the robust solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelWidth {
    /// Fixed width in millimetres.
    Fixed(f64),
    /// `1.4826 * median(|residual|)` over rows with positive weight,
    /// refreshed every round.
    AdaptiveMedian,
}

/// Settings for [`solve_mccr`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MccrConfig {
    pub width: KernelWidth,
    pub rounds: usize,
    pub lambda: f64,
}

impl Default for MccrConfig {
    fn default() -> Self {
        Self {
            width: KernelWidth::AdaptiveMedian,
            rounds: 10,
            lambda: 0.0,
        }
    }
}

fn median_abs(values: &mut Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("residuals are finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Robust motion estimate under the maximum-correntropy criterion: iterated
/// reweighting with the Gaussian kernel `exp(-r^2 / (2 w^2))` stacked on top
/// of the caller's weights.
pub fn solve_mccr(sys: &PpcSystem, weights: &Weights, cfg: &MccrConfig) -> Result<MotionVector> {
    if let KernelWidth::Fixed(w) = cfg.width {
        if w <= 0.0 || !w.is_finite() {
            return Err(Error::BadParams("kernel width must be positive".into()));
        }
    }
    let mut motion = solve_weighted(sys, weights, cfg.lambda)?;
    for _ in 0..cfg.rounds {
        let residuals = sys.residuals(&motion);
        let width = match cfg.width {
            KernelWidth::Fixed(w) => w,
            KernelWidth::AdaptiveMedian => {
                let mut active: Vec<f64> = residuals
                    .iter()
                    .zip(weights.as_slice())
                    .filter(|(_, &s)| s > 0.0)
                    .map(|(r, _)| r.abs())
                    .collect();
                (1.4826 * median_abs(&mut active)).max(1e-9)
            }
        };
        let inv = 1.0 / (2.0 * width * width);
        let kernelized: Vec<f64> = weights
            .as_slice()
            .iter()
            .zip(&residuals)
            .map(|(&s, &r)| s * (-r * r * inv).exp())
            .collect();
        motion = solve_weighted(sys, &Weights(kernelized), cfg.lambda)?;
    }
    Ok(motion)
}
