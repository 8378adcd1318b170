use serde::{Deserialize, Serialize};

use super::{Mat3, Vec3, Vector6};
use crate::error::{Error, Result};

/// Orthonormality / determinant slack accepted by [`RigidTransform::new`].
const ROTATION_TOL: f64 = 1e-10;

/// Below this angle the closed-form axis-angle coefficients switch to their
/// series expansions; the truncation error is O(angle^6) and therefore far
/// below f64 resolution at the cutoff.
const SMALL_ANGLE: f64 = 1e-4;

/// Rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    /// Builds a transform after checking that `rotation` is a proper rotation
    /// (orthonormal, determinant +1) within `1e-10`.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let gram_defect = (rotation.transpose() * rotation - Mat3::identity()).norm();
        let det_defect = (rotation.determinant() - 1.0).abs();
        if gram_defect > ROTATION_TOL || det_defect > ROTATION_TOL {
            return Err(Error::NonFinitePose);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a transform without validation. Callers must guarantee the
    /// rotation block is proper.
    pub fn from_parts(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Composition `self ∘ other`: `other` acts first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }

    /// Distance of the rotation block from the orthonormal manifold.
    pub fn rotation_defect(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity()).norm()
    }

    /// Replaces the rotation block by its nearest proper rotation. Applied
    /// once per registration iteration so numerical drift cannot accumulate.
    pub fn re_orthonormalize(&mut self) {
        self.rotation = nearest_rotation(&self.rotation);
    }

    /// Left-multiplies the small motion `delta`, expressed about `center`:
    /// the rotation pivots around `center` instead of the camera origin.
    ///
    /// Equivalent to `translate(center) * delta * translate(-center) * self`.
    pub fn updated_about(&self, delta: &MotionVector, center: &Vec3) -> Self {
        let dr = rodrigues(&delta.rot);
        let rotation = dr * self.rotation;
        let translation = dr * (self.translation - center) + delta.trans + center;
        Self {
            rotation,
            translation,
        }
    }
}

/// Small-motion parameters: rotation vector `rot` (radians, axis times
/// angle) and translation `trans` (mm).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotionVector {
    pub rot: Vec3,
    pub trans: Vec3,
}

impl MotionVector {
    pub fn new(rot: Vec3, trans: Vec3) -> Self {
        Self { rot, trans }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector6(v: &Vector6) -> Self {
        Self {
            rot: Vec3::new(v[0], v[1], v[2]),
            trans: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector6(&self) -> Vector6 {
        Vector6::new(
            self.rot.x, self.rot.y, self.rot.z, self.trans.x, self.trans.y, self.trans.z,
        )
    }

    /// The rigid transform reached by this motion: rotation about the
    /// normalized axis `rot / |rot|` by `|rot|` radians, then translation.
    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform {
            rotation: rodrigues(&self.rot),
            translation: self.trans,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rot.iter().all(|v| v.is_finite()) && self.trans.iter().all(|v| v.is_finite())
    }
}

fn skew(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// sin(a)/a and (1-cos(a))/a^2 with series fallbacks near zero.
fn aa_coeffs(angle: f64) -> (f64, f64) {
    if angle < SMALL_ANGLE {
        let a2 = angle * angle;
        (
            1.0 - a2 / 6.0 + a2 * a2 / 120.0,
            0.5 - a2 / 24.0 + a2 * a2 / 720.0,
        )
    } else {
        (
            angle.sin() / angle,
            (1.0 - angle.cos()) / (angle * angle),
        )
    }
}

/// Rotation matrix for the rotation vector `w` (axis times angle).
pub fn rodrigues(w: &Vec3) -> Mat3 {
    let angle = w.norm();
    let (a, b) = aa_coeffs(angle);
    let k = skew(w);
    Mat3::identity() + k * a + k * k * b
}

/// Partial derivatives of [`rodrigues`] with respect to the three rotation
/// vector components. Smooth through the zero-angle branch.
pub fn rodrigues_jacobian(w: &Vec3) -> [Mat3; 3] {
    let angle = w.norm();
    let (a, b) = aa_coeffs(angle);
    // Derivatives of the coefficients divided by the angle:
    // c1 = (d a / d angle) / angle, c2 = (d b / d angle) / angle.
    let (c1, c2) = if angle < SMALL_ANGLE {
        let a2 = angle * angle;
        (
            -1.0 / 3.0 + a2 / 30.0 - a2 * a2 / 840.0,
            -1.0 / 12.0 + a2 / 180.0 - a2 * a2 / 6720.0,
        )
    } else {
        let a2 = angle * angle;
        (
            (angle * angle.cos() - angle.sin()) / (a2 * angle),
            (angle * angle.sin() + 2.0 * angle.cos() - 2.0) / (a2 * a2),
        )
    };
    let k = skew(w);
    let kk = k * k;
    let axes = [Vec3::x(), Vec3::y(), Vec3::z()];
    std::array::from_fn(|i| {
        let e = skew(&axes[i]);
        k * (c1 * w[i]) + e * a + kk * (c2 * w[i]) + (e * k + k * e) * b
    })
}

/// Nearest proper rotation to `m` in the Frobenius sense.
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("3x3 svd always yields u");
    let v_t = svd.v_t.expect("3x3 svd always yields v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let flip = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        r = u * flip * v_t;
    }
    r
}
