use serde::{Deserialize, Serialize};

use super::{Point2, Vec3};
use crate::error::{Error, Result};

/// Points closer to the source plane than this (mm) cannot be projected.
pub const DEPTH_CUTOFF: f64 = 1e-6;

/// Ideal pinhole: the X-ray source sits at `source`, the detector plane lies
/// at distance `focal_mm` along `view_dir`. Detector coordinates are in mm;
/// the principal ray pierces the detector at `principal_mm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub focal_mm: f64,
    pub principal_mm: Point2,
    /// Usable detector extent (width, height) in mm, spanning
    /// `[0, w] x [0, h]`.
    pub detector_mm: Point2,
    pub source: Vec3,
    /// Horizontal detector axis.
    pub axis_u: Vec3,
    /// Vertical detector axis.
    pub axis_v: Vec3,
    /// Principal direction; `axis_u x axis_v = view_dir`.
    pub view_dir: Vec3,
}

impl PinholeCamera {
    /// Camera at the origin looking along +z with detector axes x, y.
    pub fn canonical(focal_mm: f64, principal_mm: Point2, detector_mm: Point2) -> Result<Self> {
        Self::new(
            focal_mm,
            principal_mm,
            detector_mm,
            Vec3::zeros(),
            Vec3::x(),
            Vec3::y(),
            Vec3::z(),
        )
    }

    pub fn new(
        focal_mm: f64,
        principal_mm: Point2,
        detector_mm: Point2,
        source: Vec3,
        axis_u: Vec3,
        axis_v: Vec3,
        view_dir: Vec3,
    ) -> Result<Self> {
        let cam = Self {
            focal_mm,
            principal_mm,
            detector_mm,
            source,
            axis_u,
            axis_v,
            view_dir,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let tol = 1e-9;
        let ortho = (self.axis_u.norm() - 1.0).abs() < tol
            && (self.axis_v.norm() - 1.0).abs() < tol
            && (self.view_dir.norm() - 1.0).abs() < tol
            && self.axis_u.dot(&self.axis_v).abs() < tol
            && (self.axis_u.cross(&self.axis_v) - self.view_dir).norm() < tol;
        if self.focal_mm <= 0.0 || !ortho {
            return Err(Error::BadParams("camera frame is not orthonormal".into()));
        }
        Ok(())
    }

    /// Projects a camera-frame point onto the detector.
    pub fn project(&self, y: &Vec3) -> Result<Point2> {
        let l = y - self.source;
        let depth = l.dot(&self.view_dir);
        if depth <= DEPTH_CUTOFF {
            return Err(Error::DegenerateProjection {
                depth,
                cutoff: DEPTH_CUTOFF,
            });
        }
        let m = self.focal_mm / depth;
        Ok(self.principal_mm + Point2::new(l.dot(&self.axis_u) * m, l.dot(&self.axis_v) * m))
    }

    /// 3-D position of a detector point on the image plane.
    pub fn lift(&self, p: &Point2) -> Vec3 {
        let d = p - self.principal_mm;
        self.source + self.view_dir * self.focal_mm + self.axis_u * d.x + self.axis_v * d.y
    }

    /// Unit direction of the ray from the source through detector point `p`.
    pub fn ray_dir(&self, p: &Point2) -> Vec3 {
        (self.lift(p) - self.source).normalize()
    }

    /// Depth of a camera-frame point along the principal direction.
    pub fn depth_of(&self, y: &Vec3) -> f64 {
        (y - self.source).dot(&self.view_dir)
    }

    pub fn in_detector(&self, p: &Point2) -> bool {
        p.x >= 0.0 && p.x <= self.detector_mm.x && p.y >= 0.0 && p.y <= self.detector_mm.y
    }
}
