//! Rigid 3-D motion, the pinhole projection model and registration error
//! metrics.
//!
//! Conventions used throughout the crate:
//! * object points are mapped into the camera frame by `T.apply(q)`,
//! * the X-ray source sits at the camera origin and looks along `view_dir`,
//! * image coordinates are millimetres on the detector plane.

mod camera;
mod metrics;
mod transform;

pub use camera::{PinholeCamera, DEPTH_CUTOFF};
pub use metrics::{mrpd, mtre, point_ray_distance, projection_error};
pub use transform::{
    nearest_rotation, rodrigues, rodrigues_jacobian, MotionVector, RigidTransform,
};

/// 3-D vector or point, millimetres.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 2-D detector-plane point, millimetres.
pub type Point2 = nalgebra::Vector2<f64>;
/// 3x3 matrix.
pub type Mat3 = nalgebra::Matrix3<f64>;
/// Stacked motion parameters (rotation xyz, then translation xyz).
pub type Vector6 = nalgebra::Vector6<f64>;
