//! Shared fixtures for the criterion benchmarks: a mid-sized phantom, a
//! camera, and a correspondence set captured at a perturbed pose.

use ppcreg_core::{
    make_phantom, simulate_correspondences, CorrSimConfig, CorrespondenceSet, MotionVector,
    Phantom, PhantomKind, PinholeCamera, Point2, Result, RigidTransform, Vec3,
};

pub struct Fixture {
    pub phantom: Phantom,
    pub camera: PinholeCamera,
    pub truth: RigidTransform,
    pub start: RigidTransform,
    pub set: CorrespondenceSet,
}

/// Builds a deterministic benchmark scene with roughly `n` correspondences.
pub fn fixture(n: usize) -> Result<Fixture> {
    let camera = PinholeCamera::canonical(
        1200.0,
        Point2::new(190.96, 148.8),
        Point2::new(381.92, 297.6),
    )?;
    let phantom = make_phantom(
        &PhantomKind::VertebraLike {
            replicas: 0,
            replica_offset_mm: 30.0,
        },
        6 * n,
        11,
    )?;
    let truth = RigidTransform {
        rotation: ppcreg_core::rodrigues(&Vec3::new(0.05, -0.03, 0.08)),
        translation: Vec3::new(4.0, -6.0, 700.0),
    };
    let start = truth.updated_about(
        &MotionVector::new(Vec3::new(0.01, -0.015, 0.01), Vec3::new(2.0, -1.5, 3.0)),
        &truth.translation,
    );
    let sim = CorrSimConfig {
        max_points: Some(n),
        seed: 5,
        ..CorrSimConfig::default()
    };
    let out = simulate_correspondences(&phantom, &camera, &start, &truth, &sim)?;
    Ok(Fixture {
        phantom,
        camera,
        truth,
        start,
        set: out.set,
    })
}
