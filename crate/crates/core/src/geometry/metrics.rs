use super::{PinholeCamera, RigidTransform, Vec3};
use crate::error::{Error, Result};

/// Mean detector-plane distance (mm) between the projections of `targets`
/// under the two poses.
pub fn projection_error(
    camera: &PinholeCamera,
    estimate: &RigidTransform,
    reference: &RigidTransform,
    targets: &[Vec3],
) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sum = 0.0;
    for q in targets {
        let a = camera.project(&estimate.apply(q))?;
        let b = camera.project(&reference.apply(q))?;
        sum += (a - b).norm();
    }
    Ok(sum / targets.len() as f64)
}

/// Mean 3-D displacement (mm) of `targets` between the two poses.
pub fn mtre(estimate: &RigidTransform, reference: &RigidTransform, targets: &[Vec3]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sum: f64 = targets
        .iter()
        .map(|q| (estimate.apply(q) - reference.apply(q)).norm())
        .sum();
    Ok(sum / targets.len() as f64)
}

/// Distance from `point` to the ray `origin + t * dir` (`dir` unit length,
/// `t` unrestricted).
pub fn point_ray_distance(point: &Vec3, origin: &Vec3, dir: &Vec3) -> f64 {
    let l = point - origin;
    (l - dir * l.dot(dir)).norm()
}

/// Mean re-projection distance (mm): each reference-mapped target is
/// measured against the source ray through the estimate's projection of the
/// same target. Insensitive to motion along the viewing rays, which a single
/// view cannot observe.
pub fn mrpd(
    camera: &PinholeCamera,
    estimate: &RigidTransform,
    reference: &RigidTransform,
    targets: &[Vec3],
) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sum = 0.0;
    for q in targets {
        let p_est = camera.project(&estimate.apply(q))?;
        let dir = camera.ray_dir(&p_est);
        sum += point_ray_distance(&reference.apply(q), &camera.source, &dir);
    }
    Ok(sum / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rodrigues, Point2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_camera() -> PinholeCamera {
        PinholeCamera::canonical(
            1200.0,
            Point2::new(190.96, 148.8),
            Point2::new(381.92, 297.6),
        )
        .unwrap()
    }

    fn random_pose(rng: &mut impl Rng, angle: f64, shift: f64) -> RigidTransform {
        let w = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize()
            * rng.random_range(0.0..angle);
        let t = Vec3::new(
            rng.random_range(-shift..shift),
            rng.random_range(-shift..shift),
            rng.random_range(600.0..800.0),
        );
        RigidTransform::from_parts(rodrigues(&w), t)
    }

    fn box_corners(half: f64) -> Vec<Vec3> {
        let mut out = Vec::new();
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    out.push(Vec3::new(sx * half, sy * half, sz * half));
                }
            }
        }
        out
    }

    #[test]
    fn projection_error_is_zero_for_equal_poses() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pose = random_pose(&mut rng, 0.5, 30.0);
        let pe = projection_error(&cam, &pose, &pose, &box_corners(25.0)).unwrap();
        assert_eq!(pe, 0.0);
    }

    #[test]
    fn projection_error_matches_per_target_recompute() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let targets = box_corners(25.0);
        for _ in 0..20 {
            let a = random_pose(&mut rng, 0.4, 25.0);
            let b = random_pose(&mut rng, 0.4, 25.0);
            let pe = projection_error(&cam, &a, &b, &targets).unwrap();
            let mut acc = 0.0;
            for q in &targets {
                let pa = cam.project(&a.apply(q)).unwrap();
                let pb = cam.project(&b.apply(q)).unwrap();
                acc += ((pa.x - pb.x).powi(2) + (pa.y - pb.y).powi(2)).sqrt();
            }
            let oracle = acc / targets.len() as f64;
            assert!((pe - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn mtre_of_pure_translation_equals_its_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let base = random_pose(&mut rng, 0.5, 30.0);
        let offset = Vec3::new(3.0, -4.0, 12.0);
        let moved = RigidTransform::from_parts(base.rotation, base.translation + offset);
        let value = mtre(&moved, &base, &box_corners(20.0)).unwrap();
        assert!((value - offset.norm()).abs() < 1e-12);
    }

    #[test]
    fn mtre_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let a = random_pose(&mut rng, 0.3, 20.0);
        let b = random_pose(&mut rng, 0.3, 20.0);
        let t = box_corners(20.0);
        assert_eq!(mtre(&a, &b, &t).unwrap(), mtre(&b, &a, &t).unwrap());
    }

    // Ternary search over the ray parameter; independent of the projection
    // formula used by point_ray_distance.
    fn ray_distance_by_search(point: &Vec3, origin: &Vec3, dir: &Vec3) -> f64 {
        let mut lo = -5000.0_f64;
        let mut hi = 5000.0_f64;
        let eval = |t: f64| (point - (origin + dir * t)).norm();
        for _ in 0..300 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if eval(m1) < eval(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        eval(0.5 * (lo + hi))
    }

    #[test]
    fn point_ray_distance_matches_line_search_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..50 {
            let point = Vec3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(200.0..900.0),
            );
            let origin = Vec3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let dir = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.2..1.0),
            )
            .normalize();
            let closed = point_ray_distance(&point, &origin, &dir);
            let searched = ray_distance_by_search(&point, &origin, &dir);
            assert!(
                (closed - searched).abs() < 1e-7,
                "closed {closed} vs searched {searched}"
            );
        }
    }

    #[test]
    fn mrpd_ignores_translation_along_the_target_ray() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let gt = random_pose(&mut rng, 0.3, 20.0);
        let q = Vec3::new(8.0, -14.0, 3.0);
        let ray = cam.ray_dir(&cam.project(&gt.apply(&q)).unwrap());
        let est = RigidTransform::from_parts(gt.rotation, gt.translation + ray * 40.0);
        let value = mrpd(&cam, &est, &gt, &[q]).unwrap();
        assert!(value < 1e-9, "depth-only motion should be invisible, got {value}");
    }

    #[test]
    fn mrpd_matches_per_target_recompute() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let targets = box_corners(25.0);
        for _ in 0..10 {
            let est = random_pose(&mut rng, 0.3, 20.0);
            let gt = random_pose(&mut rng, 0.3, 20.0);
            let ours = mrpd(&cam, &est, &gt, &targets).unwrap();
            let mut acc = 0.0;
            for q in &targets {
                let p = cam.project(&est.apply(q)).unwrap();
                let d = cam.ray_dir(&p);
                acc += ray_distance_by_search(&gt.apply(q), &cam.source, &d);
            }
            let oracle = acc / targets.len() as f64;
            assert!((ours - oracle).abs() < 1e-6, "ours {ours} vs oracle {oracle}");
        }
    }

    #[test]
    fn empty_targets_are_rejected() {
        let cam = test_camera();
        let id = RigidTransform::identity();
        assert!(matches!(
            projection_error(&cam, &id, &id, &[]),
            Err(crate::error::Error::EmptyInput)
        ));
        assert!(mtre(&id, &id, &[]).is_err());
        assert!(mrpd(&cam, &id, &id, &[]).is_err());
    }
}
