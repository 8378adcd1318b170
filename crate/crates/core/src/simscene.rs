//! Synthetic scene generation.
//!
//! Replaces the image pipeline end to end: parametric surface phantoms with
//! outward normals, contour-generator selection under a camera pose,
//! correspondence simulation with a controllable noise/outlier model, and
//! standardized start-pose sampling stratified by initial registration
//! error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    mtre, MotionVector, PinholeCamera, Point2, RigidTransform, Vec3,
};
use crate::ppc::{Correspondence, CorrespondenceSet};

/// Default contour-generator tolerance (radians): surface normals within
/// this angle of perpendicular to the viewing ray count as contour points.
pub const TAU_DEFAULT: f64 = 5.0 * std::f64::consts::PI / 180.0;

/// One surface sample: position and outward unit normal, object frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub pos: Vec3,
    pub normal: Vec3,
}

/// Parametric phantom families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PhantomKind {
    /// Axis-aligned box with the given half extents (mm).
    Box { half_extents: Vec3 },
    /// Cylinder along the z axis.
    Cylinder { radius: f64, half_height: f64 },
    /// Sphere centered at the origin.
    Sphere { radius: f64 },
    /// Vertebra-like compound (body cylinder, posterior block, two lateral
    /// wings) with `replicas` copies of itself stacked along the y axis as
    /// confusable neighbor structures.
    VertebraLike { replicas: usize, replica_offset_mm: f64 },
}

/// Surface point cloud of the registered structure plus optional replica
/// (distractor) structures that only serve as wrong-match targets.
#[derive(Debug, Clone)]
pub struct Phantom {
    target: Vec<SurfacePoint>,
    distractors: Vec<SurfacePoint>,
    voi_min: Vec3,
    voi_max: Vec3,
}

impl Phantom {
    /// Builds a phantom directly from surface samples; the first
    /// `target_count` entries form the registered structure, the rest are
    /// distractors. Normals must be unit length.
    pub fn from_surface_points(points: Vec<SurfacePoint>, target_count: usize) -> Result<Self> {
        if target_count == 0 || target_count > points.len() {
            return Err(Error::BadParams(format!(
                "target_count {target_count} out of range for {} points",
                points.len()
            )));
        }
        for (i, sp) in points.iter().enumerate() {
            if !(sp.pos.iter().all(|v| v.is_finite()) && (sp.normal.norm() - 1.0).abs() < 1e-9) {
                return Err(Error::BadParams(format!(
                    "surface point {i} has a non-unit normal or non-finite position"
                )));
            }
        }
        let mut voi_min = Vec3::from_element(f64::INFINITY);
        let mut voi_max = Vec3::from_element(f64::NEG_INFINITY);
        for sp in &points[..target_count] {
            voi_min = voi_min.inf(&sp.pos);
            voi_max = voi_max.sup(&sp.pos);
        }
        let mut points = points;
        let distractors = points.split_off(target_count);
        Ok(Self {
            target: points,
            distractors,
            voi_min,
            voi_max,
        })
    }

    /// Surface samples of the registered structure.
    pub fn target_points(&self) -> &[SurfacePoint] {
        &self.target
    }

    /// Surface samples of the neighbor replicas (wrong-match targets only).
    pub fn distractor_points(&self) -> &[SurfacePoint] {
        &self.distractors
    }

    /// Total number of surface samples across all structures.
    pub fn len(&self) -> usize {
        self.target.len() + self.distractors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    /// Axis-aligned volume of interest of the registered structure.
    pub fn voi(&self) -> (Vec3, Vec3) {
        (self.voi_min, self.voi_max)
    }

    /// The eight corners of the volume of interest.
    pub fn voi_corners(&self) -> [Vec3; 8] {
        let (lo, hi) = (self.voi_min, self.voi_max);
        let mut corners = [Vec3::zeros(); 8];
        for (i, c) in corners.iter_mut().enumerate() {
            *c = Vec3::new(
                if i & 1 == 0 { lo.x } else { hi.x },
                if i & 2 == 0 { lo.y } else { hi.y },
                if i & 4 == 0 { lo.z } else { hi.z },
            );
        }
        corners
    }
}

fn sample_box(rng: &mut impl Rng, half: &Vec3, count: usize) -> Vec<SurfacePoint> {
    // Face areas decide how many samples each face pair receives.
    let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = rng.random_range(0.0..total);
        let mut axis = 2;
        for (i, &a) in areas.iter().enumerate() {
            if pick < 2.0 * a {
                axis = i;
                break;
            }
            pick -= 2.0 * a;
        }
        let sign = if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 };
        let mut pos = Vec3::new(
            rng.random_range(-half.x..half.x),
            rng.random_range(-half.y..half.y),
            rng.random_range(-half.z..half.z),
        );
        pos[axis] = sign * half[axis];
        let mut normal = Vec3::zeros();
        normal[axis] = sign;
        out.push(SurfacePoint { pos, normal });
    }
    out
}

fn sample_cylinder(
    rng: &mut impl Rng,
    radius: f64,
    half_height: f64,
    count: usize,
) -> Vec<SurfacePoint> {
    let lateral = 2.0 * std::f64::consts::PI * radius * 2.0 * half_height;
    let caps = 2.0 * std::f64::consts::PI * radius * radius;
    let total = lateral + caps;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if rng.random_range(0.0..total) < lateral {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let z = rng.random_range(-half_height..half_height);
            let normal = Vec3::new(theta.cos(), theta.sin(), 0.0);
            out.push(SurfacePoint {
                pos: Vec3::new(radius * theta.cos(), radius * theta.sin(), z),
                normal,
            });
        } else {
            let sign = if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 };
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let r = radius * rng.random_range(0.0f64..1.0).sqrt();
            out.push(SurfacePoint {
                pos: Vec3::new(r * theta.cos(), r * theta.sin(), sign * half_height),
                normal: Vec3::new(0.0, 0.0, sign),
            });
        }
    }
    out
}

fn sample_sphere(rng: &mut impl Rng, radius: f64, count: usize) -> Vec<SurfacePoint> {
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    (0..count)
        .map(|_| {
            let dir = loop {
                let v = Vec3::new(
                    gauss.sample(rng),
                    gauss.sample(rng),
                    gauss.sample(rng),
                );
                if v.norm() > 1e-9 {
                    break v.normalize();
                }
            };
            SurfacePoint {
                pos: dir * radius,
                normal: dir,
            }
        })
        .collect()
}

/// Body cylinder plus posterior block and two lateral wings; proportions
/// loosely follow a lumbar vertebra (mm).
fn sample_vertebra(rng: &mut impl Rng, count: usize) -> Vec<SurfacePoint> {
    // Allocate samples across the parts by rough surface area.
    let body = (count as f64 * 0.55) as usize;
    let block = (count as f64 * 0.25) as usize;
    let wing = (count - body - block) / 2;
    let mut out = Vec::with_capacity(count);
    for sp in sample_cylinder(rng, 18.0, 12.0, body) {
        // Vertebral bodies stack along y: rotate the cylinder axis z -> y.
        out.push(SurfacePoint {
            pos: Vec3::new(sp.pos.x, sp.pos.z, -sp.pos.y),
            normal: Vec3::new(sp.normal.x, sp.normal.z, -sp.normal.y),
        });
    }
    for sp in sample_box(rng, &Vec3::new(6.0, 9.0, 10.0), block) {
        out.push(SurfacePoint {
            pos: sp.pos + Vec3::new(0.0, 0.0, -26.0),
            normal: sp.normal,
        });
    }
    for (sign, n) in [(-1.0, wing), (1.0, count - body - block - wing)] {
        for sp in sample_box(rng, &Vec3::new(11.0, 3.5, 4.0), n) {
            out.push(SurfacePoint {
                pos: sp.pos + Vec3::new(sign * 20.0, 0.0, -16.0),
                normal: sp.normal,
            });
        }
    }
    out
}

/// Deterministic surface sampling of the given phantom family with `points`
/// samples on the registered structure (replicas add full copies).
pub fn make_phantom(kind: &PhantomKind, points: usize, seed: u64) -> Result<Phantom> {
    if points < 100 {
        return Err(Error::BadParams(format!(
            "at least 100 surface points required, got {points}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (target, distractors) = match kind {
        PhantomKind::Box { half_extents } => {
            if half_extents.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
                return Err(Error::BadParams("box half extents must be positive".into()));
            }
            (sample_box(&mut rng, half_extents, points), Vec::new())
        }
        PhantomKind::Cylinder {
            radius,
            half_height,
        } => {
            if !(*radius > 0.0 && *half_height > 0.0) {
                return Err(Error::BadParams(
                    "cylinder radius and half height must be positive".into(),
                ));
            }
            (
                sample_cylinder(&mut rng, *radius, *half_height, points),
                Vec::new(),
            )
        }
        PhantomKind::Sphere { radius } => {
            if !(*radius > 0.0) {
                return Err(Error::BadParams("sphere radius must be positive".into()));
            }
            (sample_sphere(&mut rng, *radius, points), Vec::new())
        }
        PhantomKind::VertebraLike {
            replicas,
            replica_offset_mm,
        } => {
            if *replicas > 8 {
                return Err(Error::BadParams("at most 8 replicas supported".into()));
            }
            if *replicas > 0 && !(*replica_offset_mm > 0.0) {
                return Err(Error::BadParams("replica offset must be positive".into()));
            }
            let target = sample_vertebra(&mut rng, points);
            let mut distractors = Vec::with_capacity(points * replicas);
            for r in 0..*replicas {
                // Alternate above/below: +1, -1, +2, -2, ... stacking steps.
                let step = (r / 2 + 1) as f64 * if r % 2 == 0 { 1.0 } else { -1.0 };
                let offset = Vec3::new(0.0, step * replica_offset_mm, 0.0);
                distractors.extend(target.iter().map(|sp| SurfacePoint {
                    pos: sp.pos + offset,
                    normal: sp.normal,
                }));
            }
            (target, distractors)
        }
    };
    let count = target.len();
    let mut all = target;
    all.extend(distractors);
    Phantom::from_surface_points(all, count)
}

fn contour_indices(
    points: &[SurfacePoint],
    camera: &PinholeCamera,
    pose: &RigidTransform,
    tau_rad: f64,
) -> Result<Vec<usize>> {
    let sin_tau = tau_rad.sin();
    let mut idx = Vec::new();
    for (i, sp) in points.iter().enumerate() {
        let w = pose.apply(&sp.pos);
        let l = w - camera.source;
        let depth = l.dot(&camera.view_dir);
        if depth <= crate::geometry::DEPTH_CUTOFF {
            return Err(Error::DegenerateProjection {
                depth,
                cutoff: crate::geometry::DEPTH_CUTOFF,
            });
        }
        let n_cam = pose.rotation * sp.normal;
        if (n_cam.dot(&l) / l.norm()).abs() <= sin_tau {
            idx.push(i);
        }
    }
    Ok(idx)
}

/// Contour-generator points of the registered structure under `pose`:
/// surface points whose outward normal is perpendicular to their viewing
/// ray within `tau_rad`. Returned in the camera frame.
pub fn contour_points(
    phantom: &Phantom,
    camera: &PinholeCamera,
    pose: &RigidTransform,
    tau_rad: f64,
) -> Result<Vec<Vec3>> {
    let idx = contour_indices(&phantom.target, camera, pose, tau_rad)?;
    if idx.is_empty() {
        return Err(Error::NoContour);
    }
    Ok(idx
        .iter()
        .map(|&i| pose.apply(&phantom.target[i].pos))
        .collect())
}

/// How a wrong match is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutlierMode {
    /// Matched position jumps by a uniform offset along the search
    /// direction, up to `max_mm`.
    UniformOffset { max_mm: f64 },
    /// Matched position snaps to the nearest distractor contour along the
    /// search direction (falls back to a uniform offset when the phantom
    /// has no distractors).
    SnapToDistractor,
}

/// Controls for the simulated correspondence search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrSimConfig {
    /// Standard deviation (mm) of inlier displacement noise along the
    /// search direction.
    pub sigma_d: f64,
    /// Probability of replacing a match by an outlier.
    pub outlier_rate: f64,
    pub outlier_mode: OutlierMode,
    /// Match-confidence model: (mean, spread) for inliers, clipped to
    /// [0, 1]. Overlaps the outlier model by design.
    pub ngc_inlier: (f64, f64),
    /// Match-confidence model for outliers.
    pub ngc_outlier: (f64, f64),
    /// Contour-generator tolerance (radians).
    pub tau_rad: f64,
    /// One-sided search window (mm on the detector) along the direction
    /// orthogonal to the contour; true displacements beyond it turn into
    /// outliers because the matcher cannot see the real target.
    pub search_range_mm: Option<f64>,
    /// Cap on the number of correspondences (density control per
    /// resolution level); a random subset is kept.
    pub max_points: Option<usize>,
    pub seed: u64,
}

impl Default for CorrSimConfig {
    fn default() -> Self {
        Self {
            sigma_d: 0.3,
            outlier_rate: 0.0,
            outlier_mode: OutlierMode::UniformOffset { max_mm: 15.0 },
            ngc_inlier: (0.8, 0.1),
            ngc_outlier: (0.3, 0.2),
            tau_rad: TAU_DEFAULT,
            search_range_mm: None,
            max_points: None,
            seed: 0,
        }
    }
}

impl CorrSimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_d >= 0.0 && self.sigma_d.is_finite()) {
            return Err(Error::BadParams("sigma_d must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::BadParams("outlier_rate must lie in [0, 1]".into()));
        }
        if self.ngc_inlier.1 < 0.0 || self.ngc_outlier.1 < 0.0 {
            return Err(Error::BadParams("NGC spreads must be >= 0".into()));
        }
        if !(self.tau_rad >= 0.0 && self.tau_rad < std::f64::consts::FRAC_PI_2) {
            return Err(Error::BadParams(
                "contour tolerance must lie in [0, pi/2)".into(),
            ));
        }
        if let OutlierMode::UniformOffset { max_mm } = self.outlier_mode {
            if !(max_mm > 0.0) {
                return Err(Error::BadParams("outlier offset range must be positive".into()));
            }
        }
        if let Some(r) = self.search_range_mm {
            if !(r > 0.0) {
                return Err(Error::BadParams("search range must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Correspondences plus per-row ground-truth inlier flags. The flags exist
/// for diagnostics and evaluation only; nothing in training or registration
/// reads them.
#[derive(Debug, Clone)]
pub struct SimulatedSet {
    pub set: CorrespondenceSet,
    pub inlier_flags: Vec<bool>,
}

/// Principal direction of the 2-D neighborhood scatter.
fn principal_direction(points: &[Point2], center: &Point2) -> Option<Point2> {
    if points.len() < 2 {
        return None;
    }
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for p in points {
        let d = p - center;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    // Largest-eigenvalue eigenvector of [[sxx, sxy], [sxy, syy]].
    let trace_half = (sxx + syy) * 0.5;
    let det = sxx * syy - sxy * sxy;
    let disc = (trace_half * trace_half - det).max(0.0).sqrt();
    let lam = trace_half + disc;
    let v = if sxy.abs() > 1e-12 {
        Point2::new(lam - syy, sxy)
    } else if sxx >= syy {
        Point2::new(1.0, 0.0)
    } else {
        Point2::new(0.0, 1.0)
    };
    let norm = v.norm();
    if norm < 1e-12 {
        None
    } else {
        Some(v / norm)
    }
}

/// Image tangents estimated per projected contour point from the principal
/// direction of its k nearest projected neighbors.
/// Uniform grid over the point bounding box for exact k-nearest-neighbour
/// queries. Tangent estimation runs once per simulated point per
/// registration iteration, so the naive O(n²) scan is the pipeline's
/// hottest loop; bucketing by cell makes it near-linear.
struct NeighborGrid {
    cells: Vec<Vec<u32>>,
    nx: usize,
    ny: usize,
    cell: f64,
    min: Point2,
}

impl NeighborGrid {
    fn build(points: &[Point2]) -> Self {
        let n = points.len();
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        let span_x = (max.x - min.x).max(1e-9);
        let span_y = (max.y - min.y).max(1e-9);
        // Aim for a handful of points per cell.
        let cell = ((span_x * span_y / n as f64) * 4.0).sqrt().max(1e-9);
        let nx = ((span_x / cell).ceil() as usize + 1).min(4096);
        let ny = ((span_y / cell).ceil() as usize + 1).min(4096);
        let mut cells = vec![Vec::new(); nx * ny];
        let grid = |p: &Point2, min: &Point2, cell: f64, nx: usize, ny: usize| {
            let ix = (((p.x - min.x) / cell) as usize).min(nx - 1);
            let iy = (((p.y - min.y) / cell) as usize).min(ny - 1);
            (ix, iy)
        };
        for (j, p) in points.iter().enumerate() {
            let (ix, iy) = grid(p, &min, cell, nx, ny);
            cells[iy * nx + ix].push(j as u32);
        }
        Self {
            cells,
            nx,
            ny,
            cell,
            min,
        }
    }

    /// Exact `k+1` nearest points to `pi` (including itself), ascending by
    /// distance, appended to `nearest` as (distance², index).
    fn knn(&self, points: &[Point2], pi: &Point2, k: usize, nearest: &mut Vec<(f64, usize)>) {
        nearest.clear();
        let cx = (((pi.x - self.min.x) / self.cell) as isize).clamp(0, self.nx as isize - 1);
        let cy = (((pi.y - self.min.y) / self.cell) as isize).clamp(0, self.ny as isize - 1);
        let max_ring = self.nx.max(self.ny) as isize;
        for ring in 0..=max_ring {
            // Once the ring's inner boundary is farther than the current
            // k-th best distance, no closer point can appear.
            if nearest.len() > k {
                let boundary = (ring - 1).max(0) as f64 * self.cell;
                if boundary * boundary > nearest[k].0 {
                    break;
                }
            }
            let visit = |ix: isize, iy: isize, nearest: &mut Vec<(f64, usize)>| {
                if ix < 0 || iy < 0 || ix >= self.nx as isize || iy >= self.ny as isize {
                    return;
                }
                for &j in &self.cells[iy as usize * self.nx + ix as usize] {
                    let d2 = (points[j as usize] - pi).norm_squared();
                    if nearest.len() <= k {
                        let at = nearest.partition_point(|&(d, _)| d <= d2);
                        nearest.insert(at, (d2, j as usize));
                    } else if d2 < nearest[k].0 {
                        let at = nearest.partition_point(|&(d, _)| d <= d2);
                        nearest.pop();
                        nearest.insert(at, (d2, j as usize));
                    }
                }
            };
            if ring == 0 {
                visit(cx, cy, nearest);
            } else {
                // Top and bottom rows of the ring, then the two side columns.
                for ix in cx - ring..=cx + ring {
                    visit(ix, cy - ring, nearest);
                    visit(ix, cy + ring, nearest);
                }
                for iy in cy - ring + 1..=cy + ring - 1 {
                    visit(cx - ring, iy, nearest);
                    visit(cx + ring, iy, nearest);
                }
            }
        }
    }
}

fn estimate_tangents(projections: &[Point2]) -> Vec<Point2> {
    const NEIGHBORS: usize = 8;
    let n = projections.len();
    let k = NEIGHBORS.min(n - 1);
    let grid = NeighborGrid::build(projections);
    let mut tangents = Vec::with_capacity(n);
    let mut nearest: Vec<(f64, usize)> = Vec::with_capacity(k + 2);
    let mut neighborhood: Vec<Point2> = Vec::with_capacity(k + 1);
    for pi in projections {
        grid.knn(projections, pi, k, &mut nearest);
        neighborhood.clear();
        neighborhood.extend(nearest.iter().map(|&(_, j)| projections[j]));
        let tangent = principal_direction(&neighborhood, pi)
            .unwrap_or_else(|| Point2::new(1.0, 0.0));
        tangents.push(tangent);
    }
    tangents
}

fn clipped_sample(rng: &mut impl Rng, mean: f64, spread: f64) -> f64 {
    if spread == 0.0 {
        return mean.clamp(0.0, 1.0);
    }
    let dist = Normal::new(mean, spread).expect("finite parameters");
    dist.sample(rng).clamp(0.0, 1.0)
}

/// Simulates the 1-D correspondence search for every contour point of
/// `phantom` seen at `current`, matched against the scene at `truth`.
///
/// Each contour point is projected; the match moves from the current
/// projection along the direction orthogonal to the estimated image contour
/// tangent by the true displacement component plus noise (or an outlier
/// offset). The correspondence plane passes through the matched ray and the
/// lifted tangent, which is exactly the subspace the 1-D search cannot
/// observe.
pub fn simulate_correspondences(
    phantom: &Phantom,
    camera: &PinholeCamera,
    current: &RigidTransform,
    truth: &RigidTransform,
    cfg: &CorrSimConfig,
) -> Result<SimulatedSet> {
    cfg.validate()?;
    let mut idx = contour_indices(&phantom.target, camera, current, cfg.tau_rad)?;
    if idx.is_empty() {
        return Err(Error::NoContour);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if let Some(cap) = cfg.max_points {
        if cap == 0 {
            return Err(Error::BadParams("max_points must be positive".into()));
        }
        if cap < idx.len() {
            for i in 0..cap {
                let j = rng.random_range(i..idx.len());
                idx.swap(i, j);
            }
            idx.truncate(cap);
        }
    }

    // Current camera-frame positions and their projections.
    let mut ws = Vec::with_capacity(idx.len());
    let mut proj_cur = Vec::with_capacity(idx.len());
    let mut proj_gt = Vec::with_capacity(idx.len());
    for &i in &idx {
        let w = current.apply(&phantom.target[i].pos);
        proj_cur.push(camera.project(&w)?);
        proj_gt.push(camera.project(&truth.apply(&phantom.target[i].pos))?);
        ws.push(w);
    }
    let tangents = estimate_tangents(&proj_cur);

    // Distractor contour projections under the true pose (the distractors
    // belong to the imaged scene, not to the moving model).
    let distractor_proj: Vec<Point2> = if matches!(cfg.outlier_mode, OutlierMode::SnapToDistractor)
    {
        // Every outlier scores against every candidate below, so bound the
        // candidate set: an evenly strided subset keeps the contour shape
        // at a fraction of the cost.
        const DISTRACTOR_PROJ_CAP: usize = 256;
        let idx = contour_indices(&phantom.distractors, camera, truth, cfg.tau_rad)?;
        let stride = idx.len().div_ceil(DISTRACTOR_PROJ_CAP).max(1);
        idx.iter()
            .step_by(stride)
            .map(|&i| camera.project(&truth.apply(&phantom.distractors[i].pos)))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let noise = if cfg.sigma_d > 0.0 {
        Some(Normal::new(0.0, cfg.sigma_d).expect("validated sigma"))
    } else {
        None
    };

    let mut items = Vec::with_capacity(idx.len());
    let mut flags = Vec::with_capacity(idx.len());
    for k in 0..idx.len() {
        let tangent = tangents[k];
        let ortho = Point2::new(-tangent.y, tangent.x);
        let true_offset = ortho.dot(&(proj_gt[k] - proj_cur[k]));

        let drawn_outlier = cfg.outlier_rate > 0.0 && rng.random_range(0.0..1.0) < cfg.outlier_rate;
        let out_of_range = cfg
            .search_range_mm
            .map(|r| true_offset.abs() > r)
            .unwrap_or(false);
        let is_outlier = drawn_outlier || out_of_range;

        let offset = if !is_outlier {
            true_offset + noise.map(|d| d.sample(&mut rng)).unwrap_or(0.0)
        } else {
            match cfg.outlier_mode {
                OutlierMode::SnapToDistractor if !distractor_proj.is_empty() => {
                    // The matcher latches onto the distractor contour that
                    // crosses the search line closest to the start.
                    let mut best = f64::INFINITY;
                    let mut best_offset = 0.0;
                    for dp in &distractor_proj {
                        let rel = dp - proj_cur[k];
                        let along = ortho.dot(&rel);
                        let across = tangent.dot(&rel).abs();
                        let score = across + 0.1 * along.abs();
                        if score < best {
                            best = score;
                            best_offset = along;
                        }
                    }
                    best_offset + noise.map(|d| d.sample(&mut rng)).unwrap_or(0.0)
                }
                OutlierMode::SnapToDistractor => {
                    let max_mm = 15.0;
                    rng.random_range(-max_mm..max_mm)
                }
                OutlierMode::UniformOffset { max_mm } => rng.random_range(-max_mm..max_mm),
            }
        };

        let matched = proj_cur[k] + ortho * offset;
        let lifted = camera.lift(&matched);
        let ray = camera.ray_dir(&matched);
        let tangent_3d = (camera.axis_u * tangent.x + camera.axis_v * tangent.y).normalize();
        let normal = ray.cross(&tangent_3d).normalize();
        let (mean, spread) = if is_outlier {
            cfg.ngc_outlier
        } else {
            cfg.ngc_inlier
        };
        let ngc = clipped_sample(&mut rng, mean, spread);
        items.push(Correspondence::new(ws[k], lifted, normal, ngc)?);
        flags.push(!is_outlier);
    }
    Ok(SimulatedSet {
        set: CorrespondenceSet::new(items),
        inlier_flags: flags,
    })
}

/// Start-pose sampling plan: `count` poses with initial mean target
/// registration error stratified into equal-width bins over
/// `[min_mtre_mm, max_mtre_mm]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartPoseSpec {
    pub count: usize,
    pub min_mtre_mm: f64,
    pub max_mtre_mm: f64,
    pub bin_width_mm: f64,
    pub seed: u64,
}

impl StartPoseSpec {
    /// Number of stratification bins.
    pub fn bins(&self) -> usize {
        ((self.max_mtre_mm - self.min_mtre_mm) / self.bin_width_mm).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width_mm > 0.0)
            || !(self.max_mtre_mm > self.min_mtre_mm)
            || self.min_mtre_mm < 0.0
        {
            return Err(Error::BadParams("bad start-pose error range".into()));
        }
        let span = self.max_mtre_mm - self.min_mtre_mm;
        let bins = span / self.bin_width_mm;
        if (bins - bins.round()).abs() > 1e-9 || bins.round() < 1.0 {
            return Err(Error::BadParams(
                "bin width must divide the error range".into(),
            ));
        }
        if self.count == 0 || self.count % self.bins() != 0 {
            return Err(Error::BadParams(format!(
                "count {} is not divisible by the {} bins",
                self.count,
                self.bins()
            )));
        }
        Ok(())
    }
}

/// Random rigid offsets of `reference` whose mean target registration error
/// lands in prescribed bins: each bin receives exactly `count / bins` poses.
///
/// A random rotation axis, angle and translation direction are drawn, and a
/// common scale factor is bisected until the error hits a uniformly drawn
/// value inside the pose's bin (the error is monotone in the scale for a
/// fixed direction). Deterministic under the spec seed.
pub fn gen_start_poses(
    spec: &StartPoseSpec,
    camera: &PinholeCamera,
    reference: &RigidTransform,
    targets: &[Vec3],
) -> Result<Vec<RigidTransform>> {
    spec.validate()?;
    if targets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let center = targets
        .iter()
        .map(|q| reference.apply(q))
        .sum::<Vec3>()
        / targets.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let per_bin = spec.count / spec.bins();
    let mut poses = Vec::with_capacity(spec.count);

    let unit = |rng: &mut ChaCha8Rng| -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() > 1e-3 {
                return v.normalize();
            }
        }
    };

    for bin in 0..spec.bins() {
        let lo = spec.min_mtre_mm + bin as f64 * spec.bin_width_mm;
        let hi = lo + spec.bin_width_mm;
        for _ in 0..per_bin {
            // Interior draw keeps the bisected result strictly inside the bin.
            let margin = 1e-6 * spec.bin_width_mm;
            let want = rng.random_range(lo + margin..hi - margin);

            let mut placed = false;
            for _attempt in 0..50 {
                let axis = unit(&mut rng);
                let angle = rng.random_range(0.0..0.02);
                let tdir = unit(&mut rng);
                let tmag = rng.random_range(0.1..1.0);
                let pose_at = |gamma: f64| -> RigidTransform {
                    reference.updated_about(
                        &MotionVector::new(axis * (angle * gamma), tdir * (tmag * gamma)),
                        &center,
                    )
                };
                let err_at = |gamma: f64| -> f64 {
                    mtre(&pose_at(gamma), reference, targets).expect("targets nonempty")
                };

                let mut hi_gamma = 1.0;
                let mut grew = true;
                for _ in 0..40 {
                    if err_at(hi_gamma) >= want {
                        grew = false;
                        break;
                    }
                    hi_gamma *= 2.0;
                }
                if grew {
                    continue;
                }
                let mut lo_gamma = 0.0;
                for _ in 0..80 {
                    let mid = 0.5 * (lo_gamma + hi_gamma);
                    if err_at(mid) < want {
                        lo_gamma = mid;
                    } else {
                        hi_gamma = mid;
                    }
                }
                let pose = pose_at(hi_gamma);
                let achieved = mtre(&pose, reference, targets).expect("targets nonempty");
                if achieved >= lo && achieved < hi && pose.is_finite() {
                    // In-front sanity under the camera.
                    let ok = targets
                        .iter()
                        .all(|q| camera.depth_of(&pose.apply(q)) > 0.0);
                    if ok {
                        poses.push(pose);
                        placed = true;
                        break;
                    }
                }
            }
            if !placed {
                return Err(Error::SamplingFailed(format!(
                    "could not reach an initial error of {want:.3} mm in bin [{lo}, {hi})"
                )));
            }
        }
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap as TestMap;

    #[test]
    fn grid_knn_matches_the_brute_force_neighbour_set() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for trial in 0..30 {
            let n = rng.random_range(1..400);
            // Clustered points stress uneven cell occupancy.
            let points: Vec<Point2> = (0..n)
                .map(|_| {
                    let cluster = rng.random_range(0.0..1.0) < 0.3;
                    let scale = if cluster { 0.5 } else { 40.0 };
                    Point2::new(
                        rng.random_range(-scale..scale),
                        rng.random_range(-scale..scale),
                    )
                })
                .collect();
            let k = 8usize.min(n - 1);
            let grid = NeighborGrid::build(&points);
            let mut nearest = Vec::new();
            for (i, pi) in points.iter().enumerate() {
                grid.knn(&points, pi, k, &mut nearest);
                assert_eq!(nearest.len(), k + 1, "trial {trial} point {i}");
                let mut brute: Vec<f64> = points
                    .iter()
                    .map(|pj| (pj - pi).norm_squared())
                    .collect();
                brute.sort_by(f64::total_cmp);
                // Distances must agree pairwise (sets may differ on exact
                // ties, which is fine for a tangent neighbourhood).
                for (slot, &(d2, _)) in nearest.iter().enumerate() {
                    assert_eq!(
                        d2, brute[slot],
                        "trial {trial} point {i} neighbour {slot}"
                    );
                }
            }
        }
    }

    fn test_camera() -> PinholeCamera {
        PinholeCamera::canonical(
            1200.0,
            Point2::new(190.96, 148.8),
            Point2::new(381.92, 297.6),
        )
        .unwrap()
    }

    fn object_at_isocenter() -> RigidTransform {
        RigidTransform::from_parts(nalgebra::Matrix3::identity(), Vec3::new(0.0, 0.0, 700.0))
    }

    #[test]
    fn box_points_lie_on_faces_with_axis_aligned_normals() {
        let half = Vec3::new(20.0, 15.0, 10.0);
        let phantom = make_phantom(&PhantomKind::Box { half_extents: half }, 500, 1).unwrap();
        for sp in phantom.target_points() {
            let axis = (0..3)
                .find(|&a| sp.normal[a].abs() == 1.0)
                .expect("normal must be a signed unit axis");
            for a in 0..3 {
                if a == axis {
                    assert_eq!(sp.pos[a].abs(), half[a], "point must sit on its face");
                } else {
                    assert_eq!(sp.normal[a], 0.0);
                    assert!(sp.pos[a].abs() <= half[a]);
                }
            }
        }
    }

    #[test]
    fn cylinder_lateral_points_sit_on_the_radius() {
        let phantom = make_phantom(
            &PhantomKind::Cylinder {
                radius: 12.5,
                half_height: 20.0,
            },
            800,
            2,
        )
        .unwrap();
        let mut laterals = 0;
        for sp in phantom.target_points() {
            if sp.normal.z == 0.0 {
                laterals += 1;
                let r = (sp.pos.x * sp.pos.x + sp.pos.y * sp.pos.y).sqrt();
                assert!(
                    (r - 12.5).abs() < 1e-9,
                    "lateral point radius {r} off the surface"
                );
            } else {
                assert_eq!(sp.pos.z.abs(), 20.0, "cap points sit on the end disks");
            }
        }
        assert!(laterals > 0, "expected lateral samples");
    }

    #[test]
    fn replicas_triple_the_point_count() {
        let single = make_phantom(
            &PhantomKind::VertebraLike {
                replicas: 0,
                replica_offset_mm: 30.0,
            },
            2000,
            3,
        )
        .unwrap();
        let compound = make_phantom(
            &PhantomKind::VertebraLike {
                replicas: 2,
                replica_offset_mm: 30.0,
            },
            2000,
            3,
        )
        .unwrap();
        assert_eq!(single.len(), 2000);
        assert_eq!(compound.len(), 3 * 2000);
        assert_eq!(compound.target_points().len(), 2000);
        // Replicas sit offset purely along the stacking axis.
        for (orig, rep) in compound
            .target_points()
            .iter()
            .zip(compound.distractor_points())
        {
            let diff = rep.pos - orig.pos;
            assert_eq!(diff.x, 0.0);
            assert_eq!(diff.z, 0.0);
            assert!((diff.y.abs() - 30.0).abs() < 1e-9);
        }
    }

    #[test]
    fn phantoms_are_deterministic_and_validated() {
        let kind = PhantomKind::Sphere { radius: 25.0 };
        let a = make_phantom(&kind, 300, 7).unwrap();
        let b = make_phantom(&kind, 300, 7).unwrap();
        for (x, y) in a.target_points().iter().zip(b.target_points()) {
            assert_eq!(x.pos, y.pos);
        }
        assert!(make_phantom(&PhantomKind::Sphere { radius: -1.0 }, 300, 7).is_err());
        assert!(make_phantom(&kind, 10, 7).is_err());
        assert!(make_phantom(
            &PhantomKind::Box {
                half_extents: Vec3::new(0.0, 1.0, 1.0)
            },
            300,
            7
        )
        .is_err());
    }

    #[test]
    fn target_points_stay_inside_the_voi() {
        let phantom = make_phantom(
            &PhantomKind::VertebraLike {
                replicas: 2,
                replica_offset_mm: 30.0,
            },
            2000,
            11,
        )
        .unwrap();
        let (lo, hi) = phantom.voi();
        for sp in phantom.target_points() {
            for a in 0..3 {
                assert!(sp.pos[a] >= lo[a] - 1e-12 && sp.pos[a] <= hi[a] + 1e-12);
            }
        }
        // Distractors intentionally live outside the target's volume.
        assert!(phantom
            .distractor_points()
            .iter()
            .any(|sp| sp.pos.y > hi.y || sp.pos.y < lo.y));
    }

    #[test]
    fn sphere_contour_points_hug_the_view_perpendicular_great_circle() {
        let phantom = make_phantom(&PhantomKind::Sphere { radius: 25.0 }, 4000, 13).unwrap();
        let camera = test_camera();
        let pose = object_at_isocenter();
        let tau = TAU_DEFAULT;
        let points = contour_points(&phantom, &camera, &pose, tau).unwrap();
        assert!(!points.is_empty());
        assert!(points.len() < 4000, "contour must be a strict subset");
        let center = pose.translation;
        for w in &points {
            // Independent geometric check: for a sphere the outward normal
            // is (w - center) / r, so the contour condition bounds the angle
            // between radius vector and viewing ray.
            let radial = (w - center).normalize();
            let ray = (w - camera.source).normalize();
            assert!(
                radial.dot(&ray).abs() <= tau.sin() + 1e-12,
                "point off the contour band"
            );
        }
    }

    #[test]
    fn face_on_box_contour_comes_only_from_silhouette_faces() {
        let phantom = make_phantom(
            &PhantomKind::Box {
                half_extents: Vec3::new(20.0, 15.0, 10.0),
            },
            3000,
            17,
        )
        .unwrap();
        let camera = test_camera();
        let pose = object_at_isocenter();
        let idx = contour_indices(phantom.target_points(), &camera, &pose, TAU_DEFAULT).unwrap();
        assert!(!idx.is_empty());
        for &i in &idx {
            let n = phantom.target_points()[i].normal;
            assert_eq!(
                n.z, 0.0,
                "face-on faces (normal along the view) cannot generate contours"
            );
        }
    }

    #[test]
    fn zero_tolerance_keeps_only_exactly_orthogonal_normals() {
        let camera = test_camera();
        // Points in the y = 0 plane through the source: the normal (0, 1, 0)
        // is orthogonal to every such viewing ray with an exactly zero dot
        // product, while any tilt towards the ray breaks it decisively.
        let mut points = Vec::new();
        for i in 0..10 {
            let pos = Vec3::new(i as f64 * 5.0 - 22.5, 0.0, 700.0 + i as f64);
            if i % 2 == 0 {
                points.push(SurfacePoint {
                    pos,
                    normal: Vec3::new(0.0, 1.0, 0.0),
                });
            } else {
                points.push(SurfacePoint {
                    pos,
                    normal: Vec3::new(0.0, 1.0, 0.05).normalize(),
                });
            }
        }
        let n = points.len();
        let phantom = Phantom::from_surface_points(points, n).unwrap();
        let identity = RigidTransform::identity();
        let got = contour_points(&phantom, &camera, &identity, 0.0).unwrap();
        assert_eq!(got.len(), 5, "exactly the orthogonal-normal points");
    }

    #[test]
    fn all_normals_along_view_means_no_contour() {
        let camera = test_camera();
        let points: Vec<SurfacePoint> = (0..20)
            .map(|i| SurfacePoint {
                pos: Vec3::new(i as f64, 0.0, 700.0),
                normal: Vec3::new(0.0, 0.0, 1.0),
            })
            .collect();
        let phantom = Phantom::from_surface_points(points, 20).unwrap();
        assert!(matches!(
            contour_points(&phantom, &camera, &RigidTransform::identity(), 0.01),
            Err(Error::NoContour)
        ));
    }

    #[test]
    fn aligned_noise_free_simulation_yields_zero_distances() {
        let phantom = make_phantom(&PhantomKind::Sphere { radius: 25.0 }, 3000, 19).unwrap();
        let camera = test_camera();
        let pose = object_at_isocenter();
        let cfg = CorrSimConfig {
            sigma_d: 0.0,
            outlier_rate: 0.0,
            seed: 5,
            ..CorrSimConfig::default()
        };
        let sim = simulate_correspondences(&phantom, &camera, &pose, &pose, &cfg).unwrap();
        assert!(!sim.set.is_empty());
        for c in sim.set.items() {
            assert!(
                c.d.abs() < 1e-9,
                "aligned scene must produce on-plane matches, got {}",
                c.d
            );
        }
        assert!(sim.inlier_flags.iter().all(|&f| f));
    }

    #[test]
    fn translation_distances_match_a_plane_projection_oracle() {
        let phantom = make_phantom(&PhantomKind::Sphere { radius: 25.0 }, 3000, 23).unwrap();
        let camera = test_camera();
        let truth = object_at_isocenter();
        // Pure in-plane shift of the current estimate.
        let current = RigidTransform::from_parts(
            truth.rotation,
            truth.translation + Vec3::new(1.5, -0.8, 0.0),
        );
        let cfg = CorrSimConfig {
            sigma_d: 0.0,
            outlier_rate: 0.0,
            seed: 29,
            ..CorrSimConfig::default()
        };
        let sim = simulate_correspondences(&phantom, &camera, &current, &truth, &cfg).unwrap();
        for c in sim.set.items() {
            // Independent oracle: distance from w to the plane spanned by
            // the matched ray and the lifted tangent, computed by a 2-D
            // least-squares projection onto that subspace (no cross
            // products, no stored normal).
            let ray = (c.p - camera.source).normalize();
            // Reconstruct the tangent from the stored plane: it is the
            // in-plane direction orthogonal to the ray.
            let tangent = (c.n.cross(&ray)).normalize();
            let rel = c.w - camera.source;
            let a11 = ray.dot(&ray);
            let a12 = ray.dot(&tangent);
            let a22 = tangent.dot(&tangent);
            let b1 = ray.dot(&rel);
            let b2 = tangent.dot(&rel);
            let det = a11 * a22 - a12 * a12;
            let s = (b1 * a22 - b2 * a12) / det;
            let t = (a11 * b2 - a12 * b1) / det;
            let foot = camera.source + ray * s + tangent * t;
            let dist = (c.w - foot).norm();
            assert!(
                (c.d.abs() - dist).abs() < 1e-9,
                "stored distance {} vs projection oracle {dist}",
                c.d.abs()
            );
        }
    }

    #[test]
    fn snapped_outliers_pull_confidence_below_the_inlier_mean() {
        let phantom = make_phantom(
            &PhantomKind::VertebraLike {
                replicas: 2,
                replica_offset_mm: 30.0,
            },
            4000,
            31,
        )
        .unwrap();
        let camera = test_camera();
        let truth = object_at_isocenter();
        let current = RigidTransform::from_parts(
            truth.rotation,
            truth.translation + Vec3::new(0.5, 0.5, 0.0),
        );
        let mut ngcs = Vec::new();
        let mut seed = 0u64;
        while ngcs.len() < 10_000 {
            let cfg = CorrSimConfig {
                sigma_d: 0.0,
                outlier_rate: 1.0,
                outlier_mode: OutlierMode::SnapToDistractor,
                seed,
                ..CorrSimConfig::default()
            };
            let sim =
                simulate_correspondences(&phantom, &camera, &current, &truth, &cfg).unwrap();
            ngcs.extend(sim.set.items().iter().map(|c| c.ngc));
            assert!(sim.inlier_flags.iter().all(|&f| !f));
            seed += 1;
        }
        let mean = ngcs.iter().sum::<f64>() / ngcs.len() as f64;
        let margin = 5.0 * 0.2 / (ngcs.len() as f64).sqrt();
        assert!(
            mean < 0.8 - margin,
            "outlier confidences should sit clearly below the inlier mean, got {mean}"
        );
    }

    #[test]
    fn realized_outlier_rate_stays_within_binomial_bounds() {
        let phantom = make_phantom(&PhantomKind::Sphere { radius: 25.0 }, 30_000, 37).unwrap();
        let camera = test_camera();
        let truth = object_at_isocenter();
        let current = RigidTransform::from_parts(
            truth.rotation,
            truth.translation + Vec3::new(1.0, 0.0, 0.0),
        );
        let rate = 0.4;
        let mut total = 0usize;
        let mut outliers = 0usize;
        let mut seed = 100u64;
        while total < 10_000 {
            let cfg = CorrSimConfig {
                sigma_d: 0.2,
                outlier_rate: rate,
                seed,
                ..CorrSimConfig::default()
            };
            let sim =
                simulate_correspondences(&phantom, &camera, &current, &truth, &cfg).unwrap();
            total += sim.inlier_flags.len();
            outliers += sim.inlier_flags.iter().filter(|&&f| !f).count();
            seed += 1;
        }
        let realized = outliers as f64 / total as f64;
        let sigma = (rate * (1.0 - rate) / total as f64).sqrt();
        assert!(
            (realized - rate).abs() < 5.0 * sigma,
            "realized rate {realized} strays from {rate} (5 sigma = {})",
            5.0 * sigma
        );
    }

    #[test]
    fn simulated_planes_are_first_order_consistent_with_the_true_motion() {
        let phantom = make_phantom(&PhantomKind::Sphere { radius: 25.0 }, 3000, 41).unwrap();
        let camera = test_camera();
        let truth = object_at_isocenter();
        let cfg = CorrSimConfig {
            sigma_d: 0.0,
            outlier_rate: 0.0,
            seed: 43,
            ..CorrSimConfig::default()
        };
        let axis = Vec3::new(0.4, -0.7, 0.59).normalize();
        let tdir = Vec3::new(-0.3, 0.8, 0.52).normalize();

        let mut ratios = Vec::new();
        for &magnitude in &[4.0, 2.0, 1.0, 0.5] {
            let scale = magnitude / 4.0;
            let motion = MotionVector::new(axis * (0.02 * scale), tdir * (3.0 * scale));
            let current = truth.updated_about(&motion, &truth.translation);
            let sim =
                simulate_correspondences(&phantom, &camera, &current, &truth, &cfg).unwrap();
            let sys = crate::ppc::build_system(&sim.set).unwrap();

            // The true differential motion in the solver's centroid frame.
            let centroid = sys.centroid();
            let dr = truth.rotation * current.rotation.transpose();
            let rot_vec = nalgebra::Rotation3::from_matrix_unchecked(dr).scaled_axis();
            let dnu = truth.translation - centroid - dr * (current.translation - centroid);
            let true_motion = MotionVector::new(rot_vec, dnu);

            let residual = sys
                .residuals(&true_motion)
                .iter()
                .fold(0.0f64, |acc, r| acc.max(r.abs()));
            let norm2 = true_motion.to_vector6().norm_squared();
            ratios.push(residual / norm2);
        }
        let max = ratios.iter().cloned().fold(f64::MIN, f64::max);
        let min = ratios.iter().cloned().fold(f64::MAX, f64::min);
        assert!(
            max / min < 3.0,
            "residual should shrink quadratically with the motion: ratios {ratios:?}"
        );
    }

    #[test]
    fn simulation_rejects_invalid_configs() {
        let cfg = CorrSimConfig {
            outlier_rate: 1.5,
            ..CorrSimConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = CorrSimConfig {
            sigma_d: -1.0,
            ..CorrSimConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = CorrSimConfig {
            search_range_mm: Some(0.0),
            ..CorrSimConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn displacements_beyond_the_search_range_become_outliers() {
        let phantom = make_phantom(&PhantomKind::Sphere { radius: 25.0 }, 3000, 47).unwrap();
        let camera = test_camera();
        let truth = object_at_isocenter();
        // Large in-plane shift: most true matches sit far outside a 2 mm
        // search window.
        let current = RigidTransform::from_parts(
            truth.rotation,
            truth.translation + Vec3::new(8.0, 0.0, 0.0),
        );
        let cfg = CorrSimConfig {
            sigma_d: 0.0,
            outlier_rate: 0.0,
            search_range_mm: Some(2.0),
            seed: 53,
            ..CorrSimConfig::default()
        };
        let sim = simulate_correspondences(&phantom, &camera, &current, &truth, &cfg).unwrap();
        let outliers = sim.inlier_flags.iter().filter(|&&f| !f).count();
        assert!(
            outliers as f64 > 0.3 * sim.inlier_flags.len() as f64,
            "a shift far beyond the window must strand many matches"
        );
        // The same scene with no window keeps every match.
        let open = CorrSimConfig {
            search_range_mm: None,
            ..cfg
        };
        let sim =
            simulate_correspondences(&phantom, &camera, &current, &truth, &open).unwrap();
        assert!(sim.inlier_flags.iter().all(|&f| f));
    }

    #[test]
    fn start_poses_fill_every_bin_exactly() {
        let phantom = make_phantom(&PhantomKind::Sphere { radius: 25.0 }, 500, 59).unwrap();
        let camera = test_camera();
        let reference = object_at_isocenter();
        let targets: Vec<Vec3> = phantom.target_points().iter().map(|sp| sp.pos).collect();
        let spec = StartPoseSpec {
            count: 600,
            min_mtre_mm: 0.0,
            max_mtre_mm: 30.0,
            bin_width_mm: 1.0,
            seed: 61,
        };
        let poses = gen_start_poses(&spec, &camera, &reference, &targets).unwrap();
        assert_eq!(poses.len(), 600);
        let mut counts: TestMap<usize, usize> = TestMap::new();
        for pose in &poses {
            let err = mtre(pose, &reference, &targets).unwrap();
            assert!(err >= 0.0 && err < 30.0, "error {err} outside the range");
            *counts.entry(err.floor() as usize).or_default() += 1;
        }
        for bin in 0..30 {
            assert_eq!(
                counts.get(&bin).copied().unwrap_or(0),
                20,
                "bin {bin} must hold exactly 20 poses"
            );
        }
    }

    #[test]
    fn start_poses_are_deterministic_and_validated() {
        let camera = test_camera();
        let reference = object_at_isocenter();
        let targets = vec![
            Vec3::new(10.0, 0.0, 0.0),
            Vec3::new(-10.0, 5.0, 3.0),
            Vec3::new(0.0, -8.0, -4.0),
        ];
        let spec = StartPoseSpec {
            count: 40,
            min_mtre_mm: 0.0,
            max_mtre_mm: 10.0,
            bin_width_mm: 1.0,
            seed: 67,
        };
        let a = gen_start_poses(&spec, &camera, &reference, &targets).unwrap();
        let b = gen_start_poses(&spec, &camera, &reference, &targets).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.translation, y.translation);
            assert_eq!(x.rotation, y.rotation);
        }

        let bad = StartPoseSpec {
            count: 41,
            ..spec.clone()
        };
        assert!(matches!(
            gen_start_poses(&bad, &camera, &reference, &targets),
            Err(Error::BadParams(_))
        ));
        assert!(matches!(
            gen_start_poses(&spec, &camera, &reference, &[]),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn unreachable_error_targets_fail_cleanly() {
        let camera = test_camera();
        let reference = object_at_isocenter();
        let targets = vec![Vec3::new(10.0, 0.0, 0.0)];
        let spec = StartPoseSpec {
            count: 2,
            min_mtre_mm: 1e15,
            max_mtre_mm: 2e15,
            bin_width_mm: 1e15,
            seed: 71,
        };
        assert!(matches!(
            gen_start_poses(&spec, &camera, &reference, &targets),
            Err(Error::SamplingFailed(_))
        ));
    }

    #[test]
    fn simulated_sets_respect_density_caps_and_determinism() {
        let phantom = make_phantom(&PhantomKind::Sphere { radius: 25.0 }, 5000, 73).unwrap();
        let camera = test_camera();
        let truth = object_at_isocenter();
        let current = RigidTransform::from_parts(
            truth.rotation,
            truth.translation + Vec3::new(1.0, 1.0, 0.0),
        );
        let cfg = CorrSimConfig {
            max_points: Some(128),
            seed: 79,
            ..CorrSimConfig::default()
        };
        let a = simulate_correspondences(&phantom, &camera, &current, &truth, &cfg).unwrap();
        let b = simulate_correspondences(&phantom, &camera, &current, &truth, &cfg).unwrap();
        assert_eq!(a.set.len(), 128);
        for (x, y) in a.set.items().iter().zip(b.set.items()) {
            assert_eq!(x.w, y.w);
            assert_eq!(x.p, y.p);
            assert_eq!(x.ngc, y.ngc);
        }
    }
}
