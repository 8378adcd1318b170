//! Iterative multi-resolution registration and the named method variants.
//!
//! A variant fixes, per resolution level, the regularization, the weight
//! source (thresholded match confidence, a scaled version of it, or a
//! trained network), the solver and whether depth translation is locked.
//! Registration alternates correspondence simulation at the current pose
//! with one closed-form motion solve until the update is small.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mrpd, projection_error, MotionVector, PinholeCamera, RigidTransform, Vec3};
use crate::ppc::{
    build_system, restrict_depth, solve_mccr, solve_weighted, CorrespondenceSet, KernelWidth,
    MccrConfig, Weights,
};
use crate::seeding::split_seed;
use crate::simscene::{simulate_correspondences, CorrSimConfig, Phantom};
use crate::weightnet::{build_features, forward, ModelRecord};

/// Detector pixel pitch (mm) used to report projection errors in pixels.
pub const DETECTOR_PIXEL_MM: f64 = 0.62;

/// Match confidences below this value are zeroed before weighting.
pub const NGC_WEIGHT_THRESHOLD: f64 = 0.1;

/// Contour density cap on the finest level when the case does not set one;
/// coarser levels receive the cap multiplied by their scale.
pub const BASE_CONTOUR_DENSITY: usize = 1024;

/// Where the per-correspondence weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightSource {
    /// `gain * ngc` where confidences below [`NGC_WEIGHT_THRESHOLD`] give 0.
    ThresholdedNgc { gain: f64 },
    /// Trained per-level weighting network.
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverKind {
    LeastSquares,
    /// Iteratively reweighted solve under a correntropy kernel.
    Mccr,
}

/// Settings for one resolution level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    /// Resolution scale in (0, 1]; multiplies matching noise and contour
    /// density.
    pub scale: f64,
    pub lambda: f64,
    pub weight_source: WeightSource,
    pub solver: SolverKind,
    /// Lock translation along the viewing direction (single-view depth is
    /// barely observable; the coarsest level benefits most).
    pub depth_restricted: bool,
    pub max_iterations: usize,
    /// Stop the level once the rotation update falls below this (radians)…
    pub stop_rot_rad: f64,
    /// …and the translation update below this (mm).
    pub stop_trans_mm: f64,
}

/// A named registration strategy: level settings coarse to fine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: String,
    pub levels: Vec<LevelConfig>,
}

impl VariantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::BadParams("variant needs at least one level".into()));
        }
        let mut prev = 0.0;
        for (i, level) in self.levels.iter().enumerate() {
            if !(level.scale > 0.0 && level.scale <= 1.0) || level.scale < prev {
                return Err(Error::BadParams(format!(
                    "level {i}: scales must be ascending within (0, 1]"
                )));
            }
            prev = level.scale;
            if !(level.lambda >= 0.0 && level.lambda.is_finite()) {
                return Err(Error::BadParams(format!("level {i}: bad lambda")));
            }
            if level.max_iterations == 0 {
                return Err(Error::BadParams(format!(
                    "level {i}: at least one iteration required"
                )));
            }
            if level.stop_rot_rad < 0.0 || level.stop_trans_mm < 0.0 {
                return Err(Error::BadParams(format!(
                    "level {i}: stop thresholds must be >= 0"
                )));
            }
            if let WeightSource::ThresholdedNgc { gain } = level.weight_source {
                if !(gain > 0.0 && gain.is_finite()) {
                    return Err(Error::BadParams(format!(
                        "level {i}: weight gain must be positive"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Resolution scales of the three-level schedule, coarsest first.
pub const VARIANT_SCALES: [f64; 3] = [0.25, 0.5, 1.0];

fn ppc_level(scale: f64, coarsest: bool) -> LevelConfig {
    LevelConfig {
        scale,
        lambda: 0.0,
        weight_source: WeightSource::ThresholdedNgc { gain: 1.0 },
        solver: SolverKind::Mccr,
        depth_restricted: coarsest,
        max_iterations: 15,
        stop_rot_rad: 1e-3,
        stop_trans_mm: 0.05,
    }
}

fn gain_level(scale: f64, gain: f64) -> LevelConfig {
    LevelConfig {
        scale,
        lambda: 0.01,
        weight_source: WeightSource::ThresholdedNgc { gain },
        solver: SolverKind::LeastSquares,
        depth_restricted: false,
        max_iterations: 15,
        stop_rot_rad: 1e-3,
        stop_trans_mm: 0.05,
    }
}

fn network_level(scale: f64) -> LevelConfig {
    LevelConfig {
        weight_source: WeightSource::Network,
        ..gain_level(scale, 1.0)
    }
}

/// Pinned settings for the named method variants. The "+" variants switch
/// the finest level to the baseline's robust configuration.
pub fn variant_config(name: &str) -> Result<VariantConfig> {
    let canonical = name.to_ascii_uppercase();
    let levels: Vec<LevelConfig> = match canonical.as_str() {
        "PPC" => VARIANT_SCALES
            .iter()
            .enumerate()
            .map(|(i, &s)| ppc_level(s, i == 0))
            .collect(),
        "PPC-R" => VARIANT_SCALES.iter().map(|&s| gain_level(s, 2.0)).collect(),
        "PPC-RM" => VARIANT_SCALES.iter().map(|&s| gain_level(s, 0.25)).collect(),
        "PPC-L" => VARIANT_SCALES.iter().map(|&s| network_level(s)).collect(),
        "PPC-L+" => {
            let mut levels: Vec<LevelConfig> =
                VARIANT_SCALES.iter().map(|&s| network_level(s)).collect();
            let last = levels.len() - 1;
            levels[last] = ppc_level(VARIANT_SCALES[last], false);
            levels
        }
        "PPC-RM+" => {
            let mut levels: Vec<LevelConfig> =
                VARIANT_SCALES.iter().map(|&s| gain_level(s, 0.25)).collect();
            let last = levels.len() - 1;
            levels[last] = ppc_level(VARIANT_SCALES[last], false);
            levels
        }
        _ => return Err(Error::UnknownVariant(name.to_string())),
    };
    let cfg = VariantConfig {
        name: canonical,
        levels,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Names accepted by [`variant_config`].
pub const VARIANT_NAMES: [&str; 6] = ["PPC", "PPC-R", "PPC-RM", "PPC-L", "PPC-L+", "PPC-RM+"];

/// One registration problem: a phantom observed by a camera at an unknown
/// true pose, entered at a perturbed start pose.
#[derive(Debug, Clone)]
pub struct CaseRecord<'a> {
    pub phantom: &'a Phantom,
    pub camera: PinholeCamera,
    pub truth: RigidTransform,
    pub start: RigidTransform,
    /// Finest-level simulation settings; coarser levels scale the matching
    /// noise and density down and the search window up.
    pub sim: CorrSimConfig,
    pub seed: u64,
}

impl CaseRecord<'_> {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.camera.validate()?;
        if !(self.truth.is_finite() && self.start.is_finite()) {
            return Err(Error::BadParams("case poses must be finite".into()));
        }
        Ok(())
    }
}

/// Summary of the weights applied in one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub mean: f64,
    pub max: f64,
    pub zero_fraction: f64,
}

impl WeightStats {
    fn of(weights: &Weights) -> Self {
        let vals = weights.as_slice();
        let n = vals.len().max(1) as f64;
        Self {
            mean: vals.iter().sum::<f64>() / n,
            max: vals.iter().cloned().fold(0.0, f64::max),
            zero_fraction: vals.iter().filter(|&&v| v == 0.0).count() as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub level: usize,
    pub delta: MotionVector,
    pub pe_mm: f64,
    pub mrpd_mm: f64,
    pub weights: WeightStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CaseStatus {
    Completed,
    /// The pose left the numeric domain; the case counts as failed but the
    /// partial trace is preserved.
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationTrace {
    pub steps: Vec<IterationRecord>,
    pub final_pose: RigidTransform,
    pub status: CaseStatus,
}

impl RegistrationTrace {
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn succeeded(&self) -> bool {
        matches!(self.status, CaseStatus::Completed)
    }
}

/// Per-level adaptation of the base simulation settings: the displacement
/// noise and the point budget shrink with the level scale while the
/// matching window widens by the same factor, mirroring how downsampled
/// images behave.
pub fn level_sim_config(base: &CorrSimConfig, scale: f64, seed: u64) -> CorrSimConfig {
    let density = base.max_points.unwrap_or(BASE_CONTOUR_DENSITY);
    CorrSimConfig {
        sigma_d: base.sigma_d * scale,
        max_points: Some(((density as f64 * scale).round() as usize).max(1)),
        search_range_mm: base.search_range_mm.map(|r| r / scale),
        seed,
        ..base.clone()
    }
}

fn compute_weights(
    set: &CorrespondenceSet,
    level: &LevelConfig,
    level_index: usize,
    models: &[ModelRecord],
) -> Result<Weights> {
    match level.weight_source {
        WeightSource::ThresholdedNgc { gain } => Weights::new(
            set.items()
                .iter()
                .map(|c| {
                    if c.ngc >= NGC_WEIGHT_THRESHOLD {
                        gain * c.ngc
                    } else {
                        0.0
                    }
                })
                .collect(),
        ),
        WeightSource::Network => {
            let record = models
                .iter()
                .find(|m| m.level as usize == level_index)
                .ok_or_else(|| {
                    Error::BadParams(format!(
                        "no weighting model provided for level {level_index}"
                    ))
                })?;
            let feats = build_features(set, record.feature_scale)?;
            forward(&record.params, &feats)
        }
    }
}

fn solve_level(
    set: &CorrespondenceSet,
    weights: &Weights,
    level: &LevelConfig,
    view_dir: &Vec3,
) -> Result<(MotionVector, Vec3)> {
    let mut sys = build_system(set)?;
    if level.depth_restricted {
        sys = restrict_depth(&sys, view_dir)?;
    }
    let centroid = sys.centroid();
    let delta = match level.solver {
        SolverKind::LeastSquares => solve_weighted(&sys, weights, level.lambda)?,
        SolverKind::Mccr => solve_mccr(
            &sys,
            weights,
            &MccrConfig {
                width: KernelWidth::AdaptiveMedian,
                rounds: 10,
                lambda: level.lambda,
            },
        )?,
    };
    Ok((delta, centroid))
}

/// Runs the full coarse-to-fine loop for one case.
///
/// Every iteration re-simulates correspondences at the current pose, weights
/// them per the variant, solves for the motion and applies it about the
/// correspondence centroid. The rotation is re-orthonormalized each step. A
/// non-finite pose ends the case as a recorded failure; solver and
/// projection errors propagate.
pub fn register_case(
    case: &CaseRecord,
    variant: &VariantConfig,
    models: &[ModelRecord],
) -> Result<RegistrationTrace> {
    case.validate()?;
    variant.validate()?;
    let corners = case.phantom.voi_corners();
    let mut pose = case.start;
    let mut steps = Vec::new();

    for (li, level) in variant.levels.iter().enumerate() {
        for it in 0..level.max_iterations {
            let seed = split_seed(case.seed, "register-sim", ((li as u64) << 32) | it as u64);
            let cfg = level_sim_config(&case.sim, level.scale, seed);
            let sim =
                simulate_correspondences(case.phantom, &case.camera, &pose, &case.truth, &cfg)?;
            let weights = compute_weights(&sim.set, level, li, models)?;
            let (delta, centroid) = solve_level(&sim.set, &weights, level, &case.camera.view_dir)?;

            pose = pose.updated_about(&delta, &centroid);
            if !pose.is_finite() {
                return Ok(RegistrationTrace {
                    steps,
                    final_pose: case.start,
                    status: CaseStatus::Failed {
                        reason: format!("pose became non-finite at level {li}, iteration {it}"),
                    },
                });
            }
            pose.re_orthonormalize();

            steps.push(IterationRecord {
                level: li,
                delta,
                pe_mm: projection_error(&case.camera, &pose, &case.truth, &corners)?,
                mrpd_mm: mrpd(&case.camera, &pose, &case.truth, &corners)?,
                weights: WeightStats::of(&weights),
            });

            if delta.rot.norm() < level.stop_rot_rad && delta.trans.norm() < level.stop_trans_mm {
                break;
            }
        }
    }
    Ok(RegistrationTrace {
        steps,
        final_pose: pose,
        status: CaseStatus::Completed,
    })
}

/// One weighted solve per case on the coarsest level, reported as
/// (initial, after) projection error pairs in detector pixels.
///
/// To isolate the weighting strategies the solver is least squares for all
/// variants, depth is unrestricted, and the density is fixed at 1024
/// correspondences.
pub fn single_iteration_experiment(
    cases: &[CaseRecord],
    variant: &VariantConfig,
    models: &[ModelRecord],
) -> Result<Vec<(f64, f64)>> {
    if cases.is_empty() {
        return Err(Error::EmptyInput);
    }
    variant.validate()?;
    let level = LevelConfig {
        solver: SolverKind::LeastSquares,
        depth_restricted: false,
        ..variant.levels[0]
    };
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        case.validate()?;
        let corners = case.phantom.voi_corners();
        let pe_initial = projection_error(&case.camera, &case.start, &case.truth, &corners)?;

        let seed = split_seed(case.seed, "single-iter", 0);
        let mut cfg = level_sim_config(&case.sim, level.scale, seed);
        cfg.max_points = Some(1024);
        let sim =
            simulate_correspondences(case.phantom, &case.camera, &case.start, &case.truth, &cfg)?;
        let weights = compute_weights(&sim.set, &level, 0, models)?;
        let (delta, centroid) = solve_level(&sim.set, &weights, &level, &case.camera.view_dir)?;
        let mut pose = case.start.updated_about(&delta, &centroid);
        if !pose.is_finite() {
            return Err(Error::NonFinitePose);
        }
        pose.re_orthonormalize();
        let pe_after = projection_error(&case.camera, &pose, &case.truth, &corners)?;
        out.push((
            pe_initial / DETECTOR_PIXEL_MM,
            pe_after / DETECTOR_PIXEL_MM,
        ));
    }
    Ok(out)
}
