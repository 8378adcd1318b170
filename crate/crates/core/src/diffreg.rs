//! End-to-end differentiable registration error, used to train the
//! weighting network.
//!
//! The loss for one sample is the projection error after a single weighted
//! motion solve:
//!
//! ```text
//! e(theta) = PE( update(solve(A, b, M_theta(features)), T_hat), T_truth )
//! ```
//!
//! Every stage is differentiated in reverse mode: the mean projection error
//! over target corners, the pinhole projection, the pose update (including
//! the axis-angle exponential), the closed-form weighted solve (via its
//! weight adjoint) and finally the network itself. Training runs adaptive
//! moment estimation over minibatches with per-step point subsampling and
//! geometric augmentation, and keeps the parameters of the best validation
//! epoch.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    rodrigues, rodrigues_jacobian, Mat3, PinholeCamera, Point2, RigidTransform, Vec3, Vector6,
};
use crate::ppc::{build_system, solve_weight_adjoint, solve_weighted, CorrespondenceSet, Weights};
use crate::seeding::split_seed;
use crate::weightnet::{backward, build_features, forward_cached, NetworkParams};

/// One precomputed training case: a correspondence set captured at the
/// start pose, the poses themselves and the target corners that define the
/// projection error.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// Correspondences in the camera frame at the pose `start` (surface
    /// points are the model points mapped by `start`).
    pub set: CorrespondenceSet,
    pub camera: PinholeCamera,
    /// Current estimate the single solve starts from.
    pub start: RigidTransform,
    /// Ground-truth pose the projection error is measured against.
    pub truth: RigidTransform,
    /// Object-frame corners of the target region (bounding box).
    pub corners: [Vec3; 8],
    /// Resolution level this sample belongs to.
    pub level: u32,
    /// Divisor applied to point coordinates and plane distances when
    /// building network features.
    pub feature_scale: f64,
}

impl TrainingSample {
    fn validate(&self) -> Result<()> {
        if self.set.is_empty() {
            return Err(Error::EmptySet);
        }
        if !(self.feature_scale.is_finite() && self.feature_scale > 0.0) {
            return Err(Error::BadParams(format!(
                "feature scale must be positive, got {}",
                self.feature_scale
            )));
        }
        Ok(())
    }

    /// The same sample restricted to the correspondences at `indices`.
    pub fn subsampled(&self, indices: &[usize]) -> Self {
        Self {
            set: self.set.subset(indices),
            ..self.clone()
        }
    }
}

/// Gradient of [`PinholeCamera::project`] with respect to the 3-D point.
fn project_backward(cam: &PinholeCamera, y: &Vec3, upstream: &Point2) -> Vec3 {
    let l = y - cam.source;
    let z = l.dot(&cam.view_dir);
    let m = cam.focal_mm / z;
    cam.axis_u * (m * upstream.x) + cam.axis_v * (m * upstream.y)
        - cam.view_dir
            * (cam.focal_mm / (z * z)
                * (l.dot(&cam.axis_u) * upstream.x + l.dot(&cam.axis_v) * upstream.y))
}

/// Mean projection error over the corners plus its gradient with respect to
/// the estimated pose (rotation matrix and translation). The per-corner
/// distance gradient is defined as zero at exactly zero distance.
fn pe_with_pose_gradient(
    cam: &PinholeCamera,
    estimate: &RigidTransform,
    reference: &RigidTransform,
    corners: &[Vec3; 8],
) -> Result<(f64, Mat3, Vec3)> {
    let count = corners.len() as f64;
    let mut sum = 0.0;
    let mut rot_bar = Mat3::zeros();
    let mut trans_bar = Vec3::zeros();
    for q in corners {
        let le = estimate.apply(q);
        let diff = cam.project(&le)? - cam.project(&reference.apply(q))?;
        let norm = diff.norm();
        sum += norm;
        if norm > 0.0 {
            let lbar = project_backward(cam, &le, &(diff / (count * norm)));
            rot_bar += lbar * q.transpose();
            trans_bar += lbar;
        }
    }
    Ok((sum / count, rot_bar, trans_bar))
}

/// Projection error after one weighted solve with explicit `weights`.
///
/// The motion is solved in the centroid-shifted frame and composed onto the
/// sample's start pose about that centroid.
pub fn registration_error(sample: &TrainingSample, weights: &Weights, lambda: f64) -> Result<f64> {
    sample.validate()?;
    let sys = build_system(&sample.set)?;
    let delta = solve_weighted(&sys, weights, lambda)?;
    let pose = sample.start.updated_about(&delta, &sys.centroid());
    crate::geometry::projection_error(&sample.camera, &pose, &sample.truth, &sample.corners)
}

fn eval_sample(
    params: &NetworkParams,
    sample: &TrainingSample,
    lambda: f64,
    want_grad: bool,
) -> Result<(f64, Option<NetworkParams>)> {
    sample.validate()?;
    let feats = build_features(&sample.set, sample.feature_scale)?;
    let (weights, cache) = forward_cached(params, &feats)?;
    let sys = build_system(&sample.set)?;
    let delta = solve_weighted(&sys, &weights, lambda)?;
    let centroid = sys.centroid();
    let pose = sample.start.updated_about(&delta, &centroid);
    let (loss, rot_bar, trans_bar) =
        pe_with_pose_gradient(&sample.camera, &pose, &sample.truth, &sample.corners)?;
    if !want_grad {
        return Ok((loss, None));
    }

    // Pose update: R = dR * R_hat, t = dR * (t_hat - c) + dnu + c, so the
    // incremental rotation collects both pose gradients and the incremental
    // translation gradient is the pose translation gradient itself.
    let dr_bar =
        rot_bar * sample.start.rotation.transpose() + trans_bar * (sample.start.translation - centroid).transpose();
    let jac = rodrigues_jacobian(&delta.rot);
    let mut incoming = Vector6::zeros();
    for k in 0..3 {
        incoming[k] = dr_bar.component_mul(&jac[k]).sum();
        incoming[3 + k] = trans_bar[k];
    }

    let sbar = solve_weight_adjoint(&sys, &weights, lambda, &delta, &incoming)?;
    let (grads, _) = backward(params, &cache, &sbar)?;
    Ok((loss, Some(grads)))
}

/// Registration error of `sample` under the network weights `params`.
pub fn objective(params: &NetworkParams, sample: &TrainingSample, lambda: f64) -> Result<f64> {
    eval_sample(params, sample, lambda, false).map(|(loss, _)| loss)
}

/// [`objective`] together with its exact reverse-mode parameter gradient.
pub fn grad_objective(
    params: &NetworkParams,
    sample: &TrainingSample,
    lambda: f64,
) -> Result<(f64, NetworkParams)> {
    let (loss, grads) = eval_sample(params, sample, lambda, true)?;
    Ok((loss, grads.expect("gradient requested")))
}

/// Geometric symmetry applied to a whole training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    /// Shift the scene parallel to the detector (mm along its two axes).
    Translate { x_mm: f64, y_mm: f64 },
    /// Rotate the scene about the principal ray through the source.
    RotateInPlane { angle_rad: f64 },
    /// Mirror the scene across the plane spanned by the vertical detector
    /// axis and the principal direction.
    HFlip,
}

/// Applies `map: x -> lin * (x - src) + src + offset` to all camera-frame
/// quantities and an optional object-frame mirror that keeps poses proper.
fn map_scene(
    sample: &TrainingSample,
    lin: &Mat3,
    offset: &Vec3,
    object_mirror: Option<&Mat3>,
) -> Result<TrainingSample> {
    let src = sample.camera.source;
    let point = |x: &Vec3| lin * (x - src) + src + offset;
    let items = sample
        .set
        .items()
        .iter()
        .map(|c| {
            let moved = crate::ppc::Correspondence::new(point(&c.w), point(&c.p), lin * c.n, c.ngc)?;
            Ok(moved)
        })
        .collect::<Result<Vec<_>>>()?;

    let mirror = object_mirror.cloned().unwrap_or_else(Mat3::identity);
    let map_pose = |t: &RigidTransform| -> Result<RigidTransform> {
        RigidTransform::new(
            lin * t.rotation * mirror,
            lin * (t.translation - src) + src + offset,
        )
    };
    let mut corners = sample.corners;
    for q in corners.iter_mut() {
        *q = mirror * *q;
    }
    Ok(TrainingSample {
        set: CorrespondenceSet::new(items),
        camera: sample.camera.clone(),
        start: map_pose(&sample.start)?,
        truth: map_pose(&sample.truth)?,
        corners,
        level: sample.level,
        feature_scale: sample.feature_scale,
    })
}

/// Applies a geometric symmetry consistently to correspondences, poses and
/// target corners. Plane distances and match confidences are untouched by
/// construction; the horizontal flip also mirrors the object frame so both
/// poses stay proper rotations.
pub fn augment(sample: &TrainingSample, op: &AugmentOp) -> Result<TrainingSample> {
    match *op {
        AugmentOp::Translate { x_mm, y_mm } => {
            let offset = sample.camera.axis_u * x_mm + sample.camera.axis_v * y_mm;
            map_scene(sample, &Mat3::identity(), &offset, None)
        }
        AugmentOp::RotateInPlane { angle_rad } => {
            let rot = rodrigues(&(sample.camera.view_dir * angle_rad));
            map_scene(sample, &rot, &Vec3::zeros(), None)
        }
        AugmentOp::HFlip => {
            let u = sample.camera.axis_u;
            let mirror = Mat3::identity() - 2.0 * u * u.transpose();
            let object_mirror = Matrix3::from_diagonal(&Vec3::new(-1.0, 1.0, 1.0));
            map_scene(sample, &mirror, &Vec3::zeros(), Some(&object_mirror))
        }
    }
}

/// Hyper-parameters of the training loop.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Solve regularization used inside the objective.
    pub lambda: f64,
    /// Correspondences drawn (without replacement) per sample per step.
    pub points_per_sample: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Base step size; multiplied by `step_decay` after every epoch.
    pub step_size: f64,
    pub step_decay: f64,
    pub seed: u64,
    pub augment_translate: bool,
    pub augment_rotate: bool,
    pub augment_flip: bool,
    /// When false the global weighting factor stays at its initial value.
    pub train_global_factor: bool,
    /// Fraction of the corpus held out to pick the best epoch.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            points_per_sample: 1024,
            batch_size: 8,
            epochs: 30,
            step_size: 1e-3,
            step_decay: 1.0,
            seed: 0,
            augment_translate: true,
            augment_rotate: true,
            augment_flip: true,
            train_global_factor: true,
            validation_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_sample < 6 {
            return Err(Error::BadParams(
                "points_per_sample must be at least 6".into(),
            ));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::BadParams("lambda must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::BadParams("batch_size and epochs must be positive".into()));
        }
        if !(self.step_size > 0.0) || !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return Err(Error::BadParams("bad step size schedule".into()));
        }
        if !(0.0..=0.9).contains(&self.validation_fraction) {
            return Err(Error::BadParams(
                "validation_fraction must lie in [0, 0.9]".into(),
            ));
        }
        Ok(())
    }
}

/// One optimizer step in the training log.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub level: u32,
    pub loss: f64,
    pub grad_norm: f64,
    pub seed: u64,
}

/// Result of training one model for one resolution level.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub params: NetworkParams,
    pub log: Vec<StepRecord>,
    pub best_epoch: usize,
    pub best_validation: f64,
    pub feature_scale: f64,
    pub level: u32,
}

fn sample_indices(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let take = k.min(n);
    for i in 0..take {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    order.truncate(take);
    order
}

fn draw_augment(rng: &mut impl Rng, cfg: &TrainConfig) -> Option<AugmentOp> {
    let mut pool = Vec::new();
    if cfg.augment_translate {
        pool.push(0);
    }
    if cfg.augment_rotate {
        pool.push(1);
    }
    if cfg.augment_flip {
        pool.push(2);
    }
    if pool.is_empty() {
        return None;
    }
    // Identity is one extra slot so raw samples are still seen.
    let pick = rng.random_range(0..=pool.len());
    if pick == pool.len() {
        return None;
    }
    Some(match pool[pick] {
        0 => AugmentOp::Translate {
            x_mm: rng.random_range(-15.0..15.0),
            y_mm: rng.random_range(-15.0..15.0),
        },
        1 => AugmentOp::RotateInPlane {
            angle_rad: rng.random_range(-0.5..0.5),
        },
        _ => AugmentOp::HFlip,
    })
}

/// Trains one weighting model on a single-level corpus.
///
/// Each step draws `points_per_sample` correspondences without replacement
/// and one random augmentation per batch item, averages the exact gradients
/// over the batch and applies an adaptive-moment update. The run is fully
/// deterministic given the seed. Validation loss (fixed subsample, no
/// augmentation) is measured after every epoch and the best epoch's
/// parameters are returned.
pub fn train(config: &TrainConfig, corpus: &[TrainingSample]) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput);
    }
    let level = corpus[0].level;
    let feature_scale = corpus[0].feature_scale;
    for (i, sample) in corpus.iter().enumerate() {
        sample.validate()?;
        if sample.level != level || sample.feature_scale != feature_scale {
            return Err(Error::BadParams(format!(
                "sample {i} disagrees on level or feature scale; train one level at a time"
            )));
        }
        if sample.set.len() < 6 {
            return Err(Error::BadParams(format!(
                "sample {i} has only {} correspondences",
                sample.set.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, "train-loop", 0));
    let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = if corpus.len() == 1 {
        (vec![0], vec![0])
    } else {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let n_val = ((corpus.len() as f64 * config.validation_fraction).round() as usize)
            .clamp(1, corpus.len() - 1);
        (order[n_val..].to_vec(), order[..n_val].to_vec())
    };

    let mut params = NetworkParams::init(split_seed(config.seed, "init", 0));
    let pcount = NetworkParams::param_count();
    let mut m = vec![0.0f64; pcount];
    let mut v = vec![0.0f64; pcount];
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    let validation_loss = |params: &NetworkParams| -> Result<f64> {
        let mut total = 0.0;
        for &idx in &val_idx {
            let sample = &corpus[idx];
            let mut vrng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, "val", idx as u64));
            let picks = sample_indices(&mut vrng, sample.set.len(), config.points_per_sample);
            total += objective(params, &sample.subsampled(&picks), config.lambda)?;
        }
        Ok(total / val_idx.len() as f64)
    };

    let mut log = Vec::new();
    let mut step = 0usize;
    let mut best = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = params.clone();

    for epoch in 0..config.epochs {
        let alpha = config.step_size * config.step_decay.powi(epoch as i32);
        let mut order = train_idx.clone();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for batch in order.chunks(config.batch_size) {
            let mut batch_loss = 0.0;
            let mut grad_acc = vec![0.0f64; pcount];
            for &idx in batch {
                let sample = &corpus[idx];
                let picks = sample_indices(&mut rng, sample.set.len(), config.points_per_sample);
                let mut item = sample.subsampled(&picks);
                if let Some(op) = draw_augment(&mut rng, config) {
                    item = augment(&item, &op)?;
                }
                let (loss, grads) = match grad_objective(&params, &item, config.lambda) {
                    Ok(pair) => pair,
                    // Failures before any update point at the input data;
                    // afterwards they mean optimization walked the
                    // parameters somewhere unusable.
                    Err(e) if step == 0 => return Err(e),
                    Err(e) => {
                        return Err(Error::DivergedTraining {
                            step: step as u64,
                            what: format!("objective failed: {e}"),
                        })
                    }
                };
                if !loss.is_finite() {
                    return Err(Error::DivergedTraining {
                        step: step as u64,
                        what: format!("non-finite loss on sample {idx}"),
                    });
                }
                batch_loss += loss;
                for (acc, g) in grad_acc.iter_mut().zip(grads.flatten()) {
                    *acc += g;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            for g in grad_acc.iter_mut() {
                *g *= scale;
            }
            if !config.train_global_factor {
                grad_acc[pcount - 1] = 0.0;
            }
            let grad_norm = grad_acc.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !grad_norm.is_finite() {
                return Err(Error::DivergedTraining {
                    step: step as u64,
                    what: "non-finite gradient".into(),
                });
            }

            step += 1;
            let mut flat = params.flatten();
            let bc1 = 1.0 - BETA1.powi(step as i32);
            let bc2 = 1.0 - BETA2.powi(step as i32);
            for i in 0..pcount {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad_acc[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad_acc[i] * grad_acc[i];
                flat[i] -= alpha * (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPS);
            }
            if flat.iter().any(|p| !p.is_finite()) {
                return Err(Error::DivergedTraining {
                    step: step as u64,
                    what: "non-finite parameters after update".into(),
                });
            }
            params = NetworkParams::from_flat(&flat)?;
            log.push(StepRecord {
                step,
                level,
                loss: batch_loss,
                grad_norm,
                seed: config.seed,
            });
        }

        let val = match validation_loss(&params) {
            Ok(v) => v,
            Err(e) if step == 0 => return Err(e),
            Err(e) => {
                return Err(Error::DivergedTraining {
                    step: step as u64,
                    what: format!("validation failed: {e}"),
                })
            }
        };
        if !val.is_finite() {
            return Err(Error::DivergedTraining {
                step: step as u64,
                what: "non-finite validation loss".into(),
            });
        }
        if val < best {
            best = val;
            best_epoch = epoch;
            best_params = params.clone();
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        log,
        best_epoch,
        best_validation: best,
        feature_scale,
        level,
    })
}
