//! Single-view 2-D/3-D rigid registration from weighted point-to-plane
//! correspondences.
//!
//! The crate covers the full experimental loop: a synthetic correspondence
//! generator stands in for image-based contour matching, a closed-form
//! weighted motion solve drives iterative registration, and a per-point
//! weighting network can be trained end-to-end by differentiating the
//! registration error through the solve.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod diffreg;
pub mod pipeline;
pub mod ppc;
pub mod seeding;
pub mod simscene;
pub mod weightnet;

pub use error::{Error, Result};
pub use eval::{
    compute_metrics, convergence_summary, metrics_by_variant, pe_histogram, ConvergenceBin,
    ConvergenceSummary, EvalRecord, HistogramPair, MetricsSummary, DEFAULT_BIN_WIDTH_MM,
    GROSS_SUCCESS_MRPD_MM, SUCCESS_MRPD_MM,
};
pub use geometry::{
    mrpd, mtre, point_ray_distance, projection_error, rodrigues, rodrigues_jacobian, Mat3,
    MotionVector, PinholeCamera, Point2, RigidTransform, Vec3, Vector6,
};
pub use diffreg::{
    augment, grad_objective, objective, registration_error, train, AugmentOp, StepRecord,
    TrainConfig, TrainOutcome, TrainingSample,
};
pub use pipeline::{
    level_sim_config, register_case, single_iteration_experiment, variant_config, CaseRecord,
    CaseStatus, IterationRecord, LevelConfig, RegistrationTrace, SolverKind, VariantConfig,
    WeightSource, WeightStats, BASE_CONTOUR_DENSITY, DETECTOR_PIXEL_MM, NGC_WEIGHT_THRESHOLD,
    VARIANT_NAMES, VARIANT_SCALES,
};
pub use ppc::{
    build_system, restrict_depth, solve_mccr, solve_weight_adjoint, solve_weighted,
    Correspondence, CorrespondenceSet, KernelWidth, MccrConfig, PpcSystem, Weights,
};
pub use seeding::split_seed;
pub use simscene::{
    contour_points, gen_start_poses, make_phantom, simulate_correspondences, CorrSimConfig,
    OutlierMode, Phantom, PhantomKind, SimulatedSet, StartPoseSpec, SurfacePoint, TAU_DEFAULT,
};
pub use weightnet::{
    backward, build_features, forward, forward_cached, modified_softsign, FeatureVector,
    ModelRecord, NetworkParams, MODEL_VERSION,
};
