//! Run configuration: TOML schema, defaults, flag merging and validation.
//!
//! Every command reads the same file; each consumes the sections it needs.
//! Command-line flags override file values, the file overrides the
//! defaults documented here. All randomness flows from the single `seed`
//! field (default 0 — there are no wall-clock defaults anywhere).

use ppcreg_core::{
    variant_config, CorrSimConfig, OutlierMode, PhantomKind, PinholeCamera, Point2,
    StartPoseSpec, TrainConfig, VARIANT_NAMES, VARIANT_SCALES,
};
use serde::{Deserialize, Serialize};

/// Top-level configuration, one section per pipeline stage.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every command derives its randomness from it.
    pub seed: u64,
    pub camera: CameraConfig,
    pub scenes: ScenesConfig,
    pub sim: SimConfig,
    pub starts: StartsConfig,
    pub corpus: CorpusConfig,
    pub train: TrainSection,
    pub register: RegisterSection,
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub focal_mm: f64,
    /// Usable detector extent (width, height), millimetres.
    pub detector_mm: [f64; 2],
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            focal_mm: 1200.0,
            detector_mm: [381.92, 297.6],
        }
    }
}

impl CameraConfig {
    /// Camera at the origin looking along +z, principal point centred.
    pub fn build(&self) -> ppcreg_core::Result<PinholeCamera> {
        PinholeCamera::canonical(
            self.focal_mm,
            Point2::new(self.detector_mm[0] / 2.0, self.detector_mm[1] / 2.0),
            Point2::new(self.detector_mm[0], self.detector_mm[1]),
        )
    }
}

/// One phantom shape the scene generator can draw from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ShapeConfig {
    Box {
        half_extents_mm: [f64; 3],
    },
    Cylinder {
        radius_mm: f64,
        half_height_mm: f64,
    },
    Sphere {
        radius_mm: f64,
    },
    Vertebra {
        replicas: usize,
        replica_offset_mm: f64,
    },
}

impl ShapeConfig {
    /// Converts to the surface-sampler shape, scaling all linear
    /// dimensions by `size`.
    pub fn to_kind(&self, size: f64) -> PhantomKind {
        match *self {
            ShapeConfig::Box { half_extents_mm: h } => PhantomKind::Box {
                half_extents: ppcreg_core::Vec3::new(h[0] * size, h[1] * size, h[2] * size),
            },
            ShapeConfig::Cylinder {
                radius_mm,
                half_height_mm,
            } => PhantomKind::Cylinder {
                radius: radius_mm * size,
                half_height: half_height_mm * size,
            },
            ShapeConfig::Sphere { radius_mm } => PhantomKind::Sphere {
                radius: radius_mm * size,
            },
            ShapeConfig::Vertebra {
                replicas,
                replica_offset_mm,
            } => PhantomKind::VertebraLike {
                replicas,
                replica_offset_mm: replica_offset_mm * size,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenesConfig {
    /// How many scenes to generate; shapes are cycled.
    pub count: usize,
    /// Surface points sampled per phantom.
    pub points: usize,
    /// Per-scene uniform scale jitter: size ~ 1 ± this fraction.
    pub size_jitter: f64,
    /// Nominal object depth in front of the source, millimetres.
    pub depth_mm: f64,
    /// In-plane translation jitter of the true pose, ± millimetres.
    pub in_plane_jitter_mm: f64,
    /// Depth jitter of the true pose, ± millimetres.
    pub depth_jitter_mm: f64,
    /// Largest random orientation angle of the true pose, radians.
    pub max_rotation_rad: f64,
    pub shapes: Vec<ShapeConfig>,
}

impl Default for ScenesConfig {
    fn default() -> Self {
        Self {
            count: 12,
            points: 3000,
            size_jitter: 0.15,
            depth_mm: 700.0,
            in_plane_jitter_mm: 15.0,
            depth_jitter_mm: 40.0,
            max_rotation_rad: 0.3,
            shapes: vec![
                ShapeConfig::Box {
                    half_extents_mm: [22.0, 16.0, 12.0],
                },
                ShapeConfig::Vertebra {
                    replicas: 2,
                    replica_offset_mm: 30.0,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Standard deviation of the along-normal match displacement, mm.
    pub sigma_d_mm: f64,
    /// Fraction of correspondences replaced by wrong matches.
    pub outlier_rate: f64,
    /// "uniform" offsets or "snap" onto distractor contours.
    pub outlier_mode: String,
    /// Largest uniform wrong-match offset, millimetres.
    pub uniform_max_mm: f64,
    /// Mean and spread of the similarity score on good matches.
    pub ngc_inlier: [f64; 2],
    /// Mean and spread of the similarity score on wrong matches.
    pub ngc_outlier: [f64; 2],
    /// Contour band half-width, degrees.
    pub tau_deg: f64,
    /// Matching window half-width; matches that would need a larger
    /// displacement become wrong matches. Omit for an unbounded window.
    pub search_range_mm: Option<f64>,
    /// Cap on simulated correspondences per view at full resolution.
    pub max_points: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        let base = CorrSimConfig::default();
        Self {
            sigma_d_mm: base.sigma_d,
            outlier_rate: base.outlier_rate,
            outlier_mode: "uniform".into(),
            uniform_max_mm: 15.0,
            ngc_inlier: [base.ngc_inlier.0, base.ngc_inlier.1],
            ngc_outlier: [base.ngc_outlier.0, base.ngc_outlier.1],
            // Wide enough that flat-faced phantoms keep a nonempty contour
            // across the default scene rotation range: a face tilted by the
            // full 0.3rad truth rotation still sits inside the band.
            tau_deg: 20.0,
            search_range_mm: None,
            max_points: None,
        }
    }
}

impl SimConfig {
    /// Converts to the simulator settings; the per-case seed is filled in
    /// later.
    pub fn build(&self) -> CorrSimConfig {
        CorrSimConfig {
            sigma_d: self.sigma_d_mm,
            outlier_rate: self.outlier_rate,
            outlier_mode: if self.outlier_mode == "snap" {
                OutlierMode::SnapToDistractor
            } else {
                OutlierMode::UniformOffset {
                    max_mm: self.uniform_max_mm,
                }
            },
            ngc_inlier: (self.ngc_inlier[0], self.ngc_inlier[1]),
            ngc_outlier: (self.ngc_outlier[0], self.ngc_outlier[1]),
            tau_rad: self.tau_deg.to_radians(),
            search_range_mm: self.search_range_mm,
            max_points: self.max_points,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartsConfig {
    /// Start poses per scene; must divide evenly into the bins.
    pub count: usize,
    pub min_mtre_mm: f64,
    pub max_mtre_mm: f64,
    pub bin_width_mm: f64,
}

impl Default for StartsConfig {
    fn default() -> Self {
        Self {
            count: 600,
            min_mtre_mm: 0.0,
            max_mtre_mm: 30.0,
            bin_width_mm: 1.0,
        }
    }
}

impl StartsConfig {
    pub fn spec(&self, seed: u64) -> StartPoseSpec {
        StartPoseSpec {
            count: self.count,
            min_mtre_mm: self.min_mtre_mm,
            max_mtre_mm: self.max_mtre_mm,
            bin_width_mm: self.bin_width_mm,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Training start poses per scene (smaller errors than the test
    /// protocol: single steps near the solution are what training sees).
    pub starts_per_scene: usize,
    pub min_mtre_mm: f64,
    pub max_mtre_mm: f64,
    pub bin_width_mm: f64,
    /// Resolution levels to precompute, as indices into the standard
    /// coarse-to-fine schedule.
    pub levels: Vec<usize>,
    /// Divisor applied to point coordinates and plane distances when
    /// building network features.
    pub feature_scale_mm: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            starts_per_scene: 48,
            min_mtre_mm: 0.0,
            max_mtre_mm: 16.0,
            bin_width_mm: 2.0,
            levels: vec![0, 1, 2],
            feature_scale_mm: 30.0,
        }
    }
}

impl CorpusConfig {
    pub fn spec(&self, seed: u64) -> StartPoseSpec {
        StartPoseSpec {
            count: self.starts_per_scene,
            min_mtre_mm: self.min_mtre_mm,
            max_mtre_mm: self.max_mtre_mm,
            bin_width_mm: self.bin_width_mm,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lambda: f64,
    pub points_per_sample: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub step_decay: f64,
    pub augment_translate: bool,
    pub augment_rotate: bool,
    pub augment_flip: bool,
    pub train_global_factor: bool,
    pub validation_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            lambda: base.lambda,
            points_per_sample: base.points_per_sample,
            batch_size: base.batch_size,
            epochs: base.epochs,
            step_size: base.step_size,
            step_decay: base.step_decay,
            augment_translate: base.augment_translate,
            augment_rotate: base.augment_rotate,
            augment_flip: base.augment_flip,
            train_global_factor: base.train_global_factor,
            validation_fraction: base.validation_fraction,
        }
    }
}

impl TrainSection {
    pub fn build(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            points_per_sample: self.points_per_sample,
            batch_size: self.batch_size,
            epochs: self.epochs,
            step_size: self.step_size,
            step_decay: self.step_decay,
            seed,
            augment_translate: self.augment_translate,
            augment_rotate: self.augment_rotate,
            augment_flip: self.augment_flip,
            train_global_factor: self.train_global_factor,
            validation_fraction: self.validation_fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterSection {
    /// Method variant to run.
    pub variant: String,
    /// Worker threads; 0 means all available cores.
    pub jobs: usize,
}

impl Default for RegisterSection {
    fn default() -> Self {
        Self {
            variant: "PPC-L".into(),
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Initial-error bin width for the capture range, millimetres.
    pub bin_width_mm: f64,
    /// Edges of the projection-error histogram, pixels.
    pub pe_bin_edges_px: Vec<f64>,
    /// Initial-error bin edges for the convergence summary, millimetres.
    pub mtre_bin_edges_mm: Vec<f64>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            bin_width_mm: 1.0,
            pe_bin_edges_px: (0..=30).map(|i| i as f64 * 2.0).collect(),
            mtre_bin_edges_mm: (0..=6).map(|i| i as f64 * 5.0).collect(),
        }
    }
}

/// Checks every section against the module invariants it feeds into.
///
/// Returns an empty list when the config is valid; otherwise one
/// human-readable diagnostic per problem, each prefixed with the config
/// field path it refers to.
pub fn validate_config(cfg: &RunConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut bad = |field: &str, what: String| out.push(format!("{field}: {what}"));

    if !(cfg.camera.focal_mm.is_finite() && cfg.camera.focal_mm > 0.0) {
        bad(
            "camera.focal_mm",
            format!("must be positive, got {}", cfg.camera.focal_mm),
        );
    }
    if cfg.camera.detector_mm.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        bad(
            "camera.detector_mm",
            format!("both extents must be positive, got {:?}", cfg.camera.detector_mm),
        );
    }

    if cfg.scenes.count == 0 {
        bad("scenes.count", "must be at least 1".into());
    }
    if cfg.scenes.points < 100 {
        bad(
            "scenes.points",
            format!("need at least 100 surface points, got {}", cfg.scenes.points),
        );
    }
    if cfg.scenes.shapes.is_empty() {
        bad("scenes.shapes", "need at least one shape".into());
    }
    if !(0.0..1.0).contains(&cfg.scenes.size_jitter) {
        bad(
            "scenes.size_jitter",
            format!("must lie in [0, 1), got {}", cfg.scenes.size_jitter),
        );
    }
    if !(cfg.scenes.depth_mm.is_finite() && cfg.scenes.depth_mm > 0.0) {
        bad(
            "scenes.depth_mm",
            format!("must be positive, got {}", cfg.scenes.depth_mm),
        );
    }
    for (field, v) in [
        ("scenes.in_plane_jitter_mm", cfg.scenes.in_plane_jitter_mm),
        ("scenes.depth_jitter_mm", cfg.scenes.depth_jitter_mm),
        ("scenes.max_rotation_rad", cfg.scenes.max_rotation_rad),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            bad(field, format!("must be finite and non-negative, got {v}"));
        }
    }
    if cfg.scenes.depth_jitter_mm >= cfg.scenes.depth_mm {
        bad(
            "scenes.depth_jitter_mm",
            "jitter larger than the nominal depth can place objects behind the source".into(),
        );
    }

    if !["uniform", "snap"].contains(&cfg.sim.outlier_mode.as_str()) {
        bad(
            "sim.outlier_mode",
            format!("must be \"uniform\" or \"snap\", got \"{}\"", cfg.sim.outlier_mode),
        );
    }
    if let Err(e) = cfg.sim.build().validate() {
        bad("sim", e.to_string());
    }

    if let Err(e) = cfg.starts.spec(0).validate() {
        bad("starts", e.to_string());
    }
    if let Err(e) = cfg.corpus.spec(0).validate() {
        bad("corpus", e.to_string());
    }
    if cfg.corpus.levels.is_empty() {
        bad("corpus.levels", "need at least one level".into());
    }
    for l in &cfg.corpus.levels {
        if *l >= VARIANT_SCALES.len() {
            bad(
                "corpus.levels",
                format!("level {l} outside the schedule 0..{}", VARIANT_SCALES.len()),
            );
        }
    }
    if !(cfg.corpus.feature_scale_mm.is_finite() && cfg.corpus.feature_scale_mm > 0.0) {
        bad(
            "corpus.feature_scale_mm",
            format!("must be positive, got {}", cfg.corpus.feature_scale_mm),
        );
    }

    if !(cfg.train.lambda.is_finite() && cfg.train.lambda >= 0.0) {
        bad(
            "train.lambda",
            format!("must be finite and >= 0, got {}", cfg.train.lambda),
        );
    }
    if cfg.train.points_per_sample < 6 {
        bad(
            "train.points_per_sample",
            format!(
                "a rigid motion has 6 degrees of freedom; need at least 6 points, got {}",
                cfg.train.points_per_sample
            ),
        );
    }
    // The remaining schedule fields share one validator with the library.
    if cfg.train.lambda >= 0.0 && cfg.train.points_per_sample >= 6 {
        if let Err(e) = cfg.train.build(0).validate() {
            bad("train", e.to_string());
        }
    }

    if variant_config(&cfg.register.variant).is_err() {
        bad(
            "register.variant",
            format!(
                "unknown variant \"{}\"; valid: {}",
                cfg.register.variant,
                VARIANT_NAMES.join(", ")
            ),
        );
    }

    if !(cfg.evaluate.bin_width_mm.is_finite() && cfg.evaluate.bin_width_mm > 0.0) {
        bad(
            "evaluate.bin_width_mm",
            format!("must be positive, got {}", cfg.evaluate.bin_width_mm),
        );
    }
    for (field, edges) in [
        ("evaluate.pe_bin_edges_px", &cfg.evaluate.pe_bin_edges_px),
        ("evaluate.mtre_bin_edges_mm", &cfg.evaluate.mtre_bin_edges_mm),
    ] {
        if edges.len() < 2
            || edges.iter().any(|e| !e.is_finite())
            || edges.windows(2).any(|w| w[0] >= w[1])
        {
            bad(
                field,
                "need at least two finite, strictly ascending edges".into(),
            );
        }
    }

    out
}
