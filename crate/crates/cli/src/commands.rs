//! The seven pipeline stages behind the subcommands.

use std::path::Path;

use ppcreg_core::{
    contour_points, gen_start_poses, level_sim_config, make_phantom, metrics_by_variant, mtre,
    pe_histogram, projection_error, register_case, rodrigues, split_seed, variant_config,
    CaseRecord, ConvergenceSummary, Error, EvalRecord, HistogramPair, MetricsSummary,
    ModelRecord, Phantom, PinholeCamera, RegistrationTrace, Result, RigidTransform,
    TrainingSample, Vec3, WeightSource, DETECTOR_PIXEL_MM, VARIANT_SCALES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::artifacts::{
    self, ResultRow, SceneFile, SceneRecord, SceneStarts, StartFile, StartPose,
    RESULTS_SCHEMA_VERSION, SCENE_SCHEMA_VERSION, STARTS_SCHEMA_VERSION,
};
use crate::config::RunConfig;

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Generates the scene set: per scene a shape (cycled from the config, with
/// deterministic size jitter) and a ground-truth pose in front of the
/// camera. Every scene is test-built once so broken parameters fail here,
/// not three stages later.
pub fn gen_scenes(cfg: &RunConfig, out: &Path) -> Result<()> {
    let camera = cfg.camera.build()?;
    let tau = cfg.sim.build().tau_rad;
    let mut scenes = Vec::with_capacity(cfg.scenes.count);
    for i in 0..cfg.scenes.count {
        let shape = &cfg.scenes.shapes[i % cfg.scenes.shapes.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, "scene", i as u64));
        let j = cfg.scenes.size_jitter;
        let size = 1.0 + rng.random_range(-j..=j);
        let kind = shape.to_kind(size);

        // Flat-faced shapes lose their whole contour when rotated past the
        // contour band half-width, so resample the pose until the scene is
        // actually observable instead of failing three stages later.
        const POSE_ATTEMPTS: usize = 64;
        let mut attempt = 0;
        loop {
            let axis = random_unit(&mut rng);
            let angle = rng.random_range(0.0..=cfg.scenes.max_rotation_rad);
            let p = cfg.scenes.in_plane_jitter_mm;
            let d = cfg.scenes.depth_jitter_mm;
            let truth = RigidTransform {
                rotation: rodrigues(&(axis * angle)),
                translation: camera.source
                    + camera.axis_u * rng.random_range(-p..=p)
                    + camera.axis_v * rng.random_range(-p..=p)
                    + camera.view_dir * (cfg.scenes.depth_mm + rng.random_range(-d..=d)),
            };

            let record = SceneRecord {
                id: i as u32,
                kind: kind.clone(),
                points: cfg.scenes.points,
                phantom_seed: split_seed(cfg.seed, "phantom", i as u64),
                truth,
            };
            let phantom = build_phantom(&record)?;
            match contour_points(&phantom, &camera, &truth, tau) {
                Ok(_) => {
                    scenes.push(record);
                    break;
                }
                Err(e) => {
                    attempt += 1;
                    if attempt >= POSE_ATTEMPTS {
                        return Err(Error::BadParams(format!(
                            "scene {i} is not usable as configured \
                             ({POSE_ATTEMPTS} pose samples tried): {e}"
                        )));
                    }
                }
            }
        }
    }

    artifacts::write_json(
        out,
        &SceneFile {
            schema_version: SCENE_SCHEMA_VERSION,
            seed: cfg.seed,
            camera,
            scenes,
        },
    )?;
    println!("wrote {} ({} scenes)", out.display(), cfg.scenes.count);
    Ok(())
}

fn build_phantom(scene: &SceneRecord) -> Result<Phantom> {
    make_phantom(&scene.kind, scene.points, scene.phantom_seed)
}

/// Samples the binned test start poses for every scene.
pub fn gen_starts(cfg: &RunConfig, scenes_path: &Path, out: &Path) -> Result<()> {
    let file = artifacts::load_scenes(scenes_path)?;
    let mut scenes = Vec::with_capacity(file.scenes.len());
    for scene in &file.scenes {
        let phantom = build_phantom(scene)?;
        let corners = phantom.voi_corners();
        let spec = cfg
            .starts
            .spec(split_seed(cfg.seed, "starts", scene.id as u64));
        let poses = gen_start_poses(&spec, &file.camera, &scene.truth, &corners)?;
        let poses = poses
            .into_iter()
            .map(|pose| {
                let mtre_mm = mtre(&pose, &scene.truth, &corners)?;
                Ok(StartPose { pose, mtre_mm })
            })
            .collect::<Result<Vec<_>>>()?;
        scenes.push(SceneStarts {
            scene_id: scene.id,
            poses,
        });
    }
    let total: usize = scenes.iter().map(|s| s.poses.len()).sum();
    artifacts::write_json(
        out,
        &StartFile {
            schema_version: STARTS_SCHEMA_VERSION,
            seed: cfg.seed,
            scenes,
        },
    )?;
    println!(
        "wrote {} ({} poses across {} scenes)",
        out.display(),
        total,
        file.scenes.len()
    );
    Ok(())
}

/// Precomputes the training corpus: per scene a fresh set of small-error
/// start poses, and per (start, level) one simulated correspondence set
/// captured at that pose. Samples with fewer correspondences than the six
/// motion degrees of freedom are dropped.
pub fn precompute_corr(cfg: &RunConfig, scenes_path: &Path, out: &Path) -> Result<()> {
    let file = artifacts::load_scenes(scenes_path)?;
    let base_sim = cfg.sim.build();
    let mut samples = Vec::new();
    let mut dropped = 0usize;
    let mut counter = 0u64;
    for scene in &file.scenes {
        let phantom = build_phantom(scene)?;
        let corners = phantom.voi_corners();
        let spec = cfg
            .corpus
            .spec(split_seed(cfg.seed, "corpus-starts", scene.id as u64));
        let poses = gen_start_poses(&spec, &file.camera, &scene.truth, &corners)?;
        for pose in &poses {
            for &level in &cfg.corpus.levels {
                let sim = level_sim_config(
                    &base_sim,
                    VARIANT_SCALES[level],
                    split_seed(cfg.seed, "corpus-sim", counter),
                );
                counter += 1;
                // A pose can wander outside the observable band (flat faces,
                // nothing in the contour gate); such samples are dropped
                // rather than failing the whole corpus.
                let set = match ppcreg_core::simulate_correspondences(
                    &phantom,
                    &file.camera,
                    pose,
                    &scene.truth,
                    &sim,
                ) {
                    Ok(out) => out.set,
                    Err(Error::NoContour | Error::EmptySet | Error::SamplingFailed(_)) => {
                        dropped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                if set.len() < 6 {
                    dropped += 1;
                    continue;
                }
                samples.push(TrainingSample {
                    set,
                    camera: file.camera.clone(),
                    start: *pose,
                    truth: scene.truth,
                    corners,
                    level: level as u32,
                    feature_scale: cfg.corpus.feature_scale_mm,
                });
            }
        }
    }
    for &level in &cfg.corpus.levels {
        if !samples.iter().any(|s| s.level == level as u32) {
            return Err(Error::BadParams(format!(
                "corpus ended up with no usable samples at level {level}; \
                 raise sim.max_points or scenes.points"
            )));
        }
    }
    artifacts::save_corpus(out, &samples)?;
    println!(
        "wrote {} ({} samples, {} dropped as too sparse)",
        out.display(),
        samples.len(),
        dropped
    );
    Ok(())
}

/// Trains one weighting model per level present in the corpus (or a single
/// requested level) and writes `level<i>.wnet` files.
pub fn train(
    cfg: &RunConfig,
    corpus_path: &Path,
    out_dir: &Path,
    only_level: Option<u32>,
) -> Result<()> {
    let corpus = artifacts::load_corpus(corpus_path)?;
    let mut levels: Vec<u32> = corpus.iter().map(|s| s.level).collect();
    levels.sort_unstable();
    levels.dedup();
    if let Some(level) = only_level {
        if !levels.contains(&level) {
            return Err(Error::BadParams(format!(
                "corpus has no samples for level {level}; present: {levels:?}"
            )));
        }
        levels = vec![level];
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io(format!("{}: {e}", out_dir.display())))?;

    for level in levels {
        let subset: Vec<TrainingSample> = corpus
            .iter()
            .filter(|s| s.level == level)
            .cloned()
            .collect();
        let tc = cfg.train.build(split_seed(cfg.seed, "train", level as u64));
        let outcome = ppcreg_core::train(&tc, &subset)?;
        let path = out_dir.join(format!("level{level}.wnet"));
        ModelRecord {
            params: outcome.params,
            feature_scale: outcome.feature_scale,
            level,
            training_seed: tc.seed,
        }
        .save(&path)?;
        println!(
            "level {level}: {} samples, best epoch {} (validation {:.4}), wrote {}",
            subset.len(),
            outcome.best_epoch,
            outcome.best_validation,
            path.display()
        );
    }
    Ok(())
}

/// Loads the models a variant's network levels call for.
fn load_models(
    variant: &ppcreg_core::VariantConfig,
    models_dir: Option<&Path>,
) -> std::result::Result<Vec<ModelRecord>, crate::CliError> {
    let needed: Vec<usize> = variant
        .levels
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.weight_source, WeightSource::Network))
        .map(|(i, _)| i)
        .collect();
    if needed.is_empty() {
        return Ok(Vec::new());
    }
    let dir = models_dir.ok_or_else(|| {
        crate::CliError::Usage(format!(
            "variant {} uses learned weights; pass --models <dir>",
            variant.name
        ))
    })?;
    let mut models = Vec::with_capacity(needed.len());
    for i in needed {
        let path = dir.join(format!("level{i}.wnet"));
        let record = ModelRecord::load(&path)
            .map_err(|e| crate::CliError::Data(format!("{}: {e}", path.display())))?;
        if record.level as usize != i {
            return Err(crate::CliError::Data(format!(
                "{} claims level {}, expected {i}",
                path.display(),
                record.level
            )));
        }
        models.push(record);
    }
    Ok(models)
}

struct CaseSpec<'a> {
    case_id: u64,
    scene_id: u32,
    start_index: u32,
    phantom: &'a Phantom,
    camera: &'a PinholeCamera,
    truth: RigidTransform,
    start: StartPose,
    seed: u64,
}

/// Runs one registration case and condenses the trace into a results row.
/// Per-case failures (lost contour, singular systems, non-finite poses)
/// become `completed = false` rows instead of aborting the batch.
fn run_case(
    spec: &CaseSpec,
    variant: &ppcreg_core::VariantConfig,
    models: &[ModelRecord],
    sim: &ppcreg_core::CorrSimConfig,
) -> Result<ResultRow> {
    let corners = spec.phantom.voi_corners();
    let initial_pe_px =
        projection_error(spec.camera, &spec.start.pose, &spec.truth, &corners)?
            / DETECTOR_PIXEL_MM;

    let case = CaseRecord {
        phantom: spec.phantom,
        camera: spec.camera.clone(),
        truth: spec.truth,
        start: spec.start.pose,
        sim: sim.clone(),
        seed: spec.seed,
    };
    let trace = match register_case(&case, variant, models) {
        Ok(trace) => trace,
        Err(_) => RegistrationTrace {
            steps: Vec::new(),
            final_pose: spec.start.pose,
            status: ppcreg_core::CaseStatus::Failed {
                reason: "registration aborted".into(),
            },
        },
    };

    let final_pose = trace.final_pose;
    let coarse_steps: Vec<&ppcreg_core::IterationRecord> =
        trace.steps.iter().filter(|s| s.level == 0).collect();
    Ok(ResultRow {
        case_id: spec.case_id,
        variant: variant.name.clone(),
        scene_id: spec.scene_id,
        start_index: spec.start_index,
        initial_mtre_mm: spec.start.mtre_mm,
        initial_pe_px,
        final_mrpd_mm: ppcreg_core::mrpd(spec.camera, &final_pose, &spec.truth, &corners)?,
        final_mtre_mm: mtre(&final_pose, &spec.truth, &corners)?,
        final_pe_px: projection_error(spec.camera, &final_pose, &spec.truth, &corners)?
            / DETECTOR_PIXEL_MM,
        iterations: trace.steps.len(),
        coarse_iterations: (!coarse_steps.is_empty()).then_some(coarse_steps.len()),
        coarse_mrpd_mm: coarse_steps.last().map(|s| s.mrpd_mm),
        completed: trace.succeeded(),
    })
}

/// Registers every (scene, start pose) case under one variant and writes
/// the results CSV. Cases run in parallel; output order and content are
/// independent of the job count because every case is seeded by its index.
pub fn register(
    cfg: &RunConfig,
    scenes_path: &Path,
    starts_path: &Path,
    models_dir: Option<&Path>,
    out: &Path,
) -> std::result::Result<(), crate::CliError> {
    let variant = variant_config(&cfg.register.variant).map_err(crate::CliError::from)?;
    let models = load_models(&variant, models_dir)?;
    let scene_file = artifacts::load_scenes(scenes_path).map_err(crate::CliError::from)?;
    let start_file = artifacts::load_starts(starts_path).map_err(crate::CliError::from)?;
    let sim = cfg.sim.build();

    let phantoms: Vec<Phantom> = scene_file
        .scenes
        .iter()
        .map(build_phantom)
        .collect::<Result<_>>()
        .map_err(crate::CliError::from)?;

    let mut specs = Vec::new();
    let mut case_id = 0u64;
    for starts in &start_file.scenes {
        let index = scene_file
            .scenes
            .iter()
            .position(|s| s.id == starts.scene_id)
            .ok_or_else(|| {
                crate::CliError::Data(format!(
                    "{}: scene {} not present in {}",
                    starts_path.display(),
                    starts.scene_id,
                    scenes_path.display()
                ))
            })?;
        for (k, start) in starts.poses.iter().enumerate() {
            specs.push(CaseSpec {
                case_id,
                scene_id: starts.scene_id,
                start_index: k as u32,
                phantom: &phantoms[index],
                camera: &scene_file.camera,
                truth: scene_file.scenes[index].truth,
                start: start.clone(),
                seed: split_seed(cfg.seed, "case", case_id),
            });
            case_id += 1;
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.register.jobs)
        .build()
        .map_err(|e| crate::CliError::Data(format!("thread pool: {e}")))?;
    let rows: Vec<ResultRow> = pool
        .install(|| {
            specs
                .par_iter()
                .map(|spec| run_case(spec, &variant, &models, &sim))
                .collect::<Result<Vec<_>>>()
        })
        .map_err(crate::CliError::from)?;

    artifacts::save_results(out, &rows).map_err(crate::CliError::from)?;
    let completed = rows.iter().filter(|r| r.completed).count();
    println!(
        "wrote {} ({} cases, {} completed, variant {})",
        out.display(),
        rows.len(),
        completed,
        variant.name
    );
    Ok(())
}

#[derive(Serialize)]
struct VariantMetrics {
    variant: String,
    metrics: MetricsSummary,
}

#[derive(Serialize)]
struct SummaryFile {
    schema_version: u32,
    bin_width_mm: f64,
    variants: Vec<VariantMetrics>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn write_metrics(
    out_dir: &Path,
    groups: &[(String, MetricsSummary)],
    bin_width_mm: f64,
) -> Result<()> {
    let mut csv = String::from(
        "variant,count,success_rate,gross_success_rate,capture_range_mm,\
         gross_capture_range_mm,accuracy_mean_mm,accuracy_std_mm,bin_width_mm\n",
    );
    for (name, m) in groups {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            name,
            m.count,
            m.success_rate,
            m.gross_success_rate,
            m.capture_range_mm,
            m.gross_capture_range_mm,
            opt(m.accuracy_mean_mm),
            opt(m.accuracy_std_mm),
            m.bin_width_mm,
        ));
    }
    std::fs::write(out_dir.join("metrics.csv"), csv)?;

    artifacts::write_json(
        &out_dir.join("summary.json"),
        &SummaryFile {
            schema_version: RESULTS_SCHEMA_VERSION,
            bin_width_mm,
            variants: groups
                .iter()
                .map(|(variant, metrics)| VariantMetrics {
                    variant: variant.clone(),
                    metrics: metrics.clone(),
                })
                .collect(),
        },
    )
}

fn to_eval_records(rows: &[ResultRow]) -> Result<Vec<EvalRecord>> {
    rows.iter()
        .map(|r| {
            EvalRecord::new(
                r.case_id,
                r.variant.clone(),
                r.initial_mtre_mm,
                r.final_mrpd_mm,
                r.final_mtre_mm,
                r.iterations,
            )
        })
        .collect()
}

/// Aggregates a results CSV into per-variant metric summaries.
pub fn evaluate(cfg: &RunConfig, input: &Path, out_dir: &Path) -> Result<()> {
    let rows = artifacts::load_results(input)?;
    let records = to_eval_records(&rows)?;
    let groups = metrics_by_variant(&records, cfg.evaluate.bin_width_mm)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(format!("{}: {e}", out_dir.display())))?;
    write_metrics(out_dir, &groups, cfg.evaluate.bin_width_mm)?;
    println!(
        "wrote {}/metrics.csv and summary.json ({} variants, {} cases)",
        out_dir.display(),
        groups.len(),
        rows.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct VariantHistogram {
    variant: String,
    histogram: HistogramPair,
}

#[derive(Serialize)]
struct HistogramFile {
    schema_version: u32,
    variants: Vec<VariantHistogram>,
}

#[derive(Serialize)]
struct VariantConvergence {
    variant: String,
    summary: ConvergenceSummary,
}

#[derive(Serialize)]
struct ConvergenceFile {
    schema_version: u32,
    variants: Vec<VariantConvergence>,
}

fn ascii_bar(count: usize, max: usize) -> String {
    let width = if max == 0 { 0 } else { (count * 40).div_ceil(max) };
    "#".repeat(width)
}

fn histogram_chart(variants: &[VariantHistogram]) -> String {
    let mut out = String::new();
    for vh in variants {
        let h = &vh.histogram;
        let max = h
            .initial
            .iter()
            .chain(h.result.iter())
            .copied()
            .max()
            .unwrap_or(0);
        out.push_str(&format!(
            "# {} — projection error before and after registration (px)\n",
            vh.variant
        ));
        for i in 0..h.initial.len() {
            let label = format!("[{:>5.1}, {:>5.1})", h.bin_edges[i], h.bin_edges[i + 1]);
            out.push_str(&format!(
                "{label} initial {:<41} {}\n",
                ascii_bar(h.initial[i], max),
                h.initial[i]
            ));
            out.push_str(&format!(
                "{:>14} result  {:<41} {}\n",
                "",
                ascii_bar(h.result[i], max),
                h.result[i]
            ));
        }
        out.push('\n');
    }
    out
}

/// Emits the full report bundle: the metric tables plus plot-ready
/// projection-error histograms and per-bin convergence summaries, and a
/// plain-text chart of the histograms.
pub fn report(cfg: &RunConfig, input: &Path, out_dir: &Path) -> Result<()> {
    let rows = artifacts::load_results(input)?;
    let records = to_eval_records(&rows)?;
    let groups = metrics_by_variant(&records, cfg.evaluate.bin_width_mm)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(format!("{}: {e}", out_dir.display())))?;
    write_metrics(out_dir, &groups, cfg.evaluate.bin_width_mm)?;

    let mut histograms = Vec::new();
    let mut convergences = Vec::new();
    for (name, _) in &groups {
        let subset: Vec<&ResultRow> = rows.iter().filter(|r| &r.variant == name).collect();
        let pairs: Vec<(f64, f64)> = subset
            .iter()
            .map(|r| (r.initial_pe_px, r.final_pe_px))
            .collect();
        histograms.push(VariantHistogram {
            variant: name.clone(),
            histogram: pe_histogram(&pairs, &cfg.evaluate.pe_bin_edges_px)?,
        });

        let traces: Vec<(f64, RegistrationTrace)> = subset
            .iter()
            .map(|r| (r.initial_mtre_mm, r.to_trace()))
            .collect();
        let items: Vec<(f64, &RegistrationTrace)> =
            traces.iter().map(|(m, t)| (*m, t)).collect();
        convergences.push(VariantConvergence {
            variant: name.clone(),
            summary: ppcreg_core::convergence_summary(&items, &cfg.evaluate.mtre_bin_edges_mm)?,
        });
    }

    artifacts::write_json(
        &out_dir.join("pe_histograms.json"),
        &HistogramFile {
            schema_version: RESULTS_SCHEMA_VERSION,
            variants: histograms
                .iter()
                .map(|v| VariantHistogram {
                    variant: v.variant.clone(),
                    histogram: v.histogram.clone(),
                })
                .collect(),
        },
    )?;
    std::fs::write(out_dir.join("pe_histograms.txt"), histogram_chart(&histograms))?;
    artifacts::write_json(
        &out_dir.join("convergence.json"),
        &ConvergenceFile {
            schema_version: RESULTS_SCHEMA_VERSION,
            variants: convergences,
        },
    )?;
    println!(
        "wrote report bundle to {} ({} variants)",
        out_dir.display(),
        groups.len()
    );
    Ok(())
}
