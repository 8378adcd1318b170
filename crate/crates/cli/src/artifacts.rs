//! On-disk artifact formats: scene and start-pose JSON, the binary
//! correspondence corpus, the results CSV and the report bundle.
//!
//! Every format carries a schema version and every loader re-validates the
//! geometric invariants (unit normals, proper rotations, camera axes) so a
//! corrupted or hand-edited file is rejected instead of poisoning a run.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ppcreg_core::{
    CaseStatus, Correspondence, CorrespondenceSet, Error, IterationRecord, Mat3, MotionVector,
    PhantomKind, PinholeCamera, Point2, RegistrationTrace, Result, RigidTransform,
    TrainingSample, Vec3, WeightStats,
};
use serde::{Deserialize, Serialize};

pub const SCENE_SCHEMA_VERSION: u32 = 1;
pub const STARTS_SCHEMA_VERSION: u32 = 1;
pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const RESULTS_SCHEMA_VERSION: u32 = 1;

const CORPUS_MAGIC: [u8; 8] = *b"PPCCORP\0";

/// Header line of the results CSV; every writer and reader pins it.
pub const RESULTS_HEADER: &str = "case_id,variant,scene_id,start_index,initial_mtre_mm,\
initial_pe_px,final_mrpd_mm,final_mtre_mm,final_pe_px,iterations,coarse_iterations,\
coarse_mrpd_mm,completed,success_2mm,success_10mm";

/// A generated scene: the phantom recipe plus the ground-truth pose.
///
/// Phantoms are stored as (kind, points, seed) recipes and rebuilt
/// deterministically on load, which keeps scene files small and the
/// surface-sampling invariants enforced in one place.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: u32,
    pub kind: PhantomKind,
    pub points: usize,
    pub phantom_seed: u64,
    pub truth: RigidTransform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub schema_version: u32,
    /// Root seed the file was generated from (informational).
    pub seed: u64,
    pub camera: PinholeCamera,
    pub scenes: Vec<SceneRecord>,
}

/// One sampled start pose with its initial error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartPose {
    pub pose: RigidTransform,
    pub mtre_mm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneStarts {
    pub scene_id: u32,
    pub poses: Vec<StartPose>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartFile {
    pub schema_version: u32,
    pub seed: u64,
    pub scenes: Vec<SceneStarts>,
}

fn data_err(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {what}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| data_err(path, format!("serialization failed: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| data_err(path, format!("not valid JSON: {e}")))
}

/// Re-asserts that a deserialized pose is a proper rigid transform.
fn check_pose(path: &Path, pose: &RigidTransform) -> Result<()> {
    RigidTransform::new(pose.rotation, pose.translation)
        .map_err(|e| data_err(path, format!("bad pose: {e}")))?;
    Ok(())
}

pub fn load_scenes(path: &Path) -> Result<SceneFile> {
    let file: SceneFile = read_json(path)?;
    if file.schema_version != SCENE_SCHEMA_VERSION {
        return Err(data_err(
            path,
            format!(
                "scene schema {} unsupported, expected {SCENE_SCHEMA_VERSION}",
                file.schema_version
            ),
        ));
    }
    if file.scenes.is_empty() {
        return Err(data_err(path, "no scenes"));
    }
    PinholeCamera::new(
        file.camera.focal_mm,
        file.camera.principal_mm,
        file.camera.detector_mm,
        file.camera.source,
        file.camera.axis_u,
        file.camera.axis_v,
        file.camera.view_dir,
    )
    .map_err(|e| data_err(path, format!("bad camera: {e}")))?;
    for scene in &file.scenes {
        check_pose(path, &scene.truth)?;
    }
    Ok(file)
}

pub fn load_starts(path: &Path) -> Result<StartFile> {
    let file: StartFile = read_json(path)?;
    if file.schema_version != STARTS_SCHEMA_VERSION {
        return Err(data_err(
            path,
            format!(
                "starts schema {} unsupported, expected {STARTS_SCHEMA_VERSION}",
                file.schema_version
            ),
        ));
    }
    for scene in &file.scenes {
        if scene.poses.is_empty() {
            return Err(data_err(path, format!("scene {} has no poses", scene.scene_id)));
        }
        for start in &scene.poses {
            check_pose(path, &start.pose)?;
            if !(start.mtre_mm.is_finite() && start.mtre_mm >= 0.0) {
                return Err(data_err(
                    path,
                    format!("scene {}: bad initial error {}", scene.scene_id, start.mtre_mm),
                ));
            }
        }
    }
    Ok(file)
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_vec3(buf: &mut Vec<u8>, v: &Vec3) {
    push_f64(buf, v.x);
    push_f64(buf, v.y);
    push_f64(buf, v.z);
}

fn push_pose(buf: &mut Vec<u8>, pose: &RigidTransform) {
    for v in pose.rotation.iter() {
        push_f64(buf, *v);
    }
    push_vec3(buf, &pose.translation);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| data_err(self.path, "file truncated"))?;
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("sized")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("sized")))
    }

    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }

    fn pose(&mut self) -> Result<RigidTransform> {
        let mut vals = [0.0; 9];
        for v in &mut vals {
            *v = self.f64()?;
        }
        let rotation = Mat3::from_column_slice(&vals);
        let translation = self.vec3()?;
        RigidTransform::new(rotation, translation).map_err(|e| data_err(self.path, e))
    }
}

/// Writes the training corpus in a versioned little-endian layout:
///
/// ```text
/// magic    8 bytes  "PPCCORP\0"
/// version  u32
/// count    u32
/// per sample:
///   level u32, feature_scale f64,
///   camera (focal, principal xy, detector xy, source, axis_u, axis_v) 14 f64,
///   start pose 12 f64, truth pose 12 f64, corners 24 f64,
///   n u32, then n correspondences (w, p, n, ngc) of 10 f64 each
/// ```
pub fn save_corpus(path: &Path, samples: &[TrainingSample]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CORPUS_MAGIC);
    buf.extend_from_slice(&CORPUS_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        buf.extend_from_slice(&s.level.to_le_bytes());
        push_f64(&mut buf, s.feature_scale);
        push_f64(&mut buf, s.camera.focal_mm);
        push_f64(&mut buf, s.camera.principal_mm.x);
        push_f64(&mut buf, s.camera.principal_mm.y);
        push_f64(&mut buf, s.camera.detector_mm.x);
        push_f64(&mut buf, s.camera.detector_mm.y);
        push_vec3(&mut buf, &s.camera.source);
        push_vec3(&mut buf, &s.camera.axis_u);
        push_vec3(&mut buf, &s.camera.axis_v);
        push_pose(&mut buf, &s.start);
        push_pose(&mut buf, &s.truth);
        for corner in &s.corners {
            push_vec3(&mut buf, corner);
        }
        buf.extend_from_slice(&(s.set.len() as u32).to_le_bytes());
        for c in s.set.items() {
            push_vec3(&mut buf, &c.w);
            push_vec3(&mut buf, &c.p);
            push_vec3(&mut buf, &c.n);
            push_f64(&mut buf, c.ngc);
        }
    }
    let mut file = fs::File::create(path).map_err(|e| data_err(path, e))?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a corpus written by [`save_corpus`], re-deriving plane distances
/// and re-validating every geometric invariant.
pub fn load_corpus(path: &Path) -> Result<Vec<TrainingSample>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| data_err(path, e))?
        .read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        at: 0,
        path,
    };
    if cur.take(8)? != CORPUS_MAGIC {
        return Err(data_err(path, "not a corpus file (bad magic)"));
    }
    let version = cur.u32()?;
    if version != CORPUS_FORMAT_VERSION {
        return Err(data_err(
            path,
            format!("corpus format {version} unsupported, expected {CORPUS_FORMAT_VERSION}"),
        ));
    }
    let count = cur.u32()? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let level = cur.u32()?;
        let feature_scale = cur.f64()?;
        let focal = cur.f64()?;
        let principal = Point2::new(cur.f64()?, cur.f64()?);
        let detector = Point2::new(cur.f64()?, cur.f64()?);
        let source = cur.vec3()?;
        let axis_u = cur.vec3()?;
        let axis_v = cur.vec3()?;
        let view_dir = axis_u.cross(&axis_v);
        let camera =
            PinholeCamera::new(focal, principal, detector, source, axis_u, axis_v, view_dir)
                .map_err(|e| data_err(path, e))?;
        let start = cur.pose()?;
        let truth = cur.pose()?;
        let mut corners = [Vec3::zeros(); 8];
        for corner in &mut corners {
            *corner = cur.vec3()?;
        }
        let n = cur.u32()? as usize;
        let mut items = Vec::with_capacity(n);
        for _ in 0..n {
            let w = cur.vec3()?;
            let p = cur.vec3()?;
            let normal = cur.vec3()?;
            let ngc = cur.f64()?;
            items.push(Correspondence::new(w, p, normal, ngc).map_err(|e| data_err(path, e))?);
        }
        samples.push(TrainingSample {
            set: CorrespondenceSet::new(items),
            camera,
            start,
            truth,
            corners,
            level,
            feature_scale,
        });
    }
    if cur.at != bytes.len() {
        return Err(data_err(path, "trailing bytes after the last sample"));
    }
    Ok(samples)
}

/// One results row: everything the evaluation and report stages need to
/// know about a finished case.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub case_id: u64,
    pub variant: String,
    pub scene_id: u32,
    pub start_index: u32,
    pub initial_mtre_mm: f64,
    pub initial_pe_px: f64,
    pub final_mrpd_mm: f64,
    pub final_mtre_mm: f64,
    pub final_pe_px: f64,
    pub iterations: usize,
    /// Iterations spent on the coarsest level, when any were recorded.
    pub coarse_iterations: Option<usize>,
    /// Reprojection distance at the end of the coarsest level.
    pub coarse_mrpd_mm: Option<f64>,
    pub completed: bool,
}

impl ResultRow {
    fn to_csv(&self) -> String {
        let coarse_iters = self
            .coarse_iterations
            .map(|v| v.to_string())
            .unwrap_or_default();
        let coarse_mrpd = self.coarse_mrpd_mm.map(fmt_f64).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.case_id,
            self.variant,
            self.scene_id,
            self.start_index,
            fmt_f64(self.initial_mtre_mm),
            fmt_f64(self.initial_pe_px),
            fmt_f64(self.final_mrpd_mm),
            fmt_f64(self.final_mtre_mm),
            fmt_f64(self.final_pe_px),
            self.iterations,
            coarse_iters,
            coarse_mrpd,
            self.completed,
            self.success_2mm(),
            self.success_10mm(),
        )
    }

    pub fn success_2mm(&self) -> bool {
        self.final_mrpd_mm <= ppcreg_core::SUCCESS_MRPD_MM
    }

    pub fn success_10mm(&self) -> bool {
        self.final_mrpd_mm <= ppcreg_core::GROSS_SUCCESS_MRPD_MM
    }

    /// Minimal trace carrying exactly the fields the convergence summary
    /// reads back out: the coarsest-level step count and end error, plus
    /// the final error and completion status.
    pub fn to_trace(&self) -> RegistrationTrace {
        let mut steps = Vec::new();
        if let (Some(iters), Some(coarse)) = (self.coarse_iterations, self.coarse_mrpd_mm) {
            for i in 0..iters {
                let mrpd = if i + 1 == iters { coarse } else { f64::MAX };
                steps.push(synthetic_step(0, mrpd));
            }
            steps.push(synthetic_step(1, self.final_mrpd_mm));
        }
        RegistrationTrace {
            steps,
            final_pose: RigidTransform::identity(),
            status: if self.completed {
                CaseStatus::Completed
            } else {
                CaseStatus::Failed {
                    reason: "recorded as failed".into(),
                }
            },
        }
    }
}

fn synthetic_step(level: usize, mrpd_mm: f64) -> IterationRecord {
    IterationRecord {
        level,
        delta: MotionVector::new(Vec3::zeros(), Vec3::zeros()),
        pe_mm: mrpd_mm,
        mrpd_mm,
        weights: WeightStats {
            mean: 0.0,
            max: 0.0,
            zero_fraction: 0.0,
        },
    }
}

/// Shortest round-trip decimal form, so re-parsing is bit-exact.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn save_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut text = String::from(RESULTS_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| data_err(path, e))?;
    Ok(())
}

pub fn load_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == RESULTS_HEADER => {}
        _ => {
            return Err(data_err(
                path,
                "missing or mismatched results header; is this a results CSV?",
            ))
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        rows.push(parse_row(line).map_err(|what| {
            data_err(path, format!("line {}: {what}", idx + 2))
        })?);
    }
    if rows.is_empty() {
        return Err(data_err(path, "no result rows"));
    }
    Ok(rows)
}

fn parse_row(line: &str) -> std::result::Result<ResultRow, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 15 {
        return Err(format!("expected 15 fields, got {}", fields.len()));
    }
    fn num<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<T, String> {
        s.parse().map_err(|_| format!("bad {what}: {s:?}"))
    }
    let row = ResultRow {
        case_id: num(fields[0], "case_id")?,
        variant: fields[1].to_string(),
        scene_id: num(fields[2], "scene_id")?,
        start_index: num(fields[3], "start_index")?,
        initial_mtre_mm: num(fields[4], "initial_mtre_mm")?,
        initial_pe_px: num(fields[5], "initial_pe_px")?,
        final_mrpd_mm: num(fields[6], "final_mrpd_mm")?,
        final_mtre_mm: num(fields[7], "final_mtre_mm")?,
        final_pe_px: num(fields[8], "final_pe_px")?,
        iterations: num(fields[9], "iterations")?,
        coarse_iterations: if fields[10].is_empty() {
            None
        } else {
            Some(num(fields[10], "coarse_iterations")?)
        },
        coarse_mrpd_mm: if fields[11].is_empty() {
            None
        } else {
            Some(num(fields[11], "coarse_mrpd_mm")?)
        },
        completed: num(fields[12], "completed")?,
    };
    for (value, what) in [
        (row.initial_mtre_mm, "initial_mtre_mm"),
        (row.final_mrpd_mm, "final_mrpd_mm"),
        (row.final_mtre_mm, "final_mtre_mm"),
    ] {
        if !(value.is_finite() && value >= 0.0) {
            return Err(format!("{what} must be finite and non-negative, got {value}"));
        }
    }
    let success_2mm: bool = num(fields[13], "success_2mm")?;
    let success_10mm: bool = num(fields[14], "success_10mm")?;
    if success_2mm != row.success_2mm() || success_10mm != row.success_10mm() {
        return Err(format!(
            "success flags disagree with final_mrpd_mm = {}",
            row.final_mrpd_mm
        ));
    }
    Ok(row)
}
