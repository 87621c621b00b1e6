//! End-to-end orchestration behind the CLI: scene/frame generation,
//! fusion, training, evaluation, probing, clustering, histograms, and the
//! ablation grid. Every command reads its inputs from, and writes its
//! artifacts into, one output directory, and emits a JSON manifest listing
//! relative paths with content digests. Nothing here depends on wall
//! clock or absolute paths, so a rerun with the same config and seed
//! reproduces every byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalsuite::{
    cross_domain_eval, ensemble_2d3d, head_features, kmeans, linear_probe, metrics_from_confusion,
    ov_segment, ConfusionMatrix, HeadSelection, Metrics, ProbeConfig,
};
use crate::fusion::{feature_histogram, fuse_views, FrameFeatures, FusedFeatureBank, Histogram};
use crate::geometry::{render_depth, CameraIntrinsics, Frame, Pose};
use crate::io;
use crate::linalg::{norm, Matrix, Vec3};
use crate::objective::ObjectiveMode;
use crate::rng::{mix, stage};
use crate::scene::{
    generate_scene, sample_indices, voxel_downsample, PointCloud, SyntheticSceneSpec,
};
use crate::student::{HeadConfig, StudentConfig, StudentModel};
use crate::teachers::{render_feature_map, vocabulary_from_teacher, TeacherSpec, VocabularySet};
use crate::trainer::{sigma_trajectory, train_with_epoch_hook, TrainOutcome, TrainScene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub digest: String,
}

/// Artifact listing for one command run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    fn new(command: &str, seed: u64) -> Self {
        Manifest {
            command: command.into(),
            seed,
            entries: Vec::new(),
        }
    }

    fn add(&mut self, root: &Path, path: &Path) -> Result<()> {
        let rel = path
            .strip_prefix(root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        self.entries.push(ManifestEntry {
            path: rel,
            digest: io::file_digest(path)?,
        });
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Writes `<command>_manifest.json` under the output root.
    fn write(&self, root: &Path) -> Result<PathBuf> {
        let path = root.join(format!("{}_manifest.json", self.command));
        write_text(&path, &self.to_json())?;
        Ok(path)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(
        path,
        &serde_json::to_string_pretty(value).expect("value serializes"),
    )
}

fn scene_spec(cfg: &RunConfig, idx: usize, size_scale: f64) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        seed: mix(cfg.seed, &[stage::SCENE, idx as u64]),
        extent: cfg.scene.extent,
        num_objects: cfg.scene.num_objects,
        num_classes: cfg.scene.num_classes,
        points_per_object: cfg.scene.points_per_object,
        floor_and_walls: cfg.scene.floor_and_walls,
        size_scale,
    }
}

fn build_scene(cfg: &RunConfig, idx: usize, size_scale: f64) -> Result<PointCloud> {
    let cloud = generate_scene(&scene_spec(cfg, idx, size_scale))?;
    voxel_downsample(&cloud, cfg.scene.voxel_size)
}

/// Camera orbit inside the scene volume: `num_frames` poses spaced around
/// the vertical axis near the ceiling, all aimed at a point below the
/// scene center, so the views overlap and jointly cover the floor, walls,
/// and objects.
fn orbit_cameras(cfg: &RunConfig) -> Vec<(Pose, CameraIntrinsics)> {
    let s = &cfg.scene;
    let intr = CameraIntrinsics {
        fx: s.focal_px,
        fy: s.focal_px,
        cx: f64::from(s.image_width) / 2.0,
        cy: f64::from(s.image_height) / 2.0,
        width: s.image_width,
        height: s.image_height,
    };
    let center = Vec3::new(s.extent[0] / 2.0, s.extent[1] / 2.0, 0.35 * s.extent[2]);
    let radius = 0.44 * s.extent[0].min(s.extent[1]);
    (0..s.num_frames)
        .map(|i| {
            let angle = i as f64 / s.num_frames as f64 * std::f64::consts::TAU;
            let eye = Vec3::new(
                center.x + radius * angle.cos(),
                center.y + radius * angle.sin(),
                0.92 * s.extent[2],
            );
            (Pose::look_at(eye, center), intr)
        })
        .collect()
}

fn scene_path(root: &Path, idx: usize) -> PathBuf {
    root.join("scenes").join(format!("scene_{idx:03}.a3pc"))
}

fn frame_path(root: &Path, scene: usize, frame: usize) -> PathBuf {
    root.join("frames")
        .join(format!("scene_{scene:03}"))
        .join(format!("frame_{frame:03}.a3fr"))
}

fn feature_map_path(root: &Path, scene: usize, frame: usize, teacher: &str) -> PathBuf {
    root.join("frames")
        .join(format!("scene_{scene:03}"))
        .join(format!("frame_{frame:03}.{teacher}.a3fm"))
}

fn bank_path(root: &Path, idx: usize) -> PathBuf {
    root.join("banks").join(format!("scene_{idx:03}.a3fb"))
}

fn final_checkpoint_path(root: &Path) -> PathBuf {
    root.join("train").join("ckpt_final.a3ck")
}

/// Generates scenes, per-frame depth bundles, and per-teacher feature
/// maps.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let teachers = cfg.require_teachers()?;
    let mut manifest = Manifest::new("gen", cfg.seed);
    let cameras = orbit_cameras(cfg);
    for scene_idx in 0..cfg.scene.count {
        let cloud = build_scene(cfg, scene_idx, 1.0)?;
        let path = scene_path(out, scene_idx);
        io::write_point_cloud(&path, &cloud)?;
        manifest.add(out, &path)?;
        for (frame_idx, (pose, intr)) in cameras.iter().enumerate() {
            let depth = render_depth(&cloud, pose, intr, cfg.scene.splat_radius);
            let frame = Frame {
                pose: *pose,
                intrinsics: *intr,
                depth,
            };
            let fpath = frame_path(out, scene_idx, frame_idx);
            io::write_frame(&fpath, &frame)?;
            manifest.add(out, &fpath)?;
            for teacher in teachers {
                let frame_seed = mix(
                    cfg.seed,
                    &[stage::FRAME, scene_idx as u64, frame_idx as u64],
                );
                let map = render_feature_map(&cloud, &frame, teacher, frame_seed)?;
                let mpath = feature_map_path(out, scene_idx, frame_idx, &teacher.name);
                io::write_feature_map(&mpath, &map)?;
                manifest.add(out, &mpath)?;
            }
        }
    }
    manifest.write(out)?;
    Ok(manifest)
}

fn load_scene_frames(
    cfg: &RunConfig,
    out: &Path,
    teachers: &[TeacherSpec],
    scene_idx: usize,
) -> Result<Vec<FrameFeatures>> {
    (0..cfg.scene.num_frames)
        .map(|frame_idx| {
            let frame = io::read_frame(&frame_path(out, scene_idx, frame_idx))?;
            let features = teachers
                .iter()
                .map(|t| {
                    crate::teachers::load_feature_map_checked(
                        &feature_map_path(out, scene_idx, frame_idx, &t.name),
                        t,
                    )
                })
                .collect::<Result<_>>()?;
            Ok(FrameFeatures { frame, features })
        })
        .collect()
}

/// Fuses the generated frames into per-scene feature banks.
pub fn cmd_fuse(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let teachers = cfg.require_teachers()?;
    let mut manifest = Manifest::new("fuse", cfg.seed);
    for scene_idx in 0..cfg.scene.count {
        let cloud = io::read_point_cloud(&scene_path(out, scene_idx))?;
        let frames = load_scene_frames(cfg, out, teachers, scene_idx)?;
        let bank = fuse_views(&cloud, &frames, teachers, cfg.fusion.depth_tol)?;
        let path = bank_path(out, scene_idx);
        io::write_bank(&path, &bank)?;
        manifest.add(out, &path)?;
    }
    manifest.write(out)?;
    Ok(manifest)
}

fn load_dataset(cfg: &RunConfig, out: &Path) -> Result<Vec<TrainScene>> {
    (0..cfg.scene.count)
        .map(|i| {
            Ok(TrainScene {
                cloud: io::read_point_cloud(&scene_path(out, i))?,
                bank: io::read_bank(&bank_path(out, i))?,
            })
        })
        .collect()
}

fn global_bounds(dataset: &[TrainScene]) -> Result<[[f64; 3]; 2]> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for scene in dataset {
        let (slo, shi) = scene
            .cloud
            .bbox()
            .ok_or_else(|| Error::contract("empty scene in training set"))?;
        for (axis, (l, h)) in [(slo.x, shi.x), (slo.y, shi.y), (slo.z, shi.z)]
            .into_iter()
            .enumerate()
        {
            lo[axis] = lo[axis].min(l);
            hi[axis] = hi[axis].max(h);
        }
    }
    Ok([lo, hi])
}

fn student_config(
    cfg: &RunConfig,
    teachers: &[TeacherSpec],
    bounds: [[f64; 3]; 2],
) -> StudentConfig {
    StudentConfig {
        pe_frequencies: cfg.student.pe_frequencies,
        trunk_widths: cfg.student.trunk_widths.clone(),
        heads: teachers
            .iter()
            .map(|t| HeadConfig {
                name: t.name.clone(),
                dim: t.dim,
                text_aligned: t.text_aligned,
            })
            .collect(),
        init_seed: mix(cfg.seed, &[stage::STUDENT_INIT]),
        bounds,
    }
}

/// Trains the student on the fused banks; writes per-epoch checkpoints,
/// the JSON-lines step log, the sigma CSV, and the structured outcome.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(Manifest, TrainOutcome)> {
    cfg.validate()?;
    let teachers = cfg.require_teachers()?;
    let dataset = load_dataset(cfg, out)?;
    let bounds = global_bounds(&dataset)?;
    let student = student_config(cfg, teachers, bounds);
    let train_cfg = cfg.trainer.to_train_config(
        cfg.objective.mode,
        cfg.fusion.de_mean_mode,
        mix(cfg.seed, &[stage::TRAIN]),
    );
    let train_dir = out.join("train");
    fs::create_dir_all(&train_dir).map_err(|e| Error::io(&train_dir, e))?;
    let mut epoch_paths = Vec::new();
    let run = train_with_epoch_hook(&dataset, teachers, &student, &train_cfg, |epoch, model| {
        let path = train_dir.join(format!("ckpt_epoch_{epoch:03}.a3ck"));
        io::write_checkpoint(&path, model, epoch as u64)?;
        epoch_paths.push(path);
        Ok(())
    })?;
    let mut manifest = Manifest::new("train", cfg.seed);
    for p in &epoch_paths {
        manifest.add(out, p)?;
    }
    let final_path = final_checkpoint_path(out);
    io::write_checkpoint(&final_path, &run.model, run.log.records.len() as u64)?;
    manifest.add(out, &final_path)?;
    let log_path = train_dir.join("train_log.jsonl");
    write_text(&log_path, &run.log.to_jsonl())?;
    manifest.add(out, &log_path)?;
    if run.log.mode != ObjectiveMode::Unweighted {
        let sigma_path = train_dir.join("sigma.csv");
        write_text(&sigma_path, &sigma_trajectory(&run.log)?.to_csv())?;
        manifest.add(out, &sigma_path)?;
    }
    let outcome_path = train_dir.join("outcome.json");
    write_json(&outcome_path, &run.outcome)?;
    manifest.add(out, &outcome_path)?;
    manifest.write(out)?;
    Ok((manifest, run.outcome))
}

fn load_model(out: &Path) -> Result<StudentModel> {
    Ok(io::read_checkpoint(&final_checkpoint_path(out))?.0)
}

fn vocabulary(cfg: &RunConfig, teachers: &[TeacherSpec]) -> Result<VocabularySet> {
    let text = teachers
        .iter()
        .find(|t| t.text_aligned)
        .ok_or_else(|| Error::contract("no text-aligned teacher configured"))?;
    vocabulary_from_teacher(text, cfg.scene.num_classes)
}

/// Open-vocabulary evaluation over the training scenes (optionally via the
/// 2D/3D ensemble), plus the cross-domain harness when enabled.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let teachers = cfg.require_teachers()?;
    let model = load_model(out)?;
    let vocab = vocabulary(cfg, teachers)?;
    let k = cfg.scene.num_classes as usize;
    let mut confusion = ConfusionMatrix::new(k);
    for scene_idx in 0..cfg.scene.count {
        let cloud = io::read_point_cloud(&scene_path(out, scene_idx))?;
        let gt = cloud
            .labels
            .clone()
            .ok_or_else(|| Error::contract("evaluation scene lacks labels"))?;
        let pred = if cfg.eval.ensemble {
            let bank = io::read_bank(&bank_path(out, scene_idx))?;
            ensemble_2d3d(&model, &cloud, &bank, &vocab)?
        } else {
            ov_segment(&model, &cloud, &vocab)?
        };
        for (&g, &p) in gt.iter().zip(&pred) {
            confusion.record(g, p);
        }
    }
    let metrics = metrics_from_confusion(&confusion);
    let mut manifest = Manifest::new("eval", cfg.seed);
    let metrics_path = out.join("eval").join("metrics.json");
    write_json(&metrics_path, &metrics)?;
    manifest.add(out, &metrics_path)?;

    if cfg.eval.cross_domain.enabled {
        let shifted: Vec<PointCloud> = (0..cfg.scene.count)
            .map(|i| build_scene(cfg, i, cfg.eval.cross_domain.size_scale))
            .collect::<Result<_>>()?;
        let cross = cross_domain_eval(&model, &shifted, &vocab)?;
        let cross_path = out.join("eval").join("metrics_cross_domain.json");
        write_json(&cross_path, &cross)?;
        manifest.add(out, &cross_path)?;
    }
    manifest.write(out)?;
    Ok(manifest)
}

/// Stacks every scene's points and labels into one labelled cloud.
fn stacked_points(cfg: &RunConfig, out: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for scene_idx in 0..cfg.scene.count {
        let cloud = io::read_point_cloud(&scene_path(out, scene_idx))?;
        let gt = cloud
            .labels
            .as_ref()
            .ok_or_else(|| Error::contract("scene lacks labels"))?;
        labels.extend_from_slice(gt);
        points.extend(cloud.points);
    }
    PointCloud::new(points, Some(labels), cfg.scene.num_classes, "stacked")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRow {
    pub selection: String,
    pub miou: f64,
    pub macc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub ridge_lambda: f64,
    pub train_fraction: f64,
    pub rows: Vec<ProbeRow>,
}

/// Linear probing of the frozen student: fits a ridge classifier on a
/// train split and reports eval-split metrics for the concatenated heads,
/// the averaged heads, and each head alone.
pub fn cmd_probe(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let model = load_model(out)?;
    let all = stacked_points(cfg, out)?;
    let labels = all.labels.clone().expect("stacked cloud is labelled");
    let n = all.len();
    let n_train = ((n as f64) * cfg.eval.probe.train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::contract("probe split leaves an empty side"));
    }
    let order = sample_indices(n, n, mix(cfg.seed, &[stage::PROBE]));
    let gather = |idx: &[usize]| -> Result<(PointCloud, Vec<u16>)> {
        let pts: Vec<Vec3> = idx.iter().map(|&i| all.points[i]).collect();
        let labs: Vec<u16> = idx.iter().map(|&i| labels[i]).collect();
        Ok((
            PointCloud::new(pts, Some(labs.clone()), all.num_classes, "split")?,
            labs,
        ))
    };
    let (train_cloud, train_labels) = gather(&order[..n_train])?;
    let (eval_cloud, eval_labels) = gather(&order[n_train..])?;

    let mut selections: Vec<(String, HeadSelection)> = vec![
        ("concat".into(), HeadSelection::Concat),
        ("average".into(), HeadSelection::Average),
    ];
    for (i, head) in model.config.heads.iter().enumerate() {
        selections.push((format!("single:{}", head.name), HeadSelection::Single(i)));
    }
    let mut rows = Vec::new();
    for (name, selection) in selections {
        let metrics = linear_probe(
            &model,
            (&train_cloud, &train_labels),
            (&eval_cloud, &eval_labels),
            &ProbeConfig {
                selection,
                ridge_lambda: cfg.eval.probe.ridge_lambda,
            },
        )?;
        rows.push(ProbeRow {
            selection: name,
            miou: metrics.miou,
            macc: metrics.macc,
        });
    }
    let report = ProbeReport {
        ridge_lambda: cfg.eval.probe.ridge_lambda,
        train_fraction: cfg.eval.probe.train_fraction,
        rows,
    };
    let mut manifest = Manifest::new("probe", cfg.seed);
    let path = out.join("probe").join("probe.json");
    write_json(&path, &report)?;
    manifest.add(out, &path)?;
    manifest.write(out)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub iterations: usize,
    pub inertia: Vec<f64>,
    pub normalized: bool,
    pub head: String,
}

/// K-means over the student features of every scene point; assignments go
/// to a u16 binary sidecar per scene.
pub fn cmd_cluster(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let model = load_model(out)?;
    let selection = match cfg.eval.kmeans.head.as_str() {
        "concat" => HeadSelection::Concat,
        name => {
            let idx = model
                .config
                .heads
                .iter()
                .position(|h| h.name == name)
                .ok_or_else(|| Error::config(format!("eval.kmeans.head: unknown head '{name}'")))?;
            HeadSelection::Single(idx)
        }
    };
    let all = stacked_points(cfg, out)?;
    let mut features = head_features(&model, &all.points, selection)?;
    if cfg.eval.kmeans.normalize {
        for i in 0..features.rows() {
            let row = features.row_mut(i);
            let n = norm(row);
            if n > 1e-12 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
    let k = cfg
        .eval
        .kmeans
        .k
        .unwrap_or(cfg.scene.num_classes as usize)
        .min(features.rows());
    let result = kmeans(
        &features,
        k,
        mix(cfg.seed, &[stage::KMEANS]),
        cfg.eval.kmeans.max_iters,
    )?;
    let mut manifest = Manifest::new("cluster", cfg.seed);
    let assign_path = out.join("cluster").join("assignments.u16");
    let mut bytes = Vec::with_capacity(result.assignments.len() * 2);
    for &a in &result.assignments {
        bytes.extend_from_slice(&(a as u16).to_le_bytes());
    }
    if let Some(parent) = assign_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&assign_path, bytes).map_err(|e| Error::io(&assign_path, e))?;
    manifest.add(out, &assign_path)?;
    let report = ClusterReport {
        k,
        iterations: result.inertia.len(),
        inertia: result.inertia.clone(),
        normalized: cfg.eval.kmeans.normalize,
        head: cfg.eval.kmeans.head.clone(),
    };
    let report_path = out.join("cluster").join("cluster.json");
    write_json(&report_path, &report)?;
    manifest.add(out, &report_path)?;
    manifest.write(out)?;
    Ok(manifest)
}

/// Per-teacher value histograms over the observed rows of the fused banks.
pub fn cmd_hist(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let teachers = cfg.require_teachers()?;
    let mut banks: Vec<FusedFeatureBank> = Vec::new();
    for scene_idx in 0..cfg.scene.count {
        banks.push(io::read_bank(&bank_path(out, scene_idx))?);
    }
    #[derive(Serialize)]
    struct HistReport<'a> {
        teacher: &'a str,
        histogram: Histogram,
    }
    let mut reports = Vec::new();
    for (ti, teacher) in teachers.iter().enumerate() {
        // Stack observed rows across scenes.
        let dim = teacher.dim;
        let mut data = Vec::new();
        for bank in &banks {
            let slice = &bank.slices[ti];
            for (i, &observed) in bank.mask.iter().enumerate() {
                if observed {
                    data.extend_from_slice(slice.row(i));
                }
            }
        }
        let rows = data.len() / dim;
        let stacked = Matrix::from_vec(rows, dim, data);
        reports.push(HistReport {
            teacher: &teacher.name,
            histogram: feature_histogram(&stacked, &cfg.eval.histogram)?,
        });
    }
    let mut manifest = Manifest::new("hist", cfg.seed);
    let path = out.join("hist").join("histograms.json");
    write_json(&path, &reports)?;
    manifest.add(out, &path)?;
    manifest.write(out)?;
    Ok(manifest)
}

/// One row of the pipeline grid report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineRow {
    pub cell: String,
    pub teachers: Vec<String>,
    pub mode: ObjectiveMode,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub collapse_step: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub rows: Vec<PipelineRow>,
}

impl PipelineReport {
    /// Human-readable aligned table.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<20} {:<34} {:<16} {:<10} {:>8} {:>8}\n",
            "cell", "teachers", "mode", "status", "mIoU", "mAcc"
        );
        for row in &self.rows {
            let mode = serde_json::to_string(&row.mode)
                .unwrap_or_default()
                .trim_matches('"')
                .to_string();
            let fmt = |v: Option<f64>| match v {
                Some(x) => format!("{x:.4}"),
                None => "-".into(),
            };
            let status = match row.collapse_step {
                Some(step) => format!("{}@{}", row.status, step),
                None => row.status.clone(),
            };
            out.push_str(&format!(
                "{:<20} {:<34} {:<16} {:<10} {:>8} {:>8}\n",
                row.cell,
                row.teachers.join("+"),
                mode,
                status,
                fmt(row.miou),
                fmt(row.macc),
            ));
        }
        out
    }
}

/// Runs the full gen -> fuse -> train -> eval chain once in `dir`.
/// Returns the evaluation metrics or the structured collapse.
fn run_cell(cfg: &RunConfig, dir: &Path) -> Result<(TrainOutcome, Option<Metrics>)> {
    cmd_gen(cfg, dir)?;
    cmd_fuse(cfg, dir)?;
    let (_, outcome) = cmd_train(cfg, dir)?;
    if let TrainOutcome::Collapsed { .. } = outcome {
        return Ok((outcome, None));
    }
    cmd_eval(cfg, dir)?;
    let metrics_text = fs::read_to_string(dir.join("eval").join("metrics.json"))
        .map_err(|e| Error::io(dir.join("eval/metrics.json"), e))?;
    let metrics: Metrics =
        serde_json::from_str(&metrics_text).map_err(|e| Error::validation(e.to_string()))?;
    Ok((outcome, Some(metrics)))
}

/// Executes the ablation grid: each cell derives a config with that
/// cell's teacher subset and objective mode but the shared root seed, and
/// runs the full chain in its own subdirectory. Cell failures (including
/// structured collapse) are recorded in the report without aborting the
/// other cells.
pub fn cmd_pipeline(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    cfg.require_teachers()?;
    let mut rows = Vec::new();
    let mut manifest = Manifest::new("pipeline", cfg.seed);
    for cell in &cfg.eval.pipeline {
        let dir = out.join("cells").join(&cell.name);
        let teachers = cfg.teacher_subset(&cell.teachers)?;
        let mut cell_cfg = cfg.clone();
        cell_cfg.teachers = Some(teachers);
        cell_cfg.objective.mode = cell.mode;
        let row = match run_cell(&cell_cfg, &dir) {
            Ok((TrainOutcome::Completed, Some(metrics))) => PipelineRow {
                cell: cell.name.clone(),
                teachers: cell.teachers.clone(),
                mode: cell.mode,
                status: "ok".into(),
                collapse_step: None,
                miou: Some(metrics.miou),
                macc: Some(metrics.macc),
            },
            Ok((TrainOutcome::Collapsed { step, .. }, _)) => PipelineRow {
                cell: cell.name.clone(),
                teachers: cell.teachers.clone(),
                mode: cell.mode,
                status: "collapse".into(),
                collapse_step: Some(step),
                miou: None,
                macc: None,
            },
            Ok((TrainOutcome::Completed, None)) => unreachable!("completed cell has metrics"),
            Err(e) => PipelineRow {
                cell: cell.name.clone(),
                teachers: cell.teachers.clone(),
                mode: cell.mode,
                status: format!("error: {e}"),
                collapse_step: None,
                miou: None,
                macc: None,
            },
        };
        rows.push(row);
        // Key per-cell artifacts join the pipeline manifest when present.
        for artifact in [
            dir.join("train").join("outcome.json"),
            dir.join("train").join("train_log.jsonl"),
            final_checkpoint_path(&dir),
            dir.join("eval").join("metrics.json"),
        ] {
            if artifact.exists() {
                manifest.add(out, &artifact)?;
            }
        }
    }
    let report = PipelineReport {
        seed: cfg.seed,
        rows,
    };
    let json_path = out.join("pipeline").join("report.json");
    write_json(&json_path, &report)?;
    manifest.add(out, &json_path)?;
    let text_path = out.join("pipeline").join("report.txt");
    write_text(&text_path, &report.to_text())?;
    manifest.add(out, &text_path)?;
    manifest.write(out)?;
    Ok(manifest)
}

/// Reads back a pipeline report (used by the acceptance harness).
pub fn read_pipeline_report(out: &Path) -> Result<PipelineReport> {
    let path = out.join("pipeline").join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::validation(e.to_string()))
}
