//! Whole-pipeline integration tests on the noiseless toy world, where
//! ground truth is recoverable exactly and the only errors left are
//! structural (unobserved points, boundaries).

use agglom3d_core::config::{PipelineCell, RunConfig};
use agglom3d_core::evalsuite::{compute_metrics, cross_domain_eval, ov_segment};
use agglom3d_core::fusion::{fuse_views, FrameFeatures};
use agglom3d_core::geometry::{render_depth, CameraIntrinsics, Frame, Pose};
use agglom3d_core::linalg::Vec3;
use agglom3d_core::objective::{LossKind, ObjectiveMode};
use agglom3d_core::pipeline::{cmd_pipeline, read_pipeline_report};
use agglom3d_core::scene::{generate_scene, voxel_downsample, PointCloud, SyntheticSceneSpec};
use agglom3d_core::student::{HeadConfig, StudentConfig};
use agglom3d_core::teachers::{render_feature_map, vocabulary_from_teacher, TeacherSpec};
use agglom3d_core::trainer::{train, TrainConfig, TrainOutcome, TrainScene};

fn noiseless_teacher() -> TeacherSpec {
    TeacherSpec {
        name: "clean".into(),
        dim: 12,
        text_aligned: true,
        prototype_seed: 31,
        noise_std: 0.0,
        mean_shift: 0.0,
        spike_prob: 0.0,
        spike_scale: 0.0,
        view_confusion_prob: 0.0,
        loss: Some(LossKind::Cosine),
    }
}

fn build_world(size_scale: f64) -> (PointCloud, Vec<FrameFeatures>) {
    let spec = SyntheticSceneSpec {
        seed: 404,
        extent: [3.0, 3.0, 2.0],
        num_objects: 3,
        num_classes: 4,
        points_per_object: 250,
        floor_and_walls: true,
        size_scale,
    };
    let cloud = voxel_downsample(&generate_scene(&spec).unwrap(), 0.05).unwrap();
    let intr = CameraIntrinsics {
        fx: 30.0,
        fy: 30.0,
        cx: 24.0,
        cy: 24.0,
        width: 48,
        height: 48,
    };
    let teacher = noiseless_teacher();
    let frames = (0..6)
        .map(|i| {
            let angle = i as f64 / 6.0 * std::f64::consts::TAU;
            let eye = Vec3::new(
                1.5 + 0.44 * 3.0 * angle.cos(),
                1.5 + 0.44 * 3.0 * angle.sin(),
                0.92 * 2.0,
            );
            let pose = Pose::look_at(eye, Vec3::new(1.5, 1.5, 0.7));
            let depth = render_depth(&cloud, &pose, &intr, 1);
            let frame = Frame {
                pose,
                intrinsics: intr,
                depth,
            };
            let features =
                vec![render_feature_map(&cloud, &frame, &teacher, 600 + i as u64).unwrap()];
            FrameFeatures { frame, features }
        })
        .collect();
    (cloud, frames)
}

/// Noiseless teachers plus a converged student recover ground truth on
/// nearly every observed point, and a geometry-only domain shift (same
/// layout, scaled object sizes) moves aggregate mIoU by less than 0.1.
#[test]
fn noiseless_pipeline_recovers_labels_and_transfers() {
    let teacher = noiseless_teacher();
    let (cloud, frames) = build_world(1.0);
    let bank = fuse_views(&cloud, &frames, std::slice::from_ref(&teacher), 0.04).unwrap();
    let observed: Vec<bool> = bank.mask.clone();

    let (lo, hi) = cloud.bbox().unwrap();
    let student = StudentConfig {
        pe_frequencies: 4,
        trunk_widths: vec![64],
        heads: vec![HeadConfig {
            name: teacher.name.clone(),
            dim: teacher.dim,
            text_aligned: true,
        }],
        init_seed: 6,
        bounds: [[lo.x, lo.y, lo.z], [hi.x, hi.y, hi.z]],
    };
    let cfg = TrainConfig {
        lr0: 1e-2,
        epochs: 200,
        scenes_per_batch: 1,
        points_per_scene: 1024,
        lr_decay: 1.0,
        seed: 5,
        mode: ObjectiveMode::Stabilized,
        ..TrainConfig::default()
    };
    let dataset = vec![TrainScene {
        cloud: cloud.clone(),
        bank,
    }];
    let run = train(&dataset, std::slice::from_ref(&teacher), &student, &cfg).unwrap();
    assert_eq!(run.outcome, TrainOutcome::Completed);

    let vocab = vocabulary_from_teacher(&teacher, cloud.num_classes).unwrap();
    let pred = ov_segment(&run.model, &cloud, &vocab).unwrap();
    let gt = cloud.labels.as_ref().unwrap();
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..cloud.len() {
        if observed[i] {
            total += 1;
            if pred[i] == gt[i] {
                correct += 1;
            }
        }
    }
    let accuracy = correct as f64 / total as f64;
    assert!(
        accuracy >= 0.99,
        "noiseless pipeline should recover >= 99% of observed labels, got {accuracy:.4} \
         over {total} points"
    );

    // Geometry-only shift: identical layout seed, object sizes scaled.
    let in_domain = compute_metrics(&pred, gt, cloud.num_classes as usize).unwrap();
    let (shifted, _) = build_world(1.15);
    let cross = cross_domain_eval(&run.model, std::slice::from_ref(&shifted), &vocab).unwrap();
    assert!(
        (in_domain.miou - cross.miou).abs() <= 0.1,
        "size-shifted domain mIoU {:.4} strayed more than 0.1 from in-domain {:.4}",
        cross.miou,
        in_domain.miou
    );
}

/// A naive-weighting cell on a fit-to-convergence toy is recorded in the
/// pipeline report as a collapse with its step index, without failing the
/// other cells.
#[test]
fn pipeline_records_collapsed_cell_with_step() {
    let mut cfg = RunConfig::with_default_teachers();
    cfg.seed = 9;
    cfg.scene.count = 2;
    cfg.scene.num_objects = 2;
    cfg.scene.num_classes = 4;
    cfg.scene.points_per_object = 150;
    cfg.scene.voxel_size = 0.05;
    cfg.scene.num_frames = 3;
    cfg.scene.image_width = 48;
    cfg.scene.image_height = 48;
    cfg.scene.focal_px = 27.0;
    // One perfectly fittable teacher: its loss reaches ~zero, which is
    // exactly where the naive objective is unbounded below.
    cfg.teachers = Some(vec![TeacherSpec {
        loss: Some(LossKind::L1),
        ..noiseless_teacher()
    }]);
    cfg.student.pe_frequencies = 4;
    cfg.student.trunk_widths = vec![48];
    cfg.trainer.lr0 = 2e-2;
    cfg.trainer.epochs = 120;
    cfg.trainer.lr_decay = 1.0;
    cfg.trainer.scenes_per_batch = 1;
    cfg.trainer.points_per_scene = 512;
    cfg.eval.pipeline = vec![
        PipelineCell {
            name: "stable".into(),
            teachers: vec!["clean".into()],
            mode: ObjectiveMode::Stabilized,
        },
        PipelineCell {
            name: "naive".into(),
            teachers: vec!["clean".into()],
            mode: ObjectiveMode::NaiveLogSigma,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    cmd_pipeline(&cfg, dir.path()).unwrap();
    let report = read_pipeline_report(dir.path()).unwrap();
    let stable = report.rows.iter().find(|r| r.cell == "stable").unwrap();
    assert_eq!(stable.status, "ok");
    assert!(stable.miou.is_some());
    let naive = report.rows.iter().find(|r| r.cell == "naive").unwrap();
    assert_eq!(naive.status, "collapse", "naive cell should collapse");
    assert!(naive.collapse_step.unwrap() > 0);
    assert!(naive.miou.is_none());
    // The text table carries the collapse marker too.
    let text = std::fs::read_to_string(dir.path().join("pipeline/report.txt")).unwrap();
    assert!(
        text.contains("collapse@"),
        "table should mark the collapse step:\n{text}"
    );
}
