//! The optimization loop: Adam updates under a chosen objective mode,
//! exponential learning-rate decay, scene batching with per-step point
//! sampling, optional augmentations, per-step diagnostics, and structured
//! collapse detection for the degenerate weighting modes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{de_mean_with_mode, DeMeanMode, FusedFeatureBank};
use crate::linalg::Matrix;
use crate::objective::{apply_loss, distill_total, map_teacher_loss, LossKind, ObjectiveMode};
use crate::rng::{mix, stage, Rng};
use crate::scene::{augment_elastic, augment_flip, sample_indices, FlipAxis, PointCloud};
use crate::student::{backward, forward, init_student, Gradients, StudentConfig, StudentModel};
use crate::teachers::TeacherSpec;

/// In auto-weight mode, training is declared collapsed once every
/// learned weight has degenerated below this threshold: all supervision
/// has been optimized away, the trivial solution.
pub const AUTO_WEIGHT_COLLAPSE_THRESHOLD: f64 = 1e-2;

/// Consecutive epochs of negative, strictly decreasing mean total loss
/// that trigger the divergence form of collapse.
pub const COLLAPSE_EPOCH_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub scenes_per_batch: usize,
    pub points_per_scene: usize,
    /// Multiplicative per-epoch decay: `lr = lr0 * lr_decay^epoch`.
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub mode: ObjectiveMode,
    pub augment: bool,
    pub elastic_granularity: f64,
    pub elastic_magnitude: f64,
    /// Which mean the de-mean target preparation subtracts.
    pub de_mean_mode: DeMeanMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            epochs: 50,
            scenes_per_batch: 2,
            points_per_scene: 2048,
            lr_decay: 0.95,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            mode: ObjectiveMode::Stabilized,
            augment: false,
            elastic_granularity: 0.4,
            elastic_magnitude: 0.02,
            de_mean_mode: DeMeanMode::PerPoint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::validation("lr0 must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::validation("lr_decay must be in (0, 1]"));
        }
        if self.epochs < 1 {
            return Err(Error::validation("epochs must be >= 1"));
        }
        if self.scenes_per_batch < 1 || self.points_per_scene < 1 {
            return Err(Error::validation("batch sizes must be >= 1"));
        }
        Ok(())
    }
}

/// One training scene: geometry plus its fused supervision bank.
#[derive(Debug, Clone)]
pub struct TrainScene {
    pub cloud: PointCloud,
    pub bank: FusedFeatureBank,
}

/// Mutable optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: StudentModel,
    pub moment1: Gradients,
    pub moment2: Gradients,
    pub step: u64,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: StudentModel) -> Self {
        TrainState {
            moment1: Gradients::zeros_like(&model),
            moment2: Gradients::zeros_like(&model),
            model,
            step: 0,
            epoch: 0,
        }
    }
}

/// A gathered batch: sampled points with their target rows and mask.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub points: Vec<crate::linalg::Vec3>,
    /// One N x D_i matrix per teacher, aligned with `points`.
    pub targets: Vec<Matrix>,
    pub mask: Vec<bool>,
}

/// Per-step diagnostics, serialized as one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: Vec<f64>,
    pub sigma: Vec<f64>,
    pub total: f64,
}

/// How a training run ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainOutcome {
    Completed,
    /// Structured collapse: the step and epoch where training was halted
    /// plus the detector that fired.
    Collapsed {
        step: u64,
        epoch: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub mode: ObjectiveMode,
    pub records: Vec<StepRecord>,
    /// Sigma snapshot at the start of each epoch (entry 0 is the
    /// initialization). Truncated at the collapse epoch if any.
    pub sigma_epochs: Vec<Vec<f64>>,
    pub collapsed_at: Option<(u64, usize)>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("step record serializes"));
            out.push('\n');
        }
        out
    }
}

/// A finished (or collapsed) training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: StudentModel,
    pub outcome: TrainOutcome,
    pub log: TrainLog,
}

/// Per-epoch sigma evolution, exportable as CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaTrajectory {
    pub rows: Vec<Vec<f64>>,
    pub collapsed: Option<(u64, usize)>,
}

impl SigmaTrajectory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch");
        if let Some(first) = self.rows.first() {
            for i in 0..first.len() {
                out.push_str(&format!(",sigma_{i}"));
            }
        }
        out.push('\n');
        for (e, row) in self.rows.iter().enumerate() {
            out.push_str(&e.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        if let Some((step, epoch)) = self.collapsed {
            out.push_str(&format!("collapsed_at_step={step},epoch={epoch}\n"));
        }
        out
    }
}

/// Extracts the per-epoch sigma evolution from a weighted-mode log.
pub fn sigma_trajectory(log: &TrainLog) -> Result<SigmaTrajectory> {
    if log.mode == ObjectiveMode::Unweighted {
        return Err(Error::contract(
            "sigma trajectory requires a weighted-mode training log",
        ));
    }
    Ok(SigmaTrajectory {
        rows: log.sigma_epochs.clone(),
        collapsed: log.collapsed_at,
    })
}

/// Copies bank slices into training targets, re-centering the slices of
/// teachers whose loss is cosine-over-de-meaned-targets.
pub fn prepare_targets(
    bank: &FusedFeatureBank,
    kinds: &[LossKind],
    mode: DeMeanMode,
) -> Vec<Matrix> {
    bank.slices
        .iter()
        .zip(kinds)
        .map(|(slice, kind)| match kind {
            LossKind::CosineDeMean => de_mean_with_mode(slice, mode),
            _ => slice.clone(),
        })
        .collect()
}

#[inline]
fn adam_scalar(
    p: &mut f64,
    g: f64,
    m: &mut f64,
    v: &mut f64,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    *m = beta1 * *m + (1.0 - beta1) * g;
    *v = beta2 * *v + (1.0 - beta2) * g * g;
    let m_hat = *m / (1.0 - beta1.powi(t as i32));
    let v_hat = *v / (1.0 - beta2.powi(t as i32));
    *p -= lr * m_hat / (v_hat.sqrt() + eps);
}

fn adam_update(state: &mut TrainState, grads: &Gradients, lr: f64, cfg: &TrainConfig) {
    let t = state.step + 1;
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let update_layer = |p: &mut crate::student::Layer,
                        g: &crate::student::Layer,
                        m: &mut crate::student::Layer,
                        v: &mut crate::student::Layer| {
        for i in 0..p.weights.len() {
            adam_scalar(
                &mut p.weights[i],
                g.weights[i],
                &mut m.weights[i],
                &mut v.weights[i],
                t,
                lr,
                b1,
                b2,
                eps,
            );
        }
        for i in 0..p.biases.len() {
            adam_scalar(
                &mut p.biases[i],
                g.biases[i],
                &mut m.biases[i],
                &mut v.biases[i],
                t,
                lr,
                b1,
                b2,
                eps,
            );
        }
    };
    for i in 0..state.model.trunk.len() {
        update_layer(
            &mut state.model.trunk[i],
            &grads.trunk[i],
            &mut state.moment1.trunk[i],
            &mut state.moment2.trunk[i],
        );
    }
    for i in 0..state.model.heads.len() {
        update_layer(
            &mut state.model.heads[i],
            &grads.heads[i],
            &mut state.moment1.heads[i],
            &mut state.moment2.heads[i],
        );
    }
    for i in 0..state.model.raw_sigma.len() {
        adam_scalar(
            &mut state.model.raw_sigma[i],
            grads.raw_sigma[i],
            &mut state.moment1.raw_sigma[i],
            &mut state.moment2.raw_sigma[i],
            t,
            lr,
            b1,
            b2,
            eps,
        );
    }
}

/// Result of one optimization step.
#[derive(Debug, Clone)]
pub enum StepOutcome {
    Ok(StepRecord),
    /// A non-finite loss or parameter was produced; the expected terminal
    /// state of the naive/auto modes near collapse.
    NonFinite {
        step: u64,
        what: String,
    },
}

/// Runs one forward/loss/backward/Adam cycle on a gathered batch.
pub fn train_step(
    state: &mut TrainState,
    batch: &TrainBatch,
    kinds: &[LossKind],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepOutcome> {
    if batch.mask.iter().all(|&m| !m) {
        return Err(Error::contract(
            "batch has no observed points: no teacher receives supervision",
        ));
    }
    let outputs = forward(&state.model, &batch.points)?;
    let mut losses = Vec::with_capacity(kinds.len());
    let mut feature_grads = Vec::with_capacity(kinds.len());
    for ((kind, out), target) in kinds.iter().zip(&outputs).zip(&batch.targets) {
        let (loss, grad) = apply_loss(*kind, out, target, &batch.mask)?;
        losses.push(loss);
        feature_grads.push(grad);
    }
    let scales = state.model.sigmas();
    let (breakdown, d_loss, d_scale) = distill_total(&losses, &scales, cfg.mode)?;
    if !breakdown.total.is_finite() {
        return Ok(StepOutcome::NonFinite {
            step: state.step,
            what: format!("total loss = {}", breakdown.total),
        });
    }
    if cfg.mode == ObjectiveMode::Stabilized && breakdown.total < 0.0 {
        return Err(Error::contract(format!(
            "stabilized objective went negative ({})",
            breakdown.total
        )));
    }
    let mut cotangents = feature_grads;
    for (ct, &dl) in cotangents.iter_mut().zip(&d_loss) {
        if dl != 1.0 {
            ct.data_mut().iter_mut().for_each(|v| *v *= dl);
        }
    }
    let mut grads = backward(&state.model, &batch.points, &cotangents)?;
    for ((g, &ds), &scale) in grads.raw_sigma.iter_mut().zip(&d_scale).zip(&scales) {
        // Chain rule through sigma = exp(s).
        *g = ds * scale;
    }
    let record = StepRecord {
        step: state.step + 1,
        epoch: state.epoch,
        lr,
        loss: losses,
        sigma: scales,
        total: breakdown.total,
    };
    adam_update(state, &grads, lr, cfg);
    state.step += 1;
    if !state.model.all_finite() {
        return Ok(StepOutcome::NonFinite {
            step: state.step,
            what: "non-finite parameter after update".into(),
        });
    }
    Ok(StepOutcome::Ok(record))
}

fn gather_batch(
    dataset: &[TrainScene],
    targets: &[Vec<Matrix>],
    scene_ids: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    step_in_epoch: usize,
) -> Result<TrainBatch> {
    let dims: Vec<usize> = targets[0].iter().map(Matrix::cols).collect();
    let mut points = Vec::new();
    let mut mask = Vec::new();
    let mut rows: Vec<Vec<f64>> = dims.iter().map(|_| Vec::new()).collect();
    for &si in scene_ids {
        let scene = &dataset[si];
        let n = scene.cloud.len();
        let sample_seed = mix(
            cfg.seed,
            &[stage::TRAIN, epoch as u64, step_in_epoch as u64, si as u64],
        );
        let indices = sample_indices(n, cfg.points_per_scene.min(n), sample_seed);
        let mut sub_points: Vec<_> = indices.iter().map(|&i| scene.cloud.points[i]).collect();
        if cfg.augment {
            let mut arng = Rng::from_stream(
                cfg.seed,
                &[
                    stage::AUGMENT,
                    epoch as u64,
                    step_in_epoch as u64,
                    si as u64,
                ],
            );
            let axis = if arng.uniform() < 0.5 {
                FlipAxis::X
            } else {
                FlipAxis::Y
            };
            let apply = arng.uniform() < 0.5;
            let sub = PointCloud::unlabelled(sub_points, "batch")?;
            let sub = augment_flip(&sub, axis, apply);
            let sub = augment_elastic(
                &sub,
                cfg.elastic_granularity,
                cfg.elastic_magnitude,
                arng.next_u64(),
            )?;
            sub_points = sub.points;
        }
        points.extend(sub_points);
        for &i in &indices {
            mask.push(scene.bank.mask[i]);
        }
        for (ti, rowbuf) in rows.iter_mut().enumerate() {
            for &i in &indices {
                rowbuf.extend_from_slice(targets[si][ti].row(i));
            }
        }
    }
    let n = points.len();
    let targets = dims
        .iter()
        .zip(rows)
        .map(|(&d, buf)| Matrix::from_vec(n, d, buf))
        .collect();
    Ok(TrainBatch {
        points,
        targets,
        mask,
    })
}

/// Trains a fresh student on the fused banks.
///
/// Fully deterministic under `(config, seed, data)`. Naive/auto collapse
/// terminates the run early with a structured [`TrainOutcome::Collapsed`]
/// rather than an error; `epoch_hook` runs after every completed epoch
/// (checkpointing lives there).
pub fn train_with_epoch_hook(
    dataset: &[TrainScene],
    teachers: &[TeacherSpec],
    student_cfg: &StudentConfig,
    cfg: &TrainConfig,
    mut epoch_hook: impl FnMut(usize, &StudentModel) -> Result<()>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("training requires at least one scene"));
    }
    if student_cfg.heads.len() != teachers.len() {
        return Err(Error::contract(format!(
            "{} heads configured for {} teachers",
            student_cfg.heads.len(),
            teachers.len()
        )));
    }
    for (head, teacher) in student_cfg.heads.iter().zip(teachers) {
        if head.dim != teacher.dim {
            return Err(Error::contract(format!(
                "head '{}' dim {} != teacher '{}' dim {}",
                head.name, head.dim, teacher.name, teacher.dim
            )));
        }
    }
    for (si, scene) in dataset.iter().enumerate() {
        if scene.bank.num_points() != scene.cloud.len() {
            return Err(Error::contract(format!(
                "scene {si}: bank covers {} points, cloud has {}",
                scene.bank.num_points(),
                scene.cloud.len()
            )));
        }
        if scene.bank.num_teachers() != teachers.len() {
            return Err(Error::contract(format!(
                "scene {si}: bank has {} teachers, expected {}",
                scene.bank.num_teachers(),
                teachers.len()
            )));
        }
    }
    let kinds: Vec<LossKind> = teachers
        .iter()
        .map(map_teacher_loss)
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<Matrix>> = dataset
        .iter()
        .map(|s| prepare_targets(&s.bank, &kinds, cfg.de_mean_mode))
        .collect();

    let mut state = TrainState::new(init_student(student_cfg)?);
    let mut log = TrainLog {
        mode: cfg.mode,
        records: Vec::new(),
        sigma_epochs: Vec::new(),
        collapsed_at: None,
    };
    let mut epoch_totals: Vec<f64> = Vec::new();

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        log.sigma_epochs.push(state.model.sigmas());
        let lr = cfg.lr0 * cfg.lr_decay.powi(epoch as i32);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng = Rng::from_stream(cfg.seed, &[stage::TRAIN, epoch as u64]);
        shuffle_rng.shuffle(&mut order);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0usize;
        for (step_in_epoch, scene_ids) in order.chunks(cfg.scenes_per_batch).enumerate() {
            let batch = gather_batch(dataset, &targets, scene_ids, cfg, epoch, step_in_epoch)?;
            match train_step(&mut state, &batch, &kinds, cfg, lr)? {
                StepOutcome::Ok(record) => {
                    epoch_sum += record.total;
                    epoch_steps += 1;
                    log.records.push(record);
                }
                StepOutcome::NonFinite { step, what } => {
                    log.collapsed_at = Some((step, epoch));
                    return Ok(TrainRun {
                        model: state.model,
                        outcome: TrainOutcome::Collapsed {
                            step,
                            epoch,
                            reason: what,
                        },
                        log,
                    });
                }
            }
            if cfg.mode == ObjectiveMode::AutoWeight {
                let weights = state.model.sigmas();
                if weights.iter().all(|&w| w < AUTO_WEIGHT_COLLAPSE_THRESHOLD) {
                    log.collapsed_at = Some((state.step, epoch));
                    return Ok(TrainRun {
                        model: state.model,
                        outcome: TrainOutcome::Collapsed {
                            step: state.step,
                            epoch,
                            reason: format!(
                                "all auto-weights degenerated below {AUTO_WEIGHT_COLLAPSE_THRESHOLD}"
                            ),
                        },
                        log,
                    });
                }
            }
        }
        epoch_totals.push(epoch_sum / epoch_steps.max(1) as f64);
        if epoch_totals.len() >= COLLAPSE_EPOCH_WINDOW {
            let tail = &epoch_totals[epoch_totals.len() - COLLAPSE_EPOCH_WINDOW..];
            let all_negative = tail.iter().all(|&t| t < 0.0);
            let decreasing = tail.windows(2).all(|w| w[1] < w[0]);
            if all_negative && decreasing {
                log.collapsed_at = Some((state.step, epoch));
                return Ok(TrainRun {
                    model: state.model,
                    outcome: TrainOutcome::Collapsed {
                        step: state.step,
                        epoch,
                        reason: format!(
                            "mean total negative and decreasing over {COLLAPSE_EPOCH_WINDOW} epochs"
                        ),
                    },
                    log,
                });
            }
        }
        epoch_hook(epoch, &state.model)?;
    }
    Ok(TrainRun {
        model: state.model,
        outcome: TrainOutcome::Completed,
        log,
    })
}

/// [`train_with_epoch_hook`] without checkpointing.
pub fn train(
    dataset: &[TrainScene],
    teachers: &[TeacherSpec],
    student_cfg: &StudentConfig,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    train_with_epoch_hook(dataset, teachers, student_cfg, cfg, |_, _| Ok(()))
}
