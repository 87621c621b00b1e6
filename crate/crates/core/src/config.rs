//! Structured run configuration: one TOML document with sections for the
//! scene recipe, the teacher list, fusion, the student architecture, the
//! objective, the trainer schedule, and evaluation. Every field is
//! defaulted; unknown keys are rejected with the offending key path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::HeadSelection;
use crate::fusion::{DeMeanMode, HistogramSpec};
use crate::objective::ObjectiveMode;
use crate::teachers::TeacherSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    /// Number of training scenes to generate.
    pub count: usize,
    pub extent: [f64; 3],
    pub num_objects: usize,
    pub num_classes: u32,
    pub points_per_object: usize,
    pub floor_and_walls: bool,
    /// Downsampling voxel edge in meters.
    pub voxel_size: f64,
    /// Camera orbit: views per scene and image geometry.
    pub num_frames: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub focal_px: f64,
    pub splat_radius: u32,
}

impl Default for SceneSection {
    fn default() -> Self {
        SceneSection {
            count: 2,
            extent: [4.0, 4.0, 2.5],
            num_objects: 3,
            num_classes: 4,
            points_per_object: 300,
            floor_and_walls: true,
            voxel_size: 0.02,
            num_frames: 6,
            image_width: 64,
            image_height: 64,
            focal_px: 56.0,
            splat_radius: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    /// Depth agreement tolerance for the visibility test, meters.
    pub depth_tol: f64,
    pub de_mean_mode: DeMeanMode,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            depth_tol: 0.04,
            de_mean_mode: DeMeanMode::PerPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub pe_frequencies: usize,
    pub trunk_widths: Vec<usize>,
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection {
            pe_frequencies: 4,
            trunk_widths: vec![64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub mode: ObjectiveMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub lr0: f64,
    pub epochs: usize,
    pub scenes_per_batch: usize,
    pub points_per_scene: usize,
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub augment: bool,
    pub elastic_granularity: f64,
    pub elastic_magnitude: f64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainerSection {
            lr0: base.lr0,
            epochs: base.epochs,
            scenes_per_batch: base.scenes_per_batch,
            points_per_scene: base.points_per_scene,
            lr_decay: base.lr_decay,
            adam_beta1: base.adam_beta1,
            adam_beta2: base.adam_beta2,
            adam_eps: base.adam_eps,
            augment: base.augment,
            elastic_granularity: base.elastic_granularity,
            elastic_magnitude: base.elastic_magnitude,
        }
    }
}

impl TrainerSection {
    /// Assembles the effective training configuration: the schedule from
    /// this section, the objective mode from its own section, the de-mean
    /// mode from fusion, and the derived seed.
    pub fn to_train_config(
        &self,
        mode: ObjectiveMode,
        de_mean_mode: DeMeanMode,
        seed: u64,
    ) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            epochs: self.epochs,
            scenes_per_batch: self.scenes_per_batch,
            points_per_scene: self.points_per_scene,
            lr_decay: self.lr_decay,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed,
            mode,
            augment: self.augment,
            elastic_granularity: self.elastic_granularity,
            elastic_magnitude: self.elastic_magnitude,
            de_mean_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub selection: HeadSelection,
    pub ridge_lambda: f64,
    /// Fraction of points used to fit the probe; the rest evaluate it.
    pub train_fraction: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            selection: HeadSelection::Concat,
            ridge_lambda: 1e-3,
            train_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmeansSection {
    /// Cluster count; defaults to the scene class count when absent.
    pub k: Option<usize>,
    pub max_iters: usize,
    /// L2-normalize features first (Euclidean then orders like cosine).
    pub normalize: bool,
    /// Feature source: a head name, or "concat" for all heads.
    pub head: String,
}

impl Default for KmeansSection {
    fn default() -> Self {
        KmeansSection {
            k: None,
            max_iters: 100,
            normalize: true,
            head: "concat".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossDomainSection {
    pub enabled: bool,
    /// Object size multiplier for the shifted domain (same layout seeds).
    pub size_scale: f64,
}

impl Default for CrossDomainSection {
    fn default() -> Self {
        CrossDomainSection {
            enabled: false,
            size_scale: 1.15,
        }
    }
}

/// One cell of the pipeline grid: a teacher subset and an objective mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineCell {
    pub name: String,
    pub teachers: Vec<String>,
    pub mode: ObjectiveMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Use the 2D/3D ensemble instead of the plain 3D labels.
    pub ensemble: bool,
    pub probe: ProbeSection,
    pub kmeans: KmeansSection,
    pub histogram: HistogramSpec,
    pub cross_domain: CrossDomainSection,
    /// Grid cells for the pipeline command.
    pub pipeline: Vec<PipelineCell>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ensemble: false,
            probe: ProbeSection::default(),
            kmeans: KmeansSection::default(),
            histogram: HistogramSpec {
                lo: -1.5,
                hi: 2.5,
                bins: 64,
            },
            cross_domain: CrossDomainSection::default(),
            pipeline: default_pipeline_cells(),
        }
    }
}

/// The incremental grid mirrored by the pipeline command: the text-aligned
/// teacher alone, all three teachers summed, and all three under the
/// stabilized uncertainty weighting.
pub fn default_pipeline_cells() -> Vec<PipelineCell> {
    vec![
        PipelineCell {
            name: "lseg_only".into(),
            teachers: vec!["lseg-like".into()],
            mode: ObjectiveMode::Unweighted,
        },
        PipelineCell {
            name: "three_unweighted".into(),
            teachers: vec!["lseg-like".into(), "dino-like".into(), "sd-like".into()],
            mode: ObjectiveMode::Unweighted,
        },
        PipelineCell {
            name: "three_stabilized".into(),
            teachers: vec!["lseg-like".into(), "dino-like".into(), "sd-like".into()],
            mode: ObjectiveMode::Stabilized,
        },
    ]
}

/// The whole run configuration. `teachers` stays `None` when the section
/// is absent from the document; commands that need teachers report a
/// validation error naming the key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; all stage randomness derives from it.
    pub seed: u64,
    pub scene: SceneSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teachers: Option<Vec<TeacherSpec>>,
    pub fusion: FusionSection,
    pub student: StudentSection,
    pub objective: ObjectiveSection,
    pub trainer: TrainerSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// A ready-to-run default with the standard teacher trio filled in.
    pub fn with_default_teachers() -> RunConfig {
        RunConfig {
            teachers: Some(TeacherSpec::default_trio()),
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        if s.count < 1 {
            return Err(Error::config("scene.count must be >= 1"));
        }
        if s.extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::config("scene.extent components must be positive"));
        }
        if !(s.voxel_size > 0.0) {
            return Err(Error::config("scene.voxel_size must be positive"));
        }
        if s.num_frames < 1 {
            return Err(Error::config("scene.num_frames must be >= 1"));
        }
        if s.image_width < 8 || s.image_height < 8 {
            return Err(Error::config("scene.image size must be at least 8x8"));
        }
        if !(s.focal_px > 0.0) {
            return Err(Error::config("scene.focal_px must be positive"));
        }
        if let Some(teachers) = &self.teachers {
            if teachers.is_empty() {
                return Err(Error::config("teachers: list must not be empty"));
            }
            let mut names = std::collections::HashSet::new();
            for t in teachers {
                t.validate().map_err(|e| Error::config(e.to_string()))?;
                if !names.insert(t.name.clone()) {
                    return Err(Error::config(format!(
                        "teachers: duplicate name '{}'",
                        t.name
                    )));
                }
            }
        }
        if !(self.fusion.depth_tol > 0.0) {
            return Err(Error::config("fusion.depth_tol must be positive"));
        }
        if self.student.trunk_widths.is_empty() || self.student.trunk_widths.iter().any(|&w| w == 0)
        {
            return Err(Error::config("student.trunk_widths must be nonzero"));
        }
        if !(self.eval.probe.train_fraction > 0.0 && self.eval.probe.train_fraction < 1.0) {
            return Err(Error::config("eval.probe.train_fraction must be in (0, 1)"));
        }
        self.eval
            .histogram
            .validate()
            .map_err(|e| Error::config(format!("eval.histogram: {e}")))?;
        if self.eval.pipeline.is_empty() {
            return Err(Error::config("eval.pipeline must list at least one cell"));
        }
        Ok(())
    }

    /// The teacher list, or a validation error naming the missing key.
    pub fn require_teachers(&self) -> Result<&[TeacherSpec]> {
        self.teachers
            .as_deref()
            .ok_or_else(|| Error::validation("missing required config section: `teachers`"))
    }

    /// Subset of teachers by name, preserving config order.
    pub fn teacher_subset(&self, names: &[String]) -> Result<Vec<TeacherSpec>> {
        let all = self.require_teachers()?;
        names
            .iter()
            .map(|n| {
                all.iter()
                    .find(|t| &t.name == n)
                    .cloned()
                    .ok_or_else(|| Error::config(format!("unknown teacher '{n}' in pipeline cell")))
            })
            .collect()
    }
}
