//! Configuration, training, evaluation and the experiment suites.

mod eval;
mod report;
mod suite;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use eval::{
    evaluate, evaluate_checkpoint, BackgroundRule, ConstantSegmenter, EvalMode, ModelSegmenter, OracleSegmenter,
    Segmenter,
};
pub use report::{emit_report, label_color, make_triptychs, ReportBundle, SummaryRow, Triptych};
pub use suite::{
    ablation_experiments, baseline_experiments, noise_experiments, run_ablation_suite, run_experiments,
    run_noise_study, run_suite, summarize, train, Experiment, ExperimentData, ExperimentResult, Suite, EVAL_SEED,
};
pub use train::{batch_loss, prepare_guidance, train_model, Adam, Clip, TrainOutcome, Trainer};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::motion_cues::{FlowThresholds, LabelNoise};
use crate::objectives::LossConfig;
use crate::scenegen::{BackgroundKind, SceneSpec};

/// Where the motion masks used for supervision come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    /// Visible masks of the ground-truth moving instances.
    Gt,
    /// Connected components of the flow, with optional label noise.
    #[default]
    Estimated,
    /// As `Estimated`, then restricted to the lower two thirds of the frame.
    EstimatedFiltered,
}

impl Guidance {
    pub fn name(self) -> &'static str {
        match self {
            Guidance::Gt => "gt",
            Guidance::Estimated => "estimated",
            Guidance::EstimatedFiltered => "estimated_filtered",
        }
    }
}

/// Training and evaluation sequences: read from disk when a directory is
/// given, otherwise generated from `scene`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub scene: SceneSpec,
    pub num_train: usize,
    pub num_eval: usize,
    /// Base seed of the generated sequences; evaluation scenes use a disjoint range.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: None,
            eval_dir: None,
            scene: SceneSpec {
                num_frames: 10,
                spawn_band: [1.0 / 3.0, 1.0],
                ..SceneSpec::default()
            },
            num_train: 64,
            num_eval: 16,
            seed: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub frames_per_clip: usize,
    pub steps: usize,
    pub step_size: f64,
    /// Steps of linear step-size warmup.
    pub warmup_steps: usize,
    pub seed: u64,
    pub guidance: Guidance,
    pub label_noise: LabelNoise,
    pub flow_thresholds: FlowThresholds,
    pub loss: LossConfig,
    /// `model.background_slot` is derived from `loss.ablation_mode` at train time.
    pub model: ModelConfig,
    pub data: DataConfig,
    pub eval_mode: EvalMode,
    pub output_dir: Option<PathBuf>,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            frames_per_clip: 5,
            steps: 5000,
            step_size: 4e-4,
            warmup_steps: 500,
            seed: 0,
            guidance: Guidance::Estimated,
            label_noise: LabelNoise::default(),
            flow_thresholds: FlowThresholds::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            eval_mode: EvalMode::Windowed,
            output_dir: None,
            checkpoint_every: 0,
        }
    }
}

pub const PRESETS: [&str; 3] = ["easy", "urban-toy", "desk"];

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "easy" => Ok(Self::default()),
            "urban-toy" => Ok(Self {
                steps: 15_000,
                data: DataConfig {
                    scene: SceneSpec {
                        num_frames: 10,
                        num_moving: 3,
                        num_static: 4,
                        sprite_size_range: [8, 16],
                        background_kind: BackgroundKind::Tiled,
                        camera_pan: [1, 0],
                        spawn_band: [1.0 / 3.0, 1.0],
                        ..SceneSpec::default()
                    },
                    ..DataConfig::default()
                },
                ..Self::default()
            }),
            "desk" => Ok(Self::desk()),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Small enough to train a model in a few minutes on one core.
    fn desk() -> Self {
        Self {
            batch_size: 4,
            frames_per_clip: 4,
            steps: 2000,
            step_size: 1e-3,
            warmup_steps: 50,
            model: ModelConfig {
                num_slots: 8,
                slot_dim: 32,
                feature_dim: 24,
                projection_dim: 32,
                downsample_factor: 4,
                encoder_channels: vec![16, 24],
                decoder_channels: 16,
                background_slot: true,
                seed: 0,
            },
            data: DataConfig {
                scene: SceneSpec {
                    image_height: 32,
                    image_width: 48,
                    num_frames: 8,
                    num_moving: 2,
                    num_static: 2,
                    sprite_size_range: [7, 11],
                    velocity_range: [1, 2],
                    spawn_band: [1.0 / 3.0, 1.0],
                    ..SceneSpec::default()
                },
                num_train: 48,
                num_eval: 12,
                ..DataConfig::default()
            },
            ..Self::default()
        }
    }

    /// Parses a JSON configuration, applying `key.path=value` overrides first.
    /// Unknown keys are rejected.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config is not valid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Self = serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.frames_per_clip < 2 {
            return bad(format!("frames_per_clip must be at least 2, got {}", self.frames_per_clip));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        self.loss.validate()?;
        self.label_noise.validate()?;
        self.resolved_model().validate()?;
        let scene = &self.data.scene;
        if self.data.train_dir.is_none() {
            scene.validate()?;
            if scene.num_frames < self.frames_per_clip {
                return bad(format!(
                    "scenes have {} frames but clips need {}",
                    scene.num_frames, self.frames_per_clip
                ));
            }
            if self.data.num_train == 0 {
                return bad("num_train must be at least 1".into());
            }
        }
        Ok(())
    }

    /// The model configuration with the background slot matching the loss mode.
    pub fn resolved_model(&self) -> ModelConfig {
        ModelConfig {
            background_slot: self.loss.ablation_mode.uses_background_slot(),
            ..self.model.clone()
        }
    }
}

/// Sets `path.to.key` in a JSON object. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(config: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        return Err(Error::InvalidConfig(format!("override {assignment:?} is not key=value")));
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::InvalidConfig(format!("override key {path:?} is malformed")));
    }
    let mut node = config;
    for key in &keys[..keys.len() - 1] {
        let object = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override {path:?} descends into a non-object")))?;
        node = object
            .entry(key.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let object = node
        .as_object_mut()
        .ok_or_else(|| Error::InvalidConfig(format!("override {path:?} descends into a non-object")))?;
    object.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
