//! Experiment configuration: one TOML file covering data layout,
//! synthetic-generator settings, model scale, training, and the
//! evaluation sweep.  Unknown keys are rejected everywhere so a typo
//! (`epochs` misspelled, a stale key from an older revision) fails loudly
//! instead of silently running defaults.

use crate::CliError;
use osgr::data::Modality;
use osgr::eval::config_digest;
use osgr::model::ModelConfig;
use osgr::train::{AdversaryMode, SplitStrategy, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random choice in a run derives from it.
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory of binary recordings; `gen-synth` fills it, the other
    /// commands read it.
    pub recordings_dir: PathBuf,
    /// Frames per window.
    pub n_frames: usize,
    /// Points per frame after resampling.
    pub n_points: usize,
    /// Window step; defaults to `n_frames` (non-overlapping).
    #[serde(default)]
    pub step: Option<usize>,
    /// Mean-center the velocity column along with the coordinates.
    #[serde(default = "default_true")]
    pub center_velocity: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub subjects: usize,
    /// Inter-subject parameter separation in (0, 1].
    pub separability: f64,
    pub duration_s: f64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate_hz: f64,
}

fn default_frame_rate() -> f64 {
    10.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// 1.0 is the full published architecture; smaller values shrink every
    /// width proportionally for desk-scale runs.
    pub scale_factor: f64,
    #[serde(default)]
    pub ablation: Ablation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    /// Learn the label-to-centroid map instead of fixing it.
    V1,
    /// Drop both projection heads.
    V2,
    /// Drop the decoder (no reconstruction loss).
    V3,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Ablation, CliError> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Ablation::None),
            "v1" => Ok(Ablation::V1),
            "v2" => Ok(Ablation::V2),
            "v3" => Ok(Ablation::V3),
            other => Err(CliError::Invalid(format!(
                "unknown ablation {other:?}; expected none, v1, v2, or v3"
            ))),
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            Ablation::None => {}
            Ablation::V1 => cfg.learned_centroids = true,
            Ablation::V2 => cfg.use_projection_heads = false,
            Ablation::V3 => cfg.use_decoder = false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub critic_steps: Option<usize>,
    #[serde(default)]
    pub gp_lambda: Option<f64>,
    /// "full", "frozen", or "off".
    #[serde(default)]
    pub adversary: Option<String>,
    /// Global-norm gradient clip; 0 disables clipping.
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Unknown subjects evaluated per trial; one more is always drawn for
    /// threshold calibration.
    pub unknown_count: usize,
    pub trials: usize,
    /// Evidence lengths to sweep.
    pub k: Vec<usize>,
    /// "all" or one walking modality (name or 0/1/2); filters evaluation
    /// windows only, never training.
    #[serde(default)]
    pub modality: Option<String>,
    #[serde(default)]
    pub split_by_chunk: bool,
}

pub fn parse_modality(s: &str) -> Result<Option<Modality>, CliError> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    let by_digit = s
        .parse::<u8>()
        .ok()
        .and_then(Modality::from_u8);
    by_digit
        .or_else(|| Modality::parse(s))
        .map(Some)
        .ok_or_else(|| {
            CliError::Invalid(format!(
                "unknown modality {s:?}; expected all, 0/1/2, or a modality name"
            ))
        })
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigRead {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|source| CliError::ConfigParse {
                path: path.to_path_buf(),
                source: Box::new(source),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.n_frames == 0 || self.data.n_points == 0 {
            return Err(CliError::Invalid("n_frames and n_points must be positive".into()));
        }
        if let Some(0) = self.data.step {
            return Err(CliError::Invalid("step must be positive".into()));
        }
        if !(self.model.scale_factor > 0.0 && self.model.scale_factor <= 1.0) {
            return Err(CliError::Invalid("scale_factor must be in (0, 1]".into()));
        }
        if let Some(s) = &self.synth {
            if s.subjects < 2 || !(0.0..=1.0).contains(&s.separability) || s.separability == 0.0
            {
                return Err(CliError::Invalid(
                    "synth needs at least 2 subjects and separability in (0, 1]".into(),
                ));
            }
            if s.duration_s <= 0.0 || s.frame_rate_hz <= 0.0 {
                return Err(CliError::Invalid(
                    "synth duration and frame rate must be positive".into(),
                ));
            }
        }
        if self.eval.k.is_empty() || self.eval.k.contains(&0) {
            return Err(CliError::Invalid("eval.k must be a non-empty list of positives".into()));
        }
        if self.eval.trials == 0 {
            return Err(CliError::Invalid("eval.trials must be at least 1".into()));
        }
        if let Some(m) = &self.eval.modality {
            parse_modality(m)?;
        }
        if let Some(a) = &self.train.adversary {
            adversary_from_str(a)?;
        }
        Ok(())
    }

    pub fn window_step(&self) -> usize {
        self.data.step.unwrap_or(self.data.n_frames)
    }

    /// The model this config describes, for a given known-class count.
    pub fn model_config(&self, n_classes: usize) -> ModelConfig {
        let mut cfg = if self.model.scale_factor == 1.0 {
            let mut full = ModelConfig::paper_default(n_classes);
            full.n_frames = self.data.n_frames;
            full.n_points = self.data.n_points;
            full
        } else {
            ModelConfig::desk_scale(
                self.model.scale_factor,
                n_classes,
                self.data.n_frames,
                self.data.n_points,
            )
        };
        self.model.ablation.apply(&mut cfg);
        cfg
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = TrainConfig { seed: self.seed, ..TrainConfig::default() };
        let t = &self.train;
        if let Some(v) = t.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = t.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = t.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = t.critic_steps {
            cfg.critic_steps = v;
        }
        if let Some(v) = t.gp_lambda {
            cfg.gp_lambda = v;
        }
        if let Some(a) = &t.adversary {
            cfg.adversary = adversary_from_str(a)?;
        }
        if let Some(v) = t.grad_clip_norm {
            cfg.grad_clip_norm = if v == 0.0 { None } else { Some(v) };
        }
        cfg.early_stop_patience = t.early_stop_patience;
        Ok(cfg)
    }

    pub fn split_strategy(&self) -> SplitStrategy {
        if self.eval.split_by_chunk {
            SplitStrategy::ChunkByTime
        } else {
            SplitStrategy::Random
        }
    }

    pub fn eval_modality(&self) -> Result<Option<Modality>, CliError> {
        match &self.eval.modality {
            None => Ok(None),
            Some(s) => parse_modality(s),
        }
    }

    /// Canonical serialized form and its digest; logged by every command
    /// so artifacts can be traced to exact settings.
    pub fn resolved_json(&self) -> Result<(String, String), CliError> {
        let json = serde_json::to_string_pretty(self)?;
        let digest = config_digest(json.as_bytes());
        Ok((json, digest))
    }
}

pub fn adversary_from_str(s: &str) -> Result<AdversaryMode, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "full" => Ok(AdversaryMode::Full),
        "frozen" => Ok(AdversaryMode::Frozen),
        "off" => Ok(AdversaryMode::Off),
        other => Err(CliError::Invalid(format!(
            "unknown adversary mode {other:?}; expected full, frozen, or off"
        ))),
    }
}
