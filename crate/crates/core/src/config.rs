//! Experiment configuration: one TOML document with a table per module.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::SpectrogramConfig;
use crate::error::{Error, Result};
use crate::heads::LossConfig;
use crate::model::ModelConfig;
use crate::pseudo_label::LabelConfig;
use crate::sim::SimConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Simulation seed. Training uses `train.seed`.
    pub seed: u64,
    pub spectrogram: SpectrogramConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub labels: LabelConfig,
    pub sim: SimConfig,
    pub train: TrainConfig,
}

/// Built-in configurations selectable by name instead of a path.
/// TOML integers are signed 64-bit.
pub const MAX_SEED: u64 = i64::MAX as u64;

pub const PRESETS: [&str; 3] = ["default", "demo", "paper"];

impl ExperimentConfig {
    /// Reference-scale training and model sizes.
    pub fn paper_scale() -> Self {
        let mut c = ExperimentConfig::default();
        c.apply_paper_scale();
        c
    }

    pub fn apply_paper_scale(&mut self) {
        self.train.lr = 1e-4;
        self.train.batch = 64;
        self.train.epochs = 200;
        self.model.audio_depth = 12;
        self.model.vision.depth = 12;
        self.model.ssm.d_model = 192;
        self.model.ssm.dt_rank = 12;
        self.model.fusion.heads = 6;
        self.model.fusion.d_k = 192;
    }

    /// Small fast setup for trying the pipeline end to end.
    pub fn demo() -> Self {
        let mut c = ExperimentConfig::default();
        c.sim.scenes = 4;
        c.sim.frames_per_scene = 12;
        c.sim.image_size = 32;
        c.spectrogram.n_mels = 32;
        c.spectrogram.frames = 16;
        c.spectrogram.hop = 2900;
        c.model.ssm.d_model = 32;
        c.model.ssm.d_state = 8;
        c.model.ssm.dt_rank = 2;
        c.model.audio_depth = 1;
        c.model.temporal_patch = 4;
        c.model.spectral_patch = 4;
        c.model.vision.image_size = 32;
        c.model.vision.patch = 8;
        c.model.vision.depth = 1;
        c.model.fusion.heads = 4;
        c.model.fusion.d_k = 32;
        c.model.heads.trajectory_hidden = 32;
        c.model.heads.class_hidden = 32;
        c.model.heads.center_hidden = 16;
        c.train.epochs = 3;
        c.train.batch = 8;
        c.train.lr = 1e-3;
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(ExperimentConfig::default()),
            "demo" => Some(ExperimentConfig::demo()),
            "paper" => Some(ExperimentConfig::paper_scale()),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            e => e,
        })
    }

    /// A preset name or a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match ExperimentConfig::preset(name_or_path) {
            Some(c) => Ok(c),
            None => ExperimentConfig::load(Path::new(name_or_path)),
        }
    }

    /// Cross-module consistency checks.
    pub fn validate(&self) -> Result<()> {
        if self.seed > MAX_SEED || self.train.seed > MAX_SEED {
            return Err(Error::Config(format!("seeds must not exceed {MAX_SEED}")));
        }
        self.spectrogram.validate()?;
        self.sim.validate()?;
        self.train.validate()?;
        let m = &self.model;
        if m.ssm.d_model == 0 || m.ssm.d_state == 0 || m.ssm.dt_rank == 0 || m.ssm.expand == 0 || m.ssm.conv_kernel == 0 {
            return Err(Error::Config("SSM sizes must be positive".into()));
        }
        if m.fusion.heads == 0 || m.fusion.d_k % m.fusion.heads != 0 {
            return Err(Error::Config(format!(
                "fusion d_k = {} is not divisible by {} heads",
                m.fusion.d_k, m.fusion.heads
            )));
        }
        if m.temporal_patch == 0 || self.spectrogram.frames % m.temporal_patch != 0 {
            return Err(Error::Config(format!(
                "{} spectrogram frames do not split into width-{} patches",
                self.spectrogram.frames, m.temporal_patch
            )));
        }
        if m.spectral_patch == 0 || self.spectrogram.n_mels % m.spectral_patch != 0 {
            return Err(Error::Config(format!(
                "{} mel bins do not split into height-{} patches",
                self.spectrogram.n_mels, m.spectral_patch
            )));
        }
        if m.vision.image_size != self.sim.image_size {
            return Err(Error::Config(format!(
                "model expects {} px images, simulator renders {} px",
                m.vision.image_size, self.sim.image_size
            )));
        }
        if m.vision.patch == 0 || m.vision.image_size % m.vision.patch != 0 {
            return Err(Error::Config("image size must be a multiple of the patch size".into()));
        }
        if m.heads.classes != self.sim.classes {
            return Err(Error::Config(format!(
                "classifier has {} classes, simulator {}",
                m.heads.classes, self.sim.classes
            )));
        }
        if self.spectrogram.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if !(self.loss.gamma1 >= 0.0 && self.loss.gamma2 >= 0.0 && self.loss.log_floor > 0.0) {
            return Err(Error::Config("loss weights must be non-negative and the log floor positive".into()));
        }
        Ok(())
    }
}
