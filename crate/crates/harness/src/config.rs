//! Run configuration: model, optimizer, and synthetic-data settings, loaded
//! from JSON with field-level defaults.

use crate::error::{HarnessError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;
use triplet_core::encoder::ModelConfig;
use triplet_core::model::Variant;

/// SGD-with-momentum schedule: lr decays by a fixed factor on a fixed
/// epoch period.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.001,
            momentum: 0.95,
            decay_factor: 0.1,
            decay_every: 50,
        }
    }
}

/// Synthetic dataset shape: a reduced triplet vocabulary plus scene counts.
/// Instrument `i` legally pairs with verbs `(i + k) mod verbs` for
/// `k < verbs_per_instrument`, and with every target region.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub instruments: usize,
    pub verbs: usize,
    pub targets: usize,
    pub verbs_per_instrument: usize,
    pub videos: usize,
    pub frames_per_video: usize,
    /// Inclusive range for the number of simultaneously active triplets.
    pub min_concurrent: usize,
    pub max_concurrent: usize,
    /// Probability that a frame keeps the previous frame's active set.
    pub persistence: f64,
    /// Std of additive pixel noise.
    pub noise: f64,
    /// When set, the verb's visual texture is entangled with the
    /// instrument's identity, so decoding the verb requires combining cues.
    pub entangled_verbs: bool,
    /// Probability that each sprite-free region shows a verb-like texture
    /// with no instrument present. Distractors make globally pooled verb
    /// cues ambiguous: the true verb is the texture at the instrument's
    /// location, which rewards instrument-guided spatial attention.
    pub distractors: f64,
    /// Train/val/test split ratio over videos.
    pub split: (usize, usize, usize),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            instruments: 2,
            verbs: 2,
            targets: 2,
            verbs_per_instrument: 2,
            videos: 10,
            frames_per_video: 16,
            min_concurrent: 1,
            max_concurrent: 2,
            persistence: 0.5,
            noise: 0.02,
            entangled_verbs: true,
            distractors: 0.0,
            split: (35, 5, 10),
        }
    }
}

/// Complete run description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// When positive, evaluate the validation split every this many epochs
    /// and keep the checkpoint with the best validation triplet mAP.
    pub select_every: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        RunConfig {
            variant: Variant::Rdv,
            model: default_model_for(&data),
            optim: OptimConfig::default(),
            data,
            batch_size: 8,
            epochs: 40,
            select_every: 0,
            seed: 7,
        }
    }
}

/// Desk-scale model geometry matching a data configuration.
pub fn default_model_for(data: &DataConfig) -> ModelConfig {
    ModelConfig {
        img_h: 16,
        img_w: 16,
        feat_h: 4,
        feat_w: 4,
        depth: 8,
        c_i: data.instruments,
        c_v: data.verbs,
        c_t: data.targets,
        c: data.instruments * data.verbs_per_instrument * data.targets,
        decoder_layers: 1,
        heads: 4,
        q_dropout: 0.0,
        wsl_hidden: 8,
        bottleneck_hidden: 16,
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(HarnessError::Core)?;
        let d = &self.data;
        if d.instruments == 0 || d.verbs == 0 || d.targets == 0 {
            return Err(HarnessError::config("data: component counts must be positive"));
        }
        if d.verbs_per_instrument == 0 || d.verbs_per_instrument > d.verbs {
            return Err(HarnessError::config(
                "data: verbs_per_instrument must be in 1..=verbs",
            ));
        }
        if d.verbs > 4 {
            return Err(HarnessError::config(
                "data: at most 4 verb textures are renderable",
            ));
        }
        if d.max_concurrent < d.min_concurrent {
            return Err(HarnessError::config("data: max_concurrent < min_concurrent"));
        }
        if d.max_concurrent > d.targets {
            return Err(HarnessError::config(
                "vocabulary too small for requested co-occurrence: \
                 max_concurrent exceeds the number of target regions",
            ));
        }
        if d.max_concurrent > 3 {
            return Err(HarnessError::config("data: at most 3 concurrent triplets"));
        }
        if !(0.0..=1.0).contains(&d.persistence) || d.noise < 0.0 {
            return Err(HarnessError::config("data: bad persistence or noise"));
        }
        if !(0.0..=1.0).contains(&d.distractors) {
            return Err(HarnessError::config("data: distractors must be a probability"));
        }
        if d.videos == 0 || d.frames_per_video == 0 {
            return Err(HarnessError::config("data: empty dataset requested"));
        }
        if d.split.0 == 0 || d.split.1 == 0 || d.split.2 == 0 {
            return Err(HarnessError::config("data: split ratios must be positive"));
        }
        if self.model.img_w < 2 * d.targets {
            return Err(HarnessError::config(
                "data: image too narrow for the target regions",
            ));
        }
        let c = d.instruments * d.verbs_per_instrument * d.targets;
        if self.model.c != c {
            return Err(HarnessError::config(format!(
                "model.c = {} but the synthetic vocabulary has {} triplets",
                self.model.c, c
            )));
        }
        if self.model.c_i != d.instruments
            || self.model.c_v != d.verbs
            || self.model.c_t != d.targets
        {
            return Err(HarnessError::config(
                "model component widths must match the synthetic vocabulary",
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(HarnessError::config("batch_size and epochs must be positive"));
        }
        Ok(())
    }

    /// Warm-up boundary rescaled to the epoch budget (18/200 of the total,
    /// rounded to the nearest epoch).
    pub fn warmup_epochs(&self) -> usize {
        (self.epochs * 18 + 100) / 200
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::format(format!("{}: {}", path.display(), e)))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| HarnessError::format(format!("{}: {}", path.display(), e)))?;
        Ok(cfg)
    }
}
