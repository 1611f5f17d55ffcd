//! Plain-text `key=value` run configuration.
//!
//! One flat file covers model, training and synthesis knobs. Unknown keys
//! are rejected so typos fail loudly. Defaults are the struct defaults;
//! every key is optional.
//!
//! Keys:
//! - `seed`            shared run seed (model init, shuffling, synthesis)
//! - `variant`         baseline | seg-NL-1 | seg-NL-2 | sub-NL-1 | sub-NL-2
//! - `conv_ki_filters` temporal filter count of the first layer
//! - `block_channels`  four comma-separated conv block widths
//! - `fc_width`        hidden width of the classification head
//! - `native_frames`   native temporal length N0 of the conv-KI kernel
//! - `epochs`          baseline training epochs
//! - `fine_tune_epochs` fine-tune epochs for non-local variants
//! - `lr`              learning rate
//! - `optimizer`       adam | sgd | sgd:<momentum>
//! - `patience`        early-stop patience on held-out loss (0 = off)
//! - `subjects`        synthetic subject count
//! - `noise_sigma`     synthetic noise level
//! - `class_prior`     four comma-separated class probabilities
//! - `frames_20_fraction` fraction of synthetic subjects imaged at 20 frames

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::optim::OptimizerKind;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Applies one shared seed to every component.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: `{line}` is not key=value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            config.apply(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad {what} `{value}` for key `{key}`"));
        match key {
            "seed" => {
                let seed: u64 = value.parse().map_err(|_| bad("seed"))?;
                self.set_seed(seed);
            }
            "variant" => self.model.variant = Variant::parse(value)?,
            "conv_ki_filters" => {
                self.model.conv_ki_filters = value.parse().map_err(|_| bad("count"))?
            }
            "block_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("channel list"))?;
                if parts.len() != 4 {
                    return Err(bad("channel list (need exactly 4)"));
                }
                self.model.block_channels = [parts[0], parts[1], parts[2], parts[3]];
            }
            "fc_width" => self.model.fc_width = value.parse().map_err(|_| bad("width"))?,
            "native_frames" => {
                self.model.native_frames = value.parse().map_err(|_| bad("frame count"))?
            }
            "epochs" => self.train.epochs = value.parse().map_err(|_| bad("epoch count"))?,
            "fine_tune_epochs" => {
                self.train.fine_tune_epochs = value.parse().map_err(|_| bad("epoch count"))?
            }
            "lr" => self.train.lr = value.parse().map_err(|_| bad("learning rate"))?,
            "optimizer" => {
                self.train.optimizer = match value {
                    "adam" => OptimizerKind::adam_default(),
                    "sgd" => OptimizerKind::sgd(0.9),
                    other => match other.strip_prefix("sgd:") {
                        Some(m) => OptimizerKind::sgd(m.parse().map_err(|_| bad("momentum"))?),
                        None => return Err(bad("optimizer (adam | sgd | sgd:<momentum>)")),
                    },
                }
            }
            "patience" => self.train.patience = value.parse().map_err(|_| bad("patience"))?,
            "subjects" => self.synth.subjects = value.parse().map_err(|_| bad("count"))?,
            "noise_sigma" => self.synth.noise_sigma = value.parse().map_err(|_| bad("sigma"))?,
            "class_prior" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("prior list"))?;
                if parts.len() != 4 {
                    return Err(bad("prior list (need exactly 4)"));
                }
                self.synth.class_prior = [parts[0], parts[1], parts[2], parts[3]];
            }
            "frames_20_fraction" => {
                self.synth.frames_20_fraction = value.parse().map_err(|_| bad("fraction"))?
            }
            other => return Err(Error::UnknownConfigKey(other.to_string())),
        }
        Ok(())
    }
}
