//! The experiment file: corpus generation, encoder and training settings in
//! one TOML document. Every field has a default; unknown keys are errors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::GenConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub gen: GenConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Checks every section and the couplings between them.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate(&self.encoder)?;
        if self.encoder.input_dim != self.synth.frame_dim {
            return Err(Error::Config(format!(
                "encoder.input_dim {} differs from synth.frame_dim {}",
                self.encoder.input_dim, self.synth.frame_dim
            )));
        }
        if self.synth.frames_per_utt > self.encoder.max_frames {
            return Err(Error::Config(format!(
                "synth.frames_per_utt {} exceeds encoder.max_frames {}",
                self.synth.frames_per_utt, self.encoder.max_frames
            )));
        }
        if self.train.aam.n_classes != self.gen.train_speakers {
            return Err(Error::Config(format!(
                "train.aam.n_classes {} differs from gen.train_speakers {}",
                self.train.aam.n_classes, self.gen.train_speakers
            )));
        }
        Ok(())
    }
}
