//! The run configuration: one JSON document covering data generation, model
//! shape and training.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::matcher::{MatcherConfig, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub encoder: EncoderConfig,
    pub matcher: MatcherConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serialises")
    }

    /// Fills `encoder.vocab_size` from the data section when it is 0 and
    /// checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.data.validate()?;
        let vocab_len = self.data.vocab().len();
        if self.encoder.vocab_size == 0 {
            self.encoder.vocab_size = vocab_len;
        } else if self.encoder.vocab_size < vocab_len {
            return Err(Error::Config(format!(
                "encoder.vocab_size {} is smaller than the generated vocabulary ({vocab_len})",
                self.encoder.vocab_size
            )));
        }
        let needed = 2 * self.data.max_len + 3;
        if self.encoder.max_seq_len < needed {
            return Err(Error::Config(format!(
                "encoder.max_seq_len {} cannot hold a pair of length-{} sentences ({needed} positions)",
                self.encoder.max_seq_len, self.data.max_len
            )));
        }
        self.encoder.validate()?;
        self.train.validate()?;
        Ok(self)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            matcher: self.matcher.clone(),
        }
    }
}
