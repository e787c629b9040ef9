//! Run configuration: built-in defaults, then the `--config` file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use qa_cnn::data::SynthConfig;
use qa_cnn::layers::{Activation, DEFAULT_EMBEDDING_INIT};
use qa_cnn::sentence::SentenceEncoderConfig;
use qa_cnn::trainer::TrainConfig;
use qa_cnn::{Mode, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub mode: Mode,
    pub max_len: usize,
    pub embed_dim: usize,
    pub feature_maps: [usize; 3],
    pub receptive_field: usize,
    pub multimodal_maps: usize,
    pub dropout: f64,
    pub embedding_init: f64,
    pub activation: Activation,
    pub seed: u64,
    /// Taken from the feature file when absent.
    pub feature_dim: Option<usize>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let full = ModelConfig::full_scale(2, 2);
        ModelSettings {
            mode: Mode::Full,
            max_len: full.sentence.max_len,
            embed_dim: full.sentence.embed_dim,
            feature_maps: full.sentence.feature_maps,
            receptive_field: full.sentence.receptive_field,
            multimodal_maps: full.multimodal_maps,
            dropout: full.dropout,
            embedding_init: DEFAULT_EMBEDDING_INIT,
            activation: Activation::Relu,
            seed: 0,
            feature_dim: None,
        }
    }
}

impl ModelSettings {
    pub fn resolve(&self, vocab_size: usize, answer_count: usize, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            sentence: SentenceEncoderConfig {
                max_len: self.max_len,
                embed_dim: self.embed_dim,
                feature_maps: self.feature_maps,
                receptive_field: self.receptive_field,
                activation: self.activation,
            },
            vocab_size,
            joint_dim: self.feature_maps[2],
            multimodal_maps: self.multimodal_maps,
            feature_dim,
            answer_count,
            dropout: self.dropout,
            embedding_init: self.embedding_init,
            mode: self.mode,
            activation: self.activation,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Keep only this many of the most frequent training answers.
    pub max_answers: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(dir.join("run_config.json"), text + "\n").map_err(|e| Failure::Runtime(e.into()))
    }
}

/// Assigns `$value` to `$target` when the flag was given.
macro_rules! set {
    ($target:expr, $value:expr) => {
        if let Some(v) = $value.clone() {
            $target = v;
        }
    };
}
pub(crate) use set;
