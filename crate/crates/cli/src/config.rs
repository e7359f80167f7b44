use serde::{Deserialize, Serialize};

use acrodis::corpus::{SynthConfig, Upsample};
use acrodis::eval::ClassSet;
use acrodis::fusion::RegularizeSet;
use acrodis::grad::TrainConfig;
use acrodis::model::{ModelConfig, PathMode, TokenizerOptions};

pub const FORMAT_VERSION: u32 = 1;

/// Everything a run depends on. Loaded from `--config`, then overridden by
/// flags, then echoed into the output directory as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    /// Single source of randomness; every component derives its own
    /// labelled stream from it.
    pub seed: u64,
    pub synth: SynthConfig,
    pub tokenizer: TokenizerOptions,
    pub paths: PathMode,
    pub upsample: Upsample,
    pub train: TrainConfig,
    pub lambda: f64,
    pub regularize_set: RegularizeSet,
    pub class_set: ClassSet,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed: 0,
            synth: SynthConfig::default(),
            tokenizer: TokenizerOptions::default(),
            paths: PathMode::Dual,
            upsample: Upsample::Off,
            train: TrainConfig::toy(),
            lambda: 1e-4,
            regularize_set: RegularizeSet::WeightsOnly,
            class_set: ClassSet::Union,
        }
    }
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> serde_json::Result<Self> {
        serde_json::from_slice(bytes)
    }

    /// Push the global seed into every sub-config.
    pub fn sync_seed(&mut self) {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn apply_preset(&mut self, name: &str) -> Option<()> {
        let p = TrainConfig::preset(name)?;
        self.train.learning_rate = p.learning_rate;
        self.train.epochs = p.epochs;
        Some(())
    }

    pub fn model_config(&self, vocab_a: usize, vocab_b: usize) -> ModelConfig {
        let mut cfg = ModelConfig::toy(vocab_a, vocab_b, self.paths);
        cfg.fusion.lambda = self.lambda;
        cfg.fusion.regularize_set = self.regularize_set;
        cfg
    }

    pub fn validate(&self) -> acrodis::Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(acrodis::Error::Invalid {
                what: "config".into(),
                detail: format!("unsupported format_version {}", self.format_version),
            });
        }
        if !(self.lambda >= 0.0) {
            return Err(acrodis::Error::Invalid {
                what: "config".into(),
                detail: "lambda must be >= 0".into(),
            });
        }
        self.synth.validate()?;
        self.train.validate()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
