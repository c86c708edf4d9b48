//! Declarative run configuration loaded from TOML, with one root seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelError, Strategy, DEFAULT_CONTEXT_LEN};
use crate::sessionize::PreprocessConfig;
use crate::trainer::{SplitSpec, TrainConfig};
use crate::vocab::fnv1a64;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "AUDITLM_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "auditlm-out";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Artifact locations. Relative paths resolve against `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub out_dir: Option<PathBuf>,
    pub raw: Vec<PathBuf>,
    pub vocab: PathBuf,
    pub dataset: PathBuf,
    pub split: PathBuf,
    pub checkpoint: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: None,
            raw: Vec::new(),
            vocab: "vocab.json".into(),
            dataset: "dataset.altk".into(),
            split: "split.json".into(),
            checkpoint: "model.ckpt".into(),
            checkpoint_dir: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

/// A named preset with optional overrides, or a fully explicit model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub preset: String,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub context_len: usize,
    pub explicit: Option<ModelConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "gpt2-3layer".into(),
            d_model: None,
            n_heads: None,
            n_layers: None,
            context_len: DEFAULT_CONTEXT_LEN,
            explicit: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize, seed: u64) -> Result<ModelConfig, ModelError> {
        let mut config = match &self.explicit {
            Some(c) => c.clone(),
            None => {
                let mut c = ModelConfig::preset(&self.preset, vocab_size)?;
                if self.d_model.is_some() || self.n_heads.is_some() {
                    let (d, h) = (self.d_model.unwrap_or(c.d_model), self.n_heads.unwrap_or(c.n_heads));
                    c = c.with_width(d, h);
                }
                if let Some(n) = self.n_layers {
                    c.n_layers = n;
                }
                c.context_len = self.context_len;
                c
            }
        };
        config.vocab_size = vocab_size;
        config.seed = seed;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub strategy: Strategy,
    pub rouge: bool,
    /// Evaluate at most this many test sequences.
    pub max_sequences: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::default(),
            rouge: true,
            max_sequences: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSection {
    pub sessions: usize,
    pub rows: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { sessions: 4, rows: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    /// Process description in JSON; the built-in reference workflow when absent.
    pub process: Option<PathBuf>,
    pub clinicians: usize,
    pub events_per_clinician: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            process: None,
            clinicians: 20,
            events_per_clinician: 2000,
        }
    }
}

/// Everything a subcommand needs. Nested `seed` fields are overwritten by
/// values derived from the root `seed`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub paths: Paths,
    pub preprocess: PreprocessConfig,
    pub split: SplitSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub sample: SampleSection,
    pub synth: SynthSection,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(e),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Independent seed for one consumer of randomness.
    pub fn seed_for(&self, stream: &str) -> u64 {
        let mixed = self.seed ^ fnv1a64(stream.as_bytes());
        mixed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29)
    }

    /// Propagates derived seeds into the nested sections.
    pub fn with_derived_seeds(mut self) -> Self {
        self.split.seed = self.seed_for("split");
        self.train.seed = self.seed_for("train");
        self
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| DEFAULT_OUT_DIR.into())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.out_dir().join(path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_preprocessing_and_training_values() {
        let c = RunConfig::default();
        assert_eq!(c.preprocess.shift_gap_s, 21_600);
        assert_eq!(c.preprocess.session_gap_s, 300);
        assert_eq!(c.preprocess.patient_cap, 128);
        assert_eq!(c.preprocess.quantizer_max_s, 240.0);
        assert_eq!((c.train.batch_size, c.train.grad_accum, c.train.epochs), (2, 4, 5));
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig {
            seed: 9,
            ..Default::default()
        };
        let back = RunConfig::from_toml(&c.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, c);
        let partial = RunConfig::from_toml("seed = 3\n[train]\nepochs = 1\n", Path::new("x.toml")).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.train.epochs, 1);
        assert_eq!(partial.train.batch_size, 2);
    }

    #[test]
    fn derived_seeds_differ_by_stream_and_root() {
        let a = RunConfig::default();
        let b = RunConfig {
            seed: 1,
            ..Default::default()
        };
        assert_ne!(a.seed_for("split"), a.seed_for("train"));
        assert_ne!(a.seed_for("split"), b.seed_for("split"));
        assert_eq!(a.seed_for("split"), RunConfig::default().seed_for("split"));
    }
}
