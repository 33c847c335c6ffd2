//! Run configuration: one TOML document holding every knob. Precedence is
//! built-in defaults, then the file, then command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::model::ModelConfig;
use crate::trainer::{AblationSpec, FinetuneConfig, PretrainConfig};
use crate::{Error, Result};

pub const CONFIG_ECHO: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus_seed: u64,
    pub model_seed: u64,
    /// Scenes generated by `gen-corpus`.
    pub scenes: usize,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub ablation: AblationSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus_seed: 0,
            model_seed: 0,
            scenes: 400,
            model: ModelConfig::default(),
            corpus: CorpusConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            ablation: AblationSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        crate::trainer::write_text(&dir.join(CONFIG_ECHO), &self.to_toml())
    }
}
