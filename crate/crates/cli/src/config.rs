//! Experiment configuration: one TOML file plus one seed fully determine a
//! run. Unknown keys are hard errors so a typo cannot silently fall back to
//! a default.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gsa_core::attention::AttentionMode;
use gsa_core::model::ModelConfig;
use gsa_core::task::TaskConfig;
use gsa_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. Every random stream in the run forks from it by label
    /// (`"init"`, `"task"`, ...), so the file plus this one number pin the
    /// outputs byte for byte.
    pub seed: u64,
    /// Run outputs land here: `config.toml` (resolved copy),
    /// `metrics.csv`, `checkpoint.bin`, `bench.csv`, `report.txt`.
    pub out_dir: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Apply command-line overrides, push the experiment seed down into the
    /// training section, and validate everything.
    pub fn resolve(
        mut self,
        seed: Option<u64>,
        out_dir: Option<&Path>,
        mode: Option<AttentionMode>,
    ) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(d) = out_dir {
            self.out_dir = d.display().to_string();
        }
        if let Some(m) = mode {
            self.model.attention.mode = m;
        }
        self.train.seed = self.seed;
        self.model.validate().context("model section")?;
        self.train.validate().context("train section")?;
        Ok(self)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    /// Default checkpoint location inside the output directory.
    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir().join("checkpoint.bin")
    }

    /// Write the fully resolved configuration next to the run outputs, so
    /// the directory alone reproduces the run.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        let path = dir.join("config.toml");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
