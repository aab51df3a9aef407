// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contextual_shift::CsConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::MeanOver;
use crate::pipeline::{EnsembleConfig, ProposalNoise};
use crate::scene::SceneConfig;
use crate::sim::SimConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub mean_over: MeanOver,
}

/// Everything a run needs. Every section and field has a default, so an
/// empty file (or `{}`) is a complete configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub sim: SimConfig,
    pub cs: CsConfig,
    pub ensemble: EnsembleConfig,
    pub scene: SceneConfig,
    pub proposals: ProposalNoise,
    pub metrics: MetricsConfig,
    /// Worker threads for image-level parallelism.
    pub workers: usize,
    /// Used when no output directory is given on the command line.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            sim: SimConfig::default(),
            cs: CsConfig::default(),
            ensemble: EnsembleConfig::default(),
            scene: SceneConfig::default(),
            proposals: ProposalNoise::default(),
            metrics: MetricsConfig::default(),
            workers: 1,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("cannot parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let enc = &self.encoder;
        enc.validate()?;
        self.sim.validate(enc.num_layers, enc.embed_dim)?;
        self.cs.validate(enc.num_layers, enc.patch_size)?;
        self.ensemble.validate()?;
        self.scene.validate(enc.patch_size)?;
        self.proposals.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}
