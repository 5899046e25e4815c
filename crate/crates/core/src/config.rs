//! Experiment configuration.
//!
//! One JSON file describes a whole run. Every field has a desk-scale default,
//! so `{}` is a valid config; unknown keys are rejected at parse time, before
//! any computation starts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::generate::{IMG_H, IMG_W};
use crate::data::{DataConfig, Scheme};
use crate::error::{Error, Result};
use crate::nn::SegNetConfig;
use crate::scfl::PipelineConfig;

/// Training method executed by the `run` subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedavg,
    Scaffold,
    FedavgPlus,
    Cfl,
    Scfl,
    PriorScfl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fedavg => "fedavg",
            Method::Scaffold => "scaffold",
            Method::FedavgPlus => "fedavg_plus",
            Method::Cfl => "cfl",
            Method::Scfl => "scfl",
            Method::PriorScfl => "prior_scfl",
        }
    }
}

/// Everything a run needs besides the output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub scheme: Scheme,
    pub clients: usize,
    /// Root seed; every random stream in the run derives from it.
    pub seed: u64,
    pub data: DataConfig,
    /// Load the dataset from this directory instead of generating it.
    pub data_dir: Option<PathBuf>,
    pub model: SegNetConfig,
    pub pipeline: PipelineConfig,
    /// Local epochs for the fedavg_plus baseline.
    pub finetune_epochs: usize,
    /// Output directory; `--out` and `FSDDI_OUT` take over when absent.
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Scfl,
            scheme: Scheme::FullNoniid,
            clients: 10,
            seed: 1,
            data: DataConfig::default(),
            data_dir: None,
            model: SegNetConfig::default(),
            pipeline: PipelineConfig::default(),
            finetune_epochs: 100,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.pipeline.validate()?;
        if self.clients == 0 {
            return Err(Error::Config("clients must be positive".into()));
        }
        if self.model.classes != self.data.classes() {
            return Err(Error::Config(format!(
                "model.classes = {} but the data config produces {} classes",
                self.model.classes,
                self.data.classes()
            )));
        }
        if self.model.height != IMG_H || self.model.width != IMG_W {
            return Err(Error::Config(format!(
                "model input must be {IMG_H}x{IMG_W} (the generator's image size), got {}x{}",
                self.model.height, self.model.width
            )));
        }
        Ok(())
    }

    /// Stable run identifier used in file names and `metrics.csv`; derived
    /// from the config only, so reruns get the same id.
    pub fn run_id(&self) -> String {
        format!("{}-{}-s{}", self.method.name(), self.scheme.name(), self.seed)
    }
}

/// Reads and validates a config file. `{}` yields the desk-scale defaults;
/// unknown keys fail with a message naming the key.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Hash of the resolved config, recorded in `manifest.json`.
pub fn config_sha256(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    format!("{:x}", h.finalize())
}
