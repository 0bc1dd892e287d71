//! Versioned JSON run configuration.
//!
//! ```json
//! {
//!   "version": 1,
//!   "manifest": "data/manifest.jsonl",
//!   "out_dir": "runs/toy",
//!   "train": { "epochs": 20, "lr": 0.001, "model": { ... } }
//! }
//! ```
//!
//! Relative paths resolve against the config file's directory. Omitted
//! `train` fields take their defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            manifest: None,
            out_dir: default_out_dir(),
            train: TrainConfig::default(),
        }
    }
}

/// Values given on the command line; each one replaces the file's value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        if let Some(m) = &cfg.manifest {
            cfg.manifest = Some(base_dir.join(m));
        }
        cfg.out_dir = base_dir.join(&cfg.out_dir);
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// The file at `path` when given, defaults otherwise, with `overrides`
    /// applied and the result validated.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(m) = &overrides.manifest {
            cfg.manifest = Some(m.clone());
        }
        if let Some(o) = &overrides.out_dir {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = overrides.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = overrides.epochs {
            cfg.train.epochs = e;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::config("no manifest given (set \"manifest\" or pass --manifest)"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
