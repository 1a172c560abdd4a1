//! JSON run configuration shared by the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{EvalConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub checkpoint: Option<PathBuf>,
    /// CSV training log; stdout when unset.
    pub log: Option<PathBuf>,
    /// JSON report written by eval and sweep; stdout when unset.
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
    /// Force a single worker thread.
    pub deterministic: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.budget == 0 {
            return Err(Error::Config("eval budget must be at least one step".into()));
        }
        Ok(())
    }
}
