use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::metrics::MetricReport;
use crate::model::{ModelFile, TabularLM};

/// First 16 hex digits of the SHA-256 of a value's JSON serialization.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub model: TabularLM,
    pub step: usize,
    pub metrics: MetricReport,
    pub config_fingerprint: String,
}

impl Checkpoint {
    pub fn new(model: TabularLM, step: usize, config_fingerprint: impl Into<String>) -> Self {
        let fp = config_fingerprint.into();
        Self {
            model,
            step,
            metrics: MetricReport::new(0, fp.clone()),
            config_fingerprint: fp,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    /// Reads a checkpoint, or a bare model file (step 0, empty metrics).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match Self::from_json(&text) {
            Ok(c) => Ok(c),
            Err(e) => match serde_json::from_str::<ModelFile>(&text) {
                Ok(f) => Ok(Self::new(TabularLM::try_from(f)?, 0, "")),
                Err(_) => Err(e),
            },
        }
    }
}
