use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named scalar metrics. Units belong in the name (`rev_kld_nats`).
/// Undefined values are stored as `None` and serialize as `null`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, Option<f64>>,
    pub seed: u64,
    pub config_fingerprint: String,
    /// RFC 3339 wall-clock time, filled in by whoever writes the report.
    pub timestamp: Option<String>,
}

impl MetricReport {
    pub fn new(seed: u64, config_fingerprint: impl Into<String>) -> Self {
        Self {
            seed,
            config_fingerprint: config_fingerprint.into(),
            ..Self::default()
        }
    }

    /// Records a value; non-finite values are rejected.
    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("metric {name} = {value}")));
        }
        self.metrics.insert(name, Some(value));
        Ok(())
    }

    /// Records an explicitly undefined value.
    pub fn insert_undefined(&mut self, name: impl Into<String>) {
        self.metrics.insert(name.into(), None);
    }

    pub fn insert_opt(&mut self, name: impl Into<String>, value: Option<f64>) -> Result<()> {
        match value {
            Some(v) => self.insert(name, v),
            None => {
                self.insert_undefined(name);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied().flatten()
    }

    pub const CSV_HEADER: &'static str = "name,value,seed,config_fingerprint,timestamp";

    /// One row per metric, without the header. Undefined values are empty.
    pub fn to_csv_rows(&self) -> String {
        let mut out = String::new();
        let ts = self.timestamp.as_deref().unwrap_or("");
        for (name, v) in &self.metrics {
            let value = v.map(|v| format!("{v:?}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{name},{value},{},{},{ts}",
                self.seed, self.config_fingerprint
            );
        }
        out
    }

    pub fn to_jsonl_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
