use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.json";

/// Creates `base`, or the first free `base-1`, `base-2`, ... if it exists.
/// Existing runs are never written into.
pub fn allocate(base: &Path) -> Result<PathBuf> {
    if let Some(parent) = base.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut candidate = base.to_path_buf();
    let mut k = 0u32;
    loop {
        match std::fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                k += 1;
                let mut name = base.as_os_str().to_owned();
                name.push(format!("-{k}"));
                candidate = PathBuf::from(name);
            }
            Err(e) => return Err(e.into()),
        }
    }
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Version string of the running binary, `git describe` style when the
/// build environment provides one.
pub fn version() -> String {
    match option_env!("KDLAB_GIT_DESCRIBE") {
        Some(d) => d.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub out_dir: String,
    pub version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// `None` while the run is in progress.
    pub exit_status: Option<i32>,
}

/// An allocated run directory with its manifest.
pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    pub fn create<C: Serialize>(
        base: &Path,
        command: &str,
        args: Vec<String>,
        config_path: Option<&Path>,
        config: &C,
        seed: u64,
    ) -> Result<Self> {
        let path = allocate(base)?;
        let config = serde_json::to_value(config)?;
        write_atomic(
            &path.join(CONFIG_SNAPSHOT_FILE),
            serde_json::to_string_pretty(&config)?.as_bytes(),
        )?;
        let manifest = RunManifest {
            command: command.into(),
            args,
            config_path: config_path.map(|p| p.display().to_string()),
            config,
            seed,
            out_dir: path.display().to_string(),
            version: version(),
            started_at: now(),
            finished_at: None,
            exit_status: None,
        };
        let dir = Self { path, manifest };
        dir.write_manifest()?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        write_atomic(&self.file(name), contents.as_bytes())
    }

    fn write_manifest(&self) -> Result<()> {
        self.write(
            MANIFEST_FILE,
            &serde_json::to_string_pretty(&self.manifest)?,
        )
    }

    pub fn finish(mut self, exit_status: i32) -> Result<()> {
        self.manifest.finished_at = Some(now());
        self.manifest.exit_status = Some(exit_status);
        self.write_manifest()
    }
}
