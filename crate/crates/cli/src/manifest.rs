//! Config resolution and run manifests.
//!
//! Every command starts from built-in defaults, replaces them with a config
//! file when one is given, then applies command-line flags. The resolved
//! config is written to a JSON manifest next to the outputs; passing that
//! manifest back through `--config` repeats the run.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::usage;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub build: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// A seed for runs that were not given one; recorded in the manifest.
pub fn fresh_seed() -> u64 {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    (nanos as u64) ^ ((std::process::id() as u64) << 32)
}

/// Reads a TOML config file, or the config stored in a JSON run manifest.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> Result<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        let m: RunManifest = serde_json::from_str(&text)
            .with_context(|| format!("parsing manifest {}", path.display()))?;
        if m.command != command {
            return Err(usage(format!(
                "manifest {} was written by `{}`, not `{command}`",
                path.display(),
                m.command
            )));
        }
        serde_json::from_value(m.config)
            .with_context(|| format!("config in manifest {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

pub fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| usage(format!("missing {flag} (flag or config key)")))
}

pub struct Run {
    command: &'static str,
    started: f64,
}

impl Run {
    pub fn start(command: &'static str) -> Self {
        Run {
            command,
            started: now(),
        }
    }

    /// Writes the manifest to `path`.
    pub fn finish<C: Serialize>(
        self,
        path: &Path,
        config: &C,
        seed: Option<u64>,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
    ) -> Result<()> {
        let m = RunManifest {
            command: self.command.to_string(),
            build: format!("hdrmask {}", env!("CARGO_PKG_VERSION")),
            seed,
            config: serde_json::to_value(config)?,
            inputs,
            outputs,
            started_unix: self.started,
            finished_unix: now(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&m)? + "\n")
            .with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// Manifest location for a single output file.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    file.with_file_name(name)
}

/// Manifest location for an output directory.
pub fn inside(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
