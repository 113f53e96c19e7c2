use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub dataset_hashes: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// Paths produced by the run; relative ones are relative to the run
    /// directory.
    pub artifacts: Vec<PathBuf>,
    pub deviations: Vec<String>,
    #[serde(default)]
    pub details: BTreeMap<String, serde_json::Value>,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            config: config.clone(),
            dataset_hashes: BTreeMap::new(),
            started_at: now(),
            finished_at: None,
            artifacts: Vec::new(),
            deviations: config.deviations(),
            details: BTreeMap::new(),
        }
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        self.details
            .insert(key.into(), serde_json::to_value(value).expect("detail serializes"));
    }

    /// Stamps the end time, checks that every artifact exists and writes
    /// `run.json` into `dir`.
    pub fn finish(&mut self, dir: &Path) -> CliResult<()> {
        self.finished_at = Some(now());
        for a in &self.artifacts {
            let p = if a.is_absolute() { a.clone() } else { dir.join(a) };
            if !p.exists() {
                return Err(CliError::Config(format!("artifact {} was not produced", p.display())));
            }
        }
        self.write(dir)
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let bytes = fs::read(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
