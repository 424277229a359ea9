use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use agesched_core::config::ConfigFile;

/// Provenance block embedded in every JSON report.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub settings: serde_json::Value,
    /// Drives size draws for the desk default, optimizer restarts and
    /// simulation streams.
    pub seed: u64,
    /// Resolved experiment file, TOML.
    pub config: Option<String>,
    /// SHA-256 of `config`.
    pub config_hash: Option<String>,
    pub started_at: String,
    pub finished_at: Option<String>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Option<&ConfigFile>, settings: serde_json::Value) -> Self {
        let config = config.map(ConfigFile::to_toml);
        let config_hash = config.as_ref().map(|t| hex::encode(Sha256::digest(t.as_bytes())));
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            settings,
            seed,
            config,
            config_hash,
            started_at: now(),
            finished_at: None,
        }
    }

    pub fn finish(&mut self) {
        self.finished_at = Some(now());
    }
}
