use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Everything needed to re-run a command: argv, resolved config and input hashes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Input path → hex SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            tool: "clipe",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: serde_json::Value::Null,
            seed: None,
            inputs: BTreeMap::new(),
            started_unix: now(),
            finished_unix: 0.0,
        }
    }

    /// Hashes `path`, or both files of an embedding prefix.
    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        let candidates: Vec<PathBuf> = if path.is_file() {
            vec![path.to_path_buf()]
        } else {
            vec![
                clipe_core::dataio::cemb_path(path),
                clipe_core::dataio::manifest_path(path),
            ]
        };
        for p in candidates.into_iter().filter(|p| p.is_file()) {
            let digest = sha256_file(&p).map_err(|e| CliError::io(&p, e))?;
            self.inputs.insert(p.display().to_string(), digest);
        }
        Ok(())
    }

    pub fn finish(mut self, dir: &Path) -> Result<(), CliError> {
        self.finished_unix = now();
        crate::commands::write_json(&dir.join("run_manifest.json"), &self)
    }
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
