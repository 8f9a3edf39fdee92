use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rtp_core::{BuildConfig, TokenLedger};
use serde::Serialize;

/// Provenance record written next to every artifact a run produces.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: BuildConfig,
    pub seed: u64,
    pub backend: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub ledger: TokenLedger,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or_default()
}

/// `out.json` gets `out.json.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

impl RunManifest {
    pub fn write_beside(&self, output: &Path) -> std::io::Result<PathBuf> {
        let path = manifest_path(output);
        let mut body = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        body.push('\n');
        std::fs::write(&path, body)?;
        Ok(path)
    }
}
