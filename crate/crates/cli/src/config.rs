//! Layered settings: flags > environment > `rtp.toml` > defaults.
//!
//! Flags and environment variables are merged by clap before they get here;
//! this module handles the file layer and the final overlay.

use std::path::{Path, PathBuf};

use rtp_core::BuildConfig;
use serde::Deserialize;

pub const DEFAULT_CONFIG_FILE: &str = "rtp.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Scripted,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend: Option<BackendKind>,
    pub rules: Option<PathBuf>,
    pub max_inflight: Option<usize>,
    pub seed: Option<u64>,
    /// Partial [`BuildConfig`] overrides.
    pub build: Option<toml::Table>,
    #[serde(skip)]
    pub dir: PathBuf,
}

impl FileConfig {
    /// Read `explicit`, or `rtp.toml` in the working directory when present.
    pub fn load(explicit: Option<&Path>) -> Result<Self, String> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let default = PathBuf::from(DEFAULT_CONFIG_FILE);
                if !default.exists() {
                    return Ok(Self::default());
                }
                default
            }
        };
        let raw = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg: FileConfig = toml::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if let Some(rules) = &cfg.rules {
            if rules.is_relative() {
                cfg.rules = Some(cfg.dir.join(rules));
            }
        }
        Ok(cfg)
    }

    /// Apply the `[build]` table on top of `base`, rejecting unknown keys.
    pub fn overlay(&self, base: BuildConfig) -> Result<BuildConfig, String> {
        let Some(table) = &self.build else {
            return Ok(base);
        };
        let toml::Value::Table(mut merged) = toml::Value::try_from(&base).map_err(|e| e.to_string())? else {
            unreachable!("BuildConfig serializes to a table");
        };
        merge(&mut merged, table, "build")?;
        toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| format!("[build]: {e}"))
    }
}

fn merge(into: &mut toml::Table, from: &toml::Table, at: &str) -> Result<(), String> {
    for (key, value) in from {
        let Some(slot) = into.get_mut(key) else {
            return Err(format!("unknown key `{at}.{key}` in config file"));
        };
        match (slot, value) {
            (toml::Value::Table(dst), toml::Value::Table(src)) => merge(dst, src, &format!("{at}.{key}"))?,
            (slot, value) => *slot = value.clone(),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(raw: &str) -> FileConfig {
        toml::from_str(raw).unwrap()
    }

    #[test]
    fn build_table_overlays_defaults() {
        let file = parse("seed = 9\n[build]\nmax_depth = 2\n[build.temperatures]\nanswer = 0.1\n");
        let cfg = file.overlay(BuildConfig::default()).unwrap();
        assert_eq!(cfg.max_depth, 2);
        assert_eq!(cfg.votes, 4);
        assert_eq!(cfg.temperatures.answer, 0.1);
        assert_eq!(cfg.temperatures.question, 0.7);
        assert_eq!(file.seed, Some(9));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let file = parse("[build]\nmax_dept = 2\n");
        assert!(file.overlay(BuildConfig::default()).unwrap_err().contains("max_dept"));
        assert!(toml::from_str::<FileConfig>("colour = 1").is_err());
    }

    #[test]
    fn wrong_types_are_rejected() {
        let file = parse("[build]\nmax_depth = \"deep\"\n");
        assert!(file.overlay(BuildConfig::default()).is_err());
    }
}
