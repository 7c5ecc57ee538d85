//! TOML run configuration. Each subcommand reads its own table; values given
//! on the command line replace the file's.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const DEFAULT_OUT: &str = "qrm-out";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub gen_data: toml::Table,
    #[serde(default)]
    pub train_quantiles: toml::Table,
    #[serde(default)]
    pub train_gating: toml::Table,
    #[serde(default)]
    pub score: toml::Table,
    #[serde(default)]
    pub rlhf: toml::Table,
    #[serde(default)]
    pub eval: toml::Table,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Resolved global settings.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: u64,
    pub out: PathBuf,
}

pub fn resolve(cfg: &RunConfig, seed: Option<u64>, out: Option<PathBuf>) -> Globals {
    Globals {
        seed: seed.or(cfg.seed).unwrap_or(0),
        out: out
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
    }
}

/// Lays every non-`None` flag over the config table.
pub fn overlay<T: Serialize + DeserializeOwned>(
    section: &toml::Table,
    section_name: &str,
    flags: &T,
) -> Result<T> {
    let mut merged = serde_json::to_value(section)?;
    let flags = serde_json::to_value(flags)?;
    if let (Some(base), Some(top)) = (merged.as_object_mut(), flags.as_object()) {
        for (k, v) in top {
            if !v.is_null() {
                base.insert(k.clone(), v.clone());
            }
        }
    }
    serde_json::from_value(merged).with_context(|| format!("invalid [{section_name}] settings"))
}

/// Deterministic per-purpose seed derived from the run seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Knobs {
        alpha: Option<f64>,
        name: Option<String>,
    }

    #[test]
    fn flags_win_over_file() {
        let table: toml::Table = toml::from_str("alpha = 1\nname = \"file\"").unwrap();
        let flags = Knobs {
            alpha: None,
            name: Some("flag".into()),
        };
        let merged = overlay(&table, "t", &flags).unwrap();
        assert_eq!(merged.alpha, Some(1.0));
        assert_eq!(merged.name.as_deref(), Some("flag"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let table: toml::Table = toml::from_str("alpah = 1").unwrap();
        assert!(overlay(&table, "t", &Knobs::default()).is_err());
    }

    #[test]
    fn global_precedence() {
        let cfg: RunConfig = toml::from_str("seed = 3\nout = \"a\"").unwrap();
        let ctx = resolve(&cfg, Some(9), None);
        assert_eq!(ctx.seed, 9);
        assert_eq!(ctx.out, PathBuf::from("a"));
        assert!(toml::from_str::<RunConfig>("[gen_dta]\nx = 1").is_err());
    }
}
