//! Run configuration: TOML file, command-line overrides, resolution.
//!
//! Precedence is flag > file > default. Relative paths resolve against the
//! output root (`STYLEBRIDGE_OUT_ROOT`, default the working directory).

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use stylebridge::engine::{derive_seed, AdaptConfig};
use stylebridge::stream::DomainSpec;

use crate::error::{CliError, CliResult};

pub const OUT_ROOT_ENV: &str = "STYLEBRIDGE_OUT_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Adaptation runs in single precision; double is reserved for tests.
    #[default]
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    /// `kind@severity` tags, in stream order.
    pub domains: Vec<String>,
    pub batches_per_domain: usize,
    /// Shuffle batches across domains.
    pub mixed: bool,
    /// Defaults to a value derived from the adaptation seed.
    pub seed: Option<u64>,
    /// Materialized stream from `gen-data`; replaces generation.
    pub path: Option<PathBuf>,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            domains: DomainSpec::all_at(5)
                .expect("severity 5 is valid")
                .iter()
                .map(ToString::to_string)
                .collect(),
            batches_per_domain: 20,
            mixed: false,
            seed: None,
            path: None,
        }
    }
}

impl StreamSpec {
    pub fn parsed_domains(&self) -> CliResult<Vec<DomainSpec>> {
        if self.domains.is_empty() {
            return Err(CliError::usage("stream needs at least one domain"));
        }
        self.domains
            .iter()
            .map(|d| d.parse().map_err(|e: stylebridge::Error| CliError::usage(e.to_string())))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KbSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Defaults to a value derived from the adaptation seed.
    pub seed: Option<u64>,
    /// Exemplar directory from `gen-kb`; replaces procedural generation.
    pub path: Option<PathBuf>,
}

impl Default for KbSpec {
    fn default() -> Self {
        KbSpec {
            classes: 10,
            per_class: 2,
            seed: None,
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Source checkpoint directory.
    pub source: PathBuf,
    pub out: PathBuf,
    pub precision: Precision,
    pub adapt: AdaptConfig,
    pub stream: StreamSpec,
    pub kb: KbSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            source: PathBuf::from("source"),
            out: PathBuf::from("adapt"),
            precision: Precision::Single,
            adapt: AdaptConfig::default(),
            stream: StreamSpec::default(),
            kb: KbSpec::default(),
        }
    }
}

impl RunConfig {
    /// Copy with every default made explicit and paths made absolute.
    pub fn resolved(&self) -> CliResult<RunConfig> {
        self.adapt.validate()?;
        self.stream.parsed_domains()?;
        if self.stream.batches_per_domain == 0 {
            return Err(CliError::usage("batches_per_domain must be at least 1"));
        }
        let seed = self.adapt.seed;
        Ok(RunConfig {
            source: under_root(&self.source),
            out: under_root(&self.out),
            precision: self.precision,
            adapt: self.adapt.resolved(),
            stream: StreamSpec {
                seed: Some(self.stream.seed.unwrap_or_else(|| derive_seed(seed, 100))),
                path: self.stream.path.as_deref().map(under_root),
                ..self.stream.clone()
            },
            kb: KbSpec {
                seed: Some(self.kb.seed.unwrap_or_else(|| derive_seed(seed, 200))),
                path: self.kb.path.as_deref().map(under_root),
                ..self.kb.clone()
            },
        })
    }
}

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn under_root(p: &Path) -> PathBuf {
    out_root().join(p)
}

/// Reads a TOML file into `T`, or returns the defaults when no file is given.
pub fn load_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// Prepares an empty output directory. An existing non-empty directory is
/// an error unless `force` is set, in which case it is cleared.
pub fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        if entries.next().is_some() {
            if !force {
                return Err(CliError::usage(format!(
                    "output directory {} is not empty (use --force)",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.stream.parsed_domains().unwrap().len(), 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[adapt]\nlearning_rate = 1.0").is_err());
    }

    #[test]
    fn resolution_fills_seeds_and_scope() {
        let cfg: RunConfig = toml::from_str("[adapt]\nst_variant = \"entropy_min\"\nseed = 4").unwrap();
        let r = cfg.resolved().unwrap();
        assert_eq!(r.stream.seed, Some(derive_seed(4, 100)));
        assert_eq!(r.kb.seed, Some(derive_seed(4, 200)));
        assert_eq!(
            r.adapt.update_scope,
            Some(stylebridge::engine::UpdateScope::NormOnly)
        );
        let bad = RunConfig {
            stream: StreamSpec {
                domains: vec!["fog@9".into()],
                ..StreamSpec::default()
            },
            ..RunConfig::default()
        };
        assert!(matches!(bad.resolved(), Err(CliError::Usage(_))));
    }
}
