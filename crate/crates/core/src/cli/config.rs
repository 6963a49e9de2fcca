//! `key = value` pipeline configuration with `[section]` headers.
//!
//! Precedence, lowest first: built-in defaults, the config file,
//! `SCS_<SECTION>_<KEY>` environment variables, command-line flags.
//! Relative paths in the file resolve against the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::agent::AgentConfig;
use crate::clustering::{InitMethod, KMeansConfig};
use crate::oracle::RetryPolicy;
use crate::training::TrainConfig;

pub const ENV_PREFIX: &str = "SCS_";

const KEYS: &[(&str, &[&str])] = &[
    ("paths", &["train", "query"]),
    (
        "oracle",
        &[
            "mode", "labels", "matrix", "endpoint", "timeout_ms", "retries", "backoff_ms", "max_in_flight", "noise", "alpha", "beta", "cache",
        ],
    ),
    ("kmeans", &["num_clusters", "max_iters", "tol", "init"]),
    ("agent", &["hidden_dims", "zero_init"]),
    (
        "train",
        &[
            "epochs", "batch_size", "lr0", "lr_halving_period", "beta1", "beta2", "eps", "max_grad_norm", "epoch_checkpoints",
        ],
    ),
    ("run", &["seed", "out", "normalize", "n_shot", "seeds"]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

/// Raw section -> key -> value table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<(String, String), String>,
}

fn check_key(section: &str, key: &str) -> Result<()> {
    match KEYS.iter().find(|(s, _)| *s == section) {
        None => err(format!("unknown section [{section}]")),
        Some((_, keys)) if !keys.contains(&key) => err(format!("unknown key {key:?} in [{section}]")),
        Some(_) => Ok(()),
    }
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RawConfig::default();
        let mut section: Option<String> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let Some(name) = rest.strip_suffix(']') else {
                    return err(format!("line {}: unterminated section header", n + 1));
                };
                let name = name.trim().to_ascii_lowercase();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return err(format!("line {}: unknown section [{name}]", n + 1));
                }
                section = Some(name);
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {}: expected key = value", n + 1));
            };
            let Some(sec) = &section else {
                return err(format!("line {}: key outside of a section", n + 1));
            };
            let key = key.trim().to_ascii_lowercase();
            check_key(sec, &key).map_err(|e| ConfigError(format!("line {}: {e}", n + 1)))?;
            cfg.values.insert((sec.clone(), key), value.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) -> Result<()> {
        check_key(section, key)?;
        self.values.insert((section.into(), key.into()), value.into());
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values.get(&(section.to_string(), key.to_string())).map(String::as_str)
    }

    /// Applies `SCS_<SECTION>_<KEY>` variables; unknown names are errors.
    pub fn apply_env<'a>(&mut self, vars: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let rest = rest.to_ascii_lowercase();
            let found = KEYS.iter().find_map(|(s, _)| {
                rest.strip_prefix(s)
                    .and_then(|k| k.strip_prefix('_'))
                    .map(|k| (*s, k.to_string()))
            });
            let Some((section, key)) = found else {
                return err(format!("environment variable {name} names no config section"));
            };
            self.set(section, &key, value)
                .map_err(|e| ConfigError(format!("environment variable {name}: {e}")))?;
        }
        Ok(())
    }

    fn parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| ConfigError(format!("[{section}] {key} = {v:?}: {e}"))),
        }
    }

    fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) if v.trim().is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|e| ConfigError(format!("[{section}] {key} = {v:?}: {e}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    ClassMatch,
    CosineSigmoid,
    Matrix,
    Remote,
}

impl FromStr for OracleMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "class-match" => Ok(OracleMode::ClassMatch),
            "cosine-sigmoid" => Ok(OracleMode::CosineSigmoid),
            "matrix" => Ok(OracleMode::Matrix),
            "remote" => Ok(OracleMode::Remote),
            other => Err(format!("unknown oracle mode {other:?} (class-match, cosine-sigmoid, matrix, remote)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSpec {
    pub mode: OracleMode,
    pub labels: Option<PathBuf>,
    pub matrix: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub noise: f64,
    pub alpha: f64,
    pub beta: f64,
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub train_path: Option<PathBuf>,
    pub query_path: Option<PathBuf>,
    pub oracle: OracleSpec,
    pub kmeans: KMeansConfig,
    pub hidden_dims: Vec<usize>,
    pub zero_init: bool,
    pub train: TrainConfig,
    pub epoch_checkpoints: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub normalize: bool,
    pub n_shot: usize,
    pub analysis_seeds: Vec<u64>,
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => err(format!("[{section}] {key} = {v:?}: expected true or false")),
    }
}

impl PipelineConfig {
    /// Typed view of `raw`; relative paths are joined onto `base`.
    pub fn from_raw(raw: &RawConfig, base: &Path) -> Result<Self> {
        let path = |section: &str, key: &str| raw.get(section, key).map(|p| base.join(p));
        let flag = |section: &str, key: &str, default: bool| -> Result<bool> {
            raw.get(section, key).map_or(Ok(default), |v| parse_bool(section, key, v))
        };

        let defaults = RetryPolicy::default();
        let oracle = OracleSpec {
            mode: raw
                .get("oracle", "mode")
                .unwrap_or("class-match")
                .parse()
                .map_err(ConfigError)?,
            labels: path("oracle", "labels"),
            matrix: path("oracle", "matrix"),
            endpoint: raw.get("oracle", "endpoint").map(str::to_string),
            timeout: Duration::from_millis(raw.parsed("oracle", "timeout_ms")?.unwrap_or(10_000)),
            retry: RetryPolicy {
                max_retries: raw.parsed("oracle", "retries")?.unwrap_or(defaults.max_retries),
                backoff: raw
                    .parsed("oracle", "backoff_ms")?
                    .map_or(defaults.backoff, Duration::from_millis),
            },
            max_in_flight: raw.parsed("oracle", "max_in_flight")?.unwrap_or(4),
            noise: raw.parsed("oracle", "noise")?.unwrap_or(0.0),
            alpha: raw.parsed("oracle", "alpha")?.unwrap_or(5.0),
            beta: raw.parsed("oracle", "beta")?.unwrap_or(0.0),
            cache: path("oracle", "cache"),
        };

        let kd = KMeansConfig::default();
        let kmeans = KMeansConfig {
            num_clusters: raw.parsed("kmeans", "num_clusters")?.unwrap_or(kd.num_clusters),
            max_iters: raw.parsed("kmeans", "max_iters")?.unwrap_or(kd.max_iters),
            tol: raw.parsed("kmeans", "tol")?.unwrap_or(kd.tol),
            init: match raw.get("kmeans", "init") {
                None | Some("random") => InitMethod::Random,
                Some("kmeans++") => InitMethod::KMeansPlusPlus,
                Some(other) => return err(format!("[kmeans] init = {other:?}: expected random or kmeans++")),
            },
            seed: 0,
        };

        let td = TrainConfig::default();
        let train = TrainConfig {
            epochs: raw.parsed("train", "epochs")?.unwrap_or(td.epochs),
            batch_size: raw.parsed("train", "batch_size")?.unwrap_or(td.batch_size),
            lr0: raw.parsed("train", "lr0")?.unwrap_or(td.lr0),
            lr_halving_period: raw.parsed("train", "lr_halving_period")?.unwrap_or(td.lr_halving_period),
            adam_beta1: raw.parsed("train", "beta1")?.unwrap_or(td.adam_beta1),
            adam_beta2: raw.parsed("train", "beta2")?.unwrap_or(td.adam_beta2),
            adam_eps: raw.parsed("train", "eps")?.unwrap_or(td.adam_eps),
            max_grad_norm: raw.parsed("train", "max_grad_norm")?,
            seed: 0,
        };

        let cfg = PipelineConfig {
            train_path: path("paths", "train"),
            query_path: path("paths", "query"),
            oracle,
            kmeans,
            hidden_dims: raw.list("agent", "hidden_dims")?.unwrap_or_else(|| AgentConfig::new(1).hidden_dims),
            zero_init: flag("agent", "zero_init", false)?,
            train,
            epoch_checkpoints: flag("train", "epoch_checkpoints", false)?,
            seed: raw.parsed("run", "seed")?.unwrap_or(0),
            out_dir: path("run", "out").unwrap_or_else(|| base.join("out")),
            normalize: flag("run", "normalize", true)?,
            n_shot: raw.parsed("run", "n_shot")?.unwrap_or(1),
            analysis_seeds: raw.list("run", "seeds")?.unwrap_or_else(|| (0..5).collect()),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.kmeans.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.hidden_dims.contains(&0) {
            return err("[agent] hidden_dims entries must be positive");
        }
        if self.n_shot == 0 {
            return err("[run] n_shot must be >= 1");
        }
        if self.oracle.max_in_flight == 0 {
            return err("[oracle] max_in_flight must be >= 1");
        }
        if !(self.oracle.noise >= 0.0) {
            return err("[oracle] noise must be non-negative");
        }
        Ok(())
    }

    pub fn agent_config(&self, feature_dim: usize) -> AgentConfig {
        AgentConfig {
            feature_dim,
            hidden_dims: self.hidden_dims.clone(),
            init_seed: crate::rng::substream_seed(self.seed, crate::rng::INIT),
            ..AgentConfig::new(feature_dim)
        }
    }

    pub fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig {
            seed: crate::rng::substream_seed(self.seed, crate::rng::KMEANS),
            ..self.kmeans.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: crate::rng::substream_seed(self.seed, crate::rng::SHUFFLE),
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let raw = RawConfig::parse("# c\n[kmeans]\nnum_clusters = 4\n\n[run]\nseed=9\n; x\n").unwrap();
        assert_eq!(raw.get("kmeans", "num_clusters"), Some("4"));
        let cfg = PipelineConfig::from_raw(&raw, Path::new("/base")).unwrap();
        assert_eq!(cfg.kmeans.num_clusters, 4);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.out_dir, Path::new("/base/out"));
        assert_eq!(cfg.hidden_dims, vec![512]);
        assert_eq!(cfg.analysis_seeds, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn rejects_unknown_names() {
        assert!(RawConfig::parse("[nope]\na=1\n").is_err());
        assert!(RawConfig::parse("[run]\nsed=1\n").is_err());
        assert!(RawConfig::parse("seed=1\n").is_err());
        assert!(RawConfig::parse("[run]\nseed\n").is_err());
    }

    #[test]
    fn env_overrides_file() {
        let mut raw = RawConfig::parse("[kmeans]\nnum_clusters = 4\n").unwrap();
        raw.apply_env([("SCS_KMEANS_NUM_CLUSTERS", "7"), ("HOME", "/x"), ("SCS_AGENT_HIDDEN_DIMS", "8,4")])
            .unwrap();
        let cfg = PipelineConfig::from_raw(&raw, Path::new(".")).unwrap();
        assert_eq!(cfg.kmeans.num_clusters, 7);
        assert_eq!(cfg.hidden_dims, vec![8, 4]);
        assert!(raw.apply_env([("SCS_BOGUS_X", "1")]).is_err());
    }

    #[test]
    fn typed_errors_name_the_key() {
        let raw = RawConfig::parse("[train]\nepochs = ten\n").unwrap();
        let e = PipelineConfig::from_raw(&raw, Path::new(".")).unwrap_err();
        assert!(e.0.contains("epochs"));
        let raw = RawConfig::parse("[oracle]\nmode = psychic\n").unwrap();
        assert!(PipelineConfig::from_raw(&raw, Path::new(".")).is_err());
    }
}
