//! TOML run configuration.
//!
//! ```toml
//! name = "digits-oracle"
//! dataset = "fixtures/digits/manifest.json"   # relative to this file
//! metric = "confidence"                       # confidence | correct | detection_iou | rmse
//! truth = "ground_truth"                      # ground_truth | consensus
//! output_dir = "results"
//! batch_size = 32
//! concurrency = 4
//! timeout_ms = 30000
//! retries = 2
//! shuffle_seed = 7                            # optional
//! projection_file = "umap.json"               # optional
//!
//! [orbit]
//! group = "rotation2d"
//! rotation_step = 10
//!
//! [model]
//! url = "http://127.0.0.1:9000"               # or a [model.synthetic] table
//!
//! [subset]
//! by = "class_label"
//! labels = [6, 9]
//! ```
//!
//! `NERO_MODEL_URL`, when set, replaces the model with that endpoint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{RunSpec, SubsetPredicate, TruthMode};
use crate::groups::OrbitSpec;
use crate::metrics::MetricName;
use crate::modelproto::{RetryPolicy, SyntheticModelSpec};
use crate::projection::ExternalProjection;

pub const MODEL_URL_ENV: &str = "NERO_MODEL_URL";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticModelSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Url(String),
    Synthetic(SyntheticModelSpec),
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_batch() -> usize {
    32
}

fn default_concurrency() -> usize {
    4
}

fn default_timeout() -> u64 {
    RetryPolicy::default().timeout_ms
}

fn default_retries() -> u32 {
    RetryPolicy::default().retries
}

fn default_backoff() -> u64 {
    RetryPolicy::default().base_delay_ms
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dataset: PathBuf,
    pub metric: MetricName,
    #[serde(default)]
    pub truth: TruthMode,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_file: Option<PathBuf>,
    pub orbit: OrbitSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<SubsetPredicate>,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<RunConfig, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(e),
        })
    }

    /// Reads, resolves relative paths against the file's directory, applies
    /// the environment override, and validates.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = RunConfig::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.apply_env(std::env::var(MODEL_URL_ENV).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.dataset = join(&self.dataset);
        self.output_dir = join(&self.output_dir);
        self.projection_file = self.projection_file.as_deref().map(join);
    }

    pub fn apply_env(&mut self, url: Option<String>) {
        if let Some(url) = url.filter(|u| !u.is_empty()) {
            self.model = ModelConfig {
                url: Some(url),
                synthetic: None,
            };
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !self.dataset.is_file() {
            return bad(format!("dataset manifest {} does not exist", self.dataset.display()));
        }
        if let Some(p) = &self.projection_file {
            if !p.is_file() {
                return bad(format!("projection file {} does not exist", p.display()));
            }
        }
        self.orbit
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        if self.timeout_ms == 0 {
            return bad("timeout_ms must be positive".into());
        }
        match (&self.model.url, &self.model.synthetic) {
            (Some(_), Some(_)) => return bad("give either model.url or model.synthetic, not both".into()),
            (None, None) => {
                return bad(format!("no model: set model.url, a [model.synthetic] table, or {MODEL_URL_ENV}"))
            }
            (Some(u), None) if !u.starts_with("http://") => {
                return bad(format!("model url {u:?} must start with http://"))
            }
            (None, Some(s)) => s.validate().map_err(ConfigError::Invalid)?,
            _ => {}
        }
        Ok(())
    }

    pub fn model_source(&self) -> ModelSource {
        match (&self.model.url, &self.model.synthetic) {
            (Some(u), _) => ModelSource::Url(u.clone()),
            (None, Some(s)) => ModelSource::Synthetic(s.clone()),
            (None, None) => unreachable!("validated"),
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            retries: self.retries,
            base_delay_ms: self.backoff_ms,
            timeout_ms: self.timeout_ms,
        }
    }

    /// `name-<hash>`, where the hash covers the whole resolved config, so
    /// the same config always yields the same id and file name.
    pub fn run_id(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let name = self.name.clone().unwrap_or_else(|| "run".into());
        let slug: String = name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
            .collect();
        format!("{slug}-{}", hex::encode(&digest[..6]))
    }

    pub fn result_path(&self) -> PathBuf {
        self.output_dir.join(format!("{}.json", self.run_id()))
    }

    pub fn run_spec(&self) -> Result<RunSpec, ConfigError> {
        let projection = match &self.projection_file {
            Some(p) => Some(ExternalProjection::load(p).map_err(|e| ConfigError::Invalid(e.to_string()))?),
            None => None,
        };
        Ok(RunSpec {
            run_id: self.run_id(),
            orbit: self.orbit.clone(),
            metric: self.metric,
            truth: self.truth,
            batch_size: self.batch_size,
            concurrency: self.concurrency,
            shuffle_seed: self.shuffle_seed,
            subset: self.subset.clone(),
            projection,
        })
    }
}
