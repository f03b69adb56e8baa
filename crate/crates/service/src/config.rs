//! Service configuration, read from a TOML file.
//!
//! ```toml
//! data_dir = "atelier-data"     # root for models, corpus, jobs, artifacts
//! model_seed = 0                # seed for models with no checkpoint
//! stages = 3                    # generator stages (final side 8·2^(stages−1))
//! styles = 3                    # recommended styles per job
//! max_optimize_iters = 500      # cap for optimisation-mode stylization
//! max_concurrent_jobs = 2       # worker pool size for the HTTP server
//! page_size = 20                # default GET /jobs page size
//! corpus_per_genre = 3          # synthetic paintings per genre and style
//! static_dir = "ui/dist"        # optional, served under /ui
//! ```
//!
//! The `ATELIER_DATA_DIR` environment variable overrides `data_dir`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const DATA_DIR_ENV: &str = "ATELIER_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtelierConfig {
    pub data_dir: PathBuf,
    pub model_seed: u64,
    pub stages: usize,
    pub styles: usize,
    pub max_optimize_iters: usize,
    pub max_concurrent_jobs: usize,
    pub page_size: usize,
    pub corpus_per_genre: usize,
    pub static_dir: Option<PathBuf>,
}

impl Default for AtelierConfig {
    fn default() -> Self {
        AtelierConfig {
            data_dir: PathBuf::from("atelier-data"),
            model_seed: 0,
            stages: 3,
            styles: 3,
            max_optimize_iters: 500,
            max_concurrent_jobs: 2,
            page_size: 20,
            corpus_per_genre: 3,
            static_dir: None,
        }
    }
}

impl AtelierConfig {
    /// Defaults, overlaid by `path` when given, then by the environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ServiceError::invalid(format!("config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| ServiceError::invalid(format!("config {}: {}", p.display(), e.message())))?
            }
            None => AtelierConfig::default(),
        };
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV).filter(|d| !d.is_empty()) {
            cfg.data_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.styles == 0 || self.max_concurrent_jobs == 0 || self.page_size == 0 || self.corpus_per_genre == 0 {
            return Err(ServiceError::invalid(
                "stages, styles, max_concurrent_jobs, page_size and corpus_per_genre must be positive",
            ));
        }
        Ok(())
    }

    pub fn models_dir(&self) -> PathBuf {
        self.data_dir.join("models")
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.data_dir.join("corpus")
    }

    pub fn jobs_dir(&self) -> PathBuf {
        self.data_dir.join("jobs")
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.data_dir.join("artifacts")
    }
}
