//! Flat-file run directory keyed by config hash.
//!
//! ```text
//! <out>/<hash>/config.json
//!              cohort.json
//!              ensembles/<id>.json
//!              fronts/<id>.json, fronts/<id>.csv
//!              records/<id>.json
//!              curves/<arm>.csv
//!              logrank/<arm>.json
//!              summary.json
//! ```

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{json_diff, RunConfig};
use crate::error::{AppError, AppResult};

/// Every JSON artifact carries the hash of the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    #[serde(flatten)]
    pub data: T,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
    config: RunConfig,
    hash: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AppError + '_ {
    move |source| AppError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl RunDir {
    /// Create or reopen `<out>/<hash>`. A stored config that differs from
    /// `config` is a mismatch.
    pub fn open(out: &Path, config: RunConfig) -> AppResult<Self> {
        let hash = config.hash();
        let root = out.join(&hash);
        std::fs::create_dir_all(&root).map_err(io_err(&root))?;
        let run = Self { root, config, hash };
        let cfg_path = run.root.join("config.json");
        if cfg_path.exists() {
            let stored: serde_json::Value = run.read_raw(&cfg_path)?;
            let current = serde_json::to_value(&run.config).expect("config serializes");
            if stored != current {
                return Err(AppError::ConfigMismatch {
                    path: cfg_path.display().to_string(),
                    expected: run.hash.clone(),
                    found: "edited".into(),
                    diff: json_diff(&stored, &current).join("\n"),
                });
            }
        } else {
            write_json(&cfg_path, &run.config)?;
        }
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn cohort_path(&self) -> PathBuf {
        self.root.join("cohort.json")
    }

    pub fn ensemble_path(&self, id: &str) -> PathBuf {
        self.root.join("ensembles").join(format!("{id}.json"))
    }

    pub fn front_path(&self, id: &str) -> PathBuf {
        self.root.join("fronts").join(format!("{id}.json"))
    }

    pub fn front_csv_path(&self, id: &str) -> PathBuf {
        self.root.join("fronts").join(format!("{id}.csv"))
    }

    pub fn record_path(&self, id: &str) -> PathBuf {
        self.root.join("records").join(format!("{id}.json"))
    }

    pub fn curve_path(&self, arm: &str) -> PathBuf {
        self.root.join("curves").join(format!("{}.csv", file_stem(arm)))
    }

    pub fn logrank_path(&self, arm: &str) -> PathBuf {
        self.root.join("logrank").join(format!("{}.json", file_stem(arm)))
    }

    pub fn summary_path(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn store<T: Serialize>(&self, path: &Path, data: &T) -> AppResult<()> {
        write_json(
            path,
            &Stamped {
                config_hash: self.hash.clone(),
                data,
            },
        )
    }

    /// Load an artifact, refusing one stamped by a different config.
    pub fn load<T: DeserializeOwned>(&self, path: &Path, stage: &'static str) -> AppResult<T> {
        if !path.exists() {
            return Err(AppError::MissingArtifact {
                path: path.display().to_string(),
                stage,
            });
        }
        let stamped: Stamped<T> = self.read_raw(path)?;
        if stamped.config_hash != self.hash {
            let other = self.root.parent().map(|p| p.join(&stamped.config_hash).join("config.json"));
            let diff = match other.filter(|p| p.exists()) {
                Some(p) => {
                    let theirs: serde_json::Value = self.read_raw(&p)?;
                    let ours = serde_json::to_value(&self.config).expect("config serializes");
                    json_diff(&theirs, &ours).join("\n")
                }
                None => "producing config not found".into(),
            };
            return Err(AppError::ConfigMismatch {
                path: path.display().to_string(),
                expected: self.hash.clone(),
                found: stamped.config_hash,
                diff,
            });
        }
        Ok(stamped.data)
    }

    fn read_raw<T: DeserializeOwned>(&self, path: &Path) -> AppResult<T> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&bytes).map_err(|source| AppError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

/// `OUU:60` is stored as `OUU-60`.
pub fn file_stem(arm: &str) -> String {
    arm.replace(':', "-")
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> AppResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| AppError::Json {
        path: path.display().to_string(),
        source,
    })?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> AppResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}
