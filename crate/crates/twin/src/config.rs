//! Run configuration, scale presets and the config hash.

use std::path::Path;

use oncotwin_core::calibration::{LikelihoodSpec, McmcConfig};
use oncotwin_core::cohort::{ObservationModel, PriorSpec};
use oncotwin_core::model::{FixedParameters, SimulationGrid};
use oncotwin_core::optimizer::OptimizationConfig;
use oncotwin_core::risk::{RiskConfig, TtpConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalConfig {
    /// Bootstrap replicates for the variance band.
    pub n_boot: usize,
    /// Spacing of the band's time grid, days.
    pub band_step: f64,
    /// Matched-control tolerance on the TTP superquantile, days.
    pub tolerance_days: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scale: Scale,
    pub seed: u64,
    pub n_patients: usize,
    pub prior: PriorSpec,
    pub observation: ObservationModel,
    pub fixed: FixedParameters,
    pub grid: SimulationGrid,
    pub ttp: TtpConfig,
    pub risk: RiskConfig,
    pub likelihood: LikelihoodSpec,
    pub mcmc: McmcConfig,
    pub optimization: OptimizationConfig,
    pub survival: SurvivalConfig,
}

impl RunConfig {
    pub fn preset(scale: Scale, seed: u64) -> Self {
        let (n_patients, mcmc, optimization, n_mc, n_boot) = match scale {
            Scale::Desk => (20, McmcConfig::desk(seed), OptimizationConfig::desk(seed), 1000, 200),
            Scale::Paper => (100, McmcConfig::paper(seed), OptimizationConfig::paper(seed), 5000, 1000),
        };
        Self {
            scale,
            seed,
            n_patients,
            prior: PriorSpec::default(),
            observation: ObservationModel::default(),
            fixed: FixedParameters::default(),
            grid: SimulationGrid::default(),
            ttp: TtpConfig::default(),
            risk: RiskConfig { alpha: 0.95, n_mc },
            likelihood: LikelihoodSpec::default(),
            mcmc,
            optimization,
            survival: SurvivalConfig {
                n_boot,
                band_step: 0.2,
                tolerance_days: 1.0,
            },
        }
    }

    /// Replace every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.mcmc.seed = seed;
        self.optimization.seed = seed;
        self
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::MissingConfig {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| AppError::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> AppResult<()> {
        if self.n_patients == 0 {
            return Err(AppError::InvalidConfig("n_patients must be positive".into()));
        }
        self.prior.validate()?;
        self.observation.validate(&self.grid)?;
        self.fixed.validate()?;
        self.ttp.validate(&self.grid)?;
        self.risk.validate()?;
        self.mcmc.validate()?;
        self.optimization.validate()?;
        if self.survival.n_boot == 0 || !(self.survival.band_step > 0.0) || !(self.survival.tolerance_days >= 0.0) {
            return Err(AppError::InvalidConfig("survival settings out of range".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Leaf-level differences between two JSON documents, one `path: a -> b` per line.
pub fn json_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(path: String, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        use serde_json::Value::{Array, Object};
        match (a, b) {
            (Object(x), Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let null = serde_json::Value::Null;
                    walk(format!("{path}.{k}"), x.get(k).unwrap_or(&null), y.get(k).unwrap_or(&null), out);
                }
            }
            (Array(x), Array(y)) if x.len() == y.len() => {
                for (i, (p, q)) in x.iter().zip(y).enumerate() {
                    walk(format!("{path}[{i}]"), p, q, out);
                }
            }
            _ if a != b => out.push(format!("{path}: {a} -> {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(String::new(), a, b, &mut out);
    out
}
