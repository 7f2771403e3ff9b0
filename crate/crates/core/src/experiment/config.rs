//! Experiment configuration, loaded from a single JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::irpo::IrpoConfig;
use crate::mechanism::{BaseConfig, MechanismConfig};
use crate::setting::Setting;
use crate::user_model::ScenarioConfig;

/// Which click model scores the headline reward column.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtrSourceKind {
    #[default]
    Oracle,
    Pctr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub test_contexts: usize,
    pub mosaic_m: usize,
    pub metrics_ctr_source: CtrSourceKind,
    /// Simulated impressions per test query and mechanism.
    pub impressions_per_query: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            test_contexts: 200,
            mosaic_m: 20,
            metrics_ctr_source: CtrSourceKind::Oracle,
            impressions_per_query: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    /// Random environments per hard check.
    pub environments: usize,
    pub bid_min: f64,
    pub bid_max: f64,
    /// Coarse step of the continuity refinement; the fine step is half.
    pub continuity_delta: f64,
    pub perturbation_trials: usize,
    pub perturbation_magnitude: f64,
    /// Step of the bid grid used by the incentive checks.
    pub grid_step: f64,
    /// Bid levels of the bid/click correlation probe.
    pub probe_bids: Vec<f64>,
    pub probe_replicates: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            environments: 200,
            bid_min: 1.0,
            bid_max: 100.0,
            continuity_delta: 0.02,
            perturbation_trials: 1000,
            perturbation_magnitude: 0.5,
            grid_step: 1.0,
            probe_bids: std::iter::once(1.0).chain((1..=10).map(|k| 10.0 * k as f64)).collect(),
            probe_replicates: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EquilibriumConfig {
    pub max_iters: usize,
    pub grid_max: f64,
    pub grid_step: f64,
    /// Soft target for the final regret as a fraction of the largest value.
    pub epsilon_fraction: f64,
}

impl Default for EquilibriumConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            grid_max: 100.0,
            grid_step: 1.0,
            epsilon_fraction: 0.05,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(default)]
    pub mechanism: MechanismConfig,
    #[serde(default)]
    pub irpo: IrpoConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub equilibrium: EquilibriumConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Default configuration for a seed.
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = Self {
            scenario: ScenarioConfig::default(),
            base: BaseConfig::default(),
            mechanism: MechanismConfig::default(),
            irpo: IrpoConfig::default(),
            evaluation: EvaluationConfig::default(),
            verify: VerifyConfig::default(),
            equilibrium: EquilibriumConfig::default(),
            output_dir: default_output_dir(),
            seed,
        };
        cfg.scenario.seed = seed;
        cfg
    }

    /// Parse and validate. The scenario seed always follows the top-level seed.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.scenario.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.scenario.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.mechanism.validate()?;
        self.irpo.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.base.format_error_rate) || !(self.base.kappa >= 0.0) {
            return fail("base.kappa must be >= 0 and base.format_error_rate in [0,1)".into());
        }
        let e = &self.evaluation;
        if e.test_contexts == 0 || e.mosaic_m == 0 || e.impressions_per_query == 0 {
            return fail("evaluation sizes must be positive".into());
        }
        let v = &self.verify;
        if v.environments == 0 || v.perturbation_trials == 0 || v.probe_replicates == 0 {
            return fail("verify sizes must be positive".into());
        }
        if !(v.bid_max > v.bid_min) || !(v.bid_min >= 0.0) || !(v.continuity_delta > 0.0) || !(v.grid_step > 0.0) {
            return fail("verify bid range and steps must be positive".into());
        }
        if !(0.0..=1.0).contains(&v.perturbation_magnitude) {
            return fail("verify.perturbation_magnitude must lie in [0,1]".into());
        }
        if v.probe_bids.len() < 2 || v.probe_bids.iter().any(|b| !(*b >= 0.0)) {
            return fail("verify.probe_bids needs at least two non-negative bids".into());
        }
        let q = &self.equilibrium;
        if !(q.grid_max > 0.0) || !(q.grid_step > 0.0) {
            return fail("equilibrium grid must be positive".into());
        }
        Ok(())
    }

    pub fn setting(&self) -> Result<Setting> {
        Setting::new(self.scenario.clone(), &self.base, self.mechanism.clone())
    }

    /// SHA-256 of the configuration with the output directory blanked, so
    /// that the hash identifies the experiment rather than where it was
    /// written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
