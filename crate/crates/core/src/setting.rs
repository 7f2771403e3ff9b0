//! The fixed ingredients shared by training, evaluation and verification.

use crate::domain::{enumerate_responses, ResponseSpace};
use crate::error::Result;
use crate::mechanism::{BaseConfig, BasePolicy, MechanismConfig};
use crate::user_model::ScenarioConfig;

/// Scenario, response space, pretrained generator and mechanism settings.
#[derive(Debug, Clone)]
pub struct Setting {
    pub scenario: ScenarioConfig,
    pub space: ResponseSpace,
    pub base: BasePolicy,
    pub mech: MechanismConfig,
}

impl Setting {
    pub fn new(scenario: ScenarioConfig, base: &BaseConfig, mech: MechanismConfig) -> Result<Self> {
        scenario.validate()?;
        mech.validate()?;
        let space = enumerate_responses(scenario.n_ads, scenario.k_max, scenario.quality_levels)?;
        let base = BasePolicy::from_config(&space, base)?;
        Ok(Self {
            scenario,
            space,
            base,
            mech,
        })
    }

    /// Default scenario and mechanism.
    pub fn desk() -> Self {
        Self::new(ScenarioConfig::default(), &BaseConfig::default(), MechanismConfig::default())
            .expect("defaults are valid")
    }
}
