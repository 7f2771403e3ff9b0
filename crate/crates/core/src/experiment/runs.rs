//! Equilibrium, simulation and training runs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{best_response_dynamics, bid_grid, AgentSpec, EquilibriumResult, Market};
use crate::ctr_model::{ClickDataset, PctrModel};
use crate::domain::AuctionContext;
use crate::error::{Error, Result};
use crate::irpo::{run_irpo, IrpoOutcome, PolicyParams};
use crate::mechanism::generate;
use crate::seeding::{rng_for, stream};
use crate::user_model::{sample_clicks, sample_context};
use crate::CODE_VERSION;

use super::compare::{test_contexts, write_json};
use super::config::ExperimentConfig;

#[derive(Deserialize)]
#[serde(untagged)]
enum AgentsFile {
    Wrapped { agents: Vec<AgentSpec> },
    Bare(Vec<AgentSpec>),
}

/// Parse an agents file: either a JSON array of agents or an object with an
/// `agents` array.
pub fn parse_agents(text: &str) -> Result<Vec<AgentSpec>> {
    let agents = match serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed agents file: {e}")))? {
        AgentsFile::Wrapped { agents } | AgentsFile::Bare(agents) => agents,
    };
    if agents.is_empty() {
        return Err(Error::Config("agents file lists no agents".into()));
    }
    for a in &agents {
        a.validate()?;
    }
    Ok(agents)
}

pub fn load_agents(path: &Path) -> Result<Vec<AgentSpec>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_agents(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSummary {
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub agents: Vec<AgentSpec>,
    pub bids: Vec<f64>,
    pub epsilon: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Soft target `epsilon_fraction · max value`.
    pub epsilon_target: f64,
    pub within_target: bool,
}

#[derive(Debug, Clone)]
pub struct EquilibriumOutcome {
    pub summary: EquilibriumSummary,
    pub result: EquilibriumResult,
}

impl EquilibriumOutcome {
    /// Write `equilibrium.csv` (the trace) and `equilibrium.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.result.write_csv(fs::File::create(dir.join("equilibrium.csv"))?)?;
        write_json(&dir.join("equilibrium.json"), &self.summary)
    }
}

/// Best-response dynamics among `agents` on one sampled context. Agent `i`
/// bids for ad `i`; the remaining ads keep their sampled bids.
pub fn run_equilibrium(cfg: &ExperimentConfig, agents: &[AgentSpec]) -> Result<EquilibriumOutcome> {
    cfg.validate()?;
    let setting = cfg.setting()?;
    if agents.len() > setting.scenario.n_ads {
        return Err(Error::Config(format!(
            "{} agents for a scenario with {} ads",
            agents.len(),
            setting.scenario.n_ads
        )));
    }
    let context = sample_context(&mut rng_for(cfg.seed, &[stream::EQUILIBRIUM]), &setting.scenario);
    let market = Market {
        context: &context,
        space: &setting.space,
        base: &setting.base,
        model: &setting.scenario.user_model,
        mech: &setting.mech,
    };
    let q = &cfg.equilibrium;
    let grid = bid_grid(0.0, q.grid_max, q.grid_step);
    let result = best_response_dynamics(&market, agents, &grid, q.max_iters)?;
    let max_value = agents.iter().map(|a| a.value).fold(0.0, f64::max);
    let epsilon_target = q.epsilon_fraction * max_value;
    Ok(EquilibriumOutcome {
        summary: EquilibriumSummary {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            code_version: CODE_VERSION.to_string(),
            agents: agents.to_vec(),
            bids: result.bids.clone(),
            epsilon: result.epsilon,
            converged: result.converged,
            iterations: result.iterations,
            epsilon_target,
            within_target: result.epsilon <= epsilon_target,
        },
        result,
    })
}

/// Click logs of the pretrained generator on the test contexts.
#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    pub contexts: Vec<AuctionContext>,
    pub clicks: ClickDataset,
}

impl SimulationOutcome {
    /// Write `contexts.json` and `clicks.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("contexts.json"), &self.contexts)?;
        self.clicks.write_csv(fs::File::create(dir.join("clicks.csv"))?)
    }
}

/// Deploy the pretrained generator on the test contexts for
/// `impressions_per_query` impressions each and log every exposed ad.
pub fn simulate(cfg: &ExperimentConfig) -> Result<SimulationOutcome> {
    cfg.validate()?;
    let setting = cfg.setting()?;
    let contexts = test_contexts(&setting, cfg.evaluation.test_contexts, cfg.seed);
    let mut clicks = ClickDataset::new();
    for (k, c) in contexts.iter().enumerate() {
        let mut rng = rng_for(cfg.seed, &[stream::SIMULATE, k as u64]);
        for _ in 0..cfg.evaluation.impressions_per_query {
            let (_, y) = generate(&mut rng, &setting.space, setting.base.distribution(), setting.base.format_error_rate);
            let record = sample_clicks(&mut rng, &setting.scenario.user_model, c, &y)?;
            for (&ad, &click) in &record.clicks {
                clicks.push(k, c, &y, ad, click)?;
            }
        }
    }
    Ok(SimulationOutcome { contexts, clicks })
}

/// A training run and its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub training: IrpoOutcome,
}

#[derive(Serialize)]
struct PolicyFile<'a> {
    seed: u64,
    config_hash: String,
    code_version: &'a str,
    policy: &'a PolicyParams,
    snapshots: &'a [PolicyParams],
}

impl TrainOutcome {
    /// Write `history.csv`, `policy.json` and `pctr.json`.
    pub fn write(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        let t = &self.training;
        t.history.write_csv(fs::File::create(dir.join("history.csv"))?)?;
        write_json(
            &dir.join("policy.json"),
            &PolicyFile {
                seed: cfg.seed,
                config_hash: cfg.hash(),
                code_version: CODE_VERSION,
                policy: &t.policy,
                snapshots: &t.snapshots,
            },
        )?;
        fs::write(dir.join("pctr.json"), t.pctr.to_json()? + "\n")?;
        Ok(())
    }

    pub fn pctr(&self) -> &PctrModel {
        &self.training.pctr
    }
}

/// Train only, evaluating the history on the test contexts.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let setting = cfg.setting()?;
    let contexts = test_contexts(&setting, cfg.evaluation.test_contexts, cfg.seed);
    Ok(TrainOutcome {
        training: run_irpo(&setting, &cfg.irpo, cfg.seed, &contexts)?,
    })
}
