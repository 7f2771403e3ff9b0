//! The alternating training loop.
//!
//! Each epoch first deploys the current policy on freshly bid contexts,
//! collects simulated clicks and refits the pCTR model on them. It then
//! re-samples bids, draws candidate responses from the same policy, scores
//! them with the refitted reward model and takes full-batch gradient steps on
//! the preference loss against a reference frozen at the start of the epoch.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctr_model::{train_pctr, ClickDataset, FeatureMap, PctrModel};
use crate::domain::AuctionContext;
use crate::error::{Error, Result};
use crate::mechanism::{generate, response_reward, ScoredSpace};
use crate::seeding::{rng_for, stream};
use crate::setting::Setting;
use crate::user_model::{sample_bids, sample_clicks, sample_context};

use super::dpo::{build_preference_set, DpoSample};
use super::policy::{FeatureTable, PolicyParams, POLICY_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    /// Temperature inside the preference loss.
    pub beta: f64,
    /// Minimum reward gap for a loser.
    pub delta_th: f64,
    /// Candidates drawn per context.
    pub m_samples: usize,
    pub learning_rate: f64,
    pub steps_per_epoch: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            delta_th: 10.0,
            m_samples: 5,
            learning_rate: 5.0,
            steps_per_epoch: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrpoConfig {
    pub epochs: usize,
    pub train_contexts: usize,
    /// Responses deployed per context when collecting clicks.
    pub reward_samples: usize,
    pub pctr_learning_rate: f64,
    /// Gradient steps on the BCE loss per epoch, warm-started.
    pub pctr_steps: usize,
    pub pctr_features: FeatureMap,
    pub dpo: DpoConfig,
}

impl Default for IrpoConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            train_contexts: 500,
            reward_samples: 10,
            pctr_learning_rate: 0.1,
            pctr_steps: 1000,
            pctr_features: FeatureMap::Full,
            dpo: DpoConfig::default(),
        }
    }
}

impl IrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.train_contexts == 0 {
            return fail("train_contexts must be at least 1");
        }
        if self.reward_samples == 0 {
            return fail("reward_samples must be at least 1");
        }
        if !(self.pctr_learning_rate >= 0.0) || !self.pctr_learning_rate.is_finite() {
            return fail("pctr_learning_rate must be non-negative");
        }
        let d = &self.dpo;
        if !(d.beta > 0.0) || !d.beta.is_finite() {
            return fail("dpo.beta must be positive");
        }
        if !(d.delta_th >= 0.0) {
            return fail("dpo.delta_th must be non-negative");
        }
        if d.m_samples < 2 {
            return fail("dpo.m_samples must be at least 2");
        }
        if !(d.learning_rate >= 0.0) || !d.learning_rate.is_finite() {
            return fail("dpo.learning_rate must be non-negative");
        }
        Ok(())
    }
}

/// Summary of one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// BCE on this epoch's click data after the pCTR update.
    pub bce: f64,
    pub bce_trace: Vec<f64>,
    /// Mean preference loss at the end of the epoch.
    pub dpo_loss: f64,
    pub oracle_reward_per_query: f64,
    pub revenue_per_query: f64,
    pub unbiasedness_gap: f64,
    pub preference_samples: usize,
    pub click_rows: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: [&str; 6] = [
    "epoch",
    "bce",
    "dpo_loss",
    "oracle_reward_per_query",
    "revenue_per_query",
    "unbiasedness_gap",
];

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(HISTORY_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.bce.to_string(),
                r.dpo_loss.to_string(),
                r.oracle_reward_per_query.to_string(),
                r.revenue_per_query.to_string(),
                r.unbiasedness_gap.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact policy metrics averaged over a set of contexts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetrics {
    /// Expected reward under the true click model.
    pub oracle_reward_per_query: f64,
    /// Expected first-price revenue, format errors included.
    pub revenue_per_query: f64,
    /// Mean over contexts and ads of `|E_π[(pctr_i − ctr_i)·1{i∈y}]|`.
    pub unbiasedness_gap: f64,
}

/// Evaluate a parametric policy exactly on `contexts`.
pub fn policy_metrics(
    setting: &Setting,
    params: &PolicyParams,
    pctr: &PctrModel,
    contexts: &[AuctionContext],
) -> Result<PolicyMetrics> {
    if contexts.is_empty() {
        return Err(Error::InvalidArgument("no evaluation contexts".into()));
    }
    let truth = &setting.scenario.user_model;
    let fer = setting.base.format_error_rate;
    let per_context = contexts
        .par_iter()
        .map(|c| {
            let table = FeatureTable::new(c, &setting.space, &setting.base, params.bid_scale)?;
            let pi = table.distribution(&params.theta)?;
            let true_scores = ScoredSpace::new(c, &setting.space, truth, &setting.mech.reward)?;
            let pctr_scores = ScoredSpace::new(c, &setting.space, pctr, &setting.mech.reward)?;
            let bids = c.bids().as_slice();
            let reward = pi.expect(&true_scores.rewards(bids));
            let revenue = (1.0 - fer) * pi.expect(&true_scores.values(bids));
            let a = pctr_scores.itctr_all(&pi);
            let b = true_scores.itctr_all(&pi);
            let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            Ok([reward, revenue, gap])
        })
        .collect::<Result<Vec<_>>>()?;
    let n = contexts.len() as f64;
    let sum = |k: usize| per_context.iter().map(|v| v[k]).sum::<f64>() / n;
    Ok(PolicyMetrics {
        oracle_reward_per_query: sum(0),
        revenue_per_query: sum(1),
        unbiasedness_gap: sum(2),
    })
}

/// Everything produced by a training run.
#[derive(Debug, Clone)]
pub struct IrpoOutcome {
    pub policy: PolicyParams,
    pub pctr: PctrModel,
    pub history: TrainingHistory,
    /// Policy parameters before training and after every epoch.
    pub snapshots: Vec<PolicyParams>,
    /// pCTR models after every epoch.
    pub pctr_snapshots: Vec<PctrModel>,
}

/// Training contexts of a run. Their bids are replaced in every phase.
pub fn training_contexts(setting: &Setting, n: usize, seed: u64) -> Vec<AuctionContext> {
    let mut rng = rng_for(seed, &[stream::TRAIN_CONTEXTS]);
    (0..n).map(|_| sample_context(&mut rng, &setting.scenario)).collect()
}

fn collect_clicks(
    setting: &Setting,
    cfg: &IrpoConfig,
    params: &PolicyParams,
    contexts: &[AuctionContext],
    seed: u64,
    epoch: usize,
) -> Result<ClickDataset> {
    let parts = contexts
        .par_iter()
        .enumerate()
        .map(|(k, template)| {
            let mut rng = rng_for(seed, &[stream::PHASE_ONE, epoch as u64, k as u64]);
            let bids = sample_bids(&mut rng, &setting.scenario, template.n_ads());
            let c = template.with_bids(bids)?;
            let pi = FeatureTable::new(&c, &setting.space, &setting.base, params.bid_scale)?.distribution(&params.theta)?;
            let mut data = ClickDataset::new();
            for _ in 0..cfg.reward_samples {
                let (_, y) = generate(&mut rng, &setting.space, &pi, setting.base.format_error_rate);
                let clicks = sample_clicks(&mut rng, &setting.scenario.user_model, &c, &y)?;
                for (&ad, &click) in &clicks.clicks {
                    data.push(k, &c, &y, ad, click)?;
                }
            }
            Ok(data)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all = ClickDataset::new();
    parts.into_iter().for_each(|d| all.extend(d));
    Ok(all)
}

fn collect_preferences(
    setting: &Setting,
    cfg: &IrpoConfig,
    params: &PolicyParams,
    pctr: &PctrModel,
    contexts: &[AuctionContext],
    seed: u64,
    epoch: usize,
) -> Result<Vec<DpoSample>> {
    let samples = contexts
        .par_iter()
        .enumerate()
        .map(|(k, template)| {
            let mut rng = rng_for(seed, &[stream::PHASE_TWO, epoch as u64, k as u64]);
            let bids = sample_bids(&mut rng, &setting.scenario, template.n_ads());
            let c = template.with_bids(bids)?;
            let table = FeatureTable::new(&c, &setting.space, &setting.base, params.bid_scale)?;
            let pi = table.distribution(&params.theta)?;
            let mut indices = Vec::with_capacity(cfg.dpo.m_samples);
            let mut rewards = Vec::with_capacity(cfg.dpo.m_samples);
            for _ in 0..cfg.dpo.m_samples {
                let (idx, y) = generate(&mut rng, &setting.space, &pi, setting.base.format_error_rate);
                rewards.push(response_reward(&c, &y, pctr, &setting.mech.reward)?);
                indices.push(idx);
            }
            let prefs = build_preference_set(&rewards, cfg.dpo.delta_th)?;
            if prefs.losers.is_empty() {
                return Ok(None);
            }
            let losers = prefs.losers.iter().map(|l| indices[*l]).collect();
            DpoSample::new(table, &params.theta, indices[prefs.winner], losers).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(samples.into_iter().flatten().collect())
}

fn mean_dpo(samples: &[DpoSample], theta: &[f64], beta: f64) -> Result<(f64, [f64; POLICY_DIM])> {
    let parts = samples
        .par_iter()
        .map(|s| s.loss_and_gradient(theta, beta))
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut grad = [0.0; POLICY_DIM];
    for (l, g) in parts {
        loss += l;
        for k in 0..POLICY_DIM {
            grad[k] += g[k];
        }
    }
    Ok((loss, grad))
}

fn diverged(epoch: usize, message: impl Into<String>) -> Error {
    Error::Training {
        epoch,
        message: message.into(),
    }
}

/// Run the full training loop. History metrics are computed exactly on
/// `eval_contexts` after every epoch.
pub fn run_irpo(
    setting: &Setting,
    cfg: &IrpoConfig,
    seed: u64,
    eval_contexts: &[AuctionContext],
) -> Result<IrpoOutcome> {
    cfg.validate()?;
    let contexts = training_contexts(setting, cfg.train_contexts, seed);
    let mut params = PolicyParams::zeros(setting.scenario.max_bid().max(1.0));
    let mut pctr = PctrModel::zeros(cfg.pctr_features);
    let mut history = TrainingHistory::default();
    let mut snapshots = vec![params.clone()];
    let mut pctr_snapshots = Vec::new();

    for epoch in 1..=cfg.epochs {
        let data = collect_clicks(setting, cfg, &params, &contexts, seed, epoch)?;
        let (bce, bce_trace) = if data.is_empty() {
            (0.0, Vec::new())
        } else {
            let fit = train_pctr(&pctr, &data, cfg.pctr_learning_rate, cfg.pctr_steps)
                .map_err(|e| diverged(epoch, e.to_string()))?;
            pctr = fit.model;
            (*fit.loss_trace.last().expect("trace is never empty"), fit.loss_trace)
        };
        pctr.version = epoch as u64;

        let samples = collect_preferences(setting, cfg, &params, &pctr, &contexts, seed, epoch)?;
        let scale = cfg.dpo.learning_rate / contexts.len() as f64;
        let mut theta = params.theta.clone();
        for step in 0..cfg.dpo.steps_per_epoch {
            if samples.is_empty() || cfg.dpo.learning_rate == 0.0 {
                break;
            }
            let (loss, grad) = mean_dpo(&samples, &theta, cfg.dpo.beta)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(epoch, format!("non-finite preference loss at step {step}")));
            }
            for k in 0..POLICY_DIM {
                theta[k] -= scale * grad[k];
            }
        }
        let dpo_loss = if samples.is_empty() {
            0.0
        } else {
            mean_dpo(&samples, &theta, cfg.dpo.beta)?.0 / samples.len() as f64
        };
        if !dpo_loss.is_finite() || theta.iter().any(|t| !t.is_finite()) {
            return Err(diverged(epoch, "non-finite policy parameters"));
        }
        params.theta = theta;

        let m = policy_metrics(setting, &params, &pctr, eval_contexts)?;
        history.records.push(EpochRecord {
            epoch,
            bce,
            bce_trace,
            dpo_loss,
            oracle_reward_per_query: m.oracle_reward_per_query,
            revenue_per_query: m.revenue_per_query,
            unbiasedness_gap: m.unbiasedness_gap,
            preference_samples: samples.len(),
            click_rows: data.len(),
        });
        snapshots.push(params.clone());
        pctr_snapshots.push(pctr.clone());
    }

    Ok(IrpoOutcome {
        policy: params,
        pctr,
        history,
        snapshots,
        pctr_snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::user_model::sample_context;

    fn small() -> IrpoConfig {
        IrpoConfig {
            epochs: 1,
            train_contexts: 40,
            pctr_steps: 50,
            dpo: DpoConfig {
                steps_per_epoch: 20,
                ..DpoConfig::default()
            },
            ..IrpoConfig::default()
        }
    }

    fn eval(setting: &Setting) -> Vec<AuctionContext> {
        let mut rng = rng_for(99, &[]);
        (0..10).map(|_| sample_context(&mut rng, &setting.scenario)).collect()
    }

    #[test]
    fn zero_learning_rate_freezes_policy_but_not_pctr() {
        let setting = Setting::desk();
        let mut cfg = small();
        cfg.dpo.learning_rate = 0.0;
        let out = run_irpo(&setting, &cfg, 1, &eval(&setting)).unwrap();
        assert_eq!(out.policy, PolicyParams::zeros(100.0));
        assert!(out.pctr.weights.iter().any(|w| *w != 0.0));
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn history_has_one_row_per_epoch() {
        let setting = Setting::desk();
        let cfg = IrpoConfig { epochs: 2, ..small() };
        let out = run_irpo(&setting, &cfg, 2, &eval(&setting)).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.snapshots.len(), 3);
        let mut buf = Vec::new();
        out.history.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,bce,dpo_loss,oracle_reward_per_query,revenue_per_query,unbiasedness_gap"
        );
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn runs_are_reproducible() {
        let setting = Setting::desk();
        let a = run_irpo(&setting, &small(), 3, &eval(&setting)).unwrap();
        let b = run_irpo(&setting, &small(), 3, &eval(&setting)).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn reference_reset_gives_ln2_at_epoch_start() {
        let setting = Setting::desk();
        let params = PolicyParams::new(vec![1.0, 2.0, -0.5, 0.3, 0.1, -1.0, -0.2], 100.0).unwrap();
        let pctr = PctrModel::from_user_model(&setting.scenario.user_model);
        let contexts = training_contexts(&setting, 30, 4);
        let samples = collect_preferences(&setting, &small(), &params, &pctr, &contexts, 4, 1).unwrap();
        assert!(!samples.is_empty());
        for s in &samples {
            let (loss, _) = s.loss_and_gradient(&params.theta, 1.0).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(IrpoConfig { epochs: 0, ..IrpoConfig::default() }.validate().is_err());
        let mut c = IrpoConfig::default();
        c.dpo.m_samples = 1;
        assert!(c.validate().is_err());
        let mut c = IrpoConfig::default();
        c.dpo.beta = 0.0;
        assert!(c.validate().is_err());
    }
}
