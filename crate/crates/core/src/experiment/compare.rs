//! Mechanism comparison on held-out contexts.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctr_model::PctrModel;
use crate::domain::{AuctionContext, PolicyDistribution, ResponseOutcome};
use crate::error::Result;
use crate::irpo::{mosaic_select, run_irpo, FeatureTable, IrpoOutcome, PolicyParams};
use crate::mechanism::{generate, kl_divergence_log, optimal_policy_tilted, realized_payment, response_reward};
use crate::seeding::{rng_for, stream};
use crate::setting::Setting;
use crate::user_model::{sample_clicks, sample_context};
use crate::CODE_VERSION;

use super::config::{CtrSourceKind, ExperimentConfig};

/// Mechanisms in report order.
pub const MECHANISMS: [&str; 4] = ["pretrained", "mosaic", "irpo", "oracle"];

/// One mechanism's averages over the test queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismRow {
    pub mechanism: String,
    /// Mean first-price payment from simulated clicks.
    pub revenue_per_query: f64,
    /// Reward under the configured headline click model.
    pub reward_per_query: f64,
    pub reward_per_query_pctr: f64,
    pub reward_per_query_oracle: f64,
    pub clicks_per_query: f64,
    pub mean_n_ads: f64,
    pub format_error_rate: f64,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
}

/// Mean exact KL divergence to the true-click optimum over the test queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlSummary {
    pub pretrained: f64,
    pub trained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub impressions_per_query: usize,
    pub rows: Vec<MechanismRow>,
    pub kl_to_optimum: KlSummary,
    /// Exact mean per-ad unbiasedness gap after the final epoch.
    pub final_unbiasedness_gap: f64,
}

impl MetricsReport {
    pub fn row(&self, mechanism: &str) -> Option<&MechanismRow> {
        self.rows.iter().find(|r| r.mechanism == mechanism)
    }

    pub fn revenue(&self, mechanism: &str) -> f64 {
        self.row(mechanism).map_or(f64::NAN, |r| r.revenue_per_query)
    }
}

/// Result of a full comparison run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub training: IrpoOutcome,
}

impl ExperimentOutcome {
    /// Write `metrics.json` and `history.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("metrics.json"), &self.report)?;
        self.training.history.write_csv(fs::File::create(dir.join("history.csv"))?)?;
        Ok(())
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Held-out contexts with their own freshly drawn bids.
pub fn test_contexts(setting: &Setting, n: usize, seed: u64) -> Vec<AuctionContext> {
    let mut rng = rng_for(seed, &[stream::TEST_CONTEXTS]);
    (0..n).map(|_| sample_context(&mut rng, &setting.scenario)).collect()
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    revenue: f64,
    reward_pctr: f64,
    reward_oracle: f64,
    clicks: f64,
    n_ads: f64,
    format_errors: f64,
}

impl Tally {
    fn add(&mut self, other: &Tally) {
        self.revenue += other.revenue;
        self.reward_pctr += other.reward_pctr;
        self.reward_oracle += other.reward_oracle;
        self.clicks += other.clicks;
        self.n_ads += other.n_ads;
        self.format_errors += other.format_errors;
    }

    fn scaled(&self, by: f64) -> Tally {
        Tally {
            revenue: self.revenue / by,
            reward_pctr: self.reward_pctr / by,
            reward_oracle: self.reward_oracle / by,
            clicks: self.clicks / by,
            n_ads: self.n_ads / by,
            format_errors: self.format_errors / by,
        }
    }
}

struct Evaluated {
    tallies: [Tally; 4],
    kl: [f64; 2],
}

fn evaluate_context(
    setting: &Setting,
    cfg: &ExperimentConfig,
    policy: &PolicyParams,
    pctr: &PctrModel,
    context: &AuctionContext,
    k: usize,
) -> Result<Evaluated> {
    let truth = &setting.scenario.user_model;
    let fer = setting.base.format_error_rate;
    let trained = FeatureTable::new(context, &setting.space, &setting.base, policy.bid_scale)?.distribution(&policy.theta)?;
    let tilted = optimal_policy_tilted(context, &setting.space, &setting.base, truth, &setting.mech)?;
    let base = setting.base.distribution();
    // The optimum can underflow to exact zeros, so the divergence uses its
    // log-probabilities.
    let kl = [
        kl_divergence_log(base.probs(), &tilted.log_probs)?,
        kl_divergence_log(trained.probs(), &tilted.log_probs)?,
    ];
    let oracle = tilted.distribution;

    let mut tallies = [Tally::default(); 4];
    for r in 0..cfg.evaluation.impressions_per_query {
        for (j, tally) in tallies.iter_mut().enumerate() {
            // The same stream for every mechanism keeps the comparison paired.
            let mut rng = rng_for(cfg.seed, &[stream::EVALUATION, k as u64, r as u64]);
            let draw = |pi: &PolicyDistribution, rng: &mut _| generate(rng, &setting.space, pi, fer).1;
            let y: ResponseOutcome = match j {
                0 => draw(base, &mut rng),
                1 => mosaic_select(
                    &setting.base,
                    context,
                    &setting.space,
                    pctr,
                    &setting.mech.reward,
                    cfg.evaluation.mosaic_m,
                    &mut rng,
                )?,
                2 => draw(&trained, &mut rng),
                _ => draw(&oracle, &mut rng),
            };
            let clicks = sample_clicks(&mut rng, truth, context, &y)?;
            tally.add(&Tally {
                revenue: realized_payment(&clicks, context.bids()).iter().sum(),
                reward_pctr: response_reward(context, &y, pctr, &setting.mech.reward)?,
                reward_oracle: response_reward(context, &y, truth, &setting.mech.reward)?,
                clicks: clicks.n_clicks() as f64,
                n_ads: y.n_ads() as f64,
                format_errors: if y.format_error() { 1.0 } else { 0.0 },
            });
        }
    }
    let per = cfg.evaluation.impressions_per_query as f64;
    Ok(Evaluated {
        tallies: tallies.map(|t| t.scaled(per)),
        kl,
    })
}

/// Evaluate the four mechanisms on `contexts` given a trained policy and
/// pCTR model.
pub fn compare_mechanisms(
    setting: &Setting,
    cfg: &ExperimentConfig,
    policy: &PolicyParams,
    pctr: &PctrModel,
    contexts: &[AuctionContext],
    final_gap: f64,
) -> Result<MetricsReport> {
    let per_context = contexts
        .par_iter()
        .enumerate()
        .map(|(k, c)| evaluate_context(setting, cfg, policy, pctr, c, k))
        .collect::<Result<Vec<_>>>()?;
    let n = contexts.len() as f64;
    let mut totals = [Tally::default(); 4];
    let mut kl = [0.0; 2];
    for e in &per_context {
        for j in 0..4 {
            totals[j].add(&e.tallies[j]);
        }
        kl[0] += e.kl[0];
        kl[1] += e.kl[1];
    }
    let hash = cfg.hash();
    let rows = MECHANISMS
        .iter()
        .zip(totals)
        .map(|(name, t)| {
            let t = t.scaled(n);
            MechanismRow {
                mechanism: name.to_string(),
                revenue_per_query: t.revenue,
                reward_per_query: match cfg.evaluation.metrics_ctr_source {
                    CtrSourceKind::Oracle => t.reward_oracle,
                    CtrSourceKind::Pctr => t.reward_pctr,
                },
                reward_per_query_pctr: t.reward_pctr,
                reward_per_query_oracle: t.reward_oracle,
                clicks_per_query: t.clicks,
                mean_n_ads: t.n_ads,
                format_error_rate: t.format_errors,
                seed: cfg.seed,
                config_hash: hash.clone(),
                code_version: CODE_VERSION.to_string(),
            }
        })
        .collect();
    Ok(MetricsReport {
        seed: cfg.seed,
        config_hash: hash,
        code_version: CODE_VERSION.to_string(),
        impressions_per_query: cfg.evaluation.impressions_per_query,
        rows,
        kl_to_optimum: KlSummary {
            pretrained: kl[0] / n,
            trained: kl[1] / n,
        },
        final_unbiasedness_gap: final_gap,
    })
}

/// Train on the training contexts, then compare all mechanisms on freshly
/// sampled test contexts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let setting = cfg.setting()?;
    let contexts = test_contexts(&setting, cfg.evaluation.test_contexts, cfg.seed);
    let training = run_irpo(&setting, &cfg.irpo, cfg.seed, &contexts)?;
    let final_gap = training.history.records.last().map_or(0.0, |r| r.unbiasedness_gap);
    let report = compare_mechanisms(&setting, cfg, &training.policy, &training.pctr, &contexts, final_gap)?;
    Ok(ExperimentOutcome { report, training })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::user_model::BidDistribution;

    fn quick(seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::with_seed(seed);
        cfg.irpo.epochs = 1;
        cfg.irpo.train_contexts = 40;
        cfg.irpo.pctr_steps = 50;
        cfg.irpo.dpo.steps_per_epoch = 20;
        cfg.evaluation.test_contexts = 10;
        cfg.evaluation.impressions_per_query = 3;
        cfg
    }

    #[test]
    fn report_has_four_rows_with_provenance() {
        let cfg = quick(5);
        let out = run_experiment(&cfg).unwrap();
        let names: Vec<_> = out.report.rows.iter().map(|r| r.mechanism.as_str()).collect();
        assert_eq!(names, MECHANISMS);
        for r in &out.report.rows {
            assert!(r.revenue_per_query >= 0.0);
            assert_eq!(r.seed, 5);
            assert_eq!(r.config_hash, cfg.hash());
            assert_eq!(r.reward_per_query, r.reward_per_query_oracle);
        }
    }

    #[test]
    fn zero_bids_give_zero_revenue() {
        let mut cfg = quick(6);
        cfg.scenario.bid_distribution = BidDistribution::UniformInt { low: 0, high: 0 };
        let out = run_experiment(&cfg).unwrap();
        for r in &out.report.rows {
            assert_eq!(r.revenue_per_query, 0.0, "{}", r.mechanism);
        }
    }

    #[test]
    fn outputs_are_reproducible() {
        let cfg = quick(7);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_experiment(&cfg).unwrap().write(a.path()).unwrap();
        run_experiment(&cfg).unwrap().write(b.path()).unwrap();
        for f in ["metrics.json", "history.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
}
