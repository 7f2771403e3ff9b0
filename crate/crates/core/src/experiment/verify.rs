//! The property suite: hard checks on the exact optimal allocation and soft,
//! reported checks on a trained policy.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{bid_grid, best_response, ic_regret, um_utility, vm_objective, AgentSpec, AuctionEnv};
use crate::error::Result;
use crate::irpo::{run_irpo, TrainingHistory};
use crate::properties::{
    bid_click_curve, continuity_sweep, monotonicity_sweep, optimality_perturbation_test, refinement_check,
    BidClickCurve, RefinementCheck, StepAllocation, FLAT_JUMP, OPTIMALITY_SLACK,
};
use crate::seeding::{rng_for, stream};
use crate::setting::Setting;
use crate::user_model::sample_context;
use crate::CODE_VERSION;

use super::compare::{test_contexts, write_json};
use super::config::ExperimentConfig;

/// Absolute slack of the value-maximizer comparisons.
pub const VM_SLACK: f64 = 1e-9;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Hard checks decide the exit status; soft ones are only reported.
    pub hard: bool,
    pub pass: bool,
    pub environments: usize,
    pub failures: usize,
    /// Check-specific worst statistic, described by `detail`.
    pub worst: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub negative_control: bool,
    pub checks: Vec<CheckResult>,
    /// Bid/click rank correlation before training and after every epoch.
    pub spearman_per_epoch: Vec<f64>,
    pub unbiasedness_gap_per_epoch: Vec<f64>,
}

impl PropertyReport {
    pub fn hard_pass(&self) -> bool {
        self.checks.iter().filter(|c| c.hard).all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Everything produced by a verification run.
#[derive(Debug, Clone)]
pub struct PropertyOutcome {
    pub report: PropertyReport,
    pub history: TrainingHistory,
    monotonicity_curve: Vec<u8>,
    continuity_curve: Vec<u8>,
    bid_click_curves: Vec<BidClickCurve>,
}

impl PropertyOutcome {
    /// Write `properties.json`, `history.csv` and `curves/*.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let curves = dir.join("curves");
        fs::create_dir_all(&curves)?;
        write_json(&dir.join("properties.json"), &self.report)?;
        self.history.write_csv(fs::File::create(dir.join("history.csv"))?)?;
        fs::write(curves.join("monotonicity.csv"), &self.monotonicity_curve)?;
        fs::write(curves.join("continuity.csv"), &self.continuity_curve)?;
        let mut w = csv::Writer::from_writer(fs::File::create(curves.join("bid_clicks.csv"))?);
        w.write_record(["epoch", "bid", "clicks"])?;
        for (epoch, c) in self.bid_click_curves.iter().enumerate() {
            for (b, n) in c.bids.iter().zip(&c.clicks) {
                w.write_record([epoch.to_string(), b.to_string(), n.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// The `index`-th verification environment: a sampled context under the
/// true click model with a randomly chosen focal ad.
pub fn verification_env(setting: &Setting, seed: u64, index: usize) -> Result<AuctionEnv> {
    let mut rng = rng_for(seed, &[stream::VERIFY, 0, index as u64]);
    let context = sample_context(&mut rng, &setting.scenario);
    let focal = rng.gen_range(0..context.n_ads());
    AuctionEnv::new(
        &context,
        &setting.space,
        &setting.base,
        &setting.scenario.user_model,
        &setting.mech,
        focal,
    )
}

/// A value maximizer with value in `[10, 100)` and target ROI in `[1, 3)`.
pub fn verification_vm_agent(seed: u64, index: usize) -> AgentSpec {
    let mut rng = rng_for(seed, &[stream::VERIFY, 1, index as u64]);
    let value = rng.gen_range(10.0..100.0);
    let roi = rng.gen_range(1.0..3.0);
    AgentSpec::vm(value, roi)
}

/// The step allocation used as the continuity negative control. Its
/// threshold sits in the middle of the bid range, off both sweep grids.
pub fn step_negative_control(b_min: f64, b_max: f64, delta: f64) -> StepAllocation {
    let threshold = 0.5 * (b_min + b_max) + 0.25 * delta;
    StepAllocation {
        ctr: 0.3,
        competitor_score: 0.3 * threshold,
    }
}

/// Distance of the refinement ratio from 1/2, 0 for flat curves.
fn ratio_distance(r: &RefinementCheck) -> f64 {
    if r.coarse_max_jump < FLAT_JUMP {
        0.0
    } else {
        (r.ratio - 0.5).abs()
    }
}

struct Tally {
    failures: usize,
    worst: f64,
}

fn tally(items: Vec<(bool, f64)>) -> Tally {
    Tally {
        failures: items.iter().filter(|(ok, _)| !ok).count(),
        worst: items.iter().map(|(_, w)| *w).fold(0.0, f64::max),
    }
}

fn hard(name: &str, environments: usize, t: Tally, detail: &str) -> CheckResult {
    CheckResult {
        name: name.into(),
        hard: true,
        pass: t.failures == 0,
        environments,
        failures: t.failures,
        worst: t.worst,
        detail: detail.into(),
    }
}

/// Exact optimality of the closed-form policy on one environment.
pub fn check_optimality(setting: &Setting, cfg: &ExperimentConfig, index: usize) -> Result<(bool, f64)> {
    let mut rng = rng_for(cfg.seed, &[stream::VERIFY, 2, index as u64]);
    let context = sample_context(&mut rng, &setting.scenario);
    let r = optimality_perturbation_test(
        &context,
        &setting.space,
        &setting.base,
        &setting.scenario.user_model,
        &setting.mech,
        cfg.verify.perturbation_trials,
        cfg.verify.perturbation_magnitude,
        &mut rng,
    )?;
    let ok = r.pass && r.log_partition_error <= OPTIMALITY_SLACK;
    Ok((ok, r.worst_gap.max(r.log_partition_error)))
}

/// Incentive and participation checks for a value maximizer, plus
/// participation of a utility maximizer with the same value.
pub fn check_vm_incentives(env: &AuctionEnv, agent: &AgentSpec, grid: &[f64], step: f64) -> Result<(bool, f64)> {
    let target = agent.truthful_bid();
    let expected = (target / step + 1e-9).floor() * step;
    let (br, _) = best_response(env, agent, grid)?;
    let at_target = vm_objective(env, agent, target);
    let mut worst: f64 = (br - expected).abs();
    let mut ok = (br - expected).abs() <= 1e-9 && (br - target).abs() <= step && at_target.feasible;
    for &b in grid {
        let o = vm_objective(env, agent, b);
        if o.feasible {
            let excess = o.value - at_target.value;
            worst = worst.max(excess);
            ok &= excess <= VM_SLACK;
        }
    }
    // Expected payment at the truthful bid never exceeds expected value.
    let x = env.itctr(target);
    ok &= target * x <= agent.value * x + VM_SLACK;
    ok &= ic_regret(env, agent, grid)? <= VM_SLACK;
    let um = AgentSpec::um(agent.value);
    ok &= um_utility(env, &um, um.value) == 0.0 && um_utility(env, &um, 0.0) >= 0.0;
    Ok((ok, worst))
}

/// Run the property suite. With `negative_control` the continuity check is
/// pointed at a step allocation and must fail.
pub fn verify_properties(cfg: &ExperimentConfig, negative_control: bool) -> Result<PropertyOutcome> {
    cfg.validate()?;
    let setting = cfg.setting()?;
    let v = &cfg.verify;
    let n = v.environments;
    let envs = (0..n)
        .into_par_iter()
        .map(|e| verification_env(&setting, cfg.seed, e))
        .collect::<Result<Vec<_>>>()?;
    let mut checks = Vec::new();

    let opt = (0..n)
        .into_par_iter()
        .map(|e| check_optimality(&setting, cfg, e))
        .collect::<Result<Vec<_>>>()?;
    checks.push(hard("optimality", n, tally(opt), "largest objective gain over the optimum or log-partition error"));

    let grid = bid_grid(v.bid_min, v.bid_max, v.grid_step);
    let mono = envs
        .par_iter()
        .map(|env| monotonicity_sweep(env, &grid).map(|r| (r.pass(), r.max_violation)))
        .collect::<Result<Vec<_>>>()?;
    checks.push(hard("monotonicity", n, tally(mono), "largest ITCTR decrease"));

    let control = step_negative_control(v.bid_min, v.bid_max, v.continuity_delta);
    let cont = if negative_control {
        let r = refinement_check(&control, v.bid_min, v.bid_max, v.continuity_delta)?;
        vec![(r.pass, ratio_distance(&r))]
    } else {
        envs.par_iter()
            .map(|env| refinement_check(env, v.bid_min, v.bid_max, v.continuity_delta).map(|r| (r.pass, ratio_distance(&r))))
            .collect::<Result<Vec<_>>>()?
    };
    let cont_n = cont.len();
    checks.push(hard("continuity", cont_n, tally(cont), "largest distance of the refinement ratio from 1/2"));

    let vm_grid = bid_grid(0.0, v.bid_max, v.grid_step);
    let vm = envs
        .par_iter()
        .enumerate()
        .map(|(e, env)| check_vm_incentives(env, &verification_vm_agent(cfg.seed, e), &vm_grid, v.grid_step))
        .collect::<Result<Vec<_>>>()?;
    checks.push(hard("vm_incentives", n, tally(vm), "largest best-response offset or value excess"));

    // Soft checks on a trained policy.
    let contexts = test_contexts(&setting, cfg.evaluation.test_contexts, cfg.seed);
    let training = run_irpo(&setting, &cfg.irpo, cfg.seed, &contexts)?;
    let curves = training
        .snapshots
        .iter()
        .map(|p| bid_click_curve(&setting, p, &contexts, &v.probe_bids, v.probe_replicates, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let spearman: Vec<f64> = curves.iter().map(|c| c.spearman).collect();
    let last = *spearman.last().expect("at least the initial snapshot");
    let rising = spearman.windows(2).all(|w| w[1] >= w[0]);
    checks.push(CheckResult {
        name: "bid_click_correlation".into(),
        hard: false,
        pass: last >= 0.9 && rising,
        environments: contexts.len(),
        failures: usize::from(!(last >= 0.9 && rising)),
        worst: last,
        detail: "final-epoch Spearman correlation; pass needs >= 0.9 and no decrease across epochs".into(),
    });
    let gaps: Vec<f64> = training.history.records.iter().map(|r| r.unbiasedness_gap).collect();

    let mut mono_curve = Vec::new();
    let mut cont_curve = Vec::new();
    monotonicity_sweep(&envs[0], &grid)?.write_csv(&mut mono_curve)?;
    if negative_control {
        continuity_sweep(&control, v.bid_min, v.bid_max, v.continuity_delta)?.write_csv(&mut cont_curve)?;
    } else {
        continuity_sweep(&envs[0], v.bid_min, v.bid_max, v.continuity_delta)?.write_csv(&mut cont_curve)?;
    }

    Ok(PropertyOutcome {
        report: PropertyReport {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            code_version: CODE_VERSION.to_string(),
            negative_control,
            checks,
            spearman_per_epoch: spearman,
            unbiasedness_gap_per_epoch: gaps,
        },
        history: training.history,
        monotonicity_curve: mono_curve,
        continuity_curve: cont_curve,
        bid_click_curves: curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::with_seed(seed);
        cfg.verify.environments = 4;
        cfg.verify.perturbation_trials = 50;
        cfg.verify.probe_replicates = 2;
        cfg.irpo.epochs = 1;
        cfg.irpo.train_contexts = 40;
        cfg.irpo.pctr_steps = 50;
        cfg.irpo.dpo.steps_per_epoch = 20;
        cfg.evaluation.test_contexts = 10;
        cfg
    }

    #[test]
    fn hard_checks_pass_on_the_exact_optimum() {
        let out = verify_properties(&quick(1), false).unwrap();
        assert!(out.report.hard_pass(), "{:#?}", out.report.checks);
        assert_eq!(out.report.spearman_per_epoch.len(), 2);
        assert_eq!(out.report.unbiasedness_gap_per_epoch.len(), 1);
    }

    #[test]
    fn negative_control_fails_continuity_only() {
        let out = verify_properties(&quick(2), true).unwrap();
        assert!(!out.report.hard_pass());
        for c in out.report.checks.iter().filter(|c| c.hard) {
            assert_eq!(c.pass, c.name != "continuity", "{c:?}");
        }
    }

    #[test]
    fn writes_curves() {
        let dir = tempfile::tempdir().unwrap();
        verify_properties(&quick(3), false).unwrap().write(dir.path()).unwrap();
        let mono = fs::read_to_string(dir.path().join("curves/monotonicity.csv")).unwrap();
        assert!(mono.starts_with("bid,itctr\n"));
        assert_eq!(mono.lines().count(), 101);
        let cont = fs::read_to_string(dir.path().join("curves/continuity.csv")).unwrap();
        assert!(cont.starts_with("bid,jump\n"));
        let clicks = fs::read_to_string(dir.path().join("curves/bid_clicks.csv")).unwrap();
        assert!(clicks.starts_with("epoch,bid,clicks\n"));
        assert!(dir.path().join("properties.json").exists());
        assert!(dir.path().join("history.csv").exists());
    }

    #[test]
    fn step_control_threshold_is_off_grid() {
        let s = step_negative_control(1.0, 100.0, 0.02);
        let r = refinement_check(&s, 1.0, 100.0, 0.02).unwrap();
        assert!(!r.pass);
        assert!((r.ratio - 1.0).abs() < 1e-12);
    }
}
