//! Numerical verifiers for the allocation properties: monotonicity and
//! continuity in one's own bid, optimality of the closed-form policy,
//! unbiasedness of the click model, and the bid/click rank correlation of a
//! trained policy.

use std::io::Write;

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::AuctionEnv;
use crate::ctr_model::{ClickModel, PctrModel};
use crate::domain::{AuctionContext, PolicyDistribution, ResponseSpace};
use crate::error::{invalid, Result};
use crate::irpo::{FeatureTable, PolicyParams};
use crate::mechanism::{generate, objective_from_rewards, tilt, BasePolicy, MechanismConfig, ScoredSpace};
use crate::seeding::{rng_for, stream};
use crate::setting::Setting;
use crate::user_model::sample_clicks;

/// Decreases smaller than this are floating-point noise.
pub const MONOTONICITY_SLACK: f64 = 1e-9;
/// Accepted range of `fine / coarse` maximum jump when the step halves.
pub const REFINEMENT_BAND: (f64, f64) = (0.4, 0.6);
/// Below this maximum jump a curve counts as flat.
pub const FLAT_JUMP: f64 = 1e-12;
/// Objective slack in the optimality test.
pub const OPTIMALITY_SLACK: f64 = 1e-10;

/// ITCTR of one ad as a function of its own bid.
pub trait BidAllocation: Sync {
    fn itctr_at(&self, bid: f64) -> f64;
}

impl BidAllocation for AuctionEnv {
    fn itctr_at(&self, bid: f64) -> f64 {
        self.itctr(bid)
    }
}

/// A single slot won by the highest score `bid·ctr`: the ad is shown with
/// click rate `ctr` exactly when its score reaches the competitor's.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepAllocation {
    pub ctr: f64,
    pub competitor_score: f64,
}

impl BidAllocation for StepAllocation {
    fn itctr_at(&self, bid: f64) -> f64 {
        if bid * self.ctr >= self.competitor_score {
            self.ctr
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub bids: Vec<f64>,
    pub itctr: Vec<f64>,
    pub violations: usize,
    /// Largest decrease between consecutive grid points, 0 if none.
    pub max_violation: f64,
}

impl MonotonicityReport {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_curve(writer, ["bid", "itctr"], &self.bids, &self.itctr)
    }
}

fn write_curve<W: Write>(writer: W, header: [&str; 2], xs: &[f64], ys: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    for (x, y) in xs.iter().zip(ys) {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn check_ascending(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return invalid("bid grid must be non-empty and strictly ascending");
    }
    Ok(())
}

/// ITCTR along an ascending bid grid, with every decrease beyond
/// [`MONOTONICITY_SLACK`] counted as a violation.
pub fn monotonicity_sweep(alloc: &impl BidAllocation, grid: &[f64]) -> Result<MonotonicityReport> {
    check_ascending(grid)?;
    let itctr: Vec<f64> = grid.par_iter().map(|b| alloc.itctr_at(*b)).collect();
    let drops: Vec<f64> = itctr.windows(2).map(|w| w[0] - w[1]).collect();
    Ok(MonotonicityReport {
        bids: grid.to_vec(),
        violations: drops.iter().filter(|d| **d > MONOTONICITY_SLACK).count(),
        max_violation: drops.iter().copied().fold(0.0, f64::max),
        itctr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuitySweep {
    pub delta: f64,
    /// Right end of each step.
    pub bids: Vec<f64>,
    pub jumps: Vec<f64>,
    pub max_jump: f64,
}

impl ContinuitySweep {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_curve(writer, ["bid", "jump"], &self.bids, &self.jumps)
    }
}

/// Absolute ITCTR changes between neighbours of the grid
/// `b_min, b_min+δ, …, b_max`.
pub fn continuity_sweep(alloc: &impl BidAllocation, b_min: f64, b_max: f64, delta: f64) -> Result<ContinuitySweep> {
    if !(delta > 0.0) || !(b_max > b_min) {
        return invalid("need delta > 0 and b_max > b_min");
    }
    let n = ((b_max - b_min) / delta).round() as usize;
    let grid: Vec<f64> = (0..=n).map(|k| b_min + k as f64 * delta).collect();
    let values: Vec<f64> = grid.par_iter().map(|b| alloc.itctr_at(*b)).collect();
    let jumps: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    Ok(ContinuitySweep {
        delta,
        bids: grid[1..].to_vec(),
        max_jump: jumps.iter().copied().fold(0.0, f64::max),
        jumps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementCheck {
    pub coarse_max_jump: f64,
    pub fine_max_jump: f64,
    pub ratio: f64,
    pub pass: bool,
}

/// Compare the largest jump at step `delta` with the one at `delta/2`. A
/// continuous, piecewise smooth curve roughly halves it; a step function
/// does not. Flat curves pass.
pub fn refinement_check(alloc: &impl BidAllocation, b_min: f64, b_max: f64, delta: f64) -> Result<RefinementCheck> {
    let coarse = continuity_sweep(alloc, b_min, b_max, delta)?.max_jump;
    let fine = continuity_sweep(alloc, b_min, b_max, delta / 2.0)?.max_jump;
    if coarse < FLAT_JUMP {
        return Ok(RefinementCheck {
            coarse_max_jump: coarse,
            fine_max_jump: fine,
            ratio: 0.0,
            pass: fine < FLAT_JUMP,
        });
    }
    let ratio = fine / coarse;
    Ok(RefinementCheck {
        coarse_max_jump: coarse,
        fine_max_jump: fine,
        ratio,
        pass: (REFINEMENT_BAND.0..=REFINEMENT_BAND.1).contains(&ratio),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub pass: bool,
    /// Largest `objective(π) − objective(π*)` over all trials.
    pub worst_gap: f64,
    /// `|objective(π*) − β·log Z|`.
    pub log_partition_error: f64,
    pub trials: usize,
}

fn dirichlet<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

/// Compare the closed-form optimum with random alternatives. Even trials mix
/// π* with a uniform Dirichlet draw at weight `magnitude·u`, odd trials use
/// the Dirichlet draw alone.
#[allow(clippy::too_many_arguments)]
pub fn optimality_perturbation_test<R: Rng + ?Sized>(
    context: &AuctionContext,
    space: &ResponseSpace,
    base: &BasePolicy,
    model: &impl ClickModel,
    mech: &MechanismConfig,
    trials: usize,
    magnitude: f64,
    rng: &mut R,
) -> Result<PerturbationReport> {
    if trials == 0 {
        return invalid("need at least one trial");
    }
    if !(0.0..=1.0).contains(&magnitude) {
        return invalid("magnitude must lie in [0,1]");
    }
    let rewards = ScoredSpace::new(context, space, model, &mech.reward)?.rewards(context.bids().as_slice());
    let opt = tilt(base.log_probs(), &rewards, mech.beta)?;
    let best = objective_from_rewards(&opt.distribution, &rewards, base, mech.beta)?;
    let mut worst_gap: f64 = 0.0;
    for t in 0..trials {
        let d = dirichlet(rng, space.len());
        let probs: Vec<f64> = if t % 2 == 0 {
            let eps = magnitude * rng.gen::<f64>();
            opt.distribution
                .probs()
                .iter()
                .zip(&d)
                .map(|(p, q)| (1.0 - eps) * p + eps * q)
                .collect()
        } else {
            d
        };
        let pi = PolicyDistribution::renormalized(probs)?;
        let value = objective_from_rewards(&pi, &rewards, base, mech.beta)?;
        worst_gap = worst_gap.max(value - best);
    }
    let log_partition_error = (best - mech.beta * opt.log_partition).abs();
    Ok(PerturbationReport {
        pass: worst_gap <= OPTIMALITY_SLACK,
        worst_gap,
        log_partition_error,
        trials,
    })
}

/// Per-ad `|E_π[pctr_i·1{i∈y}] − E_π[ctr_i·1{i∈y}]|`.
pub fn unbiasedness_gap(
    policy: &PolicyDistribution,
    context: &AuctionContext,
    space: &ResponseSpace,
    pctr: &PctrModel,
    truth: &impl ClickModel,
) -> Result<Vec<f64>> {
    if policy.len() != space.len() {
        return invalid("policy does not match the response space");
    }
    let cfg = Default::default();
    let a = ScoredSpace::new(context, space, pctr, &cfg)?.itctr_all(policy);
    let b = ScoredSpace::new(context, space, truth, &cfg)?.itctr_all(policy);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect())
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation. Returns 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return invalid("spearman needs two samples of equal length >= 2");
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Clicks received by a perturbed ad at each bid level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidClickCurve {
    pub bids: Vec<f64>,
    pub clicks: Vec<u64>,
    pub spearman: f64,
}

/// Perturb the bid of one randomly chosen ad per context across
/// `bid_levels`, deploy `params` for `replicates` impressions at each level
/// and count that ad's clicks. Random numbers are shared across levels and
/// across calls with the same seed, so curves of different policies are
/// directly comparable.
pub fn bid_click_curve(
    setting: &Setting,
    params: &PolicyParams,
    contexts: &[AuctionContext],
    bid_levels: &[f64],
    replicates: usize,
    seed: u64,
) -> Result<BidClickCurve> {
    let per_context = contexts
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let focal = rng_for(seed, &[stream::BID_PROBE, k as u64]).gen_range(0..c.n_ads());
            bid_levels
                .iter()
                .map(|&b| {
                    let perturbed = c.with_bid(focal, b)?;
                    let table = FeatureTable::new(&perturbed, &setting.space, &setting.base, params.bid_scale)?;
                    let pi = table.distribution(&params.theta)?;
                    let mut clicks = 0u64;
                    for r in 0..replicates {
                        let mut rng = rng_for(seed, &[stream::BID_PROBE, k as u64, r as u64]);
                        let (_, y) = generate(&mut rng, &setting.space, &pi, setting.base.format_error_rate);
                        let rec = sample_clicks(&mut rng, &setting.scenario.user_model, &perturbed, &y)?;
                        clicks += u64::from(rec.clicked(focal));
                    }
                    Ok(clicks)
                })
                .collect::<Result<Vec<u64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let clicks: Vec<u64> = (0..bid_levels.len())
        .map(|j| per_context.iter().map(|v| v[j]).sum())
        .collect();
    let as_f64: Vec<f64> = clicks.iter().map(|c| *c as f64).collect();
    Ok(BidClickCurve {
        bids: bid_levels.to_vec(),
        spearman: spearman(bid_levels, &as_f64)?,
        clicks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::bid_grid;
    use crate::user_model::{sample_context, UserModelParams};

    fn env(seed: u64, beta: f64) -> AuctionEnv {
        let s = Setting::desk();
        let c = sample_context(&mut rng_for(seed, &[]), &s.scenario);
        let mech = MechanismConfig { beta, ..MechanismConfig::default() };
        AuctionEnv::new(&c, &s.space, &s.base, &s.scenario.user_model, &mech, 0).unwrap()
    }

    #[test]
    fn exact_optimum_is_monotone() {
        let grid: Vec<f64> = std::iter::once(1.0).chain((1..=10).map(|k| 10.0 * k as f64)).collect();
        for seed in 0..10 {
            let r = monotonicity_sweep(&env(seed, 0.1), &grid).unwrap();
            assert_eq!(r.violations, 0);
        }
        let flat = monotonicity_sweep(&env(3, 1e12), &grid).unwrap();
        assert_eq!(flat.violations, 0);
        let spread = flat.itctr.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - flat.itctr.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-9);
        assert!(monotonicity_sweep(&env(1, 0.1), &[2.0, 1.0]).is_err());
    }

    #[test]
    fn decreasing_allocation_is_flagged() {
        struct Down;
        impl BidAllocation for Down {
            fn itctr_at(&self, bid: f64) -> f64 {
                1.0 / (1.0 + bid)
            }
        }
        let r = monotonicity_sweep(&Down, &bid_grid(1.0, 10.0, 1.0)).unwrap();
        assert_eq!(r.violations, 9);
        assert!((r.max_violation - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn continuity_refinement() {
        let r = refinement_check(&env(4, 0.1), 1.0, 100.0, 0.02).unwrap();
        assert!(r.pass, "{r:?}");
        let step = StepAllocation { ctr: 0.3, competitor_score: 0.3 * 50.005 };
        let r = refinement_check(&step, 1.0, 100.0, 0.02).unwrap();
        assert!(!r.pass);
        assert!((r.ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_reward_env_has_no_jumps() {
        let s = Setting::desk();
        let c = sample_context(&mut rng_for(5, &[]), &s.scenario);
        let silent = UserModelParams { bias: -1e6, ..UserModelParams::zeros() };
        let e = AuctionEnv::new(&c, &s.space, &s.base, &silent, &s.mech, 1).unwrap();
        let sweep = continuity_sweep(&e, 1.0, 100.0, 0.5).unwrap();
        assert!(sweep.jumps.iter().all(|j| *j == 0.0));
        assert!(refinement_check(&e, 1.0, 100.0, 0.5).unwrap().pass);
    }

    #[test]
    fn optimum_beats_perturbations() {
        let s = Setting::desk();
        for beta in [0.1, 10.0] {
            let mech = MechanismConfig { beta, ..MechanismConfig::default() };
            let c = sample_context(&mut rng_for(6, &[]), &s.scenario);
            let r = optimality_perturbation_test(&c, &s.space, &s.base, &s.scenario.user_model, &mech, 1000, 0.5, &mut rng_for(7, &[]))
                .unwrap();
            assert!(r.pass && r.worst_gap <= 0.0, "{r:?}");
            assert!(r.log_partition_error < 1e-10);
        }
        let c = sample_context(&mut rng_for(8, &[]), &s.scenario);
        let r = optimality_perturbation_test(&c, &s.space, &s.base, &s.scenario.user_model, &s.mech, 2, 0.0, &mut rng_for(9, &[]))
            .unwrap();
        assert!(r.pass);
    }

    #[test]
    fn gap_vanishes_for_identical_models() {
        let s = Setting::desk();
        let c = sample_context(&mut rng_for(10, &[]), &s.scenario);
        let truth = &s.scenario.user_model;
        let pi = crate::mechanism::optimal_policy(&c, &s.space, &s.base, truth, &s.mech).unwrap();
        let exact = PctrModel::from_user_model(truth);
        let g = unbiasedness_gap(&pi, &c, &s.space, &exact, truth).unwrap();
        assert!(g.iter().all(|x| *x < 1e-12));
        let mis = PctrModel::zeros(crate::ctr_model::FeatureMap::NoCrowding);
        let g = unbiasedness_gap(&pi, &c, &s.space, &mis, truth).unwrap();
        assert!(g.iter().any(|x| *x > 1e-3));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        // Pearson correlation of the average ranks (1,2,3,4) and (1,2.5,2.5,4).
        let expected = 4.5 / (5.0f64 * 4.5).sqrt();
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 7.0, 7.0, 9.0]).unwrap() - expected).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[4.0, 4.0]).unwrap(), 0.0);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }
}
