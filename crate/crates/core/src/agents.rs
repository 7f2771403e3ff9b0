//! Bidders, best responses, incentive regret and best-response dynamics.
//!
//! An [`AuctionEnv`] freezes everything but one advertiser's bid. Because the
//! reward is linear in that bid, the optimal allocation at any bid is a
//! single exponential tilt of precomputed vectors.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ctr_model::ClickModel;
use crate::domain::{AuctionContext, BidProfile, PolicyDistribution, ResponseSpace};
use crate::error::{invalid, Error, Result};
use crate::mechanism::{tilt, BasePolicy, MechanismConfig, ScoredSpace};

/// Relative tolerance under which two objective values count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// The exact optimal allocation seen as a function of one bid.
#[derive(Debug, Clone)]
pub struct AuctionEnv {
    focal: usize,
    bids: Vec<f64>,
    base_log_probs: Vec<f64>,
    /// Rewards with the focal bid set to zero.
    rest_reward: Vec<f64>,
    /// Click probability of the focal ad in each response, 0 where hidden.
    focal_ctr: Vec<f64>,
    beta: f64,
}

impl AuctionEnv {
    pub fn new(
        context: &AuctionContext,
        space: &ResponseSpace,
        base: &BasePolicy,
        model: &impl ClickModel,
        mech: &MechanismConfig,
        focal: usize,
    ) -> Result<Self> {
        if focal >= context.n_ads() {
            return invalid(format!("focal ad {focal} out of range"));
        }
        mech.validate()?;
        let scored = ScoredSpace::new(context, space, model, &mech.reward)?;
        let mut bids = context.bids().as_slice().to_vec();
        bids[focal] = 0.0;
        Ok(Self {
            focal,
            rest_reward: scored.rewards(&bids),
            focal_ctr: scored.ctr_column(focal),
            base_log_probs: base.log_probs().to_vec(),
            bids,
            beta: mech.beta,
        })
    }

    pub fn focal(&self) -> usize {
        self.focal
    }

    /// Opponent bids, with the focal entry zeroed.
    pub fn opponent_bids(&self) -> &[f64] {
        &self.bids
    }

    fn rewards(&self, bid: f64) -> Vec<f64> {
        self.rest_reward
            .iter()
            .zip(&self.focal_ctr)
            .map(|(r, c)| r + bid * c)
            .collect()
    }

    /// Optimal allocation when the focal advertiser bids `bid`.
    pub fn allocation(&self, bid: f64) -> Result<PolicyDistribution> {
        if !(bid >= 0.0) || !bid.is_finite() {
            return invalid(format!("bid must be finite and non-negative, got {bid}"));
        }
        Ok(tilt(&self.base_log_probs, &self.rewards(bid), self.beta)?.distribution)
    }

    /// ITCTR of the focal ad at `bid`.
    pub fn itctr(&self, bid: f64) -> f64 {
        self.allocation(bid)
            .map(|pi| pi.expect(&self.focal_ctr))
            .unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    /// Utility maximizer: value minus payment.
    Um,
    /// Value maximizer under a return-on-spend constraint.
    Vm,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub kind: AgentKind,
    /// Value per click.
    pub value: f64,
    /// Target return on spend, only read for value maximizers.
    #[serde(default = "one")]
    pub roi: f64,
}

impl AgentSpec {
    pub fn um(value: f64) -> Self {
        Self {
            kind: AgentKind::Um,
            value,
            roi: 1.0,
        }
    }

    pub fn vm(value: f64, roi: f64) -> Self {
        Self {
            kind: AgentKind::Vm,
            value,
            roi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.value >= 0.0) || !self.value.is_finite() {
            return Err(Error::Config(format!("agent value must be non-negative, got {}", self.value)));
        }
        if self.kind == AgentKind::Vm && (!(self.roi >= 1.0) || !self.roi.is_finite()) {
            return Err(Error::Config(format!("value maximizer needs roi >= 1, got {}", self.roi)));
        }
        Ok(())
    }

    /// `v` for utility maximizers, `v/τ` for value maximizers.
    pub fn truthful_bid(&self) -> f64 {
        match self.kind {
            AgentKind::Um => self.value,
            AgentKind::Vm => self.value / self.roi,
        }
    }
}

/// Integer grid `lo, lo+step, …` up to `hi`.
pub fn bid_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| lo + k as f64 * step).collect()
}

/// `(v − b)·ITCTR(b)` under first-price payment.
pub fn um_utility(env: &AuctionEnv, agent: &AgentSpec, bid: f64) -> f64 {
    (agent.value - bid) * env.itctr(bid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VmOutcome {
    pub value: f64,
    pub feasible: bool,
}

/// Value `v·ITCTR(b)` and whether `τ·b·ITCTR ≤ v·ITCTR` holds. A zero ITCTR
/// is always feasible.
pub fn vm_objective(env: &AuctionEnv, agent: &AgentSpec, bid: f64) -> VmOutcome {
    let x = env.itctr(bid);
    VmOutcome {
        value: agent.value * x,
        // Compared as `b ≤ v/τ` so that the truthful bid itself is feasible
        // after rounding.
        feasible: x == 0.0 || bid <= agent.value / agent.roi,
    }
}

/// The agent's objective at `bid`, `None` when a value maximizer's constraint
/// is violated.
pub fn agent_objective(env: &AuctionEnv, agent: &AgentSpec, bid: f64) -> Option<f64> {
    match agent.kind {
        AgentKind::Um => Some(um_utility(env, agent, bid)),
        AgentKind::Vm => {
            let o = vm_objective(env, agent, bid);
            o.feasible.then_some(o.value)
        }
    }
}

fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs())
}

/// Best grid bid and its objective.
///
/// Utility maximizers keep the lowest of tied bids. Value maximizers keep the
/// highest tied feasible bid: their value is non-decreasing in the bid, so a
/// plateau only arises where ITCTR saturates in floating point and the
/// highest point of it is the one closest to the constraint boundary.
pub fn best_response(env: &AuctionEnv, agent: &AgentSpec, grid: &[f64]) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return invalid("empty bid grid");
    }
    let mut best: Option<(f64, f64)> = None;
    for &b in grid {
        let Some(u) = agent_objective(env, agent, b) else { continue };
        best = match best {
            None => Some((b, u)),
            Some((bb, bu)) => {
                if tied(u, bu) {
                    match agent.kind {
                        AgentKind::Um => Some((bb, bu)),
                        AgentKind::Vm => Some((b, u.max(bu))),
                    }
                } else if u > bu {
                    Some((b, u))
                } else {
                    Some((bb, bu))
                }
            }
        };
    }
    best.ok_or_else(|| Error::InvalidArgument("no feasible bid on the grid".into()))
}

/// Largest gain over the truthful bid available on the grid, floored at 0.
pub fn ic_regret(env: &AuctionEnv, agent: &AgentSpec, grid: &[f64]) -> Result<f64> {
    let truthful = agent_objective(env, agent, agent.truthful_bid()).unwrap_or(0.0);
    let (_, best) = best_response(env, agent, grid)?;
    Ok((best - truthful).max(0.0))
}

/// Fixed part of a multi-bidder game: the context and mechanism. Agent `i`
/// bids for ad `i`; ads without an agent keep the context's bids.
pub struct Market<'a, M: ClickModel> {
    pub context: &'a AuctionContext,
    pub space: &'a ResponseSpace,
    pub base: &'a BasePolicy,
    pub model: &'a M,
    pub mech: &'a MechanismConfig,
}

impl<M: ClickModel> Market<'_, M> {
    /// Environment of ad `focal` given the full bid profile.
    pub fn env(&self, bids: &[f64], focal: usize) -> Result<AuctionEnv> {
        let ctx = self.context.with_bids(BidProfile::new(bids.to_vec())?)?;
        AuctionEnv::new(&ctx, self.space, self.base, self.model, self.mech, focal)
    }
}

/// One row of an equilibrium trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub agent: usize,
    pub bid: f64,
    pub utility: f64,
    pub regret: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub bids: Vec<f64>,
    /// Largest unilateral regret at the final profile.
    pub epsilon: f64,
    pub converged: bool,
    /// Number of simultaneous updates performed.
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
}

impl EquilibriumResult {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iter", "agent", "bid", "utility", "regret"])?;
        for r in &self.trace {
            w.write_record([
                r.iter.to_string(),
                r.agent.to_string(),
                r.bid.to_string(),
                r.utility.to_string(),
                r.regret.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Simultaneous best-response dynamics starting from truthful bids. Stops at
/// a fixed point or after `max_iters` updates.
pub fn best_response_dynamics<M: ClickModel>(
    market: &Market<'_, M>,
    agents: &[AgentSpec],
    grid: &[f64],
    max_iters: usize,
) -> Result<EquilibriumResult> {
    if agents.is_empty() {
        return invalid("need at least one agent");
    }
    if agents.len() > market.context.n_ads() {
        return invalid(format!(
            "{} agents for {} ads",
            agents.len(),
            market.context.n_ads()
        ));
    }
    for a in agents {
        a.validate()?;
    }
    let mut bids = market.context.bids().as_slice().to_vec();
    for (i, a) in agents.iter().enumerate() {
        bids[i] = a.truthful_bid();
    }
    let mut trace = Vec::new();
    let mut iter = 0;
    loop {
        let mut next = bids.clone();
        let mut epsilon: f64 = 0.0;
        for (i, a) in agents.iter().enumerate() {
            let env = market.env(&bids, i)?;
            let current = agent_objective(&env, a, bids[i]).unwrap_or(0.0);
            let (br, best) = best_response(&env, a, grid)?;
            let regret = (best - current).max(0.0);
            epsilon = epsilon.max(regret);
            trace.push(TraceRow {
                iter,
                agent: i,
                bid: bids[i],
                utility: current,
                regret,
            });
            next[i] = br;
        }
        let fixed = next == bids;
        if fixed || iter == max_iters {
            return Ok(EquilibriumResult {
                bids: bids[..agents.len()].to_vec(),
                epsilon,
                converged: fixed,
                iterations: iter,
                trace,
            });
        }
        bids = next;
        iter += 1;
    }
}
