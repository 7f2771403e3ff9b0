//! Rewards, the base policy, the closed-form optimal allocation and the
//! quantities derived from a policy: ITCTR, the regularized objective and
//! first-price payments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctr_model::{ClickModel, PctrModel};
use crate::domain::{
    softmax, AuctionContext, BidProfile, ClickRecord, PolicyDistribution, ResponseOutcome, ResponseSpace,
};
use crate::error::{invalid, Error, Result};
use crate::user_model::UserModelParams;

/// Coefficients of the response-level reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub lambda: f64,
    pub ad_count_penalty: f64,
    pub format_error_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            ad_count_penalty: 10.0,
            format_error_penalty: 500.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda) || !ok(self.ad_count_penalty) || !ok(self.format_error_penalty) {
            return Err(Error::Config("reward coefficients must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// The user-experience term `λ·s(y)`, which is never positive.
    pub fn experience(&self, response: &ResponseOutcome) -> f64 {
        let n = response.n_ads() as f64;
        let fe = if response.format_error() { 1.0 } else { 0.0 };
        -self.lambda * (self.ad_count_penalty * n * n + self.format_error_penalty * fe)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MechanismConfig {
    /// Temperature of the KL regularizer.
    pub beta: f64,
    pub reward: RewardConfig,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            reward: RewardConfig::default(),
        }
    }
}

impl MechanismConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        self.reward.validate()
    }
}

/// Settings of the pretrained generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseConfig {
    pub kappa: f64,
    pub format_error_rate: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            format_error_rate: 0.02,
        }
    }
}

/// The pretrained generator: `π₀(y) ∝ exp(−κ·N_ad(y))`, uniform over quality
/// and blind to bids.
#[derive(Debug, Clone)]
pub struct BasePolicy {
    distribution: PolicyDistribution,
    log_probs: Vec<f64>,
    pub kappa: f64,
    pub format_error_rate: f64,
}

impl BasePolicy {
    pub fn new(space: &ResponseSpace, kappa: f64, format_error_rate: f64) -> Result<Self> {
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return invalid(format!("kappa must be non-negative, got {kappa}"));
        }
        if !(0.0..1.0).contains(&format_error_rate) {
            return invalid(format!("format_error_rate must lie in [0,1), got {format_error_rate}"));
        }
        let logits: Vec<f64> = space.iter().map(|r| -kappa * r.n_ads() as f64).collect();
        let (probs, log_z) = softmax(&logits)?;
        let log_probs = logits.iter().map(|l| l - log_z).collect();
        Ok(Self {
            distribution: PolicyDistribution::renormalized(probs)?,
            log_probs,
            kappa,
            format_error_rate,
        })
    }

    pub fn from_config(space: &ResponseSpace, cfg: &BaseConfig) -> Result<Self> {
        Self::new(space, cfg.kappa, cfg.format_error_rate)
    }

    pub fn distribution(&self) -> &PolicyDistribution {
        &self.distribution
    }

    pub fn probs(&self) -> &[f64] {
        self.distribution.probs()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }
}

/// Draw a response from `policy` and corrupt its format with probability
/// `format_error_rate`. Exactly two uniforms are consumed.
pub fn generate<R: Rng + ?Sized>(
    rng: &mut R,
    space: &ResponseSpace,
    policy: &PolicyDistribution,
    format_error_rate: f64,
) -> (usize, ResponseOutcome) {
    let idx = policy.sample(rng);
    let corrupt = rng.gen::<f64>() < format_error_rate;
    let response = space.get(idx);
    let response = if corrupt { response.with_format_error() } else { response.clone() };
    (idx, response)
}

/// Source of click probabilities used when scoring or evaluating a policy.
#[derive(Debug, Clone, PartialEq)]
pub enum CtrSource {
    /// The simulated user's true click rates.
    Oracle(UserModelParams),
    /// A learned pCTR model.
    Pctr(PctrModel),
}

impl ClickModel for CtrSource {
    fn ctr(&self, context: &AuctionContext, ad: usize, response: &ResponseOutcome) -> Result<f64> {
        match self {
            CtrSource::Oracle(p) => p.ctr(context, ad, response),
            CtrSource::Pctr(m) => m.ctr(context, ad, response),
        }
    }
}

/// `Σ_{i∈S} b_i·ctr_i + λ·s(y)`.
pub fn response_reward(
    context: &AuctionContext,
    response: &ResponseOutcome,
    model: &impl ClickModel,
    cfg: &RewardConfig,
) -> Result<f64> {
    let mut value = 0.0;
    for &ad in response.exposed() {
        value += context.bids().get(ad) * model.ctr(context, ad, response)?;
    }
    Ok(value + cfg.experience(response))
}

/// Click probabilities and experience penalties of every clean response of
/// one context. Rewards for any bid profile follow by a dot product, which
/// makes bid sweeps cheap.
#[derive(Debug, Clone)]
pub struct ScoredSpace {
    /// `ctr[y]` lists `(ad, ctr)` for the ads exposed in response `y`.
    ctr: Vec<Vec<(usize, f64)>>,
    experience: Vec<f64>,
    n_ads: usize,
}

impl ScoredSpace {
    pub fn new(
        context: &AuctionContext,
        space: &ResponseSpace,
        model: &impl ClickModel,
        cfg: &RewardConfig,
    ) -> Result<Self> {
        if space.n_ads() != context.n_ads() {
            return invalid(format!(
                "space built for {} ads, context has {}",
                space.n_ads(),
                context.n_ads()
            ));
        }
        let ctr = space
            .iter()
            .map(|r| {
                r.exposed()
                    .iter()
                    .map(|&ad| Ok((ad, model.ctr(context, ad, r)?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let experience = space.iter().map(|r| cfg.experience(r)).collect();
        Ok(Self {
            ctr,
            experience,
            n_ads: context.n_ads(),
        })
    }

    pub fn len(&self) -> usize {
        self.ctr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ctr.is_empty()
    }

    /// Rewards of all clean responses under `bids`.
    pub fn rewards(&self, bids: &[f64]) -> Vec<f64> {
        self.ctr
            .iter()
            .zip(&self.experience)
            .map(|(row, e)| row.iter().map(|(ad, c)| bids[*ad] * c).sum::<f64>() + e)
            .collect()
    }

    /// Per-response click probability of `ad`, 0 where it is not exposed.
    pub fn ctr_column(&self, ad: usize) -> Vec<f64> {
        self.ctr
            .iter()
            .map(|row| row.iter().find(|(a, _)| *a == ad).map_or(0.0, |(_, c)| *c))
            .collect()
    }

    /// Expected revenue `Σ_i b_i·ctr_i(y)` per response.
    pub fn values(&self, bids: &[f64]) -> Vec<f64> {
        self.ctr
            .iter()
            .map(|row| row.iter().map(|(ad, c)| bids[*ad] * c).sum())
            .collect()
    }

    pub fn experience(&self) -> &[f64] {
        &self.experience
    }

    /// ITCTR of every ad under `policy`.
    pub fn itctr_all(&self, policy: &PolicyDistribution) -> Vec<f64> {
        let mut out = vec![0.0; self.n_ads];
        for (p, row) in policy.probs().iter().zip(&self.ctr) {
            for (ad, c) in row {
                out[*ad] += p * c;
            }
        }
        out
    }
}

/// Exponential tilt `π₀·exp(R/β)/Z`, returning the distribution, its
/// log-probabilities and `log Z`.
#[derive(Debug, Clone)]
pub struct Tilted {
    pub distribution: PolicyDistribution,
    pub log_probs: Vec<f64>,
    pub log_partition: f64,
}

pub fn tilt(base_log_probs: &[f64], rewards: &[f64], beta: f64) -> Result<Tilted> {
    if !(beta > 0.0) {
        return invalid(format!("beta must be positive, got {beta}"));
    }
    if base_log_probs.len() != rewards.len() {
        return invalid("reward vector does not match the base policy");
    }
    let logits: Vec<f64> = base_log_probs.iter().zip(rewards).map(|(l, r)| l + r / beta).collect();
    let (probs, log_partition) = softmax(&logits)?;
    let log_probs = logits.iter().map(|l| l - log_partition).collect();
    Ok(Tilted {
        distribution: PolicyDistribution::renormalized(probs)?,
        log_probs,
        log_partition,
    })
}

/// The maximizer of the KL-regularized objective, with its normalizer.
pub fn optimal_policy_tilted(
    context: &AuctionContext,
    space: &ResponseSpace,
    base: &BasePolicy,
    model: &impl ClickModel,
    mech: &MechanismConfig,
) -> Result<Tilted> {
    let scored = ScoredSpace::new(context, space, model, &mech.reward)?;
    tilt(base.log_probs(), &scored.rewards(context.bids().as_slice()), mech.beta)
}

/// `π*(y) = π₀(y)·exp(R(y)/β)/Z`.
pub fn optimal_policy(
    context: &AuctionContext,
    space: &ResponseSpace,
    base: &BasePolicy,
    model: &impl ClickModel,
    mech: &MechanismConfig,
) -> Result<PolicyDistribution> {
    Ok(optimal_policy_tilted(context, space, base, model, mech)?.distribution)
}

fn check_len(policy: &PolicyDistribution, space: &ResponseSpace) -> Result<()> {
    if policy.len() != space.len() {
        return invalid(format!(
            "policy has {} entries for a space of {}",
            policy.len(),
            space.len()
        ));
    }
    Ok(())
}

/// Probability that `ad` is both shown and clicked.
pub fn itctr(
    policy: &PolicyDistribution,
    context: &AuctionContext,
    space: &ResponseSpace,
    ad: usize,
    model: &impl ClickModel,
) -> Result<f64> {
    check_len(policy, space)?;
    let mut total = 0.0;
    for (p, r) in policy.probs().iter().zip(space.iter()) {
        if *p > 0.0 && r.is_exposed(ad) {
            total += p * model.ctr(context, ad, r)?;
        }
    }
    Ok(total)
}

/// `KL(p ‖ q)` from probabilities of `p` and log-probabilities of `q`, with
/// `0·log 0 = 0`.
pub fn kl_divergence_log(p: &[f64], log_q: &[f64]) -> Result<f64> {
    if p.len() != log_q.len() {
        return invalid("distributions differ in length");
    }
    let mut kl = 0.0;
    for (pi, lq) in p.iter().zip(log_q) {
        if *pi > 0.0 {
            if *lq == f64::NEG_INFINITY {
                return invalid("p is not absolutely continuous with respect to q");
            }
            kl += pi * (pi.ln() - lq);
        }
    }
    Ok(kl.max(0.0))
}

pub fn kl_divergence(p: &PolicyDistribution, q: &PolicyDistribution) -> Result<f64> {
    let log_q: Vec<f64> = q.probs().iter().map(|v| v.ln()).collect();
    kl_divergence_log(p.probs(), &log_q)
}

/// `E_π[R] − β·KL(π ‖ π₀)` for a precomputed reward vector.
pub fn objective_from_rewards(policy: &PolicyDistribution, rewards: &[f64], base: &BasePolicy, beta: f64) -> Result<f64> {
    if policy.len() != rewards.len() || rewards.len() != base.log_probs().len() {
        return invalid("policy, rewards and base policy differ in length");
    }
    Ok(policy.expect(rewards) - beta * kl_divergence_log(policy.probs(), base.log_probs())?)
}

/// The regularized objective of a policy.
pub fn objective(
    policy: &PolicyDistribution,
    context: &AuctionContext,
    space: &ResponseSpace,
    base: &BasePolicy,
    model: &impl ClickModel,
    mech: &MechanismConfig,
) -> Result<f64> {
    check_len(policy, space)?;
    let scored = ScoredSpace::new(context, space, model, &mech.reward)?;
    objective_from_rewards(policy, &scored.rewards(context.bids().as_slice()), base, mech.beta)
}

/// First-price expected payment `b_i·ITCTR_i`.
pub fn expected_payment(
    policy: &PolicyDistribution,
    context: &AuctionContext,
    space: &ResponseSpace,
    ad: usize,
    model: &impl ClickModel,
) -> Result<f64> {
    Ok(context.bids().get(ad) * itctr(policy, context, space, ad, model)?)
}

/// Per-click first-price payments of one impression.
pub fn realized_payment(clicks: &ClickRecord, bids: &BidProfile) -> Vec<f64> {
    (0..bids.len())
        .map(|i| if clicks.clicked(i) { bids.get(i) } else { 0.0 })
        .collect()
}
