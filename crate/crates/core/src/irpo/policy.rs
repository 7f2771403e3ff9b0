//! Bid-conditioned softmax policy over the response space.
//!
//! `logit(y) = log π₀(y) + θ·φ(y)`, where `φ` aggregates features of the ads
//! exposed in `y` with bids scaled by the largest admissible bid.

use serde::{Deserialize, Serialize};

use crate::domain::{softmax, AuctionContext, PolicyDistribution, ResponseSpace};
use crate::error::{invalid, Result};
use crate::mechanism::BasePolicy;

pub const POLICY_DIM: usize = 7;

/// Names of the policy features, in order. `b̃` is the scaled bid.
pub const POLICY_FEATURES: [&str; POLICY_DIM] = [
    "sum_bid",
    "sum_bid_x_relevance",
    "sum_relevance",
    "quality_x_n_ads",
    "quality_x_sum_bid",
    "n_ads",
    "n_ads_squared",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
    /// Bids are divided by this before entering the features.
    pub bid_scale: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self::zeros(100.0)
    }
}

impl PolicyParams {
    pub fn zeros(bid_scale: f64) -> Self {
        Self {
            theta: vec![0.0; POLICY_DIM],
            bid_scale,
        }
    }

    pub fn new(theta: Vec<f64>, bid_scale: f64) -> Result<Self> {
        if theta.len() != POLICY_DIM {
            return invalid(format!("expected {POLICY_DIM} policy weights, got {}", theta.len()));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return invalid("policy weights must be finite");
        }
        if !(bid_scale > 0.0) {
            return invalid("bid_scale must be positive");
        }
        Ok(Self { theta, bid_scale })
    }
}

/// Feature vector of every response of one context.
pub fn policy_features(context: &AuctionContext, space: &ResponseSpace, bid_scale: f64) -> Vec<[f64; POLICY_DIM]> {
    space
        .iter()
        .map(|r| {
            let q = r.quality_value();
            let n = r.n_ads() as f64;
            let (mut sb, mut sbr, mut sr) = (0.0, 0.0, 0.0);
            for &i in r.exposed() {
                let b = context.bids().get(i) / bid_scale;
                let rel = context.ad(i).relevance;
                sb += b;
                sbr += b * rel;
                sr += rel;
            }
            [sb, sbr, sr, q * n, q * sb, n, n * n]
        })
        .collect()
}

/// Features and base log-probabilities of one context, ready for repeated
/// evaluation at different parameters.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    features: Vec<[f64; POLICY_DIM]>,
    base_log_probs: Vec<f64>,
}

impl FeatureTable {
    pub fn new(context: &AuctionContext, space: &ResponseSpace, base: &BasePolicy, bid_scale: f64) -> Result<Self> {
        if space.len() != base.log_probs().len() {
            return invalid("base policy does not match the response space");
        }
        Ok(Self {
            features: policy_features(context, space, bid_scale),
            base_log_probs: base.log_probs().to_vec(),
        })
    }

    pub fn features(&self) -> &[[f64; POLICY_DIM]] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn logits(&self, theta: &[f64]) -> Vec<f64> {
        self.features
            .iter()
            .zip(&self.base_log_probs)
            .map(|(f, l)| l + f.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    /// Probabilities and log-probabilities at `theta`.
    pub fn evaluate(&self, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let logits = self.logits(theta);
        let (probs, log_z) = softmax(&logits)?;
        let log_probs = logits.iter().map(|l| l - log_z).collect();
        Ok((probs, log_probs))
    }

    pub fn distribution(&self, theta: &[f64]) -> Result<PolicyDistribution> {
        PolicyDistribution::renormalized(self.evaluate(theta)?.0)
    }

    pub fn log_probs(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(theta)?.1)
    }

    /// `E_π[φ]` under the given probabilities.
    pub fn mean_features(&self, probs: &[f64]) -> [f64; POLICY_DIM] {
        let mut mean = [0.0; POLICY_DIM];
        for (p, f) in probs.iter().zip(&self.features) {
            for (m, x) in mean.iter_mut().zip(f) {
                *m += p * x;
            }
        }
        mean
    }

    /// `∇_θ log π(y) = φ(y) − E_π[φ]`.
    pub fn grad_log_prob(&self, theta: &[f64], index: usize) -> Result<[f64; POLICY_DIM]> {
        if index >= self.len() {
            return invalid(format!("response index {index} out of range"));
        }
        let (probs, _) = self.evaluate(theta)?;
        let mean = self.mean_features(&probs);
        Ok(std::array::from_fn(|k| self.features[index][k] - mean[k]))
    }
}

fn table(params: &PolicyParams, context: &AuctionContext, space: &ResponseSpace, base: &BasePolicy) -> Result<FeatureTable> {
    if params.theta.len() != POLICY_DIM {
        return invalid(format!("expected {POLICY_DIM} policy weights"));
    }
    FeatureTable::new(context, space, base, params.bid_scale)
}

pub fn policy_distribution(
    params: &PolicyParams,
    context: &AuctionContext,
    space: &ResponseSpace,
    base: &BasePolicy,
) -> Result<PolicyDistribution> {
    table(params, context, space, base)?.distribution(&params.theta)
}

/// Log-probability of the response at position `index`.
pub fn log_prob(
    params: &PolicyParams,
    context: &AuctionContext,
    space: &ResponseSpace,
    base: &BasePolicy,
    index: usize,
) -> Result<f64> {
    let lp = table(params, context, space, base)?.log_probs(&params.theta)?;
    lp.get(index).copied().ok_or_else(|| crate::Error::InvalidArgument(format!("response index {index} out of range")))
}

pub fn log_prob_gradient(
    params: &PolicyParams,
    context: &AuctionContext,
    space: &ResponseSpace,
    base: &BasePolicy,
    index: usize,
) -> Result<Vec<f64>> {
    Ok(table(params, context, space, base)?.grad_log_prob(&params.theta, index)?.to_vec())
}
