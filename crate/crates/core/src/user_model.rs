//! Simulated user: ground-truth click-through rates, click sampling and
//! synthetic context generation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{AdCandidate, AuctionContext, BidProfile, ClickRecord, ResponseOutcome};
use crate::error::{invalid, Error, Result};

/// Logistic function, evaluated without overflow for large |z|.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weights of the ground-truth click model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UserModelParams {
    pub bias: f64,
    pub w_relevance: f64,
    pub w_quality: f64,
    /// Penalty per additional co-exposed ad.
    pub w_crowding: f64,
    pub w_intrinsic: f64,
}

impl Default for UserModelParams {
    fn default() -> Self {
        Self {
            bias: -2.0,
            w_relevance: 3.0,
            w_quality: 1.0,
            w_crowding: 0.7,
            w_intrinsic: 0.5,
        }
    }
}

impl UserModelParams {
    pub fn zeros() -> Self {
        Self {
            bias: 0.0,
            w_relevance: 0.0,
            w_quality: 0.0,
            w_crowding: 0.0,
            w_intrinsic: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.bias, self.w_relevance, self.w_quality, self.w_crowding, self.w_intrinsic];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("user model weights must be finite".into()));
        }
        if self.w_crowding < 0.0 {
            return Err(Error::Config("w_crowding must be non-negative".into()));
        }
        Ok(())
    }

    /// Weights in the order of the pCTR feature map
    /// (bias, relevance, quality, intrinsic quality, co-exposed count).
    pub fn as_feature_weights(&self) -> [f64; 5] {
        [self.bias, self.w_relevance, self.w_quality, self.w_intrinsic, -self.w_crowding]
    }
}

/// Distribution of ad relevance and intrinsic quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelevanceDistribution {
    Uniform { low: f64, high: f64 },
}

impl Default for RelevanceDistribution {
    fn default() -> Self {
        Self::Uniform { low: 0.0, high: 1.0 }
    }
}

/// Distribution of individual bids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BidDistribution {
    UniformInt { low: u32, high: u32 },
}

impl Default for BidDistribution {
    fn default() -> Self {
        Self::UniformInt { low: 1, high: 100 }
    }
}

/// Everything needed to generate auction contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_ads: usize,
    pub k_max: usize,
    pub quality_levels: usize,
    pub relevance_distribution: RelevanceDistribution,
    pub bid_distribution: BidDistribution,
    pub user_model: UserModelParams,
    /// Dimension of the query and user feature vectors. They are carried on
    /// each context but no model reads them.
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_ads: 5,
            k_max: 2,
            quality_levels: 2,
            relevance_distribution: RelevanceDistribution::default(),
            bid_distribution: BidDistribution::default(),
            user_model: UserModelParams::default(),
            feature_dim: 4,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ads == 0 {
            return Err(Error::Config("n_ads must be at least 1".into()));
        }
        if self.quality_levels == 0 {
            return Err(Error::Config("quality_levels must be at least 1".into()));
        }
        let RelevanceDistribution::Uniform { low, high } = self.relevance_distribution;
        if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) || low > high {
            return Err(Error::Config(format!("relevance support [{low},{high}] must lie in [0,1]")));
        }
        let BidDistribution::UniformInt { low, high } = self.bid_distribution;
        if low > high {
            return Err(Error::Config(format!("bid support [{low},{high}] is empty")));
        }
        self.user_model.validate()
    }

    /// Largest bid the scenario can produce, used to normalize bids.
    pub fn max_bid(&self) -> f64 {
        let BidDistribution::UniformInt { high, .. } = self.bid_distribution;
        f64::from(high)
    }
}

/// Draw a fresh bid profile for `n` ads.
pub fn sample_bids<R: Rng + ?Sized>(rng: &mut R, scenario: &ScenarioConfig, n: usize) -> BidProfile {
    let BidDistribution::UniformInt { low, high } = scenario.bid_distribution;
    let bids = (0..n).map(|_| f64::from(rng.gen_range(low..=high))).collect();
    BidProfile::new(bids).expect("sampled bids are non-negative")
}

/// Draw one auction context. The order of draws is fixed: query features,
/// user features, then relevance and intrinsic quality per ad, then bids.
pub fn sample_context<R: Rng + ?Sized>(rng: &mut R, scenario: &ScenarioConfig) -> AuctionContext {
    let query_features = (0..scenario.feature_dim).map(|_| rng.gen::<f64>()).collect();
    let user_features = (0..scenario.feature_dim).map(|_| rng.gen::<f64>()).collect();
    let RelevanceDistribution::Uniform { low, high } = scenario.relevance_distribution;
    let draw = |rng: &mut R| low + (high - low) * rng.gen::<f64>();
    let ads = (0..scenario.n_ads)
        .map(|id| {
            let relevance = draw(rng);
            let iq = draw(rng);
            AdCandidate::new(id, relevance, iq).expect("draws lie in [0,1]")
        })
        .collect();
    let bids = sample_bids(rng, scenario, scenario.n_ads);
    AuctionContext::new(query_features, user_features, ads, bids).expect("sampled context is valid")
}

/// Probability that ad `ad` is clicked given that `response` shows it.
pub fn true_ctr(
    params: &UserModelParams,
    context: &AuctionContext,
    ad: usize,
    response: &ResponseOutcome,
) -> Result<f64> {
    if !response.is_exposed(ad) || ad >= context.n_ads() {
        return invalid(format!("ad {ad} is not exposed in {response}"));
    }
    let a = context.ad(ad);
    let z = params.bias
        + params.w_relevance * a.relevance
        + params.w_quality * response.quality_value()
        + params.w_intrinsic * a.intrinsic_quality
        - params.w_crowding * (response.n_ads() as f64 - 1.0);
    Ok(logistic(z))
}

/// Sample clicks for one impression. One uniform draw is consumed per exposed
/// ad even when the response has a format error, which then clicks nothing.
pub fn sample_clicks<R: Rng + ?Sized>(
    rng: &mut R,
    params: &UserModelParams,
    context: &AuctionContext,
    response: &ResponseOutcome,
) -> Result<ClickRecord> {
    let mut record = ClickRecord::default();
    for &ad in response.exposed() {
        let p = if response.format_error() {
            0.0
        } else {
            true_ctr(params, context, ad, response)?
        };
        let u: f64 = rng.gen();
        record.clicks.insert(ad, u < p);
    }
    Ok(record)
}
