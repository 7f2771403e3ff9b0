//! Core data types and the enumerated response space.
//!
//! A response is reduced to the set of ads it exposes, a discrete placement
//! quality level and a format-error flag. The space of clean responses is
//! enumerated once in a fixed canonical order so that every distribution over
//! responses is a plain probability vector.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use itertools::Itertools;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerance on the total mass of a [`PolicyDistribution`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-12;

/// One advertiser's creative together with its match features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdCandidate {
    pub id: usize,
    pub relevance: f64,
    pub intrinsic_quality: f64,
}

impl AdCandidate {
    pub fn new(id: usize, relevance: f64, intrinsic_quality: f64) -> Result<Self> {
        for (name, v) in [("relevance", relevance), ("intrinsic_quality", intrinsic_quality)] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} must lie in [0,1], got {v}"));
            }
        }
        Ok(Self {
            id,
            relevance,
            intrinsic_quality,
        })
    }
}

/// Per-click bids, one per ad.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BidProfile {
    bids: Vec<f64>,
}

impl BidProfile {
    pub fn new(bids: Vec<f64>) -> Result<Self> {
        if let Some(b) = bids.iter().find(|b| !b.is_finite() || **b < 0.0) {
            return invalid(format!("bids must be finite and non-negative, got {b}"));
        }
        Ok(Self { bids })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.bids
    }

    pub fn len(&self) -> usize {
        self.bids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bids.is_empty()
    }

    pub fn get(&self, ad: usize) -> f64 {
        self.bids[ad]
    }

    /// Copy of this profile with one entry replaced.
    pub fn with_bid(&self, ad: usize, bid: f64) -> Result<Self> {
        if ad >= self.bids.len() {
            return invalid(format!("ad index {ad} out of range"));
        }
        let mut bids = self.bids.clone();
        bids[ad] = bid;
        Self::new(bids)
    }
}

impl TryFrom<Vec<f64>> for BidProfile {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BidProfile> for Vec<f64> {
    fn from(b: BidProfile) -> Self {
        b.bids
    }
}

/// One query instance: features, candidate ads and their bids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionContext {
    pub query_features: Vec<f64>,
    pub user_features: Vec<f64>,
    ads: Vec<AdCandidate>,
    bids: BidProfile,
}

impl AuctionContext {
    pub fn new(
        query_features: Vec<f64>,
        user_features: Vec<f64>,
        ads: Vec<AdCandidate>,
        bids: BidProfile,
    ) -> Result<Self> {
        if ads.is_empty() {
            return invalid("a context needs at least one ad");
        }
        if bids.len() != ads.len() {
            return invalid(format!(
                "bid profile has {} entries for {} ads",
                bids.len(),
                ads.len()
            ));
        }
        if query_features.iter().chain(&user_features).any(|v| !v.is_finite()) {
            return invalid("feature vectors must be finite");
        }
        Ok(Self {
            query_features,
            user_features,
            ads,
            bids,
        })
    }

    pub fn ads(&self) -> &[AdCandidate] {
        &self.ads
    }

    pub fn ad(&self, i: usize) -> &AdCandidate {
        &self.ads[i]
    }

    pub fn bids(&self) -> &BidProfile {
        &self.bids
    }

    pub fn n_ads(&self) -> usize {
        self.ads.len()
    }

    pub fn with_bids(&self, bids: BidProfile) -> Result<Self> {
        Self::new(
            self.query_features.clone(),
            self.user_features.clone(),
            self.ads.clone(),
            bids,
        )
    }

    pub fn with_bid(&self, ad: usize, bid: f64) -> Result<Self> {
        self.with_bids(self.bids.with_bid(ad, bid)?)
    }
}

/// Placement quality of a non-empty response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub index: usize,
    pub value: f64,
}

/// Value in [0,1] of quality level `index` on a grid with `levels` points.
///
/// A single-level grid has the value 1.
pub fn quality_value(index: usize, levels: usize) -> f64 {
    if levels <= 1 {
        1.0
    } else {
        index as f64 / (levels - 1) as f64
    }
}

/// A single generated response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseOutcome {
    exposed: Vec<usize>,
    quality: Option<Quality>,
    format_error: bool,
}

impl ResponseOutcome {
    /// The canonical empty response.
    pub fn empty() -> Self {
        Self {
            exposed: Vec::new(),
            quality: None,
            format_error: false,
        }
    }

    /// A clean response exposing `exposed` at the given quality level.
    pub fn new(mut exposed: Vec<usize>, quality_index: usize, quality_levels: usize) -> Result<Self> {
        if exposed.is_empty() {
            return Ok(Self::empty());
        }
        if quality_index >= quality_levels {
            return invalid(format!(
                "quality index {quality_index} outside grid of {quality_levels} levels"
            ));
        }
        exposed.sort_unstable();
        if exposed.windows(2).any(|w| w[0] == w[1]) {
            return invalid("exposed ads must be distinct");
        }
        Ok(Self {
            exposed,
            quality: Some(Quality {
                index: quality_index,
                value: quality_value(quality_index, quality_levels),
            }),
            format_error: false,
        })
    }

    /// The same response with a format error. The empty response has no
    /// format-error variant and is returned unchanged.
    pub fn with_format_error(&self) -> Self {
        let mut out = self.clone();
        out.format_error = !self.exposed.is_empty();
        out
    }

    /// The response without its format error.
    pub fn clean(&self) -> Self {
        let mut out = self.clone();
        out.format_error = false;
        out
    }

    pub fn exposed(&self) -> &[usize] {
        &self.exposed
    }

    pub fn is_exposed(&self, ad: usize) -> bool {
        self.exposed.binary_search(&ad).is_ok()
    }

    pub fn n_ads(&self) -> usize {
        self.exposed.len()
    }

    pub fn quality(&self) -> Option<Quality> {
        self.quality
    }

    /// Quality value, 0 for the empty response.
    pub fn quality_value(&self) -> f64 {
        self.quality.map_or(0.0, |q| q.value)
    }

    pub fn format_error(&self) -> bool {
        self.format_error
    }

    /// Canonical text key, e.g. `S=0,2;q=1;fe=0`.
    pub fn key(&self) -> String {
        self.to_string()
    }

    /// Parse a canonical key back into a response.
    pub fn from_key(key: &str, quality_levels: usize) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed response key {key:?}"));
        let mut parts = key.split(';');
        let s = parts.next().and_then(|p| p.strip_prefix("S=")).ok_or_else(bad)?;
        let q = parts.next().and_then(|p| p.strip_prefix("q=")).ok_or_else(bad)?;
        let fe = parts.next().and_then(|p| p.strip_prefix("fe=")).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        let exposed: Vec<usize> = if s.is_empty() {
            Vec::new()
        } else {
            s.split(',')
                .map(|x| x.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?
        };
        let format_error = match fe {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        if exposed.is_empty() {
            if q != "-" || format_error {
                return Err(bad());
            }
            return Ok(Self::empty());
        }
        let q: usize = q.parse().map_err(|_| bad())?;
        let out = Self::new(exposed, q, quality_levels)?;
        Ok(if format_error { out.with_format_error() } else { out })
    }
}

impl fmt::Display for ResponseOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.exposed.iter().map(|i| i.to_string()).join(",");
        let q = self
            .quality
            .map_or_else(|| "-".to_string(), |q| q.index.to_string());
        write!(f, "S={s};q={q};fe={}", u8::from(self.format_error))
    }
}

/// All clean responses for a given ad count, in canonical order.
#[derive(Debug, Clone)]
pub struct ResponseSpace {
    responses: Vec<ResponseOutcome>,
    index: HashMap<String, usize>,
    n_ads: usize,
    k_max: usize,
    quality_levels: usize,
}

/// Enumerate the response space: the empty response, then every subset of
/// size 1..=k_max in lexicographic order, each at every quality level.
pub fn enumerate_responses(n_ads: usize, k_max: usize, quality_levels: usize) -> Result<ResponseSpace> {
    if n_ads == 0 {
        return invalid("n_ads must be at least 1");
    }
    if quality_levels == 0 {
        return invalid("quality_levels must be at least 1");
    }
    let mut responses = vec![ResponseOutcome::empty()];
    for size in 1..=k_max.min(n_ads) {
        for subset in (0..n_ads).combinations(size) {
            for q in 0..quality_levels {
                responses.push(ResponseOutcome::new(subset.clone(), q, quality_levels)?);
            }
        }
    }
    let index = responses
        .iter()
        .enumerate()
        .map(|(i, r)| (r.key(), i))
        .collect();
    Ok(ResponseSpace {
        responses,
        index,
        n_ads,
        k_max,
        quality_levels,
    })
}

impl ResponseSpace {
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn get(&self, i: usize) -> &ResponseOutcome {
        &self.responses[i]
    }

    pub fn responses(&self) -> &[ResponseOutcome] {
        &self.responses
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ResponseOutcome> {
        self.responses.iter()
    }

    pub fn n_ads(&self) -> usize {
        self.n_ads
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn quality_levels(&self) -> usize {
        self.quality_levels
    }

    /// Position of a clean response given its canonical key.
    pub fn lookup(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Position of a response, mapping a format-error variant onto its clean
    /// counterpart.
    pub fn position(&self, response: &ResponseOutcome) -> Option<usize> {
        self.lookup(&response.clean().key())
    }
}

/// A probability vector aligned with a [`ResponseSpace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDistribution {
    probs: Vec<f64>,
}

impl PolicyDistribution {
    /// Validating constructor.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return invalid("a distribution needs at least one outcome");
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return invalid("probabilities must be finite and non-negative");
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return invalid(format!("probabilities sum to {total}, not 1"));
        }
        Ok(Self { probs })
    }

    /// Normalize non-negative weights to a distribution.
    pub fn renormalized(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return invalid("weights must be finite and non-negative");
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return invalid("weights must have positive mass");
        }
        let probs = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { probs })
    }

    /// Softmax of log-weights with a max shift.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        Ok(Self {
            probs: softmax(log_weights)?.0,
        })
    }

    /// Point mass at position `i` of a space with `len` outcomes.
    pub fn point_mass(len: usize, i: usize) -> Result<Self> {
        if i >= len {
            return invalid(format!("index {i} out of range for {len} outcomes"));
        }
        let mut probs = vec![0.0; len];
        probs[i] = 1.0;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Expectation of `f` over outcomes.
    pub fn expect(&self, values: &[f64]) -> f64 {
        self.probs.iter().zip(values).map(|(p, v)| p * v).sum()
    }

    /// Draw an outcome index by inverse-CDF sampling.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }
}

/// Numerically stable softmax. Returns the probabilities and the log of the
/// normalizer of the unshifted weights.
pub fn softmax(log_weights: &[f64]) -> Result<(Vec<f64>, f64)> {
    let max = log_weights
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || log_weights.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return invalid("log-weights must be finite or -inf with at least one finite entry");
    }
    let mut probs: Vec<f64> = log_weights.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok((probs, max + total.ln()))
}

/// Clicks observed on one impression, keyed by exposed ad.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub clicks: BTreeMap<usize, bool>,
}

impl ClickRecord {
    pub fn clicked(&self, ad: usize) -> bool {
        self.clicks.get(&ad).copied().unwrap_or(false)
    }

    pub fn n_clicks(&self) -> usize {
        self.clicks.values().filter(|c| **c).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binom(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn enumeration_sizes() {
        let s = enumerate_responses(2, 1, 1).unwrap();
        let keys: Vec<_> = s.iter().map(|r| r.key()).collect();
        assert_eq!(keys, ["S=;q=-;fe=0", "S=0;q=0;fe=0", "S=1;q=0;fe=0"]);
        assert_eq!(enumerate_responses(5, 2, 2).unwrap().len(), 31);
        assert_eq!(enumerate_responses(3, 0, 4).unwrap().len(), 1);
        for n in 1..7 {
            for k in 0..4 {
                for q in 1..4 {
                    let expected = 1 + q * (1..=k.min(n)).map(|s| binom(n, s)).sum::<usize>();
                    assert_eq!(enumerate_responses(n, k, q).unwrap().len(), expected);
                }
            }
        }
    }

    #[test]
    fn enumeration_rejects_bad_sizes() {
        assert!(enumerate_responses(0, 1, 1).is_err());
        assert!(enumerate_responses(3, 1, 0).is_err());
    }

    #[test]
    fn canonical_order_and_lookup() {
        let s = enumerate_responses(5, 2, 2).unwrap();
        assert_eq!(s.get(0), &ResponseOutcome::empty());
        assert_eq!(s.get(1).key(), "S=0;q=0;fe=0");
        assert_eq!(s.get(2).key(), "S=0;q=1;fe=0");
        assert_eq!(s.get(11).key(), "S=0,1;q=0;fe=0");
        assert_eq!(s.get(30).key(), "S=3,4;q=1;fe=0");
        for (i, r) in s.iter().enumerate() {
            assert_eq!(s.lookup(&r.key()), Some(i));
            assert_eq!(s.position(&r.with_format_error()), Some(i));
            assert_eq!(ResponseOutcome::from_key(&r.key(), 2).unwrap(), *r);
        }
    }

    #[test]
    fn keys_round_trip_with_format_error() {
        let r = ResponseOutcome::new(vec![2, 0], 1, 2).unwrap().with_format_error();
        assert_eq!(r.key(), "S=0,2;q=1;fe=1");
        assert_eq!(ResponseOutcome::from_key("S=0,2;q=1;fe=1", 2).unwrap(), r);
        assert!(ResponseOutcome::from_key("S=;q=0;fe=0", 2).is_err());
        assert!(ResponseOutcome::from_key("S=0;q=5;fe=0", 2).is_err());
        assert!(ResponseOutcome::from_key("garbage", 2).is_err());
        assert!(!ResponseOutcome::empty().with_format_error().format_error());
    }

    #[test]
    fn quality_grid() {
        assert_eq!(quality_value(0, 2), 0.0);
        assert_eq!(quality_value(1, 2), 1.0);
        assert_eq!(quality_value(1, 3), 0.5);
        assert_eq!(quality_value(0, 1), 1.0);
    }

    #[test]
    fn distribution_validation() {
        assert!(PolicyDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(PolicyDistribution::new(vec![0.5, 0.5 + 1e-13]).is_ok());
        assert!(PolicyDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(PolicyDistribution::new(vec![1.5, -0.5]).is_err());
        let d = PolicyDistribution::renormalized(vec![1.0, 3.0]).unwrap();
        assert_eq!(d.probs(), &[0.25, 0.75]);
        let total: f64 = PolicyDistribution::renormalized(vec![0.1; 31]).unwrap().probs().iter().sum();
        assert!((total - 1.0).abs() <= NORMALIZATION_TOLERANCE);
    }

    #[test]
    fn context_validation() {
        let ad = AdCandidate::new(0, 0.5, 0.5).unwrap();
        assert!(AdCandidate::new(0, 1.5, 0.5).is_err());
        assert!(BidProfile::new(vec![-1.0]).is_err());
        let bids = BidProfile::new(vec![3.0, 4.0]).unwrap();
        assert!(AuctionContext::new(vec![], vec![], vec![ad.clone()], bids.clone()).is_err());
        assert!(AuctionContext::new(vec![], vec![], vec![], BidProfile::new(vec![]).unwrap()).is_err());
        let ctx = AuctionContext::new(vec![0.1], vec![], vec![ad.clone(), ad], bids).unwrap();
        assert_eq!(ctx.with_bid(1, 9.0).unwrap().bids().as_slice(), &[3.0, 9.0]);
    }
}
