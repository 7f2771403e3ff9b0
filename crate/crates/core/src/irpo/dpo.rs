//! Preference construction and the pairwise preference loss.

use crate::domain::{AuctionContext, ResponseSpace};
use crate::error::{invalid, Result};
use crate::mechanism::BasePolicy;
use crate::numerics::log_sigmoid;
use crate::user_model::logistic;

use super::policy::{FeatureTable, PolicyParams, POLICY_DIM};

/// A winner and the responses it beats by more than the threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceSet {
    pub winner: usize,
    pub losers: Vec<usize>,
}

/// Winner is the first maximal reward; losers trail it by strictly more than
/// `delta_th`.
pub fn build_preference_set(rewards: &[f64], delta_th: f64) -> Result<PreferenceSet> {
    if rewards.len() < 2 {
        return invalid("need at least two rewards");
    }
    if rewards.iter().any(|r| r.is_nan()) {
        return invalid("rewards must not be NaN");
    }
    let mut winner = 0;
    for (i, r) in rewards.iter().enumerate() {
        if *r > rewards[winner] {
            winner = i;
        }
    }
    let best = rewards[winner];
    let losers = (0..rewards.len()).filter(|&l| best - rewards[l] > delta_th).collect();
    Ok(PreferenceSet { winner, losers })
}

/// One preference sample with everything needed for repeated loss
/// evaluations during an epoch.
#[derive(Debug, Clone)]
pub struct DpoSample {
    pub table: FeatureTable,
    pub winner: usize,
    pub losers: Vec<usize>,
    /// Log-probabilities under the frozen reference parameters.
    pub ref_log_probs: Vec<f64>,
}

impl DpoSample {
    pub fn new(table: FeatureTable, ref_theta: &[f64], winner: usize, losers: Vec<usize>) -> Result<Self> {
        if losers.is_empty() {
            return invalid("empty loser set");
        }
        if winner >= table.len() || losers.iter().any(|l| *l >= table.len()) {
            return invalid("response index out of range");
        }
        let ref_log_probs = table.log_probs(ref_theta)?;
        Ok(Self {
            table,
            winner,
            losers,
            ref_log_probs,
        })
    }

    /// Loss and gradient at `theta`.
    pub fn loss_and_gradient(&self, theta: &[f64], beta: f64) -> Result<(f64, [f64; POLICY_DIM])> {
        let (probs, lp) = self.table.evaluate(theta)?;
        let mean = self.table.mean_features(&probs);
        let feats = self.table.features();
        let grad_lp = |y: usize| -> [f64; POLICY_DIM] { std::array::from_fn(|k| feats[y][k] - mean[k]) };
        let w = self.winner;
        let gw = grad_lp(w);
        let n = self.losers.len() as f64;
        let mut loss = 0.0;
        let mut grad = [0.0; POLICY_DIM];
        for &l in &self.losers {
            let margin = (lp[w] - self.ref_log_probs[w]) - (lp[l] - self.ref_log_probs[l]);
            loss -= log_sigmoid(beta * margin) / n;
            let weight = -beta * logistic(-beta * margin) / n;
            let gl = grad_lp(l);
            for k in 0..POLICY_DIM {
                grad[k] += weight * (gw[k] - gl[k]);
            }
        }
        Ok((loss, grad))
    }
}

/// Preference loss of one sample and its gradient with respect to `params`.
#[allow(clippy::too_many_arguments)]
pub fn dpo_loss_and_gradient(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    context: &AuctionContext,
    space: &ResponseSpace,
    base: &BasePolicy,
    winner: usize,
    losers: &[usize],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(beta > 0.0) {
        return invalid("beta must be positive");
    }
    let table = FeatureTable::new(context, space, base, params.bid_scale)?;
    let sample = DpoSample::new(table, &ref_params.theta, winner, losers.to_vec())?;
    let (loss, grad) = sample.loss_and_gradient(&params.theta, beta)?;
    Ok((loss, grad.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::enumerate_responses;
    use crate::numerics::{central_difference, relative_error};
    use crate::seeding::rng_for;
    use crate::user_model::{sample_context, ScenarioConfig};
    use rand::Rng;

    #[test]
    fn preference_examples() {
        let p = build_preference_set(&[10.0, -5.0, 9.0], 10.0).unwrap();
        assert_eq!(p, PreferenceSet { winner: 0, losers: vec![1] });
        let p = build_preference_set(&[3.0, 3.0, 3.0], 0.0).unwrap();
        assert_eq!(p.winner, 0);
        assert!(p.losers.is_empty());
        let p = build_preference_set(&[20.0, 10.0], 10.0).unwrap();
        assert!(p.losers.is_empty());
        let p = build_preference_set(&[1.0, 50.0, 50.0, -100.0], 10.0).unwrap();
        assert_eq!(p, PreferenceSet { winner: 1, losers: vec![0, 3] });
        assert!(build_preference_set(&[1.0], 0.0).is_err());
    }

    fn setup() -> (AuctionContext, ResponseSpace, BasePolicy) {
        let s = enumerate_responses(5, 2, 2).unwrap();
        let b = BasePolicy::new(&s, 1.0, 0.02).unwrap();
        let c = sample_context(&mut rng_for(8, &[]), &ScenarioConfig::default());
        (c, s, b)
    }

    #[test]
    fn equal_params_give_ln2() {
        let (c, s, b) = setup();
        let p = PolicyParams::new(vec![0.4, -1.0, 0.2, 0.3, 0.0, -0.5, 0.1], 100.0).unwrap();
        for beta in [0.1, 1.0] {
            let (loss, _) = dpo_loss_and_gradient(&p, &p, &c, &s, &b, 3, &[0, 20], beta).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        }
        assert!(dpo_loss_and_gradient(&p, &p, &c, &s, &b, 3, &[], 1.0).is_err());
    }

    #[test]
    fn loss_is_monotone_in_margin() {
        let (c, s, b) = setup();
        let reference = PolicyParams::default();
        let w = s.lookup("S=0;q=1;fe=0").unwrap();
        let l = s.lookup("S=;q=-;fe=0").unwrap();
        // Increasing the first weight raises the winner's log-prob relative
        // to the empty response, so the loss must fall.
        let mut last = f64::INFINITY;
        for t in [-2e4, -20.0, -1.0, 0.0, 1.0, 20.0, 2e4] {
            let p = PolicyParams::new(vec![t, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 100.0).unwrap();
            let (loss, _) = dpo_loss_and_gradient(&p, &reference, &c, &s, &b, w, &[l], 1.0).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-6);
        let p = PolicyParams::new(vec![-2e4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 100.0).unwrap();
        let (loss, _) = dpo_loss_and_gradient(&p, &reference, &c, &s, &b, w, &[l], 1.0).unwrap();
        assert!(loss > 10.0 && loss.is_finite());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (c, s, b) = setup();
        let mut rng = rng_for(12, &[]);
        for _ in 0..25 {
            let theta: Vec<f64> = (0..POLICY_DIM).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ref_theta: Vec<f64> = (0..POLICY_DIM).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let reference = PolicyParams::new(ref_theta, 100.0).unwrap();
            let winner = rng.gen_range(0..s.len());
            let losers: Vec<usize> = (0..3).map(|_| rng.gen_range(0..s.len())).collect();
            let beta = rng.gen_range(0.1..2.0);
            let p = PolicyParams::new(theta.clone(), 100.0).unwrap();
            let (_, g) = dpo_loss_and_gradient(&p, &reference, &c, &s, &b, winner, &losers, beta).unwrap();
            let f = |t: &[f64]| {
                let p = PolicyParams::new(t.to_vec(), 100.0).unwrap();
                dpo_loss_and_gradient(&p, &reference, &c, &s, &b, winner, &losers, beta).unwrap().0
            };
            let fd = central_difference(f, &theta, 1e-5);
            assert!(relative_error(&g, &fd) <= 1e-4, "{g:?} vs {fd:?}");
        }
    }
}
