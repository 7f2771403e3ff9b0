//! Full-size training runs on the default scenario.

use genauction::ctr_model::FeatureMap;
use genauction::experiment::{test_contexts, ExperimentConfig};
use genauction::irpo::{policy_metrics, run_irpo};

#[test]
fn oracle_reward_rises_every_epoch() {
    for seed in [1, 2, 3] {
        let cfg = ExperimentConfig::with_seed(seed);
        let setting = cfg.setting().unwrap();
        let contexts = test_contexts(&setting, cfg.evaluation.test_contexts, seed);
        let out = run_irpo(&setting, &cfg.irpo, seed, &contexts).unwrap();
        let start = policy_metrics(&setting, &out.snapshots[0], &out.pctr_snapshots[0], &contexts).unwrap();
        let mut rewards = vec![start.oracle_reward_per_query];
        rewards.extend(out.history.records.iter().map(|r| r.oracle_reward_per_query));
        assert!(rewards.windows(2).all(|w| w[1] > w[0]), "seed {seed}: {rewards:?}");
        assert_eq!(out.history.len(), cfg.irpo.epochs);
    }
}

#[test]
fn misspecified_click_model_leaves_a_larger_gap() {
    let mut cfg = ExperimentConfig::with_seed(1);
    let setting = cfg.setting().unwrap();
    let contexts = test_contexts(&setting, cfg.evaluation.test_contexts, 1);
    let well = run_irpo(&setting, &cfg.irpo, 1, &contexts).unwrap();
    cfg.irpo.pctr_features = FeatureMap::NoCrowding;
    let miss = run_irpo(&setting, &cfg.irpo, 1, &contexts).unwrap();
    let gap = |o: &genauction::irpo::IrpoOutcome| o.history.records.last().unwrap().unbiasedness_gap;
    assert!(gap(&miss) > gap(&well), "{} vs {}", gap(&miss), gap(&well));
    assert!(gap(&miss) > 0.0);
}
