//! Parametric policy, preference loss, the alternating training loop and the
//! sample-and-select baseline.

pub mod dpo;
pub mod mosaic;
pub mod policy;
pub mod train;

pub use dpo::{build_preference_set, dpo_loss_and_gradient, DpoSample, PreferenceSet};
pub use mosaic::mosaic_select;
pub use policy::{
    log_prob, log_prob_gradient, policy_distribution, policy_features, FeatureTable, PolicyParams, POLICY_DIM,
    POLICY_FEATURES,
};
pub use train::{
    policy_metrics, run_irpo, training_contexts, DpoConfig, EpochRecord, IrpoConfig, IrpoOutcome, PolicyMetrics,
    TrainingHistory, HISTORY_HEADER,
};
