//! Counterfactual value-of-information lab for geographic and behavioral ad targeting.

pub mod cli_reporting;
pub mod feature_pipeline;
pub mod market_sim;
pub mod policy_eval;
pub mod propensity;
pub mod reward_models;
pub mod spatial_stats;
pub mod voi_tests;

/// Decimal with 17 significant digits, enough to round-trip any `f64`.
pub fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}
