//! Monte Carlo ground-truth value of a targeting policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::SimConfig;
use super::engine::{draw_arrivals, ImpressionContext, World};
use super::market::Market;
use super::{indexed_rng, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub value: f64,
    pub mc_se: f64,
    pub n_impressions: usize,
}

const ORACLE_STREAM_BASE: u64 = 1 << 32;

/// Mean true click probability when `policy` serves every impression of `n_mc` fresh streams.
///
/// The policy sees the context and the true click probability of every ad. Clicks are drawn
/// under the policy so that history-dependent terms evolve as they would under deployment.
pub fn oracle_policy_value<P>(policy: P, market: &Market, cfg: &SimConfig, n_mc: usize) -> Result<OracleValue, SimError>
where
    P: Fn(&ImpressionContext, &[f64]) -> usize,
{
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut n = 0usize;
    for m in 0..n_mc as u64 {
        let mut arr_rng = indexed_rng(cfg.seed, ORACLE_STREAM_BASE + 2 * m);
        let mut click_rng = indexed_rng(cfg.seed, ORACLE_STREAM_BASE + 2 * m + 1);
        let arrivals = draw_arrivals(market, cfg, &mut arr_rng);
        let mut world = World::new(market, cfg)?;
        for arr in &arrivals {
            let ctx = world.context(arr);
            let ctrs = world.ctrs(&ctx);
            let ad = policy(&ctx, &ctrs);
            if ad >= ctrs.len() || !ctx.eligible[ad] {
                return Err(SimError::IneligibleAction { ad });
            }
            let p = ctrs[ad];
            let click = click_rng.gen::<f64>() < p;
            world.record(&ctx, ad, click);
            sum += p;
            sum_sq += p * p;
            n += 1;
        }
    }
    if n == 0 {
        return Ok(OracleValue { value: 0.0, mc_se: 0.0, n_impressions: 0 });
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    Ok(OracleValue { value: mean, mc_se: (var / n as f64).sqrt(), n_impressions: n })
}
