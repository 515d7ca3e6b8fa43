//! Ground-truth ad market simulator.
//!
//! Users arrive as Poisson streams, ads are allocated quasi-proportionally to
//! bid times quality among eligible ads, and clicks follow a known response
//! model. Every random concern draws from its own ChaCha stream so that
//! toggling one mechanism leaves the others' draws untouched.

mod config;
mod engine;
mod io;
mod market;
mod oracle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{Geography, InteractionKind, ResponseModel, SimConfig, TargetingConfig};
pub use engine::{engineered_bits, simulate_logs, ImpressionContext};
pub use io::{read_log_csv, read_truth_csv, write_log_csv, write_truth_csv};
pub use market::{
    sample_ads, sample_apps, sample_field, sample_market, sample_users, AdSpec, AppSpec, FourierComponent, LatentUser, Market,
    SpatialField, TargetingFilter,
};
pub use oracle::{oracle_policy_value, OracleValue};

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no eligible ad for this impression")]
    EmptyEligibleSet,
    #[error("bid-quality must be finite and positive, got {0}")]
    InvalidBidQuality(f64),
    #[error("policy chose ad {ad}, which is not eligible")]
    IneligibleAction { ad: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<csv::Error> for SimError {
    fn from(e: csv::Error) -> Self {
        SimError::Io(e.to_string())
    }
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}

// ── Random streams ──────────────────────────────────────────────────────

/// Independent random concerns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Population = 1,
    Ads = 2,
    Apps = 3,
    Field = 4,
    Arrivals = 5,
    Allocation = 6,
    Clicks = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    indexed_rng(seed, stream as u64)
}

/// Generator for an arbitrary numbered stream of `seed`.
pub fn indexed_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ── Allocation ──────────────────────────────────────────────────────────

/// Quasi-proportional allocation: `bq[a] / sum(bq[eligible])` on eligible ads, zero elsewhere.
pub fn quasi_proportional_probs(bq: &[f64], eligible: &[bool]) -> Result<Vec<f64>, SimError> {
    debug_assert_eq!(bq.len(), eligible.len());
    let mut total = 0.0;
    let mut any = false;
    for (&b, &e) in bq.iter().zip(eligible) {
        if e {
            if !(b.is_finite() && b > 0.0) {
                return Err(SimError::InvalidBidQuality(b));
            }
            total += b;
            any = true;
        }
    }
    if !any {
        return Err(SimError::EmptyEligibleSet);
    }
    Ok(bq.iter().zip(eligible).map(|(&b, &e)| if e { b / total } else { 0.0 }).collect())
}

// ── Logs ────────────────────────────────────────────────────────────────

/// One logged impression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionRow {
    pub impression_id: u64,
    pub user_id: u32,
    pub timestamp_s: f64,
    pub app_id: u32,
    pub ad_id: u32,
    pub click: u8,
    pub lat: f64,
    pub lon: f64,
    pub region_id: u32,
    pub city_id: u32,
    pub brand: u32,
    pub isp: u32,
    pub connectivity: u32,
    pub hour: u32,
    pub minute: u32,
    pub bid: f64,
    pub quality: f64,
    pub true_propensity: f64,
    pub true_ctr: f64,
    /// Bit `a` is set when ad `a` was eligible.
    pub eligibility: u64,
}

impl ImpressionRow {
    pub fn is_eligible(&self, ad: usize) -> bool {
        self.eligibility >> ad & 1 == 1
    }

    pub fn eligible_mask(&self, n_ads: usize) -> Vec<bool> {
        (0..n_ads).map(|a| self.is_eligible(a)).collect()
    }

    pub fn clicked(&self) -> bool {
        self.click == 1
    }
}

/// Impression log sorted by `(user_id, timestamp_s)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImpressionLog {
    pub n_ads: usize,
    pub rows: Vec<ImpressionRow>,
}

impl ImpressionLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn clicks(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.click as f64).collect()
    }

    pub fn user_ids(&self) -> Vec<u32> {
        self.rows.iter().map(|r| r.user_id).collect()
    }

    pub fn eligibility(&self) -> Vec<Vec<bool>> {
        self.rows.iter().map(|r| r.eligible_mask(self.n_ads)).collect()
    }

    /// Number of prior impressions of the same user for each row.
    pub fn depths(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.rows.len());
        let mut prev: Option<u32> = None;
        let mut d = 0;
        for r in &self.rows {
            if prev == Some(r.user_id) {
                d += 1;
            } else {
                d = 0;
                prev = Some(r.user_id);
            }
            out.push(d);
        }
        out
    }

    /// Subset of rows, keeping order.
    pub fn select(&self, idx: &[usize]) -> ImpressionLog {
        ImpressionLog { n_ads: self.n_ads, rows: idx.iter().map(|&i| self.rows[i].clone()).collect() }
    }
}

/// Full propensity vector and per-ad click probability for every logged row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub propensities: Vec<Vec<f64>>,
    pub ctrs: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn select(&self, idx: &[usize]) -> GroundTruth {
        GroundTruth {
            propensities: idx.iter().map(|&i| self.propensities[i].clone()).collect(),
            ctrs: idx.iter().map(|&i| self.ctrs[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub log: ImpressionLog,
    pub truth: GroundTruth,
}
