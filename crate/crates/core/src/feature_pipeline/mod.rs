//! Feature construction for the four information regimes.
//!
//! Context features encode time cyclically and categoricals by training-set
//! frequency rank. Behavioral features are computed from strictly earlier
//! impressions: per-user counters in each user's own timeline, and
//! population counters in global arrival order.

mod behavior;
mod context;

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_sim::{indexed_rng, ImpressionLog};

pub use behavior::{behavioral_features, BehavioralFeatures, AD_DEPENDENT_COUNT};
pub use context::{encode_context, ContextFeatures, TopKTables};

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid time hour={hour} minute={minute}")]
    InvalidTime { hour: u32, minute: u32 },
    #[error("rows are not sorted by (user_id, timestamp_s) at row {row}")]
    OrderingViolation { row: usize },
    #[error("io: {0}")]
    Io(String),
}

impl From<csv::Error> for FeatureError {
    fn from(e: csv::Error) -> Self {
        FeatureError::Io(e.to_string())
    }
}

// ── Regimes ─────────────────────────────────────────────────────────────

/// Information available to a targeting model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Regime {
    ContextOnly,
    Geo,
    Behavior,
    GeoBehavior,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::ContextOnly, Regime::Geo, Regime::Behavior, Regime::GeoBehavior];

    pub fn has_geo(self) -> bool {
        matches!(self, Regime::Geo | Regime::GeoBehavior)
    }

    pub fn has_behavior(self) -> bool {
        matches!(self, Regime::Behavior | Regime::GeoBehavior)
    }

    /// Short label used in file names and tables.
    pub fn tag(self) -> &'static str {
        match self {
            Regime::ContextOnly => "EMPTY",
            Regime::Geo => "G",
            Regime::Behavior => "B",
            Regime::GeoBehavior => "GB",
        }
    }
}

// ── Schema ──────────────────────────────────────────────────────────────

/// How a learner should transform a dense feature before standardizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Transform {
    Identity,
    /// `sign(x) * ln(1 + |x|)`.
    SignedLog,
    /// Log-odds of a rate clamped to `[0.005, 0.995]`.
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub name: String,
    pub transform: Transform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalSpec {
    pub name: String,
    /// Codes lie in `0..vocab`.
    pub vocab: u32,
}

/// Column layout of a regime's feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub regime: Regime,
    pub dense: Vec<DenseSpec>,
    pub categorical: Vec<CategoricalSpec>,
}

impl FeatureSchema {
    pub fn len(&self) -> usize {
        self.dense.len() + self.categorical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.dense.iter().map(|d| d.name.clone()).chain(self.categorical.iter().map(|c| c.name.clone())).collect()
    }
}

pub const CONTEXT_DENSE: [&str; 4] = ["hour_sin", "hour_cos", "minute_sin", "minute_cos"];
pub const CONTEXT_CATEGORICAL: [&str; 5] = ["app", "brand", "isp", "connectivity", "ad"];
pub const GEO_DENSE: [&str; 2] = ["lat", "lon"];
pub const GEO_CATEGORICAL: [&str; 2] = ["region", "city"];
pub const BEHAVIOR_DENSE: [&str; 14] =
    ["EC", "CH", "SCTR", "TSE", "TCE", "F", "CTR_user_ad", "CTR_ad", "U", "E", "P", "I", "U_overall", "E_overall"];

/// Sizes of the categorical vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub top_k: u32,
    pub n_ads: u32,
    pub n_regions: u32,
    pub n_cities: u32,
}

impl FeatureSpace {
    pub fn schema(&self, regime: Regime) -> FeatureSchema {
        let mut dense: Vec<DenseSpec> =
            CONTEXT_DENSE.iter().map(|n| DenseSpec { name: n.to_string(), transform: Transform::Identity }).collect();
        let mut categorical: Vec<CategoricalSpec> = CONTEXT_CATEGORICAL
            .iter()
            .map(|n| CategoricalSpec { name: n.to_string(), vocab: if *n == "ad" { self.n_ads } else { self.top_k + 1 } })
            .collect();
        if regime.has_geo() {
            dense.extend(GEO_DENSE.iter().map(|n| DenseSpec { name: n.to_string(), transform: Transform::Identity }));
            categorical.push(CategoricalSpec { name: "region".into(), vocab: self.n_regions });
            categorical.push(CategoricalSpec { name: "city".into(), vocab: self.n_cities });
        }
        if regime.has_behavior() {
            dense.extend(BEHAVIOR_DENSE.iter().map(|n| DenseSpec {
                name: n.to_string(),
                transform: match *n {
                    "EC" | "CH" | "TSE" | "TCE" | "F" => Transform::SignedLog,
                    "SCTR" | "CTR_user_ad" | "CTR_ad" => Transform::Logit,
                    _ => Transform::Identity,
                },
            }));
        }
        FeatureSchema { regime, dense, categorical }
    }
}

/// One assembled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub dense: Vec<f64>,
    pub categorical: Vec<u32>,
}

// ── Feature table ───────────────────────────────────────────────────────

/// Raw ingredients of every regime for every row of a log.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub space: FeatureSpace,
    pub context: Vec<ContextFeatures>,
    pub lat: Vec<f64>,
    pub lon: Vec<f64>,
    pub region: Vec<u32>,
    pub city: Vec<u32>,
    pub behavior: Vec<BehavioralFeatures>,
    pub logged_ad: Vec<u32>,
    pub user: Vec<u32>,
    pub timestamp_s: Vec<f64>,
    pub click: Vec<f64>,
}

impl FeatureTable {
    pub fn build(log: &ImpressionLog, tables: &TopKTables, space: FeatureSpace) -> Result<Self, FeatureError> {
        let behavior = behavioral_features(log)?;
        let context = log
            .rows
            .iter()
            .map(|r| encode_context(r.hour, r.minute, r.app_id, r.brand, r.isp, r.connectivity, tables))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            space,
            context,
            lat: log.rows.iter().map(|r| r.lat).collect(),
            lon: log.rows.iter().map(|r| r.lon).collect(),
            region: log.rows.iter().map(|r| r.region_id).collect(),
            city: log.rows.iter().map(|r| r.city_id).collect(),
            behavior,
            logged_ad: log.rows.iter().map(|r| r.ad_id).collect(),
            user: log.rows.iter().map(|r| r.user_id).collect(),
            timestamp_s: log.rows.iter().map(|r| r.timestamp_s).collect(),
            click: log.rows.iter().map(|r| r.click as f64).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.logged_ad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logged_ad.is_empty()
    }

    pub fn schema(&self, regime: Regime) -> FeatureSchema {
        self.space.schema(regime)
    }

    /// Feature vector of row `i` as if ad `ad` were shown.
    pub fn assemble(&self, regime: Regime, i: usize, ad: usize) -> FeatureRow {
        let c = &self.context[i];
        let mut dense = c.dense.to_vec();
        let mut categorical = c.categorical.to_vec();
        categorical.push(ad as u32);
        if regime.has_geo() {
            dense.push(self.lat[i]);
            dense.push(self.lon[i]);
            categorical.push(self.region[i]);
            categorical.push(self.city[i]);
        }
        if regime.has_behavior() {
            dense.extend_from_slice(&self.behavior[i].for_ad(ad));
        }
        FeatureRow { dense, categorical }
    }

    /// Feature vectors for the logged ads.
    pub fn assemble_regime(&self, regime: Regime) -> Vec<FeatureRow> {
        (0..self.len()).map(|i| self.assemble(regime, i, self.logged_ad[i] as usize)).collect()
    }

    /// Emit the logged-ad feature matrix as CSV with a header.
    pub fn write_csv<W: Write>(&self, regime: Regime, w: W) -> Result<(), FeatureError> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["row".to_string(), "user_id".into(), "click".into()];
        header.extend(self.schema(regime).names());
        wtr.write_record(&header)?;
        for (i, row) in self.assemble_regime(regime).iter().enumerate() {
            let mut rec = vec![i.to_string(), self.user[i].to_string(), self.click[i].to_string()];
            rec.extend(row.dense.iter().map(|v| v.to_string()));
            rec.extend(row.categorical.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| FeatureError::Io(e.to_string()))?;
        Ok(())
    }
}

// ── Train/test split ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub train_users: Vec<u32>,
    pub test_users: Vec<u32>,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

/// User-level split: `round(train_frac * n_users)` users, chosen by a seeded shuffle, go to train.
pub fn split_users_train_test(log: &ImpressionLog, train_frac: f64, seed: u64) -> UserSplit {
    let mut users: Vec<u32> = log.rows.iter().map(|r| r.user_id).collect();
    users.sort_unstable();
    users.dedup();
    let mut shuffled = users.clone();
    shuffled.shuffle(&mut indexed_rng(seed, 0x5B11));
    let n_train = ((train_frac.clamp(0.0, 1.0) * users.len() as f64).round() as usize).min(users.len());
    let mut train_users = shuffled[..n_train].to_vec();
    let mut test_users = shuffled[n_train..].to_vec();
    train_users.sort_unstable();
    test_users.sort_unstable();
    let (mut train_rows, mut test_rows) = (Vec::new(), Vec::new());
    for (i, r) in log.rows.iter().enumerate() {
        if train_users.binary_search(&r.user_id).is_ok() {
            train_rows.push(i);
        } else {
            test_rows.push(i);
        }
    }
    UserSplit { train_users, test_users, train_rows, test_rows }
}

#[cfg(test)]
mod tests;
