use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::FeatureError;
use crate::market_sim::ImpressionLog;

/// Frequency-ranked category tables fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKTables {
    pub k: u32,
    /// Category ids in descending training frequency, ties by id, at most `k` long.
    pub app: Vec<u32>,
    pub brand: Vec<u32>,
    pub isp: Vec<u32>,
    pub connectivity: Vec<u32>,
}

fn top_k(values: impl Iterator<Item = u32>, k: u32) -> Vec<u32> {
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let mut items: Vec<(u32, u64)> = counts.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    items.into_iter().take(k as usize).map(|(v, _)| v).collect()
}

fn rank(table: &[u32], v: u32) -> u32 {
    table.iter().position(|&x| x == v).map_or(0, |p| p as u32 + 1)
}

impl TopKTables {
    /// Fit on the given rows only.
    pub fn fit(log: &ImpressionLog, rows: &[usize], k: u32) -> Self {
        let col = |f: fn(&crate::market_sim::ImpressionRow) -> u32| top_k(rows.iter().map(|&i| f(&log.rows[i])), k);
        Self { k, app: col(|r| r.app_id), brand: col(|r| r.brand), isp: col(|r| r.isp), connectivity: col(|r| r.connectivity) }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tables serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, FeatureError> {
        serde_json::from_str(text).map_err(|e| FeatureError::Io(e.to_string()))
    }
}

/// Cyclic time features and ranked categorical codes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextFeatures {
    /// `[hour_sin, hour_cos, minute_sin, minute_cos]`.
    pub dense: [f64; 4],
    /// Ranks of `[app, brand, isp, connectivity]`; 0 outside the top-k.
    pub categorical: [u32; 4],
}

pub fn encode_context(
    hour: u32,
    minute: u32,
    app: u32,
    brand: u32,
    isp: u32,
    connectivity: u32,
    tables: &TopKTables,
) -> Result<ContextFeatures, FeatureError> {
    if hour > 23 || minute > 59 {
        return Err(FeatureError::InvalidTime { hour, minute });
    }
    let h = 2.0 * PI * hour as f64 / 24.0;
    let m = 2.0 * PI * minute as f64 / 60.0;
    Ok(ContextFeatures {
        dense: [h.sin(), h.cos(), m.sin(), m.cos()],
        categorical: [
            rank(&tables.app, app),
            rank(&tables.brand, brand),
            rank(&tables.isp, isp),
            rank(&tables.connectivity, connectivity),
        ],
    })
}
