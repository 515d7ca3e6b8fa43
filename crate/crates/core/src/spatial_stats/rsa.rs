//! Residual spatial autocorrelation of click rates after baseline and behavioral offsets.

use serde::{Deserialize, Serialize};

use super::{
    aggregate_regions, build_weights, fit_poisson_rate, permutation_test, ResidualKind, SpatialError, Statistic, WeightScheme,
};
use crate::market_sim::ImpressionLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RegionKey {
    /// Coarse regions (`region_id`).
    County,
    /// Fine cells (`city_id`).
    City,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    All,
    /// First half of every user's impressions.
    Sparse,
    /// Remaining later impressions.
    Rich,
}

impl Split {
    /// Row indices of this split. For a user with `n` impressions the sparse half holds the
    /// first `ceil(n / 2)` and the rich half the other `floor(n / 2)`.
    pub fn rows(self, log: &ImpressionLog) -> Vec<usize> {
        if self == Split::All {
            return (0..log.len()).collect();
        }
        let mut by_user: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
        for (i, r) in log.rows.iter().enumerate() {
            by_user.entry(r.user_id).or_default().push(i);
        }
        let mut out = Vec::new();
        for idx in by_user.values_mut() {
            idx.sort_by(|&a, &b| log.rows[a].timestamp_s.total_cmp(&log.rows[b].timestamp_s).then(a.cmp(&b)));
            let cut = idx.len().div_ceil(2);
            match self {
                Split::Sparse => out.extend_from_slice(&idx[..cut]),
                Split::Rich => out.extend_from_slice(&idx[cut..]),
                Split::All => unreachable!(),
            }
        }
        out.sort_unstable();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RsaConfig {
    pub min_impressions: u64,
    pub scheme: WeightScheme,
    pub row_standardize: bool,
    pub n_perm: usize,
    pub seed: u64,
    pub keys: Vec<RegionKey>,
    pub splits: Vec<Split>,
    pub min_regions: usize,
}

impl Default for RsaConfig {
    fn default() -> Self {
        Self {
            min_impressions: 30,
            scheme: WeightScheme::default(),
            row_standardize: true,
            n_perm: 9999,
            seed: 17,
            keys: vec![RegionKey::County, RegionKey::City],
            splits: vec![Split::All, Split::Sparse, Split::Rich],
            min_regions: 10,
        }
    }
}

/// One row of the residual spatial autocorrelation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsaRow {
    pub region_key: RegionKey,
    pub split: Split,
    pub residual: ResidualKind,
    pub moran_i: f64,
    pub moran_p: f64,
    pub geary_c: f64,
    pub geary_p: f64,
    pub n_regions: usize,
    pub n_perm: usize,
}

/// Moran and Geary permutation tests for baseline and behavioral residuals.
///
/// `predictions[i]` is the behavioral model's click probability for the ad shown on row `i`.
pub fn rsa_pipeline(log: &ImpressionLog, predictions: &[f64], cfg: &RsaConfig) -> Result<Vec<RsaRow>, SpatialError> {
    if predictions.len() != log.len() {
        return Err(SpatialError::LengthMismatch(format!("{} predictions for {} rows", predictions.len(), log.len())));
    }
    if predictions.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(SpatialError::EmptyInput("predictions must be positive".into()));
    }
    let mut out = Vec::new();
    for (ki, &key) in cfg.keys.iter().enumerate() {
        for (si, &split) in cfg.splits.iter().enumerate() {
            let idx = split.rows(log);
            let keys: Vec<u32> = idx
                .iter()
                .map(|&i| match key {
                    RegionKey::County => log.rows[i].region_id,
                    RegionKey::City => log.rows[i].city_id,
                })
                .collect();
            let clicks: Vec<f64> = idx.iter().map(|&i| log.rows[i].click as f64).collect();
            let lat: Vec<f64> = idx.iter().map(|&i| log.rows[i].lat).collect();
            let lon: Vec<f64> = idx.iter().map(|&i| log.rows[i].lon).collect();
            let preds: Vec<f64> = idx.iter().map(|&i| predictions[i]).collect();
            let aggs = aggregate_regions(&keys, &clicks, &lat, &lon, Some(&preds), cfg.min_impressions)?;
            if aggs.len() < cfg.min_regions {
                return Err(SpatialError::InsufficientRegions { found: aggs.len(), needed: cfg.min_regions });
            }
            let centroids: Vec<(f64, f64)> = aggs.iter().map(|a| (a.lat, a.lon)).collect();
            let w = build_weights(&centroids, cfg.scheme, cfg.row_standardize)?;
            for (ri, kind) in [ResidualKind::Baseline, ResidualKind::Behavioral].into_iter().enumerate() {
                let fit = fit_poisson_rate(&aggs, kind)?;
                let seed = cfg.seed ^ ((ki as u64) << 16 | (si as u64) << 8 | ri as u64);
                let m = permutation_test(
                    &fit.residuals,
                    &w,
                    Statistic::MoransI,
                    cfg.n_perm,
                    Statistic::MoransI.clustering_tail(),
                    seed,
                )?;
                let g = permutation_test(
                    &fit.residuals,
                    &w,
                    Statistic::GearysC,
                    cfg.n_perm,
                    Statistic::GearysC.clustering_tail(),
                    seed,
                )?;
                out.push(RsaRow {
                    region_key: key,
                    split,
                    residual: kind,
                    moran_i: m.statistic,
                    moran_p: m.p_value,
                    geary_c: g.statistic,
                    geary_p: g.p_value,
                    n_regions: aggs.len(),
                    n_perm: cfg.n_perm,
                });
            }
        }
    }
    Ok(out)
}
