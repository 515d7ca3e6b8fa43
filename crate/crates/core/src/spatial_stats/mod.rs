//! Regional aggregation, Poisson rate residuals and spatial autocorrelation tests.

mod rsa;
mod weights;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_sim::indexed_rng;

pub use rsa::{rsa_pipeline, RegionKey, RsaConfig, RsaRow, Split};
pub use weights::{build_weights, great_circle_km, WeightMatrix, WeightScheme};

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Error, PartialEq)]
pub enum SpatialError {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("residuals have zero variance")]
    ZeroVariance,
    #[error("only {found} regions pass the impression floor, need at least {needed}")]
    InsufficientRegions { found: usize, needed: usize },
    #[error("input length mismatch: {0}")]
    LengthMismatch(String),
}

// ── Aggregation ─────────────────────────────────────────────────────────

/// Impressions, clicks and behavioral offset of one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAggregate {
    pub region_key: u32,
    pub impressions: u64,
    pub clicks: u64,
    /// Log of the mean behavioral prediction over the region's impressions.
    pub behavioral_offset: f64,
    pub lat: f64,
    pub lon: f64,
}

/// Group impressions by key and drop regions below `min_impressions`. Output is sorted by key.
pub fn aggregate_regions(
    keys: &[u32],
    clicks: &[f64],
    lat: &[f64],
    lon: &[f64],
    predictions: Option<&[f64]>,
    min_impressions: u64,
) -> Result<Vec<RegionAggregate>, SpatialError> {
    let n = keys.len();
    if clicks.len() != n || lat.len() != n || lon.len() != n || predictions.is_some_and(|p| p.len() != n) {
        return Err(SpatialError::LengthMismatch("aggregate_regions inputs".into()));
    }
    let mut acc: std::collections::BTreeMap<u32, (u64, f64, f64, f64, f64)> = Default::default();
    for i in 0..n {
        let e = acc.entry(keys[i]).or_insert((0, 0.0, 0.0, 0.0, 0.0));
        e.0 += 1;
        e.1 += clicks[i];
        e.2 += lat[i];
        e.3 += lon[i];
        e.4 += predictions.map_or(0.0, |p| p[i]);
    }
    Ok(acc
        .into_iter()
        .filter(|(_, v)| v.0 >= min_impressions.max(1))
        .map(|(k, (m, y, la, lo, pr))| {
            let m_f = m as f64;
            RegionAggregate {
                region_key: k,
                impressions: m,
                clicks: y.round() as u64,
                behavioral_offset: if predictions.is_some() { (pr / m_f).ln() } else { 0.0 },
                lat: la / m_f,
                lon: lo / m_f,
            }
        })
        .collect())
}

// ── Poisson rate model ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ResidualKind {
    /// Intercept-only model.
    Baseline,
    /// Intercept plus the behavioral offset.
    Behavioral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonFit {
    pub alpha: f64,
    pub residuals: Vec<f64>,
}

/// Closed-form intercept MLE and per-region log-rate residuals.
///
/// Regions with zero clicks use the continuity-corrected rate `ln((Y + 0.5) / (I + 1))`.
pub fn fit_poisson_rate(aggs: &[RegionAggregate], kind: ResidualKind) -> Result<PoissonFit, SpatialError> {
    if aggs.is_empty() {
        return Err(SpatialError::EmptyInput("no regions".into()));
    }
    let offset = |a: &RegionAggregate| match kind {
        ResidualKind::Baseline => 0.0,
        ResidualKind::Behavioral => a.behavioral_offset,
    };
    let total_y: f64 = aggs.iter().map(|a| a.clicks as f64).sum();
    if total_y <= 0.0 {
        return Err(SpatialError::EmptyInput("no clicks in any region".into()));
    }
    let exposure: f64 = aggs.iter().map(|a| a.impressions as f64 * offset(a).exp()).sum();
    let alpha = (total_y / exposure).ln();
    let residuals = aggs
        .iter()
        .map(|a| {
            let (y, m) = (a.clicks as f64, a.impressions as f64);
            let rate = if a.clicks == 0 { ((y + 0.5) / (m + 1.0)).ln() } else { (y / m).ln() };
            rate - alpha - offset(a)
        })
        .collect();
    Ok(PoissonFit { alpha, residuals })
}

// ── Autocorrelation statistics ──────────────────────────────────────────

fn centered(x: &[f64]) -> Result<(Vec<f64>, f64), SpatialError> {
    if x.is_empty() {
        return Err(SpatialError::EmptyInput("no values".into()));
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let z: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let ss: f64 = z.iter().map(|v| v * v).sum();
    let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    if !(ss > 1e-24 * scale * scale * x.len() as f64) {
        return Err(SpatialError::ZeroVariance);
    }
    Ok((z, ss))
}

fn check_dims(x: &[f64], w: &WeightMatrix) -> Result<(), SpatialError> {
    if x.len() != w.n() {
        return Err(SpatialError::LengthMismatch(format!("{} values for {} regions", x.len(), w.n())));
    }
    if w.total() == 0.0 {
        return Err(SpatialError::DegenerateGeometry("weights sum to zero".into()));
    }
    Ok(())
}

fn moran_from_centered(z: &[f64], ss: f64, w: &WeightMatrix) -> f64 {
    let cross: f64 = w.rows().iter().enumerate().map(|(i, row)| z[i] * row.iter().map(|&(j, wij)| wij * z[j]).sum::<f64>()).sum();
    z.len() as f64 / w.total() * cross / ss
}

fn geary_from_centered(z: &[f64], ss: f64, w: &WeightMatrix) -> f64 {
    let diff: f64 =
        w.rows().iter().enumerate().map(|(i, row)| row.iter().map(|&(j, wij)| wij * (z[i] - z[j]).powi(2)).sum::<f64>()).sum();
    (z.len() as f64 - 1.0) * diff / (2.0 * w.total() * ss)
}

/// Moran's I.
pub fn morans_i(x: &[f64], w: &WeightMatrix) -> Result<f64, SpatialError> {
    check_dims(x, w)?;
    let (z, ss) = centered(x)?;
    Ok(moran_from_centered(&z, ss, w))
}

/// Geary's C in its standard normalization.
pub fn gearys_c(x: &[f64], w: &WeightMatrix) -> Result<f64, SpatialError> {
    check_dims(x, w)?;
    let (z, ss) = centered(x)?;
    Ok(geary_from_centered(&z, ss, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Statistic {
    MoransI,
    GearysC,
}

impl Statistic {
    /// Tail that indicates positive spatial autocorrelation.
    pub fn clustering_tail(self) -> Tail {
        match self {
            Statistic::MoransI => Tail::Upper,
            Statistic::GearysC => Tail::Lower,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Tail {
    Upper,
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialTestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Mean of the permutation distribution.
    pub expected_under_null: f64,
    /// Standard deviation of the permutation distribution.
    pub null_sd: f64,
    pub n_perm: usize,
    pub tail: Tail,
}

/// Permutation test with `p = (1 + #extreme) / (1 + n_perm)`.
pub fn permutation_test(
    x: &[f64],
    w: &WeightMatrix,
    stat: Statistic,
    n_perm: usize,
    tail: Tail,
    seed: u64,
) -> Result<SpatialTestResult, SpatialError> {
    check_dims(x, w)?;
    let (z, ss) = centered(x)?;
    let eval = |v: &[f64]| match stat {
        Statistic::MoransI => moran_from_centered(v, ss, w),
        Statistic::GearysC => geary_from_centered(v, ss, w),
    };
    let observed = eval(&z);
    let mut rng = indexed_rng(seed, 0x5EA7);
    let mut perm = z.clone();
    let (mut extreme, mut sum, mut sum_sq) = (0usize, 0.0, 0.0);
    for _ in 0..n_perm {
        perm.shuffle(&mut rng);
        let s = eval(&perm);
        sum += s;
        sum_sq += s * s;
        let hit = match tail {
            Tail::Upper => s >= observed,
            Tail::Lower => s <= observed,
        };
        extreme += hit as usize;
    }
    let (mean, sd) = if n_perm > 0 {
        let m = sum / n_perm as f64;
        (m, ((sum_sq / n_perm as f64 - m * m).max(0.0)).sqrt())
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(SpatialTestResult {
        statistic: observed,
        p_value: (1 + extreme) as f64 / (1 + n_perm) as f64,
        expected_under_null: mean,
        null_sd: sd,
        n_perm,
        tail,
    })
}
