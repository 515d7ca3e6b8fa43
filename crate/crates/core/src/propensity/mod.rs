//! Logging-policy propensities: eligibility, cross-fitted one-vs-all
//! classifiers, support enforcement and covariate balance.

mod balance;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_sim::{indexed_rng, ImpressionLog, TargetingFilter};
use crate::reward_models::{fit_sparse_logistic, ModelError, SparseDesign};

pub use balance::{balance_report, default_covariates, BalanceReport, CovariateBalance, Covariates};

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum PropensityError {
    #[error("row {row}: shown ad {ad} is not eligible")]
    DataInconsistency { row: usize, ad: usize },
    #[error("need 2 <= folds <= rows, got {folds} folds for {rows} rows")]
    InvalidFolds { folds: usize, rows: usize },
    #[error("row {row}: zero propensity for the shown ad {ad}")]
    Weighting { row: usize, ad: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(String),
}

// ── Eligibility ─────────────────────────────────────────────────────────

/// Why a log row was excluded from the eligibility matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DroppedRow {
    MissingTargeting { row: usize },
    Inconsistent { row: usize, ad: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EligibilityMatrix {
    pub n_ads: usize,
    /// `[kept row][ad]`.
    pub eligible: Vec<Vec<bool>>,
    /// Indices of the kept rows in the source log.
    pub kept: Vec<usize>,
    pub dropped: Vec<DroppedRow>,
    /// Targeting dimensions present in at least one filter.
    pub dimensions: Vec<String>,
}

impl EligibilityMatrix {
    pub fn len(&self) -> usize {
        self.eligible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eligible.is_empty()
    }

    /// Eligibility columns read from the log's stored bitmasks.
    pub fn from_log(log: &ImpressionLog) -> Self {
        Self {
            n_ads: log.n_ads,
            eligible: log.eligibility(),
            kept: (0..log.len()).collect(),
            dropped: Vec::new(),
            dimensions: Vec::new(),
        }
    }
}

/// `e[i][a]` holds iff row `i` passes every present filter of ad `a`. Rows with an hour outside
/// `0..24` count as missing targeting data; rows whose shown ad is ineligible are dropped as
/// inconsistent.
pub fn build_eligibility(log: &ImpressionLog, filters: &[TargetingFilter]) -> EligibilityMatrix {
    let mut dims = Vec::new();
    for (name, present) in [
        ("region", filters.iter().any(|f| f.regions.is_some())),
        ("hour", filters.iter().any(|f| f.hours.is_some())),
        ("app", filters.iter().any(|f| f.apps.is_some())),
    ] {
        if present {
            dims.push(name.to_string());
        }
    }
    let mut m =
        EligibilityMatrix { n_ads: filters.len(), eligible: Vec::new(), kept: Vec::new(), dropped: Vec::new(), dimensions: dims };
    for (i, r) in log.rows.iter().enumerate() {
        if r.hour > 23 {
            m.dropped.push(DroppedRow::MissingTargeting { row: i });
            continue;
        }
        let e: Vec<bool> = filters.iter().map(|f| f.allows(r.region_id, r.hour, r.app_id)).collect();
        let shown = r.ad_id as usize;
        if shown >= e.len() || !e[shown] {
            m.dropped.push(DroppedRow::Inconsistent { row: i, ad: shown });
            continue;
        }
        m.eligible.push(e);
        m.kept.push(i);
    }
    m
}

// ── Propensity matrix ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityMatrix {
    pub n_ads: usize,
    /// Supported, row-normalized `pi[i][a]`.
    pub probs: Vec<Vec<f64>>,
    /// Classifier scores before support enforcement.
    pub raw: Vec<Vec<f64>>,
    pub support: Vec<Vec<bool>>,
    pub notes: Vec<String>,
}

impl PropensityMatrix {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Propensities of the shown ads; errors on a zero.
    pub fn shown(&self, shown: &[u32]) -> Result<Vec<f64>, PropensityError> {
        shown
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let p = self.probs[i][a as usize];
                if p > 0.0 {
                    Ok(p)
                } else {
                    Err(PropensityError::Weighting { row: i, ad: a as usize })
                }
            })
            .collect()
    }

    /// Inverse propensities of the shown ads, optionally capped at `cap`.
    pub fn inverse_weights(&self, shown: &[u32], cap: Option<f64>) -> Result<Vec<f64>, PropensityError> {
        Ok(self.shown(shown)?.into_iter().map(|p| cap.map_or(1.0 / p, |c| (1.0 / p).min(c))).collect())
    }

    /// CSV with `impression_id` then `pi_<ad>` per ad.
    pub fn write_csv<W: Write>(&self, impression_ids: &[u64], w: W) -> Result<(), PropensityError> {
        let mut wtr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| PropensityError::Io(e.to_string());
        let mut header = vec!["impression_id".to_string()];
        header.extend((0..self.n_ads).map(|a| format!("pi_{a}")));
        wtr.write_record(&header).map_err(io)?;
        for (id, row) in impression_ids.iter().zip(&self.probs) {
            let mut rec = vec![id.to_string()];
            rec.extend(row.iter().map(|&p| crate::sig17(p)));
            wtr.write_record(&rec).map_err(io)?;
        }
        wtr.flush().map_err(|e| PropensityError::Io(e.to_string()))
    }
}

/// Impression ids and probability rows from a propensity CSV.
pub fn read_propensity_csv<R: std::io::Read>(r: R) -> Result<(Vec<u64>, Vec<Vec<f64>>), PropensityError> {
    let mut rdr = csv::Reader::from_reader(r);
    let io = |e: String| PropensityError::Io(e);
    let (mut ids, mut rows) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io(e.to_string()))?;
        let mut it = rec.iter();
        ids.push(it.next().unwrap_or("").parse().map_err(|e| io(format!("impression id: {e}")))?);
        rows.push(it.map(|v| v.parse::<f64>().map_err(|e| io(format!("propensity: {e}")))).collect::<Result<Vec<_>, _>>()?);
    }
    Ok((ids, rows))
}

/// Zero ineligible entries and renormalize each row over its eligible set. An eligible set
/// with all-zero scores becomes uniform, with a note.
pub fn enforce_support(raw: &[Vec<f64>], e: &[Vec<bool>]) -> Result<(Vec<Vec<f64>>, Vec<String>), PropensityError> {
    if raw.len() != e.len() {
        return Err(PropensityError::Dimension(format!("{} score rows vs {} eligibility rows", raw.len(), e.len())));
    }
    let mut notes = Vec::new();
    let mut out = Vec::with_capacity(raw.len());
    for (i, (r, el)) in raw.iter().zip(e).enumerate() {
        if r.len() != el.len() {
            return Err(PropensityError::Dimension(format!("row {i} has {} scores for {} ads", r.len(), el.len())));
        }
        let total: f64 = r.iter().zip(el).filter(|(_, &k)| k).map(|(s, _)| s.max(0.0)).sum();
        let n_el = el.iter().filter(|&&k| k).count();
        let row: Vec<f64> = if total > 0.0 {
            r.iter().zip(el).map(|(s, &k)| if k { s.max(0.0) / total } else { 0.0 }).collect()
        } else {
            notes.push(format!("row {i}: all eligible scores are zero, using uniform"));
            el.iter().map(|&k| if k { 1.0 / n_el as f64 } else { 0.0 }).collect()
        };
        out.push(row);
    }
    Ok((out, notes))
}

// ── Cross-fitting ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropensityConfig {
    pub folds: usize,
    /// Ridge strength on the targeting, location and time covariates.
    pub l2_penalty: f64,
    /// Ridge strength on the eligibility columns and pattern indicators.
    pub eligibility_l2_penalty: f64,
    pub max_iter: usize,
    /// Add a one-hot of the full eligibility pattern when there are at most this many ads.
    pub max_ads_for_pattern: usize,
    pub seed: u64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self { folds: 5, l2_penalty: 5e-2, eligibility_l2_penalty: 1e-4, max_iter: 200, max_ads_for_pattern: 8, seed: 23 }
    }
}

/// Classifier inputs: intercept, eligibility columns, eligibility pattern, region, app and hour
/// one-hots, and standardized location and time of day. Also returns the per-column penalty.
fn propensity_design(log: &ImpressionLog, e: &EligibilityMatrix, cfg: &PropensityConfig) -> (SparseDesign, Vec<f64>) {
    let rows: Vec<_> = e.kept.iter().map(|&i| &log.rows[i]).collect();
    let a = e.n_ads;
    let use_pattern = a <= cfg.max_ads_for_pattern;
    let n_region = rows.iter().map(|r| r.region_id + 1).max().unwrap_or(1) as usize;
    let n_app = rows.iter().map(|r| r.app_id + 1).max().unwrap_or(1) as usize;
    let dense = |r: &crate::market_sim::ImpressionRow| {
        let m = 2.0 * PI * (r.hour * 60 + r.minute) as f64 / 1440.0;
        [r.lat, r.lon, m.sin(), m.cos()]
    };
    let mut mean = [0.0; 4];
    let mut sq = [0.0; 4];
    for r in &rows {
        for (j, v) in dense(r).iter().enumerate() {
            mean[j] += v;
            sq[j] += v * v;
        }
    }
    let n = rows.len().max(1) as f64;
    let sd: Vec<f64> = (0..4)
        .map(|j| {
            mean[j] /= n;
            let s = (sq[j] / n - mean[j] * mean[j]).max(0.0).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let pattern_width = if use_pattern { 1usize << a } else { 0 };
    let off_pattern = 1 + a;
    let off_region = off_pattern + pattern_width;
    let off_app = off_region + n_region;
    let off_hour = off_app + n_app;
    let off_dense = off_hour + 24;
    let mut x = SparseDesign::new(off_dense + 4);
    let mut buf = Vec::new();
    for (r, el) in rows.iter().zip(&e.eligible) {
        buf.clear();
        buf.push((0, 1.0));
        let mut code = 0usize;
        for (k, &on) in el.iter().enumerate() {
            if on {
                buf.push(((1 + k) as u32, 1.0));
                code |= 1 << k;
            }
        }
        if use_pattern {
            buf.push(((off_pattern + code) as u32, 1.0));
        }
        buf.push(((off_region + r.region_id as usize) as u32, 1.0));
        buf.push(((off_app + r.app_id as usize) as u32, 1.0));
        buf.push(((off_hour + r.hour as usize) as u32, 1.0));
        for (j, v) in dense(r).iter().enumerate() {
            buf.push(((off_dense + j) as u32, (v - mean[j]) / sd[j]));
        }
        x.push_row(&buf);
    }
    let mut penalty = vec![cfg.l2_penalty; x.n_cols];
    penalty[0] = 0.0;
    penalty[1..off_region].iter_mut().for_each(|p| *p = cfg.eligibility_l2_penalty);
    (x, penalty)
}

/// Fold of each row: rows sorted by shown ad, shuffled within ad, then dealt round-robin.
pub fn stratified_folds(shown: &[u32], k: usize, seed: u64) -> Vec<usize> {
    let mut by_ad: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &a) in shown.iter().enumerate() {
        by_ad.entry(a).or_default().push(i);
    }
    let mut rng = indexed_rng(seed, 0xF01D);
    let mut fold = vec![0; shown.len()];
    let mut pos = 0;
    for rows in by_ad.values_mut() {
        rows.shuffle(&mut rng);
        for &i in rows.iter() {
            fold[i] = pos % k;
            pos += 1;
        }
    }
    fold
}

fn subset(x: &SparseDesign, rows: &[usize]) -> SparseDesign {
    let mut out = SparseDesign::new(x.n_cols);
    let mut buf = Vec::new();
    for &i in rows {
        buf.clear();
        for p in x.indptr[i]..x.indptr[i + 1] {
            buf.push((x.indices[p], x.values[p]));
        }
        out.push_row(&buf);
    }
    out
}

/// K-fold cross-fitted one-vs-all propensities over the kept rows of `e`.
pub fn cross_fit_propensities(
    log: &ImpressionLog,
    e: &EligibilityMatrix,
    cfg: &PropensityConfig,
) -> Result<PropensityMatrix, PropensityError> {
    let n = e.len();
    let k = cfg.folds;
    if k < 2 || n < k {
        return Err(PropensityError::InvalidFolds { folds: k, rows: n });
    }
    let shown: Vec<u32> = e.kept.iter().map(|&i| log.rows[i].ad_id).collect();
    let (x, penalty) = propensity_design(log, e, cfg);
    let fold = stratified_folds(&shown, k, cfg.seed);

    let jobs: Vec<(usize, usize)> = (0..e.n_ads).flat_map(|a| (0..k).map(move |f| (a, f))).collect();
    let results: Vec<Result<(usize, usize, Vec<(usize, f64)>, Option<String>), PropensityError>> = jobs
        .par_iter()
        .map(|&(a, f)| {
            let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
            let y: Vec<f64> = train.iter().map(|&i| (shown[i] as usize == a) as u8 as f64).collect();
            let rate = y.iter().sum::<f64>() / y.len() as f64;
            if rate == 0.0 || rate == 1.0 {
                let note = format!("ad {a} fold {f}: single class in training folds, using rate {rate}");
                return Ok((a, f, test.iter().map(|&i| (i, rate)).collect(), Some(note)));
            }
            let fit = fit_sparse_logistic(&subset(&x, &train), &y, &penalty, Some(0), cfg.max_iter)?;
            let scores = test.iter().map(|&i| (i, crate::reward_models::sigmoid(x.dot(i, &fit.weights)))).collect();
            Ok((a, f, scores, None))
        })
        .collect();

    let mut raw = vec![vec![0.0; e.n_ads]; n];
    let mut notes = Vec::new();
    for r in results {
        let (a, _, scores, note) = r?;
        for (i, s) in scores {
            raw[i][a] = s;
        }
        notes.extend(note);
    }
    let (probs, more) = enforce_support(&raw, &e.eligible)?;
    notes.extend(more);
    Ok(PropensityMatrix { n_ads: e.n_ads, probs, raw, support: e.eligible.clone(), notes })
}
