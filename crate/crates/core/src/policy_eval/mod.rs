//! Greedy targeting policies and their inverse-propensity value estimates.
//!
//! A policy maps an evaluation row to an ad (or a distribution over ads). The IPS term of
//! row `i` is `w_i * v(A_i) * Y_i` with `w_i = pi(A_i | x_i) / pi_D(A_i | x_i)`; the value is their
//! mean and its standard error treats each user's impressions as one cluster.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_pipeline::{FeatureTable, Regime};
use crate::market_sim::ImpressionLog;
use crate::reward_models::{FittedModel, ModelError};

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("row {row}: no eligible ad with positive propensity")]
    EmptyEligibleSet { row: usize },
    #[error("row {row}: ad {ad} has zero logging propensity")]
    SupportViolation { row: usize, ad: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty evaluation set")]
    EmptyInput,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(String),
}

// ── Policies ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Ad(usize),
    /// Probability of each ad.
    Mixed(Vec<f64>),
}

impl Decision {
    pub fn prob(&self, ad: usize) -> f64 {
        match self {
            Decision::Ad(a) => (*a == ad) as u8 as f64,
            Decision::Mixed(p) => p[ad],
        }
    }
}

pub trait Policy: Sync {
    fn name(&self) -> String;
    /// Decision for evaluation row `row` given its eligibility and logging propensities.
    fn decide(&self, row: usize, eligible: &[bool], propensity: &[f64]) -> Result<Decision, PolicyError>;
}

/// Index of the highest score among eligible ads with positive propensity; ties go to the lowest id.
pub fn greedy_choice(row: usize, scores: &[f64], eligible: &[bool], propensity: &[f64]) -> Result<usize, PolicyError> {
    let mut best: Option<usize> = None;
    for a in 0..scores.len() {
        if eligible[a] && propensity[a] > 0.0 && best.is_none_or(|b| scores[a] > scores[b]) {
            best = Some(a);
        }
    }
    best.ok_or(PolicyError::EmptyEligibleSet { row })
}

/// Argmax over precomputed per-ad scores, `scores[row][ad]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyPolicy {
    pub name: String,
    pub regime: Option<Regime>,
    pub scores: Vec<Vec<f64>>,
}

impl Policy for GreedyPolicy {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn decide(&self, row: usize, eligible: &[bool], propensity: &[f64]) -> Result<Decision, PolicyError> {
        greedy_choice(row, &self.scores[row], eligible, propensity).map(Decision::Ad)
    }
}

/// Greedy policy over a fitted click model's predictions for `rows` of `table`.
pub fn induce_greedy_policy(model: &FittedModel, table: &FeatureTable, rows: &[usize]) -> Result<GreedyPolicy, PolicyError> {
    Ok(GreedyPolicy {
        name: format!("pi_{}", model.regime.tag()),
        regime: Some(model.regime),
        scores: model.predict_all_ads(table, rows)?,
    })
}

/// Serves one ad whenever it is eligible, else the lowest eligible id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedAdPolicy(pub usize);

impl Policy for FixedAdPolicy {
    fn name(&self) -> String {
        format!("always_ad_{}", self.0)
    }

    fn decide(&self, row: usize, eligible: &[bool], propensity: &[f64]) -> Result<Decision, PolicyError> {
        let mut scores = vec![0.0; eligible.len()];
        if self.0 < scores.len() {
            scores[self.0] = 1.0;
        }
        greedy_choice(row, &scores, eligible, propensity).map(Decision::Ad)
    }
}

/// Replays the logging policy's own propensities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoggingPolicy;

impl Policy for LoggingPolicy {
    fn name(&self) -> String {
        "logging".into()
    }

    fn decide(&self, _row: usize, _eligible: &[bool], propensity: &[f64]) -> Result<Decision, PolicyError> {
        Ok(Decision::Mixed(propensity.to_vec()))
    }
}

// ── Evaluation data ─────────────────────────────────────────────────────

/// Logged outcomes aligned row by row with their propensities.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalData {
    pub impression_ids: Vec<u64>,
    /// Cluster key of each row.
    pub user_ids: Vec<u32>,
    pub shown: Vec<usize>,
    pub clicks: Vec<f64>,
    pub eligible: Vec<Vec<bool>>,
    pub propensities: Vec<Vec<f64>>,
}

impl EvalData {
    /// Every row of `log` with the given propensities and the log's stored eligibility.
    pub fn from_log(log: &ImpressionLog, propensities: Vec<Vec<f64>>) -> Self {
        Self {
            impression_ids: log.rows.iter().map(|r| r.impression_id).collect(),
            user_ids: log.user_ids(),
            shown: log.rows.iter().map(|r| r.ad_id as usize).collect(),
            clicks: log.clicks(),
            eligible: log.eligibility(),
            propensities,
        }
    }

    pub fn len(&self) -> usize {
        self.shown.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shown.is_empty()
    }

    fn check(&self, n_values: usize) -> Result<(), PolicyError> {
        let n = self.len();
        if n == 0 {
            return Err(PolicyError::EmptyInput);
        }
        let lens =
            [self.impression_ids.len(), self.user_ids.len(), self.clicks.len(), self.eligible.len(), self.propensities.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(PolicyError::Dimension(format!("{n} shown ads but column lengths {lens:?}")));
        }
        if let Some(i) = (0..n)
            .find(|&i| self.eligible[i].len() != n_values || self.propensities[i].len() != n_values || self.shown[i] >= n_values)
        {
            return Err(PolicyError::Dimension(format!("row {i} does not match {n_values} ads")));
        }
        Ok(())
    }
}

// ── Estimation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImpressionTerm {
    pub impression_id: u64,
    pub user_id: u32,
    pub weight: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyValueEstimate {
    pub policy: String,
    pub value: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    /// `value / se`; absent when `se = 0`.
    pub t_stat: Option<f64>,
    pub lift_pct: f64,
    pub ess: f64,
    pub n: usize,
    pub n_clusters: usize,
    pub n_matched: usize,
    pub baseline_ctr: f64,
}

/// `(sum w)^2 / sum w^2`, zero when every weight is zero.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// Variance of the mean of `z` with one cluster per distinct key:
/// `(1/N^2) * sum_g (sum_{i in g} (z_i - mean))^2`. Also returns the cluster count.
pub fn cluster_robust_variance(z: &[f64], keys: &[u32]) -> (f64, usize) {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let mut sums: BTreeMap<u32, f64> = BTreeMap::new();
    for (&v, &k) in z.iter().zip(keys) {
        *sums.entry(k).or_default() += v - mean;
    }
    (sums.values().map(|s| s * s).sum::<f64>() / (n * n), sums.len())
}

/// IPS value of `policy` on logged data with per-ad reward values `v`.
pub fn ips_estimate(
    data: &EvalData,
    policy: &dyn Policy,
    v: &[f64],
) -> Result<(PolicyValueEstimate, Vec<PerImpressionTerm>), PolicyError> {
    data.check(v.len())?;
    let n = data.len();
    let terms = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = policy.decide(i, &data.eligible[i], &data.propensities[i])?;
            if let Decision::Ad(a) = d {
                if a >= v.len() || data.propensities[i][a] <= 0.0 {
                    return Err(PolicyError::SupportViolation { row: i, ad: a });
                }
            }
            let a = data.shown[i];
            let target = d.prob(a);
            let weight = if target > 0.0 {
                let p = data.propensities[i][a];
                if !(p > 0.0) {
                    return Err(PolicyError::SupportViolation { row: i, ad: a });
                }
                target / p
            } else {
                0.0
            };
            Ok(PerImpressionTerm {
                impression_id: data.impression_ids[i],
                user_id: data.user_ids[i],
                weight,
                contribution: weight * v[a] * data.clicks[i],
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let z: Vec<f64> = terms.iter().map(|t| t.contribution).collect();
    let value = z.iter().sum::<f64>() / n as f64;
    let (var, n_clusters) = cluster_robust_variance(&z, &data.user_ids);
    let se = var.sqrt();
    let matched: Vec<f64> = terms.iter().map(|t| t.weight).filter(|&w| w > 0.0).collect();
    let baseline_ctr = data.clicks.iter().sum::<f64>() / n as f64;
    let est = PolicyValueEstimate {
        policy: policy.name(),
        value,
        se,
        ci95: (value - 1.96 * se, value + 1.96 * se),
        t_stat: (se > 0.0).then(|| value / se),
        lift_pct: 100.0 * (value / baseline_ctr - 1.0),
        ess: effective_sample_size(&matched),
        n,
        n_clusters,
        n_matched: matched.len(),
        baseline_ctr,
    };
    Ok((est, terms))
}

// ── Output ──────────────────────────────────────────────────────────────

pub fn write_terms_csv<W: Write>(terms: &[PerImpressionTerm], w: W) -> Result<(), PolicyError> {
    let mut wtr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| PolicyError::Io(e.to_string());
    wtr.write_record(["impression_id", "user_id", "weight", "contribution"]).map_err(io)?;
    for t in terms {
        wtr.write_record([
            t.impression_id.to_string(),
            t.user_id.to_string(),
            crate::sig17(t.weight),
            crate::sig17(t.contribution),
        ])
        .map_err(io)?;
    }
    wtr.flush().map_err(|e| PolicyError::Io(e.to_string()))
}

pub fn read_terms_csv<R: std::io::Read>(r: R) -> Result<Vec<PerImpressionTerm>, PolicyError> {
    let mut rdr = csv::Reader::from_reader(r);
    let io = |e: String| PolicyError::Io(e);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io(e.to_string()))?;
        let f = |k: usize| rec.get(k).ok_or_else(|| io(format!("missing column {k}")));
        out.push(PerImpressionTerm {
            impression_id: f(0)?.parse().map_err(|e| io(format!("{e}")))?,
            user_id: f(1)?.parse().map_err(|e| io(format!("{e}")))?,
            weight: f(2)?.parse().map_err(|e| io(format!("{e}")))?,
            contribution: f(3)?.parse().map_err(|e| io(format!("{e}")))?,
        });
    }
    Ok(out)
}

/// One row of the policy value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTableRow {
    pub policy: String,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub t: Option<f64>,
    pub se: f64,
    pub lift_pct: f64,
    pub ess: f64,
}

impl From<&PolicyValueEstimate> for PolicyTableRow {
    fn from(e: &PolicyValueEstimate) -> Self {
        Self {
            policy: e.policy.clone(),
            estimate: e.value,
            ci_lo: e.ci95.0,
            ci_hi: e.ci95.1,
            t: e.t_stat,
            se: e.se,
            lift_pct: e.lift_pct,
            ess: e.ess,
        }
    }
}

pub fn policy_table_json(estimates: &[PolicyValueEstimate]) -> String {
    let rows: Vec<PolicyTableRow> = estimates.iter().map(PolicyTableRow::from).collect();
    serde_json::to_string_pretty(&rows).expect("table serializes")
}

#[cfg(test)]
mod tests;
