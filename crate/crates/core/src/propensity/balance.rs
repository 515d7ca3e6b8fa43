use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{EligibilityMatrix, PropensityError};
use crate::market_sim::ImpressionLog;

/// Named covariate columns aligned with the kept rows of an eligibility matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub names: Vec<String>,
    /// `[covariate][row]`.
    pub columns: Vec<Vec<f64>>,
}

/// Location, time of day and per-app indicators.
pub fn default_covariates(log: &ImpressionLog, e: &EligibilityMatrix) -> Covariates {
    let rows: Vec<_> = e.kept.iter().map(|&i| &log.rows[i]).collect();
    let minute = |r: &crate::market_sim::ImpressionRow| (r.hour * 60 + r.minute) as f64;
    let mut names = vec!["lat".to_string(), "lon".to_string(), "minute_of_day".to_string()];
    let mut columns = vec![
        rows.iter().map(|r| r.lat).collect(),
        rows.iter().map(|r| r.lon).collect(),
        rows.iter().map(|r| minute(r)).collect(),
    ];
    names.push("time_sin".into());
    columns.push(rows.iter().map(|r| (2.0 * PI * minute(r) / 1440.0).sin()).collect());
    names.push("time_cos".into());
    columns.push(rows.iter().map(|r| (2.0 * PI * minute(r) / 1440.0).cos()).collect());
    let n_app = rows.iter().map(|r| r.app_id + 1).max().unwrap_or(0);
    for app in 0..n_app {
        names.push(format!("app_{app}"));
        columns.push(rows.iter().map(|r| (r.app_id == app) as u8 as f64).collect());
    }
    Covariates { names, columns }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBalance {
    pub name: String,
    /// Max over ads of the unweighted standardized bias.
    pub pre: f64,
    /// Max over ads of the inverse-propensity weighted standardized bias.
    pub post: f64,
    pub worst_ad_pre: usize,
    pub worst_ad_post: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub threshold: f64,
    pub covariates: Vec<CovariateBalance>,
    /// Covariates with zero spread, excluded from the report.
    pub skipped: Vec<String>,
}

impl BalanceReport {
    pub fn max_post(&self) -> f64 {
        self.covariates.iter().map(|c| c.post).fold(0.0, f64::max)
    }

    pub fn mean_pre(&self) -> f64 {
        mean(self.covariates.iter().map(|c| c.pre))
    }

    pub fn mean_post(&self) -> f64 {
        mean(self.covariates.iter().map(|c| c.post))
    }

    pub fn all_below_threshold(&self) -> bool {
        self.covariates.iter().all(|c| c.post < self.threshold)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Standardized bias `|treated mean - eligible mean| / eligible sd` per covariate and ad,
/// before and after Hajek inverse-propensity weighting of the treated rows.
pub fn balance_report(
    log: &ImpressionLog,
    e: &EligibilityMatrix,
    probs: &[Vec<f64>],
    cov: &Covariates,
) -> Result<BalanceReport, PropensityError> {
    let n = e.len();
    if probs.len() != n || cov.columns.iter().any(|c| c.len() != n) {
        return Err(PropensityError::Dimension(format!("{n} eligibility rows, {} propensity rows", probs.len())));
    }
    let shown: Vec<usize> = e.kept.iter().map(|&i| log.rows[i].ad_id as usize).collect();
    let mut w = vec![0.0; n];
    for i in 0..n {
        let p = probs[i][shown[i]];
        if !(p > 0.0) {
            return Err(PropensityError::Weighting { row: i, ad: shown[i] });
        }
        w[i] = 1.0 / p;
    }

    let mut report = BalanceReport { threshold: 0.2, covariates: Vec::new(), skipped: Vec::new() };
    for (name, x) in cov.names.iter().zip(&cov.columns) {
        let mu = x.iter().sum::<f64>() / n as f64;
        if x.iter().all(|v| (v - mu).abs() < 1e-12) {
            report.skipped.push(name.clone());
            continue;
        }
        let mut cb = CovariateBalance { name: name.clone(), pre: 0.0, post: 0.0, worst_ad_pre: 0, worst_ad_post: 0 };
        for a in 0..e.n_ads {
            let (mut s, mut ss, mut m) = (0.0, 0.0, 0.0);
            let (mut ts, mut tn, mut ws, mut wn) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                if e.eligible[i][a] {
                    s += x[i];
                    ss += x[i] * x[i];
                    m += 1.0;
                }
                if shown[i] == a {
                    ts += x[i];
                    tn += 1.0;
                    ws += w[i] * x[i];
                    wn += w[i];
                }
            }
            if tn == 0.0 || m == 0.0 {
                continue;
            }
            let mean_el = s / m;
            let sd = (ss / m - mean_el * mean_el).max(0.0).sqrt();
            if sd < 1e-12 {
                continue;
            }
            let pre = (ts / tn - mean_el).abs() / sd;
            let post = (ws / wn - mean_el).abs() / sd;
            if pre > cb.pre {
                cb.pre = pre;
                cb.worst_ad_pre = a;
            }
            if post > cb.post {
                cb.post = post;
                cb.worst_ad_post = a;
            }
        }
        report.covariates.push(cb);
    }
    Ok(report)
}
