//! Complement or substitute: the difference-in-differences test
//! `Delta = (V_GB - V_B) - (V_G - V_EMPTY)` on per-impression IPS terms, in aggregate and by
//! impression depth, with user-clustered standard errors and a cluster bootstrap.

mod scenario;

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::market_sim::indexed_rng;
use crate::policy_eval::PerImpressionTerm;
use crate::sig17;

pub use scenario::{scenario_policies, ScenarioPolicy};

#[derive(Debug, Error)]
pub enum VoiError {
    #[error("term lists are not aligned: {0}")]
    Alignment(String),
    #[error("cannot form {bins} bins from {distinct} distinct depths")]
    Binning { bins: usize, distinct: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("io: {0}")]
    Io(String),
}

// ── Results ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Complement,
    Substitute,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Tier {
    Strong,
    Moderate,
    Weak,
    None,
}

impl Tier {
    pub fn label(self) -> &'static str {
        match self {
            Tier::Strong => "strong",
            Tier::Moderate => "mod",
            Tier::Weak => "weak",
            Tier::None => "none",
        }
    }
}

impl Decision {
    pub fn label(self) -> &'static str {
        match self {
            Decision::Complement => "Complement",
            Decision::Substitute => "Substitute",
            Decision::Inconclusive => "Inconclusive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaResult {
    pub delta_hat: f64,
    pub se_clustered: f64,
    pub ci95: (f64, f64),
    pub t_stat: f64,
    pub p_two_sided: f64,
    /// One-sided probability against `Delta > 0`: share of bootstrap draws with `Delta* <= 0`.
    pub p_delta_pos: f64,
    /// One-sided probability against `Delta < 0`: `1 - p_delta_pos`.
    pub p_delta_neg: f64,
    pub decision: Decision,
    pub tier: Tier,
    pub n: usize,
    pub n_clusters: usize,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

impl DeltaResult {
    /// Result with normal-approximation one-sided probabilities in place of the bootstrap.
    pub fn from_normal(delta_hat: f64, se: f64) -> Self {
        let t = if se > 0.0 { delta_hat / se } else { 0.0 };
        let nd = std_normal();
        let p_pos = if se > 0.0 { nd.cdf(-t) } else { (delta_hat <= 0.0) as u8 as f64 };
        let mut r = Self {
            delta_hat,
            se_clustered: se,
            ci95: (delta_hat - 1.96 * se, delta_hat + 1.96 * se),
            t_stat: t,
            p_two_sided: if se > 0.0 { 2.0 * nd.cdf(-t.abs()) } else { 1.0 },
            p_delta_pos: p_pos,
            p_delta_neg: 1.0 - p_pos,
            decision: Decision::Inconclusive,
            tier: Tier::None,
            n: 0,
            n_clusters: 0,
        };
        (r.decision, r.tier) = classify_interaction(&r);
        r
    }
}

/// Sign of `delta_hat` with a significance tier from the one-sided probability in that direction.
/// Weak evidence (`p_two >= 0.5`, one-sided in `[0.3, 0.7]`, or no tier) is inconclusive.
pub fn classify_interaction(d: &DeltaResult) -> (Decision, Tier) {
    let p_dir = if d.delta_hat > 0.0 { d.p_delta_pos } else { d.p_delta_neg };
    let tier = if p_dir <= 0.01 {
        Tier::Strong
    } else if p_dir <= 0.05 {
        Tier::Moderate
    } else if p_dir <= 0.10 {
        Tier::Weak
    } else {
        Tier::None
    };
    let weak = d.p_two_sided >= 0.5 || (0.3..=0.7).contains(&d.p_delta_pos) || tier == Tier::None;
    if d.delta_hat == 0.0 || weak {
        return (Decision::Inconclusive, Tier::None);
    }
    let decision = if d.delta_hat > 0.0 { Decision::Complement } else { Decision::Substitute };
    (decision, tier)
}

// ── Aggregate test ──────────────────────────────────────────────────────

/// IPS terms of the four regime policies over the same impressions, in the same order.
#[derive(Debug, Clone, Copy)]
pub struct RegimeTerms<'a> {
    pub empty: &'a [PerImpressionTerm],
    pub geo: &'a [PerImpressionTerm],
    pub behavior: &'a [PerImpressionTerm],
    pub geo_behavior: &'a [PerImpressionTerm],
}

impl RegimeTerms<'_> {
    fn lists(&self) -> [&[PerImpressionTerm]; 4] {
        [self.empty, self.geo, self.behavior, self.geo_behavior]
    }

    fn check(&self) -> Result<usize, VoiError> {
        let n = self.empty.len();
        if n == 0 {
            return Err(VoiError::EmptyInput);
        }
        for l in self.lists() {
            if l.len() != n {
                return Err(VoiError::Alignment(format!("lengths {} and {n}", l.len())));
            }
            if let Some(i) =
                (0..n).find(|&i| l[i].impression_id != self.empty[i].impression_id || l[i].user_id != self.empty[i].user_id)
            {
                return Err(VoiError::Alignment(format!(
                    "row {i} has impression {} vs {}",
                    l[i].impression_id, self.empty[i].impression_id
                )));
            }
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeltaConfig {
    pub n_boot: usize,
    pub n_bins: usize,
    pub seed: u64,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        Self { n_boot: 2000, n_bins: 10, seed: 97 }
    }
}

/// Policy values `[EMPTY, G, B, GB]` over `rows`.
fn levels(terms: &RegimeTerms, rows: &[usize]) -> [f64; 4] {
    let n = rows.len() as f64;
    terms.lists().map(|l| rows.iter().map(|&i| l[i].contribution).sum::<f64>() / n)
}

/// Means of `n_boot` cluster resamples; `sums` holds `(sum, count)` per cluster.
pub fn bootstrap_draws(sums: &[(f64, f64)], n_boot: usize, seed: u64, stream: u64) -> Vec<f64> {
    let g = sums.len();
    (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = indexed_rng(seed, (stream << 32) | b as u64);
            let (mut s, mut m) = (0.0, 0.0);
            for _ in 0..g {
                let (cs, cm) = sums[rng.gen_range(0..g)];
                s += cs;
                m += cm;
            }
            s / m
        })
        .collect()
}

fn delta_on(terms: &RegimeTerms, rows: &[usize], cfg: &DeltaConfig, stream: u64) -> DeltaResult {
    let [v0, vg, vb, vgb] = levels(terms, rows);
    let delta_hat = (vgb - vb) - (vg - v0);
    let n = rows.len();
    let nf = n as f64;

    let d: Vec<f64> = rows
        .iter()
        .map(|&i| {
            (terms.geo_behavior[i].contribution - terms.behavior[i].contribution)
                - (terms.geo[i].contribution - terms.empty[i].contribution)
        })
        .collect();
    let mean_delta = d.iter().sum::<f64>() / nf;
    let mut clusters: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    for (&i, &v) in rows.iter().zip(&d) {
        let c = clusters.entry(terms.empty[i].user_id).or_default();
        c.0 += v;
        c.1 += 1.0;
    }
    let var = clusters.values().map(|&(s, m)| (s - m * mean_delta).powi(2)).sum::<f64>() / (nf * nf);
    let se = var.sqrt();

    let sums: Vec<(f64, f64)> = clusters.into_values().collect();
    let g = sums.len();
    let p_pos = if cfg.n_boot > 0 {
        let draws = bootstrap_draws(&sums, cfg.n_boot, cfg.seed, stream);
        draws.iter().filter(|&&v| v <= 0.0).count() as f64 / cfg.n_boot as f64
    } else {
        DeltaResult::from_normal(delta_hat, se).p_delta_pos
    };

    let t = if se > 0.0 { delta_hat / se } else { 0.0 };
    let mut r = DeltaResult {
        delta_hat,
        se_clustered: se,
        ci95: (delta_hat - 1.96 * se, delta_hat + 1.96 * se),
        t_stat: t,
        p_two_sided: if se > 0.0 { 2.0 * std_normal().cdf(-t.abs()) } else { 1.0 },
        p_delta_pos: p_pos,
        p_delta_neg: 1.0 - p_pos,
        decision: Decision::Inconclusive,
        tier: Tier::None,
        n,
        n_clusters: g,
    };
    (r.decision, r.tier) = classify_interaction(&r);
    r
}

/// Aggregate test over every impression.
pub fn aggregate_delta_test(terms: &RegimeTerms, cfg: &DeltaConfig) -> Result<DeltaResult, VoiError> {
    let n = terms.check()?;
    let rows: Vec<usize> = (0..n).collect();
    Ok(delta_on(terms, &rows, cfg, 0))
}

// ── Depth bins ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthBinResult {
    pub bin: usize,
    /// Largest impression depth in the bin.
    pub last_depth: u32,
    pub n: usize,
    pub delta: DeltaResult,
    /// Policy values `[EMPTY, G, B, GB]` within the bin.
    pub levels: [f64; 4],
}

/// Equal-count bins of row indices ordered by depth; rows keep their original order within a bin.
pub fn depth_bins(depths: &[u32], n_bins: usize) -> Result<Vec<Vec<usize>>, VoiError> {
    let distinct = depths.iter().collect::<std::collections::BTreeSet<_>>().len();
    if n_bins == 0 || n_bins > distinct {
        return Err(VoiError::Binning { bins: n_bins, distinct });
    }
    let mut order: Vec<usize> = (0..depths.len()).collect();
    order.sort_by_key(|&i| (depths[i], i));
    let n = depths.len();
    let mut bins = Vec::with_capacity(n_bins);
    for k in 0..n_bins {
        let mut rows = order[k * n / n_bins..(k + 1) * n / n_bins].to_vec();
        rows.sort_unstable();
        bins.push(rows);
    }
    Ok(bins)
}

/// Delta test within equal-count depth bins; `depths[i]` is the number of earlier impressions
/// of the same user.
pub fn depth_binned_delta(terms: &RegimeTerms, depths: &[u32], cfg: &DeltaConfig) -> Result<Vec<DepthBinResult>, VoiError> {
    let n = terms.check()?;
    if depths.len() != n {
        return Err(VoiError::Alignment(format!("{} depths for {n} impressions", depths.len())));
    }
    let bins = depth_bins(depths, cfg.n_bins)?;
    Ok(bins
        .par_iter()
        .enumerate()
        .map(|(k, rows)| DepthBinResult {
            bin: k,
            last_depth: rows.iter().map(|&i| depths[i]).max().unwrap_or(0),
            n: rows.len(),
            delta: delta_on(terms, rows, cfg, k as u64),
            levels: levels(terms, rows),
        })
        .collect())
}

// ── Output ──────────────────────────────────────────────────────────────

/// One row per bin: boundary, estimate, interval, t, p-values, decision and tier.
pub fn write_depth_table_csv<W: Write>(bins: &[DepthBinResult], w: W) -> Result<(), VoiError> {
    let mut wtr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| VoiError::Io(e.to_string());
    wtr.write_record([
        "last_impr",
        "delta_hat",
        "ci_lo",
        "ci_hi",
        "t_stat",
        "p_two_sided",
        "p_delta_pos",
        "p_delta_neg",
        "decision",
        "signif",
    ])
    .map_err(io)?;
    for b in bins {
        let d = &b.delta;
        wtr.write_record([
            b.last_depth.to_string(),
            sig17(d.delta_hat),
            sig17(d.ci95.0),
            sig17(d.ci95.1),
            sig17(d.t_stat),
            sig17(d.p_two_sided),
            sig17(d.p_delta_pos),
            sig17(d.p_delta_neg),
            d.decision.label().to_string(),
            d.tier.label().to_string(),
        ])
        .map_err(io)?;
    }
    wtr.flush().map_err(|e| VoiError::Io(e.to_string()))
}

/// Per-bin policy values for level plots.
pub fn write_levels_csv<W: Write>(bins: &[DepthBinResult], w: W) -> Result<(), VoiError> {
    let mut wtr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| VoiError::Io(e.to_string());
    wtr.write_record(["bin", "last_impr", "n", "v_EMPTY", "v_G", "v_B", "v_GB"]).map_err(io)?;
    for b in bins {
        let mut rec = vec![b.bin.to_string(), b.last_depth.to_string(), b.n.to_string()];
        rec.extend(b.levels.iter().map(|&v| sig17(v)));
        wtr.write_record(&rec).map_err(io)?;
    }
    wtr.flush().map_err(|e| VoiError::Io(e.to_string()))
}
