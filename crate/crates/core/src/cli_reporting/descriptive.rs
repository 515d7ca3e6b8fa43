use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::market_sim::ImpressionLog;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationPoint {
    /// Largest history depth included so far.
    pub depth: u32,
    pub impression_share: f64,
    pub click_share: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersistencePoint {
    /// Clicks among the impressions up to and including `t`.
    pub prior_clicks: u32,
    /// Impressions `t` that have a successor.
    pub n: usize,
    /// Click rate on impression `t + 1`.
    pub next_click_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionCtr {
    pub region_id: u32,
    pub impressions: usize,
    pub clicks: usize,
    pub ctr: f64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveCurves {
    pub concentration: Vec<ConcentrationPoint>,
    pub persistence: Vec<PersistencePoint>,
    pub regions: Vec<RegionCtr>,
}

/// Concentration of clicks over exposure history, next-click persistence by prior clicks, and
/// click-through rate per region. Expects rows sorted by `(user_id, timestamp_s)`.
pub fn descriptive_curves(log: &ImpressionLog) -> DescriptiveCurves {
    let depths = log.depths();
    let n = log.len() as f64;
    let total_clicks: f64 = log.rows.iter().map(|r| r.click as f64).sum();

    let mut by_depth: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    for (r, &d) in log.rows.iter().zip(&depths) {
        let e = by_depth.entry(d).or_default();
        e.0 += 1.0;
        e.1 += r.click as f64;
    }
    let (mut ci, mut cc) = (0.0, 0.0);
    let concentration = by_depth
        .into_iter()
        .map(|(depth, (imps, clicks))| {
            ci += imps;
            cc += clicks;
            ConcentrationPoint {
                depth,
                impression_share: ci / n,
                click_share: if total_clicks > 0.0 { cc / total_clicks } else { 0.0 },
            }
        })
        .collect();

    let mut by_k: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let mut clicks_so_far = 0u32;
    for i in 0..log.len() {
        let r = &log.rows[i];
        if depths[i] == 0 {
            clicks_so_far = 0;
        }
        clicks_so_far += r.click as u32;
        if let Some(next) = log.rows.get(i + 1).filter(|nx| nx.user_id == r.user_id) {
            let e = by_k.entry(clicks_so_far).or_default();
            e.0 += 1;
            e.1 += next.click as usize;
        }
    }
    let persistence = by_k
        .into_iter()
        .map(|(k, (m, c))| PersistencePoint { prior_clicks: k, n: m, next_click_rate: c as f64 / m as f64 })
        .collect();

    let mut regions: BTreeMap<u32, (usize, usize, f64, f64)> = BTreeMap::new();
    for r in &log.rows {
        let e = regions.entry(r.region_id).or_default();
        e.0 += 1;
        e.1 += r.click as usize;
        e.2 += r.lat;
        e.3 += r.lon;
    }
    let regions = regions
        .into_iter()
        .map(|(region_id, (m, c, lat, lon))| RegionCtr {
            region_id,
            impressions: m,
            clicks: c,
            ctr: c as f64 / m as f64,
            lat: lat / m as f64,
            lon: lon / m as f64,
        })
        .collect();

    DescriptiveCurves { concentration, persistence, regions }
}

/// Slope of next-click rate on prior clicks by least squares weighted with each point's count.
pub fn persistence_slope(curve: &[PersistencePoint]) -> Option<f64> {
    let w: f64 = curve.iter().map(|p| p.n as f64).sum();
    if curve.len() < 2 || w == 0.0 {
        return None;
    }
    let mx = curve.iter().map(|p| p.n as f64 * p.prior_clicks as f64).sum::<f64>() / w;
    let my = curve.iter().map(|p| p.n as f64 * p.next_click_rate).sum::<f64>() / w;
    let sxy: f64 = curve.iter().map(|p| p.n as f64 * (p.prior_clicks as f64 - mx) * (p.next_click_rate - my)).sum();
    let sxx: f64 = curve.iter().map(|p| p.n as f64 * (p.prior_clicks as f64 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
