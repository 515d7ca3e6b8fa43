use std::collections::HashMap;

use super::FeatureError;
use crate::market_sim::ImpressionLog;

/// Number of behavioral features that depend on the candidate ad.
pub const AD_DEPENDENT_COUNT: usize = 5;

/// Strictly-past behavioral features of one impression.
#[derive(Debug, Clone, PartialEq)]
pub struct BehavioralFeatures {
    /// Prior impressions of the user.
    pub ec: f64,
    /// Prior clicks of the user.
    pub ch: f64,
    pub sctr: f64,
    /// Seconds since the previous impression, `-1` if none.
    pub tse: f64,
    /// Seconds since the previous click, `-1` if none.
    pub tce: f64,
    /// Share of the user's prior impressions served in the current app.
    pub u_app: f64,
    /// Share of the user's prior clicks made in the current app.
    pub e_app: f64,
    /// Population share of prior impressions served in the current app.
    pub u_overall: f64,
    /// Population share of prior clicks made in the current app.
    pub e_overall: f64,
    /// Per candidate ad: exposures to the ad including the current one.
    pub f: Vec<f64>,
    /// Per candidate ad: the user's prior click rate on the ad.
    pub ctr_user_ad: Vec<f64>,
    /// Per candidate ad: population prior click rate on the ad.
    pub ctr_ad: Vec<f64>,
    /// Per candidate ad: share of the user's prior exposures to the ad served in the current app.
    pub p: Vec<f64>,
    /// Per candidate ad: share of the user's prior clicks on the ad made in the current app.
    pub i: Vec<f64>,
}

impl BehavioralFeatures {
    /// Dense behavioral block in schema order for candidate `ad`.
    pub fn for_ad(&self, ad: usize) -> [f64; 14] {
        [
            self.ec,
            self.ch,
            self.sctr,
            self.tse,
            self.tce,
            self.f[ad],
            self.ctr_user_ad[ad],
            self.ctr_ad[ad],
            self.u_app,
            self.e_app,
            self.p[ad],
            self.i[ad],
            self.u_overall,
            self.e_overall,
        ]
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Compute behavioral features for every row. Requires rows sorted by `(user_id, timestamp_s)`.
pub fn behavioral_features(log: &ImpressionLog) -> Result<Vec<BehavioralFeatures>, FeatureError> {
    let rows = &log.rows;
    for (i, w) in rows.windows(2).enumerate() {
        if (w[1].user_id, w[1].timestamp_s) < (w[0].user_id, w[0].timestamp_s) {
            return Err(FeatureError::OrderingViolation { row: i + 1 });
        }
    }
    let n_ads = log.n_ads;

    // Population counters in global arrival order.
    let mut global_order: Vec<usize> = (0..rows.len()).collect();
    global_order.sort_by(|&a, &b| {
        rows[a].timestamp_s.total_cmp(&rows[b].timestamp_s).then(rows[a].impression_id.cmp(&rows[b].impression_id))
    });
    let mut ad_exp = vec![0.0; n_ads];
    let mut ad_clk = vec![0.0; n_ads];
    let mut app_exp: HashMap<u32, f64> = HashMap::new();
    let mut app_clk: HashMap<u32, f64> = HashMap::new();
    let (mut tot_exp, mut tot_clk) = (0.0, 0.0);
    let mut ctr_ad = vec![Vec::new(); rows.len()];
    let mut u_overall = vec![0.0; rows.len()];
    let mut e_overall = vec![0.0; rows.len()];
    for &i in &global_order {
        let r = &rows[i];
        ctr_ad[i] = (0..n_ads).map(|a| ratio(ad_clk[a], ad_exp[a])).collect();
        u_overall[i] = ratio(*app_exp.get(&r.app_id).unwrap_or(&0.0), tot_exp);
        e_overall[i] = ratio(*app_clk.get(&r.app_id).unwrap_or(&0.0), tot_clk);
        let c = r.click as f64;
        ad_exp[r.ad_id as usize] += 1.0;
        ad_clk[r.ad_id as usize] += c;
        *app_exp.entry(r.app_id).or_default() += 1.0;
        *app_clk.entry(r.app_id).or_default() += c;
        tot_exp += 1.0;
        tot_clk += c;
    }

    // Per-user counters in each user's timeline.
    let mut out = Vec::with_capacity(rows.len());
    let mut start = 0;
    while start < rows.len() {
        let user = rows[start].user_id;
        let mut end = start;
        while end < rows.len() && rows[end].user_id == user {
            end += 1;
        }
        let (mut n, mut clicks) = (0.0, 0.0);
        let mut last_t: Option<f64> = None;
        let mut last_click_t: Option<f64> = None;
        let mut exp = vec![0.0; n_ads];
        let mut clk = vec![0.0; n_ads];
        let mut app_n: HashMap<u32, (f64, f64)> = HashMap::new();
        let mut app_ad: HashMap<(u32, usize), (f64, f64)> = HashMap::new();
        for i in start..end {
            let r = &rows[i];
            let (a_exp, a_clk) = *app_n.get(&r.app_id).unwrap_or(&(0.0, 0.0));
            let per_ad = |a: usize| *app_ad.get(&(r.app_id, a)).unwrap_or(&(0.0, 0.0));
            out.push(BehavioralFeatures {
                ec: n,
                ch: clicks,
                sctr: ratio(clicks, n),
                tse: last_t.map_or(-1.0, |t| r.timestamp_s - t),
                tce: last_click_t.map_or(-1.0, |t| r.timestamp_s - t),
                u_app: ratio(a_exp, n),
                e_app: ratio(a_clk, clicks),
                u_overall: u_overall[i],
                e_overall: e_overall[i],
                f: exp.iter().map(|e| e + 1.0).collect(),
                ctr_user_ad: (0..n_ads).map(|a| ratio(clk[a], exp[a])).collect(),
                ctr_ad: std::mem::take(&mut ctr_ad[i]),
                p: (0..n_ads).map(|a| ratio(per_ad(a).0, exp[a])).collect(),
                i: (0..n_ads).map(|a| ratio(per_ad(a).1, clk[a])).collect(),
            });
            let c = r.click as f64;
            let a = r.ad_id as usize;
            n += 1.0;
            clicks += c;
            exp[a] += 1.0;
            clk[a] += c;
            let e = app_n.entry(r.app_id).or_default();
            e.0 += 1.0;
            e.1 += c;
            let e = app_ad.entry((r.app_id, a)).or_default();
            e.0 += 1.0;
            e.1 += c;
            last_t = Some(r.timestamp_s);
            if c > 0.0 {
                last_click_t = Some(r.timestamp_s);
            }
        }
        start = end;
    }
    Ok(out)
}
