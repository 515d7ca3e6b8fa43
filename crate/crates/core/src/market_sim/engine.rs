//! Event loop shared by log simulation and oracle evaluation.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::config::{InteractionKind, ResponseModel, SimConfig};
use super::market::{LatentUser, Market};
use super::{quasi_proportional_probs, stream_rng, GroundTruth, ImpressionLog, ImpressionRow, SimError, Simulation, Stream};

/// Observable state at the moment an impression is served.
#[derive(Debug, Clone)]
pub struct ImpressionContext {
    pub user: usize,
    pub timestamp_s: f64,
    pub hour: u32,
    pub minute: u32,
    pub app: u32,
    pub lat: f64,
    pub lon: f64,
    pub region: u32,
    pub city: u32,
    /// Prior impressions of this user.
    pub depth: u32,
    pub eligible: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Arrival {
    pub user: usize,
    pub t_s: f64,
    pub app: u32,
}

/// Poisson arrivals for every user over the horizon, sorted by time.
pub(crate) fn draw_arrivals(market: &Market, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<Arrival> {
    let horizon_s = cfg.horizon * 3600.0;
    let mut out = Vec::new();
    for (u, user) in market.users.iter().enumerate() {
        let cdf = cumulative(&user.app_weights);
        let gap = Exp::new(user.arrival_rate / 3600.0).expect("positive arrival rate");
        let mut t = 0.0;
        loop {
            t += gap.sample(rng);
            if t >= horizon_s {
                break;
            }
            let app = pick(&cdf, rng.gen::<f64>());
            out.push(Arrival { user: u, t_s: t, app });
        }
    }
    out.sort_by(|a, b| a.t_s.total_cmp(&b.t_s).then(a.user.cmp(&b.user)));
    out
}

fn cumulative(w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    w.iter()
        .map(|x| {
            acc += x / total;
            acc
        })
        .collect()
}

fn pick(cdf: &[f64], x: f64) -> u32 {
    cdf.iter().position(|&c| x < c).unwrap_or(cdf.len() - 1) as u32
}

/// Decaying click counts per (ad, region) over a sliding window.
#[derive(Debug, Clone)]
struct InfluenceTracker {
    n_regions: usize,
    window_s: f64,
    decay: f64,
    sums: Vec<f64>,
    last: Vec<f64>,
    events: Vec<VecDeque<f64>>,
}

impl InfluenceTracker {
    fn new(n_ads: usize, n_regions: usize, cfg: &SimConfig) -> Self {
        let cells = n_ads * n_regions;
        Self {
            n_regions,
            window_s: cfg.influence_window_hours * 3600.0,
            decay: std::f64::consts::LN_2 / (cfg.influence_half_life_hours * 3600.0),
            sums: vec![0.0; cells],
            last: vec![0.0; cells],
            events: vec![VecDeque::new(); cells],
        }
    }

    fn advance(&mut self, cell: usize, t: f64) {
        let dt = t - self.last[cell];
        if dt > 0.0 {
            self.sums[cell] *= (-self.decay * dt).exp();
            self.last[cell] = t;
        }
        let q = &mut self.events[cell];
        while let Some(&tk) = q.front() {
            if tk < t - self.window_s {
                self.sums[cell] -= (-self.decay * (t - tk)).exp();
                q.pop_front();
            } else {
                break;
            }
        }
        if q.is_empty() || self.sums[cell] < 0.0 {
            self.sums[cell] = 0.0;
        }
    }

    fn count(&mut self, ad: usize, region: u32, t: f64) -> f64 {
        let cell = ad * self.n_regions + region as usize;
        self.advance(cell, t);
        self.sums[cell]
    }

    fn record(&mut self, ad: usize, region: u32, t: f64) {
        let cell = ad * self.n_regions + region as usize;
        self.advance(cell, t);
        self.sums[cell] += 1.0;
        self.events[cell].push_back(t);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mutable world state while impressions are processed in time order.
pub(crate) struct World<'a> {
    pub market: &'a Market,
    pub cfg: &'a SimConfig,
    pub bq: Vec<f64>,
    influence: InfluenceTracker,
    /// Regions within `influence_radius` of each region.
    neighborhoods: Vec<Vec<u32>>,
    /// Users living in each neighborhood.
    neighborhood_pop: Vec<f64>,
    user_clicks: Vec<u32>,
    user_imps: Vec<u32>,
}

impl<'a> World<'a> {
    pub fn new(market: &'a Market, cfg: &'a SimConfig) -> Result<Self, SimError> {
        let bq = market.bid_qualities();
        if let Some(&b) = bq.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(SimError::InvalidBidQuality(b));
        }
        let g = &market.field.geography;
        let n_regions = g.n_regions() as usize;
        let rad = cfg.influence_radius as i64;
        let neighborhoods: Vec<Vec<u32>> = (0..g.n_regions())
            .map(|reg| {
                let (r, c) = ((reg / g.cols) as i64, (reg % g.cols) as i64);
                let mut v = Vec::new();
                for rr in (r - rad).max(0)..=(r + rad).min(g.rows as i64 - 1) {
                    for cc in (c - rad).max(0)..=(c + rad).min(g.cols as i64 - 1) {
                        v.push((rr * g.cols as i64 + cc) as u32);
                    }
                }
                v
            })
            .collect();
        let users_per_region = market.users_per_region();
        let neighborhood_pop = neighborhoods
            .iter()
            .map(|nb| nb.iter().map(|&q| users_per_region[q as usize] as f64).sum::<f64>().max(1.0))
            .collect();
        Ok(Self {
            market,
            cfg,
            bq,
            influence: InfluenceTracker::new(market.ads.len(), n_regions, cfg),
            neighborhoods,
            neighborhood_pop,
            user_clicks: vec![0; market.users.len()],
            user_imps: vec![0; market.users.len()],
        })
    }

    pub fn context(&self, a: &Arrival) -> ImpressionContext {
        let user = &self.market.users[a.user];
        let clock = a.t_s + self.cfg.start_hour * 3600.0;
        let hour = ((clock / 3600.0).floor() as i64).rem_euclid(24) as u32;
        let minute = ((clock / 60.0).floor() as i64).rem_euclid(60) as u32;
        let eligible = self.market.ads.iter().map(|ad| ad.filter.allows(user.region_id, hour, a.app)).collect();
        ImpressionContext {
            user: a.user,
            timestamp_s: a.t_s,
            hour,
            minute,
            app: a.app,
            lat: user.home_lat,
            lon: user.home_lon,
            region: user.region_id,
            city: user.city_id,
            depth: self.user_imps[a.user],
            eligible,
        }
    }

    /// True click probability of every ad in this context.
    pub fn ctrs(&mut self, ctx: &ImpressionContext) -> Vec<f64> {
        let market = self.market;
        let user = &market.users[ctx.user];
        match &self.cfg.response {
            ResponseModel::Logistic => {
                let field = self.market.field.value(ctx.lat, ctx.lon);
                let hist = self.cfg.persistence * (self.user_clicks[ctx.user] as f64).ln_1p()
                    - self.cfg.fatigue * (self.user_imps[ctx.user] as f64).ln_1p();
                let pop = self.neighborhood_pop[ctx.region as usize];
                let nb = &self.neighborhoods[ctx.region as usize];
                (0..self.market.ads.len())
                    .map(|a| {
                        let ad = &self.market.ads[a];
                        let m: f64 = user.omega.iter().zip(&ad.match_vector).map(|(w, v)| w * v).sum();
                        let infl = if self.cfg.influence_strength != 0.0 {
                            self.cfg.influence_strength
                                * nb.iter().map(|&q| self.influence.count(a, q, ctx.timestamp_s)).sum::<f64>()
                                / pop
                        } else {
                            0.0
                        };
                        sigmoid(self.cfg.base_logit + m + field * ad.geo_weight + infl + hist)
                    })
                    .collect()
            }
            ResponseModel::Engineered { interaction, base_ctr, gain_geo, gain_behavior, switch_depth } => {
                let (geo, beh) = engineered_bits(user, self.market.field.geography.mid_lon());
                (0..self.market.ads.len())
                    .map(|a| match interaction {
                        InteractionKind::Additive => {
                            base_ctr + gain_geo * ((a / 2 == geo) as u8 as f64) + gain_behavior * ((a % 2 == beh) as u8 as f64)
                        }
                        InteractionKind::Complement => base_ctr + gain_geo * ((a == geo ^ beh) as u8 as f64),
                        InteractionKind::DepthTransition => {
                            let best = if ctx.depth < *switch_depth { geo ^ beh } else { geo };
                            base_ctr + gain_geo * ((a == best) as u8 as f64)
                        }
                    })
                    .collect()
            }
        }
    }

    pub fn record(&mut self, ctx: &ImpressionContext, ad: usize, click: bool) {
        self.user_imps[ctx.user] += 1;
        if click {
            self.user_clicks[ctx.user] += 1;
            if self.cfg.influence_strength != 0.0 {
                self.influence.record(ad, ctx.region, ctx.timestamp_s);
            }
        }
    }
}

/// Engineered geo and behavior bits of a user.
pub fn engineered_bits(user: &LatentUser, mid_lon: f64) -> (usize, usize) {
    ((user.home_lon > mid_lon) as usize, (user.omega[0] > 0.0) as usize)
}

fn draw_index(probs: &[f64], x: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (a, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = a;
            if x < acc {
                return a;
            }
        }
    }
    last
}

/// Simulate the logging policy on a market. Rows come back sorted by `(user_id, timestamp_s)`.
pub fn simulate_logs(market: &Market, cfg: &SimConfig) -> Result<Simulation, SimError> {
    simulate_with_seed(market, cfg, cfg.seed)
}

pub(crate) fn simulate_with_seed(market: &Market, cfg: &SimConfig, seed: u64) -> Result<Simulation, SimError> {
    cfg.validate()?;
    let mut arrivals_rng = stream_rng(seed, Stream::Arrivals);
    let mut alloc_rng = stream_rng(seed, Stream::Allocation);
    let mut click_rng = stream_rng(seed, Stream::Clicks);
    let arrivals = draw_arrivals(market, cfg, &mut arrivals_rng);
    let mut world = World::new(market, cfg)?;
    let n_ads = market.ads.len();

    let mut rows = Vec::with_capacity(arrivals.len());
    let mut truth = Vec::with_capacity(arrivals.len());
    for (i, arr) in arrivals.iter().enumerate() {
        let ctx = world.context(arr);
        let probs = quasi_proportional_probs(&world.bq, &ctx.eligible)?;
        let ad = draw_index(&probs, alloc_rng.gen::<f64>());
        let ctrs = world.ctrs(&ctx);
        let click = click_rng.gen::<f64>() < ctrs[ad];
        world.record(&ctx, ad, click);
        let user = &market.users[arr.user];
        let spec = &market.ads[ad];
        let eligibility = ctx.eligible.iter().enumerate().fold(0u64, |m, (a, &e)| if e { m | 1 << a } else { m });
        rows.push(ImpressionRow {
            impression_id: i as u64,
            user_id: user.user_id,
            timestamp_s: arr.t_s,
            app_id: arr.app,
            ad_id: ad as u32,
            click: click as u8,
            lat: ctx.lat,
            lon: ctx.lon,
            region_id: ctx.region,
            city_id: ctx.city,
            brand: user.device_brand,
            isp: user.isp,
            connectivity: user.connectivity,
            hour: ctx.hour,
            minute: ctx.minute,
            bid: spec.bid,
            quality: spec.quality,
            true_propensity: probs[ad],
            true_ctr: ctrs[ad],
            eligibility,
        });
        truth.push((probs, ctrs));
    }

    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        rows[a]
            .user_id
            .cmp(&rows[b].user_id)
            .then(rows[a].timestamp_s.total_cmp(&rows[b].timestamp_s))
            .then(rows[a].impression_id.cmp(&rows[b].impression_id))
    });
    let mut sorted_rows = Vec::with_capacity(rows.len());
    let mut gt = GroundTruth::default();
    for i in order {
        sorted_rows.push(rows[i].clone());
        gt.propensities.push(truth[i].0.clone());
        gt.ctrs.push(truth[i].1.clone());
    }
    Ok(Simulation { log: ImpressionLog { n_ads, rows: sorted_rows }, truth: gt })
}
