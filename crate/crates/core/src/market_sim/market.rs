//! Market primitives: users, ads, apps and the spatial field.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{Geography, SimConfig};
use super::{stream_rng, Stream};

/// A simulated user with latent preferences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentUser {
    pub user_id: u32,
    pub omega: Vec<f64>,
    pub home_lat: f64,
    pub home_lon: f64,
    pub region_id: u32,
    pub city_id: u32,
    pub device_brand: u32,
    pub isp: u32,
    pub connectivity: u32,
    /// Impressions per hour.
    pub arrival_rate: f64,
    /// Unnormalized app-choice weights.
    pub app_weights: Vec<f64>,
}

/// Optional allow-lists restricting where an ad may be shown.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetingFilter {
    pub regions: Option<Vec<u32>>,
    pub hours: Option<Vec<u32>>,
    pub apps: Option<Vec<u32>>,
}

impl TargetingFilter {
    pub fn allows(&self, region: u32, hour: u32, app: u32) -> bool {
        let ok = |list: &Option<Vec<u32>>, v: u32| list.as_ref().is_none_or(|l| l.contains(&v));
        ok(&self.regions, region) && ok(&self.hours, hour) && ok(&self.apps, app)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdSpec {
    pub ad_id: u32,
    pub bid: f64,
    pub quality: f64,
    pub match_vector: Vec<f64>,
    /// Loading of this ad on the spatial field.
    pub geo_weight: f64,
    pub filter: TargetingFilter,
}

impl AdSpec {
    pub fn bid_quality(&self) -> f64 {
        self.bid * self.quality
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierComponent {
    /// Frequency along normalized longitude (cycles per box).
    pub freq_u: f64,
    /// Frequency along normalized latitude.
    pub freq_v: f64,
    pub amplitude: f64,
    pub phase: f64,
}

/// Smooth random field over the bounding box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialField {
    pub components: Vec<FourierComponent>,
    pub offset: f64,
    pub geography: Geography,
}

impl SpatialField {
    pub fn value(&self, lat: f64, lon: f64) -> f64 {
        let (u, v) = self.geography.normalize(lat, lon);
        self.offset
            + self
                .components
                .iter()
                .map(|c| c.amplitude * (2.0 * PI * (c.freq_u * u + c.freq_v * v) + c.phase).cos())
                .sum::<f64>()
    }
}

/// App catalogue entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppSpec {
    pub app_id: u32,
    pub log_popularity: f64,
    pub embedding: Vec<f64>,
}

/// Everything fixed before impressions start arriving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Market {
    pub users: Vec<LatentUser>,
    pub ads: Vec<AdSpec>,
    pub apps: Vec<AppSpec>,
    pub field: SpatialField,
}

impl Market {
    pub fn bid_qualities(&self) -> Vec<f64> {
        self.ads.iter().map(|a| a.bid_quality()).collect()
    }

    /// Number of users whose home lies in each region.
    pub fn users_per_region(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.field.geography.n_regions() as usize];
        for u in &self.users {
            counts[u.region_id as usize] += 1;
        }
        counts
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi <= lo {
        return lo;
    }
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Draw a market from the configuration seed. Users, ads, apps and the field use separate streams.
pub fn sample_market(cfg: &SimConfig) -> Market {
    let apps = sample_apps(cfg, cfg.seed);
    let field = sample_field(cfg, cfg.seed);
    let ads = sample_ads(cfg, cfg.seed);
    let users = sample_users(cfg, &apps, cfg.seed);
    Market { users, ads, apps, field }
}

pub fn sample_apps(cfg: &SimConfig, seed: u64) -> Vec<AppSpec> {
    let mut rng = stream_rng(seed, Stream::Apps);
    let d = cfg.d_omega as usize;
    (0..cfg.n_apps)
        .map(|j| AppSpec {
            app_id: j,
            log_popularity: -((j + 1) as f64).ln(),
            embedding: normal_vec(&mut rng, d, 1.0 / (d as f64).sqrt()),
        })
        .collect()
}

pub fn sample_field(cfg: &SimConfig, seed: u64) -> SpatialField {
    let mut rng = stream_rng(seed, Stream::Field);
    let k = cfg.field_components.max(1);
    let scale = cfg.confound_strength / (k as f64).sqrt();
    let components = (0..k)
        .map(|_| {
            let fu = rng.gen_range(-cfg.field_max_freq..=cfg.field_max_freq);
            let fv = rng.gen_range(-cfg.field_max_freq..=cfg.field_max_freq);
            let z: f64 = StandardNormal.sample(&mut rng);
            FourierComponent { freq_u: fu, freq_v: fv, amplitude: z.abs().max(0.25) * scale, phase: rng.gen_range(0.0..2.0 * PI) }
        })
        .collect();
    SpatialField { components, offset: 0.0, geography: cfg.geography.clone() }
}

pub fn sample_ads(cfg: &SimConfig, seed: u64) -> Vec<AdSpec> {
    let mut rng = stream_rng(seed, Stream::Ads);
    let d = cfg.d_omega as usize;
    let t = &cfg.targeting;
    let n_regions = cfg.geography.n_regions();
    (0..cfg.n_ads)
        .map(|a| {
            let bid = log_uniform(&mut rng, cfg.bid_range);
            let quality = log_uniform(&mut rng, cfg.quality_range);
            let match_vector = normal_vec(&mut rng, d, cfg.match_weight / (d as f64).sqrt());
            let (glo, ghi) = cfg.geo_weight_range;
            let geo_weight = if ghi > glo { rng.gen_range(glo..ghi) } else { glo };
            let region_draw: f64 = rng.gen();
            let hour_draw: f64 = rng.gen();
            let app_draw: f64 = rng.gen();
            let regions = subset(&mut rng, n_regions, t.region_keep_frac);
            let start = rng.gen_range(0..24u32);
            let hours: Vec<u32> = (0..t.hour_window.clamp(1, 24)).map(|h| (start + h) % 24).collect();
            let apps = subset(&mut rng, cfg.n_apps, t.app_keep_frac);
            // Ad 0 is unrestricted.
            let filter = if a == 0 {
                TargetingFilter::default()
            } else {
                TargetingFilter {
                    regions: (region_draw < t.region_filter_prob).then_some(regions),
                    hours: (hour_draw < t.hour_filter_prob).then_some(hours),
                    apps: (app_draw < t.app_filter_prob).then_some(apps),
                }
            };
            AdSpec { ad_id: a, bid, quality, match_vector, geo_weight, filter }
        })
        .collect()
}

fn subset(rng: &mut ChaCha8Rng, n: u32, frac: f64) -> Vec<u32> {
    let keep = ((n as f64 * frac).round() as usize).clamp(1, n as usize);
    let mut ids: Vec<u32> = (0..n).collect();
    for i in 0..keep {
        let j = rng.gen_range(i..n as usize);
        ids.swap(i, j);
    }
    let mut out = ids[..keep].to_vec();
    out.sort_unstable();
    out
}

/// Draw a user population. Uses only the population stream of `seed`.
pub fn sample_users(cfg: &SimConfig, apps: &[AppSpec], seed: u64) -> Vec<LatentUser> {
    let mut rng = stream_rng(seed, Stream::Population);
    let g = &cfg.geography;
    let d = cfg.d_omega as usize;
    (0..cfg.n_users)
        .map(|id| {
            let omega = normal_vec(&mut rng, d, 1.0);
            let lat = rng.gen_range(g.lat_min..g.lat_max);
            let lon = rng.gen_range(g.lon_min..g.lon_max);
            let (region_id, city_id) = g.locate(lat, lon);
            let device_brand = zipf_index(&mut rng, cfg.n_brands);
            let isp = zipf_index(&mut rng, cfg.n_isps);
            let connectivity = rng.gen_range(0..cfg.n_connectivity);
            let arrival_rate = log_uniform(&mut rng, cfg.arrival_rate_range);
            let app_weights = apps
                .iter()
                .map(|app| {
                    let aff: f64 = app.embedding.iter().zip(&omega).map(|(e, w)| e * w).sum();
                    (app.log_popularity + cfg.app_affinity * aff).exp()
                })
                .collect();
            LatentUser {
                user_id: id,
                omega,
                home_lat: lat,
                home_lon: lon,
                region_id,
                city_id,
                device_brand,
                isp,
                connectivity,
                arrival_rate,
                app_weights,
            }
        })
        .collect()
}

/// Index in `0..n` with probability proportional to `1 / (i + 1)`.
fn zipf_index(rng: &mut ChaCha8Rng, n: u32) -> u32 {
    let total: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let mut x = rng.gen::<f64>() * total;
    for k in 0..n {
        x -= 1.0 / (k + 1) as f64;
        if x < 0.0 {
            return k;
        }
    }
    n - 1
}
