//! Simulator configuration.

use serde::{Deserialize, Serialize};

use super::SimError;

/// Geographic bounding box and grid layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geography {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    /// Region grid rows.
    pub rows: u32,
    /// Region grid columns.
    pub cols: u32,
    /// Each region is split into `city_split x city_split` cities.
    pub city_split: u32,
}

impl Default for Geography {
    fn default() -> Self {
        Self { lat_min: 30.0, lat_max: 40.0, lon_min: 110.0, lon_max: 120.0, rows: 8, cols: 8, city_split: 2 }
    }
}

impl Geography {
    pub fn n_regions(&self) -> u32 {
        self.rows * self.cols
    }

    pub fn n_cities(&self) -> u32 {
        self.n_regions() * self.city_split * self.city_split
    }

    /// Normalized coordinates in `[0, 1]^2` (u along longitude, v along latitude).
    pub fn normalize(&self, lat: f64, lon: f64) -> (f64, f64) {
        ((lon - self.lon_min) / (self.lon_max - self.lon_min), (lat - self.lat_min) / (self.lat_max - self.lat_min))
    }

    /// Region and city containing a point. Points on the upper edge map to the last cell.
    pub fn locate(&self, lat: f64, lon: f64) -> (u32, u32) {
        let (u, v) = self.normalize(lat, lon);
        let fine_cols = self.cols * self.city_split;
        let fine_rows = self.rows * self.city_split;
        let fc = ((u * fine_cols as f64).floor().max(0.0) as u32).min(fine_cols - 1);
        let fr = ((v * fine_rows as f64).floor().max(0.0) as u32).min(fine_rows - 1);
        let region = (fr / self.city_split) * self.cols + fc / self.city_split;
        let city = fr * fine_cols + fc;
        (region, city)
    }

    /// Center of a region cell.
    pub fn region_center(&self, region: u32) -> (f64, f64) {
        let r = region / self.cols;
        let c = region % self.cols;
        let lat = self.lat_min + (r as f64 + 0.5) / self.rows as f64 * (self.lat_max - self.lat_min);
        let lon = self.lon_min + (c as f64 + 0.5) / self.cols as f64 * (self.lon_max - self.lon_min);
        (lat, lon)
    }

    pub fn mid_lon(&self) -> f64 {
        0.5 * (self.lon_min + self.lon_max)
    }
}

/// Probabilities and extents of the optional per-ad targeting filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetingConfig {
    pub region_filter_prob: f64,
    /// Fraction of regions kept by a region filter.
    pub region_keep_frac: f64,
    pub hour_filter_prob: f64,
    /// Length of the contiguous hour window kept by an hour filter.
    pub hour_window: u32,
    pub app_filter_prob: f64,
    pub app_keep_frac: f64,
}

impl Default for TargetingConfig {
    fn default() -> Self {
        Self {
            region_filter_prob: 0.5,
            region_keep_frac: 0.5,
            hour_filter_prob: 0.3,
            hour_window: 12,
            app_filter_prob: 0.3,
            app_keep_frac: 0.5,
        }
    }
}

impl TargetingConfig {
    /// No ad carries any filter.
    pub fn none() -> Self {
        Self { region_filter_prob: 0.0, hour_filter_prob: 0.0, app_filter_prob: 0.0, ..Self::default() }
    }
}

/// Engineered response surfaces with a known value-of-information structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InteractionKind {
    /// Four ads indexed `2 * geo_choice + behavior_choice`; geo and behavior payoffs add.
    Additive,
    /// Two ads; the best ad is `geo_bit XOR behavior_bit`.
    Complement,
    /// Complement before `switch_depth` prior impressions, geo-only best ad afterwards.
    DepthTransition,
}

/// How true click probabilities are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
#[derive(Default)]
pub enum ResponseModel {
    /// Logistic click model over preference match, spatial field, influence and history.
    #[default]
    Logistic,
    /// Identity-link engineered surface. `geo_bit` is the home side of the mid longitude,
    /// `behavior_bit` is the sign of the first preference coordinate.
    Engineered { interaction: InteractionKind, base_ctr: f64, gain_geo: f64, gain_behavior: f64, switch_depth: u32 },
}

/// Full simulator configuration, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_users: u32,
    pub n_ads: u32,
    pub n_apps: u32,
    pub n_brands: u32,
    pub n_isps: u32,
    pub n_connectivity: u32,
    /// Observation window in hours.
    pub horizon: f64,
    /// Wall-clock hour at simulation time zero.
    pub start_hour: f64,
    pub d_omega: u32,
    pub influence_strength: f64,
    pub confound_strength: f64,
    pub base_logit: f64,
    pub seed: u64,
    pub geography: Geography,
    pub targeting: TargetingConfig,
    /// Scale of the preference-match term.
    pub match_weight: f64,
    /// Uniform range of per-ad spatial loadings.
    pub geo_weight_range: (f64, f64),
    /// Log-uniform range of bids.
    pub bid_range: (f64, f64),
    /// Log-uniform range of quality scores.
    pub quality_range: (f64, f64),
    /// Log-uniform range of per-user arrival rates (impressions per hour).
    pub arrival_rate_range: (f64, f64),
    /// Number of Fourier components in the spatial field.
    pub field_components: u32,
    /// Largest spatial frequency in cycles per bounding box.
    pub field_max_freq: f64,
    pub influence_window_hours: f64,
    pub influence_half_life_hours: f64,
    /// Clicks in regions within this many grid steps (Chebyshev) raise click rates; 0 keeps
    /// influence inside the clicked region.
    pub influence_radius: u32,
    /// Strength of preference on app choice.
    pub app_affinity: f64,
    /// Logit increment per `ln(1 + prior clicks)`.
    pub persistence: f64,
    /// Logit decrement per `ln(1 + prior impressions)`.
    pub fatigue: f64,
    pub response: ResponseModel,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_ads: 5,
            n_apps: 20,
            n_brands: 8,
            n_isps: 4,
            n_connectivity: 3,
            horizon: 24.0,
            start_hour: 0.0,
            d_omega: 4,
            influence_strength: 0.0,
            confound_strength: 1.0,
            base_logit: -2.5,
            seed: 7,
            geography: Geography::default(),
            targeting: TargetingConfig::default(),
            match_weight: 0.8,
            geo_weight_range: (0.0, 2.0),
            bid_range: (0.5, 2.0),
            quality_range: (0.5, 2.0),
            arrival_rate_range: (0.5, 4.0),
            field_components: 4,
            field_max_freq: 1.5,
            influence_window_hours: 24.0,
            influence_half_life_hours: 12.0,
            influence_radius: 1,
            app_affinity: 1.0,
            persistence: 0.0,
            fatigue: 0.0,
            response: ResponseModel::Logistic,
        }
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: SimConfig = serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.n_users == 0 {
            return bad("n_users must be positive");
        }
        if self.n_ads == 0 || self.n_ads > 64 {
            return bad("n_ads must be in 1..=64");
        }
        if self.n_apps == 0 || self.n_brands == 0 || self.n_isps == 0 || self.n_connectivity == 0 {
            return bad("category counts must be positive");
        }
        if !(self.horizon > 0.0) {
            return bad("horizon must be positive");
        }
        if self.d_omega == 0 {
            return bad("d_omega must be positive");
        }
        let g = &self.geography;
        if g.rows == 0 || g.cols == 0 || g.city_split == 0 {
            return bad("grid dimensions must be positive");
        }
        if !(g.lat_max > g.lat_min && g.lon_max > g.lon_min) {
            return bad("bounding box is empty");
        }
        for (name, (lo, hi)) in [
            ("bid_range", self.bid_range),
            ("quality_range", self.quality_range),
            ("arrival_rate_range", self.arrival_rate_range),
        ] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(SimError::Config(format!("{name} must satisfy 0 < lo <= hi")));
            }
        }
        if self.geo_weight_range.1 < self.geo_weight_range.0 {
            return bad("geo_weight_range is reversed");
        }
        if !(self.influence_window_hours > 0.0 && self.influence_half_life_hours > 0.0) {
            return bad("influence window and half-life must be positive");
        }
        if let ResponseModel::Engineered { interaction, base_ctr, gain_geo, gain_behavior, .. } = &self.response {
            let need = match interaction {
                InteractionKind::Additive => 4,
                _ => 2,
            };
            if self.n_ads != need {
                return Err(SimError::Config(format!("{interaction:?} response needs exactly {need} ads")));
            }
            let top = base_ctr + gain_geo.max(0.0) + gain_behavior.max(0.0);
            if !(*base_ctr >= 0.0 && top <= 1.0) {
                return bad("engineered click probabilities must lie in [0, 1]");
            }
        }
        Ok(())
    }
}
