use crate::feature_pipeline::Regime;
use crate::market_sim::{engineered_bits, ImpressionLog, InteractionKind, Market, ResponseModel, SimConfig};
use crate::policy_eval::{greedy_choice, Decision, Policy, PolicyError};

/// Best policy for an engineered response surface given only a regime's information.
///
/// Past `switch_depth` in the depth-transition world the behavioral history is taken to reveal
/// the user's side of the map, so the behavior-only policy can act on it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPolicy {
    pub regime: Regime,
    pub interaction: InteractionKind,
    pub switch_depth: u32,
    /// `(geo_bit, behavior_bit)` per evaluation row.
    pub bits: Vec<(usize, usize)>,
    pub depths: Vec<u32>,
}

impl ScenarioPolicy {
    fn target(&self, row: usize) -> usize {
        let (geo, beh) = self.bits[row];
        let (g, b) = (self.regime.has_geo(), self.regime.has_behavior());
        match self.interaction {
            InteractionKind::Additive => 2 * (g as usize * geo) + b as usize * beh,
            InteractionKind::Complement => (g && b) as usize * (geo ^ beh),
            InteractionKind::DepthTransition => {
                if self.depths[row] < self.switch_depth {
                    (g && b) as usize * (geo ^ beh)
                } else {
                    (g || b) as usize * geo
                }
            }
        }
    }
}

impl Policy for ScenarioPolicy {
    fn name(&self) -> String {
        format!("scenario_{}", self.regime.tag())
    }

    fn decide(&self, row: usize, eligible: &[bool], propensity: &[f64]) -> Result<Decision, PolicyError> {
        let mut scores = vec![0.0; eligible.len()];
        scores[self.target(row)] = 1.0;
        greedy_choice(row, &scores, eligible, propensity).map(Decision::Ad)
    }
}

/// The four regime policies `[EMPTY, G, B, GB]` for the rows of `log`, or `None` when the
/// response surface is not engineered.
pub fn scenario_policies(market: &Market, log: &ImpressionLog, cfg: &SimConfig) -> Option<[ScenarioPolicy; 4]> {
    let ResponseModel::Engineered { interaction, switch_depth, .. } = cfg.response else {
        return None;
    };
    let mid = market.field.geography.mid_lon();
    let bits: Vec<(usize, usize)> = log.rows.iter().map(|r| engineered_bits(&market.users[r.user_id as usize], mid)).collect();
    let depths = log.depths();
    Some(Regime::ALL.map(|regime| ScenarioPolicy {
        regime,
        interaction,
        switch_depth,
        bits: bits.clone(),
        depths: depths.clone(),
    }))
}
