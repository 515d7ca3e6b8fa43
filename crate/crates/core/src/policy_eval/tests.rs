use super::*;
use crate::feature_pipeline::{split_users_train_test, FeatureSpace, TopKTables};
use crate::market_sim::{sample_market, simulate_logs, InteractionKind, ResponseModel, SimConfig, TargetingConfig};
use crate::reward_models::{train_learner, LearnerConfig};
use proptest::prelude::*;

fn toy(shown: Vec<usize>, clicks: Vec<f64>, propensities: Vec<Vec<f64>>) -> EvalData {
    let n = shown.len();
    EvalData {
        impression_ids: (0..n as u64).collect(),
        user_ids: (0..n as u32).map(|i| i / 2).collect(),
        shown,
        clicks,
        eligible: propensities.iter().map(|r| r.iter().map(|&p| p > 0.0).collect()).collect(),
        propensities,
    }
}

// ── Greedy choice ──

#[test]
fn greedy_picks_the_argmax_among_supported_ads() {
    assert_eq!(greedy_choice(0, &[0.9, 0.1, 0.5], &[false, true, false], &[0.0, 1.0, 0.0]).unwrap(), 1);
    assert_eq!(greedy_choice(0, &[0.03, 0.07], &[true, true], &[0.5, 0.5]).unwrap(), 1);
    assert_eq!(greedy_choice(0, &[0.2, 0.2, 0.1], &[true, true, true], &[0.3, 0.3, 0.4]).unwrap(), 0);
    assert_eq!(greedy_choice(0, &[0.9, 0.1], &[true, true], &[0.0, 1.0]).unwrap(), 1);
    assert!(matches!(greedy_choice(4, &[0.9], &[false], &[0.0]), Err(PolicyError::EmptyEligibleSet { row: 4 })));
}

proptest! {
    #[test]
    fn greedy_choice_is_invariant_to_monotone_transforms(
        scores in prop::collection::vec(0.001f64..0.999, 2..8),
        mask in prop::collection::vec(any::<bool>(), 8),
    ) {
        let a = scores.len();
        let mut eligible: Vec<bool> = mask[..a].to_vec();
        eligible[0] = eligible[0] || eligible.iter().all(|&e| !e);
        let prop: Vec<f64> = eligible.iter().map(|&e| e as u8 as f64).collect();
        let logit2: Vec<f64> = scores.iter().map(|p| 1.0 / (1.0 + ((1.0 - p) / p).powi(2))).collect();
        let squared: Vec<f64> = scores.iter().map(|p| p * p).collect();
        let base = greedy_choice(0, &scores, &eligible, &prop).unwrap();
        prop_assert_eq!(greedy_choice(0, &logit2, &eligible, &prop).unwrap(), base);
        prop_assert_eq!(greedy_choice(0, &squared, &eligible, &prop).unwrap(), base);
        prop_assert!(eligible[base]);
    }
}

// ── IPS arithmetic ──

#[test]
fn single_matched_term() {
    let d = toy(vec![0], vec![1.0], vec![vec![0.5, 0.5]]);
    let (e, terms) = ips_estimate(&d, &FixedAdPolicy(0), &[1.0, 1.0]).unwrap();
    assert_eq!(e.value, 2.0);
    assert_eq!(terms[0].weight, 2.0);
    assert_eq!((e.ess, e.n_matched, e.n_clusters), (1.0, 1, 1));
    assert_eq!(e.se, 0.0);
    assert_eq!(e.t_stat, None);
}

#[test]
fn policy_that_never_matches_has_zero_value_and_ess() {
    let d = toy(vec![1, 1, 1], vec![1.0, 0.0, 1.0], vec![vec![0.5, 0.5]; 3]);
    let (e, terms) = ips_estimate(&d, &FixedAdPolicy(0), &[1.0, 1.0]).unwrap();
    assert_eq!((e.value, e.ess, e.n_matched), (0.0, 0.0, 0));
    assert!(terms.iter().all(|t| t.weight == 0.0 && t.contribution == 0.0));
    assert_eq!(e.lift_pct, -100.0);
}

#[test]
fn effective_sample_size_examples() {
    assert_eq!(effective_sample_size(&[3.0; 7]), 7.0);
    assert!((effective_sample_size(&[1.0, 1.0, 2.0]) - 16.0 / 6.0).abs() < 1e-15);
    assert_eq!(effective_sample_size(&[0.0, 4.0, 0.0]), 1.0);
    assert_eq!(effective_sample_size(&[0.0, 0.0]), 0.0);
}

#[test]
fn constant_propensities_give_ess_equal_to_matches() {
    let d = toy(vec![0, 1, 0, 0, 1], vec![1.0, 0.0, 0.0, 1.0, 1.0], vec![vec![0.25, 0.75]; 5]);
    let (e, _) = ips_estimate(&d, &FixedAdPolicy(0), &[1.0, 1.0]).unwrap();
    assert!((e.ess - 3.0).abs() < 1e-12);
    assert!(e.ess <= e.n as f64);
    assert!((e.value - 2.0 * 4.0 / 5.0).abs() < 1e-12);
    let lo_hi = (e.value - 1.96 * e.se, e.value + 1.96 * e.se);
    assert_eq!(e.ci95, lo_hi);
    assert!((e.lift_pct - 100.0 * (e.value / 0.6 - 1.0)).abs() < 1e-12);
}

#[test]
fn cluster_variance_matches_a_naive_oracle() {
    let z = [0.3, 1.2, -0.4, 2.0, 0.0, 0.7, 1.1];
    let keys = [5, 5, 1, 9, 1, 9, 9];
    let mean = z.iter().sum::<f64>() / 7.0;
    let mut naive = 0.0;
    for g in [1, 5, 9] {
        let s: f64 = (0..7).filter(|&i| keys[i] == g).map(|i| z[i] - mean).sum();
        naive += s * s;
    }
    let (v, g) = cluster_robust_variance(&z, &keys);
    assert_eq!(g, 3);
    assert!((v - naive / 49.0).abs() < 1e-15);

    let own: Vec<u32> = (0..7).collect();
    let iid = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 49.0;
    assert!((cluster_robust_variance(&z, &own).0 - iid).abs() < 1e-15);
}

#[test]
fn support_and_shape_errors() {
    struct Bad;
    impl Policy for Bad {
        fn name(&self) -> String {
            "bad".into()
        }
        fn decide(&self, _: usize, _: &[bool], _: &[f64]) -> Result<Decision, PolicyError> {
            Ok(Decision::Ad(1))
        }
    }
    let d = toy(vec![0, 0], vec![1.0, 0.0], vec![vec![1.0, 0.0]; 2]);
    assert!(matches!(ips_estimate(&d, &Bad, &[1.0, 1.0]), Err(PolicyError::SupportViolation { row: 0, ad: 1 })));
    struct Uniform;
    impl Policy for Uniform {
        fn name(&self) -> String {
            "uniform".into()
        }
        fn decide(&self, _: usize, e: &[bool], _: &[f64]) -> Result<Decision, PolicyError> {
            Ok(Decision::Mixed(vec![1.0 / e.len() as f64; e.len()]))
        }
    }
    let mut broken = toy(vec![1], vec![1.0], vec![vec![0.5, 0.5]]);
    broken.propensities[0][1] = 0.0;
    assert!(matches!(ips_estimate(&broken, &Uniform, &[1.0, 1.0]), Err(PolicyError::SupportViolation { row: 0, ad: 1 })));
    broken.propensities[0][0] = 0.0;
    assert!(matches!(ips_estimate(&broken, &FixedAdPolicy(1), &[1.0, 1.0]), Err(PolicyError::EmptyEligibleSet { row: 0 })));
    assert!(matches!(ips_estimate(&d, &LoggingPolicy, &[1.0]), Err(PolicyError::Dimension(_))));
}

// ── Simulator checks ──

#[test]
fn logging_policy_reproduces_the_empirical_mean_exactly() {
    let cfg = SimConfig { n_users: 200, seed: 5, ..SimConfig::default() };
    let sim = simulate_logs(&sample_market(&cfg), &cfg).unwrap();
    let d = EvalData::from_log(&sim.log, sim.truth.propensities.clone());
    let v: Vec<f64> = (0..sim.log.n_ads).map(|a| 1.0 + 0.25 * a as f64).collect();
    let (e, _) = ips_estimate(&d, &LoggingPolicy, &v).unwrap();
    let empirical = d.shown.iter().zip(&d.clicks).map(|(&a, &y)| v[a] * y).sum::<f64>() / d.len() as f64;
    assert_eq!(e.value.to_bits(), empirical.to_bits());
}

fn flat_world(seed: u64) -> SimConfig {
    SimConfig {
        n_users: 125,
        n_ads: 2,
        seed,
        bid_range: (1.0, 1.0),
        quality_range: (1.0, 1.0),
        targeting: TargetingConfig::none(),
        response: ResponseModel::Engineered {
            interaction: InteractionKind::Complement,
            base_ctr: 0.2,
            gain_geo: 0.0,
            gain_behavior: 0.0,
            switch_depth: 0,
        },
        ..SimConfig::default()
    }
}

#[test]
fn ips_is_unbiased_and_covers_under_uniform_logging() {
    let reps = 200;
    let (mut sum, mut sum_sq, mut covered) = (0.0, 0.0, 0);
    for r in 0..reps {
        let cfg = flat_world(1000 + r);
        let sim = simulate_logs(&sample_market(&cfg), &cfg).unwrap();
        let d = EvalData::from_log(&sim.log, sim.truth.propensities.clone());
        let (e, _) = ips_estimate(&d, &FixedAdPolicy(1), &[1.0, 1.0]).unwrap();
        sum += e.value;
        sum_sq += e.value * e.value;
        covered += (e.ci95.0 <= 0.2 && 0.2 <= e.ci95.1) as usize;
    }
    let mean = sum / reps as f64;
    let se = ((sum_sq / reps as f64 - mean * mean) / (reps - 1) as f64).sqrt();
    assert!((mean - 0.2).abs() < 2.0 * se, "mean {mean}, se {se}");
    assert!(covered >= 186, "covered {covered}/{reps}");
}

#[test]
fn greedy_policy_from_a_fitted_model_stays_in_support() {
    let cfg = SimConfig { n_users: 300, seed: 9, base_logit: -2.0, ..SimConfig::default() };
    let sim = simulate_logs(&sample_market(&cfg), &cfg).unwrap();
    let split = split_users_train_test(&sim.log, 0.7, 3);
    let tables = TopKTables::fit(&sim.log, &split.train_rows, 5);
    let space = FeatureSpace { top_k: 5, n_ads: 5, n_regions: 64, n_cities: 256 };
    let table = FeatureTable::build(&sim.log, &tables, space).unwrap();
    let model = train_learner(&table, Regime::GeoBehavior, &split.train_rows, &LearnerConfig::default()).unwrap();
    let policy = induce_greedy_policy(&model, &table, &split.test_rows).unwrap();
    assert_eq!(policy.name(), format!("pi_{}", Regime::GeoBehavior.tag()));

    let test = sim.log.select(&split.test_rows);
    let props: Vec<Vec<f64>> = split.test_rows.iter().map(|&i| sim.truth.propensities[i].clone()).collect();
    let d = EvalData::from_log(&test, props);
    for i in 0..d.len() {
        let Decision::Ad(a) = policy.decide(i, &d.eligible[i], &d.propensities[i]).unwrap() else { panic!() };
        assert!(d.eligible[i][a] && d.propensities[i][a] > 0.0);
    }
    let (e, terms) = ips_estimate(&d, &policy, &[1.0; 5]).unwrap();
    assert!(e.value.is_finite() && e.ess > 0.0 && e.ess <= e.n as f64);

    let mut buf = Vec::new();
    write_terms_csv(&terms, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("impression_id,user_id,weight,contribution\n"));
    assert_eq!(text.lines().count(), terms.len() + 1);
    let rows: Vec<PolicyTableRow> = serde_json::from_str(&policy_table_json(std::slice::from_ref(&e))).unwrap();
    assert_eq!(rows[0].estimate, e.value);
    assert_eq!(rows[0].ess, e.ess);
}
