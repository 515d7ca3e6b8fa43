use super::*;
use crate::feature_pipeline::{split_users_train_test, FeatureSpace, TopKTables};
use crate::market_sim::{sample_market, simulate_logs, SimConfig, Simulation};

fn simulate(cfg: &SimConfig) -> Simulation {
    simulate_logs(&sample_market(cfg), cfg).unwrap()
}

fn table_for(sim: &Simulation, train: &[usize]) -> FeatureTable {
    let tables = TopKTables::fit(&sim.log, train, 5);
    let space = FeatureSpace { top_k: 5, n_ads: sim.log.n_ads as u32, n_regions: 64, n_cities: 256 };
    FeatureTable::build(&sim.log, &tables, space).unwrap()
}

#[test]
fn logistic_learner_beats_the_base_rate_and_round_trips() {
    let sim = simulate(&SimConfig { n_users: 800, horizon: 24.0, seed: 6, base_logit: -2.0, ..SimConfig::default() });
    let split = split_users_train_test(&sim.log, 0.7, 1);
    let table = table_for(&sim, &split.train_rows);
    let model = train_learner(&table, Regime::GeoBehavior, &split.train_rows, &LearnerConfig::default()).unwrap();
    assert!(model.curve.windows(2).all(|w| w[1].loss <= w[0].loss));
    let m = model.evaluate(&table, &split.test_rows).unwrap();
    assert!(m.rig > 0.0 && m.auc > 0.6, "{m:?}");

    let back = FittedModel::from_json(&model.to_json()).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.predict_logged(&table, &split.test_rows).unwrap(), model.predict_logged(&table, &split.test_rows).unwrap());
    let all = model.predict_all_ads(&table, &split.test_rows[..20]).unwrap();
    assert!(all.iter().all(|r| r.len() == 5 && r.iter().all(|&p| p > 0.0 && p < 1.0)));

    let mut buf = Vec::new();
    model.write_curve_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("epoch,loss\n0,"));
}

#[test]
fn true_probabilities_lower_bound_fitted_log_loss() {
    let sim = simulate(&SimConfig { n_users: 400, horizon: 24.0, seed: 8, base_logit: -2.0, ..SimConfig::default() });
    let split = split_users_train_test(&sim.log, 0.6, 2);
    let table = table_for(&sim, &split.train_rows);
    let y: Vec<f64> = split.test_rows.iter().map(|&i| table.click[i]).collect();
    let truth: Vec<f64> = split.test_rows.iter().map(|&i| sim.log.rows[i].true_ctr).collect();
    let oracle = evaluate_predictions(&y, &truth).unwrap();
    for regime in Regime::ALL {
        let model = train_learner(&table, regime, &split.train_rows, &LearnerConfig::default()).unwrap();
        let m = model.evaluate(&table, &split.test_rows).unwrap();
        assert!(oracle.log_loss <= m.log_loss + 1e-3, "{regime:?}: {} vs {}", oracle.log_loss, m.log_loss);
    }
}

#[test]
fn sequence_learner_finds_a_behavioral_signal() {
    let cfg = SimConfig {
        n_users: 200,
        horizon: 48.0,
        seed: 3,
        base_logit: -2.0,
        persistence: 1.5,
        confound_strength: 0.0,
        ..SimConfig::default()
    };
    let sim = simulate(&cfg);
    let split = split_users_train_test(&sim.log, 0.7, 4);
    let table = table_for(&sim, &split.train_rows);
    let lc = LearnerConfig { epochs: 4, ..LearnerConfig::sequence() };
    let model = train_learner(&table, Regime::Behavior, &split.train_rows, &lc).unwrap();
    assert!(model.curve.windows(2).all(|w| w[1].loss <= w[0].loss), "{:?}", model.curve);
    let m = model.evaluate(&table, &split.test_rows).unwrap();
    assert!(m.auc > 0.6, "{m:?}");

    let rows = &split.test_rows[..40];
    let all = model.predict_all_ads(&table, rows).unwrap();
    let logged = model.predict_logged(&table, rows).unwrap();
    for ((&i, p), l) in rows.iter().zip(&all).zip(&logged) {
        assert_eq!(p[table.logged_ad[i] as usize], *l);
    }
    assert_eq!(FittedModel::from_json(&model.to_json()).unwrap(), model);
}

#[test]
fn labels_and_config_are_validated() {
    let sim = simulate(&SimConfig { n_users: 20, horizon: 6.0, ..SimConfig::default() });
    let mut table = table_for(&sim, &(0..sim.log.len()).collect::<Vec<_>>());
    let rows: Vec<usize> = (0..table.len()).collect();
    let bad = LearnerConfig { hidden_size: 30, attention_heads: 4, ..LearnerConfig::sequence() };
    assert!(matches!(train_learner(&table, Regime::Geo, &rows, &bad), Err(ModelError::Config(_))));
    let bad = LearnerConfig { window: 0, ..LearnerConfig::sequence() };
    assert!(matches!(train_learner(&table, Regime::Geo, &rows, &bad), Err(ModelError::Config(_))));
    assert!(matches!(train_learner(&table, Regime::Geo, &[], &LearnerConfig::default()), Err(ModelError::EmptyInput)));
    table.click[3] = 0.5;
    assert!(matches!(train_learner(&table, Regime::Geo, &rows, &LearnerConfig::default()), Err(ModelError::Label(_))));
}

#[test]
fn all_zero_labels_fit_near_zero() {
    let sim = simulate(&SimConfig { n_users: 40, horizon: 6.0, ..SimConfig::default() });
    let mut table = table_for(&sim, &(0..sim.log.len()).collect::<Vec<_>>());
    table.click.iter_mut().for_each(|c| *c = 0.0);
    let rows: Vec<usize> = (0..table.len()).collect();
    let cfg = LearnerConfig { l2_penalty: 1.0, ..LearnerConfig::default() };
    let model = train_learner(&table, Regime::Geo, &rows, &cfg).unwrap();
    let m = model.evaluate(&table, &rows).unwrap();
    assert!(m.log_loss < 1e-3, "{m:?}");
}
