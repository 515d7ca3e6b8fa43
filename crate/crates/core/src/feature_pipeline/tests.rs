use proptest::prelude::*;

use super::*;
use crate::market_sim::{sample_market, simulate_logs, ImpressionLog, SimConfig};

fn sim_log(n_users: u32, horizon: f64, seed: u64) -> ImpressionLog {
    let cfg = SimConfig { n_users, horizon, seed, base_logit: -1.5, ..SimConfig::default() };
    simulate_logs(&sample_market(&cfg), &cfg).unwrap().log
}

fn space(log: &ImpressionLog) -> FeatureSpace {
    FeatureSpace { top_k: 5, n_ads: log.n_ads as u32, n_regions: 64, n_cities: 256 }
}

fn tables(k: u32) -> TopKTables {
    TopKTables { k, app: vec![4, 2, 9], brand: vec![1], isp: vec![0, 1], connectivity: vec![2] }
}

#[test]
fn context_encoding_examples() {
    let t = tables(3);
    let c = encode_context(6, 15, 9, 1, 3, 2, &t).unwrap();
    assert!((c.dense[0] - 1.0).abs() < 1e-15 && c.dense[1].abs() < 1e-15);
    assert!((c.dense[2] - 1.0).abs() < 1e-15 && c.dense[3].abs() < 1e-15);
    assert_eq!(c.categorical, [3, 1, 0, 1]);
    let c = encode_context(0, 0, 7, 0, 0, 0, &t).unwrap();
    assert_eq!(c.dense, [0.0, 1.0, 0.0, 1.0]);
    assert_eq!(c.categorical, [0, 0, 1, 0]);
    assert!(matches!(encode_context(24, 0, 0, 0, 0, 0, &t), Err(FeatureError::InvalidTime { .. })));
    assert!(matches!(encode_context(3, 60, 0, 0, 0, 0, &t), Err(FeatureError::InvalidTime { .. })));
}

proptest! {
    #[test]
    fn cyclic_time_lies_on_the_unit_circle(h in 0u32..24, m in 0u32..60) {
        let c = encode_context(h, m, 0, 0, 0, 0, &tables(2)).unwrap();
        prop_assert!((c.dense[0].powi(2) + c.dense[1].powi(2) - 1.0).abs() < 1e-12);
        prop_assert!((c.dense[2].powi(2) + c.dense[3].powi(2) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn top_k_tables_use_training_rows_only() {
    let log = sim_log(80, 12.0, 3);
    let split = split_users_train_test(&log, 0.5, 1);
    let t = TopKTables::fit(&log, &split.train_rows, 3);
    assert!(t.app.len() <= 3);
    let mut counts = std::collections::BTreeMap::<u32, usize>::new();
    for &i in &split.train_rows {
        *counts.entry(log.rows[i].app_id).or_default() += 1;
    }
    let top = counts.values().map(|c| *c).max().unwrap();
    assert_eq!(counts[&t.app[0]], top);
    assert_eq!(TopKTables::from_json(&t.to_json()).unwrap(), t);
}

#[test]
fn regime_lengths_compose() {
    let s = FeatureSpace { top_k: 5, n_ads: 4, n_regions: 10, n_cities: 40 };
    let len = |r| s.schema(r).len();
    assert_eq!(len(Regime::ContextOnly), 9);
    assert_eq!(len(Regime::Geo), 13);
    assert_eq!(len(Regime::Behavior), 23);
    assert_eq!(len(Regime::GeoBehavior), len(Regime::Geo) + len(Regime::Behavior) - len(Regime::ContextOnly));
    let gb = s.schema(Regime::GeoBehavior).names();
    assert_eq!(&gb[..4], &["hour_sin", "hour_cos", "minute_sin", "minute_cos"]);
    assert_eq!(gb[6], "EC");
}

#[test]
fn assembled_rows_match_schema() {
    let log = sim_log(40, 8.0, 5);
    let t = TopKTables::fit(&log, &(0..log.len()).collect::<Vec<_>>(), 5);
    let table = FeatureTable::build(&log, &t, space(&log)).unwrap();
    for regime in Regime::ALL {
        let schema = table.schema(regime);
        for row in table.assemble_regime(regime).iter().take(50) {
            assert_eq!(row.dense.len(), schema.dense.len());
            assert_eq!(row.categorical.len(), schema.categorical.len());
            for (c, spec) in row.categorical.iter().zip(&schema.categorical) {
                assert!(*c < spec.vocab, "{} code {c} >= {}", spec.name, spec.vocab);
            }
        }
    }
    let mut buf = Vec::new();
    table.write_csv(Regime::GeoBehavior, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("row,user_id,click,hour_sin,"));
    assert_eq!(text.lines().count(), log.len() + 1);
}

#[test]
fn first_impression_uses_sentinels() {
    let log = sim_log(30, 6.0, 9);
    let b = behavioral_features(&log).unwrap();
    let mut prev = None;
    for (r, f) in log.rows.iter().zip(&b) {
        if prev != Some(r.user_id) {
            assert_eq!((f.ec, f.ch, f.sctr, f.tse, f.tce), (0.0, 0.0, 0.0, -1.0, -1.0));
            assert!(f.f.iter().all(|&x| x == 1.0));
        }
        prev = Some(r.user_id);
    }
}

#[test]
fn ordering_violation_is_reported() {
    let mut log = sim_log(10, 6.0, 2);
    let last = log.len() - 1;
    log.rows.swap(0, last);
    assert!(matches!(behavioral_features(&log), Err(FeatureError::OrderingViolation { .. })));
}

/// Brute-force recomputation of every behavioral feature from strictly earlier rows.
fn brute_force(log: &ImpressionLog, i: usize) -> BehavioralFeatures {
    let r = &log.rows[i];
    let n_ads = log.n_ads;
    let mine: Vec<usize> = (0..i).filter(|&j| log.rows[j].user_id == r.user_id).collect();
    let before = |j: usize| {
        let o = &log.rows[j];
        (o.timestamp_s, o.impression_id) < (r.timestamp_s, r.impression_id)
    };
    let global: Vec<usize> = (0..log.len()).filter(|&j| before(j)).collect();
    let div = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let count = |set: &[usize], pred: &dyn Fn(usize) -> bool| set.iter().filter(|&&j| pred(j)).count() as f64;
    let clk = |j: usize| log.rows[j].click == 1;
    let ec = mine.len() as f64;
    let ch = count(&mine, &clk);
    let app = r.app_id;
    let last = mine.last().map(|&j| log.rows[j].timestamp_s);
    let last_click = mine.iter().rev().find(|&&j| clk(j)).map(|&j| log.rows[j].timestamp_s);
    let per_ad = |f: &dyn Fn(usize) -> f64| (0..n_ads).map(f).collect::<Vec<f64>>();
    BehavioralFeatures {
        ec,
        ch,
        sctr: div(ch, ec),
        tse: last.map_or(-1.0, |t| r.timestamp_s - t),
        tce: last_click.map_or(-1.0, |t| r.timestamp_s - t),
        u_app: div(count(&mine, &|j| log.rows[j].app_id == app), ec),
        e_app: div(count(&mine, &|j| log.rows[j].app_id == app && clk(j)), ch),
        u_overall: div(count(&global, &|j| log.rows[j].app_id == app), global.len() as f64),
        e_overall: div(count(&global, &|j| log.rows[j].app_id == app && clk(j)), count(&global, &clk)),
        f: per_ad(&|a| count(&mine, &|j| log.rows[j].ad_id as usize == a) + 1.0),
        ctr_user_ad: per_ad(&|a| {
            div(count(&mine, &|j| log.rows[j].ad_id as usize == a && clk(j)), count(&mine, &|j| log.rows[j].ad_id as usize == a))
        }),
        ctr_ad: per_ad(&|a| {
            div(
                count(&global, &|j| log.rows[j].ad_id as usize == a && clk(j)),
                count(&global, &|j| log.rows[j].ad_id as usize == a),
            )
        }),
        p: per_ad(&|a| {
            div(
                count(&mine, &|j| log.rows[j].ad_id as usize == a && log.rows[j].app_id == app),
                count(&mine, &|j| log.rows[j].ad_id as usize == a),
            )
        }),
        i: per_ad(&|a| {
            div(
                count(&mine, &|j| log.rows[j].ad_id as usize == a && log.rows[j].app_id == app && clk(j)),
                count(&mine, &|j| log.rows[j].ad_id as usize == a && clk(j)),
            )
        }),
    }
}

fn close(a: &BehavioralFeatures, b: &BehavioralFeatures) -> bool {
    let v = |f: &BehavioralFeatures| {
        let mut out = vec![f.ec, f.ch, f.sctr, f.tse, f.tce, f.u_app, f.e_app, f.u_overall, f.e_overall];
        for x in [&f.f, &f.ctr_user_ad, &f.ctr_ad, &f.p, &f.i] {
            out.extend_from_slice(x);
        }
        out
    };
    v(a).iter().zip(v(b)).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs()))
}

#[test]
fn no_lookahead_small_log_all_rows() {
    let log = sim_log(25, 6.0, 21);
    let fast = behavioral_features(&log).unwrap();
    for i in 0..log.len() {
        assert!(close(&fast[i], &brute_force(&log, i)), "row {i}");
    }
}

#[test]
fn no_lookahead_ten_thousand_rows() {
    let cfg = SimConfig { n_users: 600, horizon: 12.0, seed: 4, base_logit: -1.5, ..SimConfig::default() };
    let mut log = simulate_logs(&sample_market(&cfg), &cfg).unwrap().log;
    assert!(log.len() >= 10_000, "{}", log.len());
    log.rows.truncate(10_000);
    let fast = behavioral_features(&log).unwrap();
    // Every 7th row plus each user's first and last rows.
    let mut check: Vec<usize> = (0..log.len()).step_by(7).collect();
    for i in 1..log.len() {
        if log.rows[i].user_id != log.rows[i - 1].user_id {
            check.push(i - 1);
            check.push(i);
        }
    }
    for i in check {
        assert!(close(&fast[i], &brute_force(&log, i)), "row {i}");
    }
}

#[test]
fn user_split_is_disjoint_and_complete() {
    let log = sim_log(60, 6.0, 8);
    let s = split_users_train_test(&log, 0.7, 3);
    assert_eq!(s.train_rows.len() + s.test_rows.len(), log.len());
    for &i in &s.train_rows {
        assert!(s.train_users.contains(&log.rows[i].user_id));
        assert!(!s.test_users.contains(&log.rows[i].user_id));
    }
    let n_users = s.train_users.len() + s.test_users.len();
    assert_eq!(s.train_users.len(), (0.7 * n_users as f64).round() as usize);
    assert_eq!(s, split_users_train_test(&log, 0.7, 3));

    let one = log.select(&(0..log.len()).filter(|&i| log.rows[i].user_id == log.rows[0].user_id).collect::<Vec<_>>());
    let s = split_users_train_test(&one, 0.999, 1);
    assert_eq!(s.train_rows.len(), one.len());
    assert!(s.test_rows.is_empty());
}
