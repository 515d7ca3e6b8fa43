//! End-to-end experiment orchestration and report emission.
//!
//! Each stage reads the files of earlier stages from the output directory and writes its own,
//! so the pipeline can be run whole or one stage at a time. Every seed is derived from the
//! master seed by name.

mod descriptive;
pub mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use descriptive::{
    descriptive_curves, persistence_slope, ConcentrationPoint, DescriptiveCurves, PersistencePoint, RegionCtr,
};

use crate::feature_pipeline::{split_users_train_test, FeatureError, FeatureSpace, FeatureTable, Regime, TopKTables, UserSplit};
use crate::market_sim::{
    read_log_csv, read_truth_csv, sample_market, simulate_logs, write_log_csv, write_truth_csv, ImpressionLog, Market, SimConfig,
    SimError,
};
use crate::policy_eval::{
    induce_greedy_policy, ips_estimate, policy_table_json, read_terms_csv, write_terms_csv, EvalData, LoggingPolicy,
    PerImpressionTerm, PolicyError, PolicyValueEstimate,
};
use crate::propensity::{
    balance_report, build_eligibility, cross_fit_propensities, default_covariates, read_propensity_csv, PropensityConfig,
    PropensityError, PropensityMatrix,
};
use crate::reward_models::{train_learner, FittedModel, LearnerConfig, ModelError, PredictionMetrics};
use crate::sig17;
use crate::spatial_stats::{rsa_pipeline, RsaConfig, RsaRow, SpatialError};
use crate::voi_tests::{
    aggregate_delta_test, depth_binned_delta, write_depth_table_csv, write_levels_csv, DeltaConfig, DeltaResult, DepthBinResult,
    RegimeTerms, VoiError,
};


// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("missing input {0}; run the earlier stage first")]
    MissingInput(String),
    #[error("market_sim: {0}")]
    Sim(#[from] SimError),
    #[error("feature_pipeline: {0}")]
    Feature(#[from] FeatureError),
    #[error("reward_models: {0}")]
    Model(#[from] ModelError),
    #[error("propensity: {0}")]
    Propensity(#[from] PropensityError),
    #[error("policy_eval: {0}")]
    Policy(#[from] PolicyError),
    #[error("voi_tests: {0}")]
    Voi(#[from] VoiError),
    #[error("spatial_stats: {0}")]
    Spatial(#[from] SpatialError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ReportError {
    ReportError::Io { path: path.display().to_string(), msg: e.to_string() }
}

// ── Config ──────────────────────────────────────────────────────────────

/// Which optional analyses to run. Disabled ones leave a `.SKIPPED` marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Analyses {
    pub delta: bool,
    pub depth: bool,
    pub rsa: bool,
    pub plots: bool,
    /// Write the assembled per-regime feature matrices.
    pub feature_csv: bool,
}

impl Default for Analyses {
    fn default() -> Self {
        Self { delta: true, depth: true, rsa: true, plots: true, feature_csv: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; every module seed is derived from it.
    pub seed: u64,
    pub sim: SimConfig,
    pub regimes: Vec<Regime>,
    pub learner: LearnerConfig,
    pub learner_overrides: BTreeMap<Regime, LearnerConfig>,
    pub train_frac: f64,
    pub top_k: u32,
    pub propensity: PropensityConfig,
    /// Evaluate with the simulator's propensities instead of the cross-fitted ones.
    pub use_true_propensities: bool,
    pub delta: DeltaConfig,
    pub rsa: RsaConfig,
    pub analyses: Analyses,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            sim: SimConfig::default(),
            regimes: Regime::ALL.to_vec(),
            learner: LearnerConfig::default(),
            learner_overrides: BTreeMap::new(),
            train_frac: 0.7,
            top_k: 5,
            propensity: PropensityConfig::default(),
            use_true_propensities: false,
            delta: DeltaConfig::default(),
            rsa: RsaConfig { n_perm: 999, ..RsaConfig::default() },
            analyses: Analyses::default(),
            out_dir: None,
        }
    }
}

/// `u64` from the first eight bytes of `sha256(master_le || name)`.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        serde_json::from_str(text).map_err(|e| ReportError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        self.sim.validate()?;
        if self.regimes.is_empty() {
            return Err(ReportError::Config("at least one regime is required".into()));
        }
        let mut seen = self.regimes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.regimes.len() {
            return Err(ReportError::Config("regimes must be distinct".into()));
        }
        if let Some(r) = self.learner_overrides.keys().find(|r| !self.regimes.contains(r)) {
            return Err(ReportError::Config(format!("learner override for unused regime {}", r.tag())));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(ReportError::Config("train_frac must lie in (0, 1)".into()));
        }
        if self.top_k == 0 {
            return Err(ReportError::Config("top_k must be positive".into()));
        }
        if self.delta.n_boot == 0 || self.delta.n_bins == 0 {
            return Err(ReportError::Config("n_boot and n_bins must be positive".into()));
        }
        self.learner.validate()?;
        for l in self.learner_overrides.values() {
            l.validate()?;
        }
        Ok(())
    }

    /// Copy with every module seed replaced by one derived from `seed`. Idempotent.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.sim.seed = derive_seed(s, "sim");
        c.learner.seed = derive_seed(s, "learner");
        for (r, l) in c.learner_overrides.iter_mut() {
            l.seed = derive_seed(s, &format!("learner/{}", r.tag()));
        }
        c.propensity.seed = derive_seed(s, "propensity");
        c.delta.seed = derive_seed(s, "delta");
        c.rsa.seed = derive_seed(s, "rsa");
        c
    }

    pub fn learner_for(&self, regime: Regime) -> &LearnerConfig {
        self.learner_overrides.get(&regime).unwrap_or(&self.learner)
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split")
    }

    /// Hex sha256 of the resolved config's JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.resolved().to_json().as_bytes()))
    }
}

// ── File helpers ────────────────────────────────────────────────────────

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

fn path(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}

fn write_bytes(out: &Path, name: &str, bytes: &[u8]) -> Result<(), ReportError> {
    let p = path(out, name);
    fs::write(&p, bytes).map_err(|e| io_err(&p, e))
}

fn with_writer<T, E>(out: &Path, name: &str, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<T, E>) -> Result<T, ReportError>
where
    ReportError: From<E>,
{
    let p = path(out, name);
    let file = fs::File::create(&p).map_err(|e| io_err(&p, e))?;
    let mut w = BufWriter::new(file);
    let v = f(&mut w)?;
    w.flush().map_err(|e| io_err(&p, e))?;
    Ok(v)
}

fn read_text(out: &Path, name: &str) -> Result<String, ReportError> {
    let p = path(out, name);
    if !p.exists() {
        return Err(ReportError::MissingInput(name.to_string()));
    }
    fs::read_to_string(&p).map_err(|e| io_err(&p, e))
}

fn open(out: &Path, name: &str) -> Result<std::io::BufReader<fs::File>, ReportError> {
    let p = path(out, name);
    let f = fs::File::open(&p).map_err(|_| ReportError::MissingInput(name.to_string()))?;
    Ok(std::io::BufReader::new(f))
}

fn skip(out: &Path, name: &str, reason: &str) -> Result<(), ReportError> {
    let _ = fs::remove_file(path(out, name));
    write_bytes(out, &format!("{name}.SKIPPED"), format!("SKIPPED: {reason}\n").as_bytes())
}

fn clear_skip(out: &Path, name: &str) {
    let _ = fs::remove_file(path(out, &format!("{name}.SKIPPED")));
}

fn csv_err(e: csv::Error) -> ReportError {
    ReportError::Io { path: "csv".into(), msg: e.to_string() }
}

fn write_table(out: &Path, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), ReportError> {
    with_writer(out, name, |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(header).map_err(csv_err)?;
        for r in rows {
            wtr.write_record(r).map_err(csv_err)?;
        }
        wtr.flush().map_err(|e| io_err(Path::new(name), e))
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(sig17).unwrap_or_default()
}

// ── Loaded state ────────────────────────────────────────────────────────

fn load_config(out: &Path) -> Result<ExperimentConfig, ReportError> {
    ExperimentConfig::from_json(&read_text(out, "config.json")?)
}

fn load_market(out: &Path) -> Result<Market, ReportError> {
    serde_json::from_str(&read_text(out, "market.json")?).map_err(|e| ReportError::Config(format!("market.json: {e}")))
}

fn load_log(out: &Path, cfg: &ExperimentConfig) -> Result<ImpressionLog, ReportError> {
    Ok(read_log_csv(open(out, "log.csv")?, cfg.sim.n_ads as usize)?)
}

fn load_split(out: &Path) -> Result<UserSplit, ReportError> {
    serde_json::from_str(&read_text(out, "split.json")?).map_err(|e| ReportError::Config(format!("split.json: {e}")))
}

fn feature_space(cfg: &ExperimentConfig) -> FeatureSpace {
    let g = &cfg.sim.geography;
    FeatureSpace { top_k: cfg.top_k, n_ads: cfg.sim.n_ads, n_regions: g.n_regions(), n_cities: g.n_cities() }
}

fn load_table(out: &Path, cfg: &ExperimentConfig, log: &ImpressionLog) -> Result<FeatureTable, ReportError> {
    let tables = TopKTables::from_json(&read_text(out, "topk.json")?)?;
    Ok(FeatureTable::build(log, &tables, feature_space(cfg))?)
}

fn load_model(out: &Path, regime: Regime) -> Result<FittedModel, ReportError> {
    Ok(FittedModel::from_json(&read_text(out, &format!("model_{}.json", regime.tag()))?)?)
}

// ── Stages ──────────────────────────────────────────────────────────────

/// Sample the market and logs; writes `config.json`, `market.json`, `log.csv`, `truth.csv`.
pub fn stage_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<ImpressionLog, ReportError> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_bytes(out, "config.json", cfg.to_json().as_bytes())?;
    let market = sample_market(&cfg.sim);
    let sim = simulate_logs(&market, &cfg.sim)?;
    write_bytes(out, "market.json", serde_json::to_string(&market).expect("market serializes").as_bytes())?;
    with_writer(out, "log.csv", |w| write_log_csv(&sim.log, w))?;
    with_writer(out, "truth.csv", |w| write_truth_csv(&sim.log, &sim.truth, w))?;
    Ok(sim.log)
}

/// User split and top-K tables fitted on training rows; writes `split.json`, `topk.json`.
pub fn stage_features(out: &Path) -> Result<UserSplit, ReportError> {
    let cfg = load_config(out)?;
    let log = load_log(out, &cfg)?;
    let split = split_users_train_test(&log, cfg.train_frac, cfg.split_seed());
    let tables = TopKTables::fit(&log, &split.train_rows, cfg.top_k);
    write_bytes(out, "split.json", serde_json::to_string(&split).expect("split serializes").as_bytes())?;
    write_bytes(out, "topk.json", tables.to_json().as_bytes())?;
    for regime in Regime::ALL {
        let name = format!("features_{}.csv", regime.tag());
        if cfg.analyses.feature_csv && cfg.regimes.contains(&regime) {
            clear_skip(out, &name);
            let table = FeatureTable::build(&log, &tables, feature_space(&cfg))?;
            with_writer(out, &name, |w| table.write_csv(regime, w))?;
        } else {
            skip(out, &name, "feature export disabled or regime not selected")?;
        }
    }
    Ok(split)
}

/// One row of the predictive accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub regime: Regime,
    pub learner: String,
    pub metrics: PredictionMetrics,
}

/// Train one model per regime; writes `model_<TAG>.json`, `curve_<TAG>.csv`, `table1_metrics.csv`.
pub fn stage_train(out: &Path) -> Result<Vec<MetricsRow>, ReportError> {
    let cfg = load_config(out)?;
    let log = load_log(out, &cfg)?;
    let split = load_split(out)?;
    let table = load_table(out, &cfg, &log)?;
    let mut rows = Vec::new();
    for &regime in &cfg.regimes {
        let lcfg = cfg.learner_for(regime);
        let model = train_learner(&table, regime, &split.train_rows, lcfg)?;
        let tag = regime.tag();
        write_bytes(out, &format!("model_{tag}.json"), model.to_json().as_bytes())?;
        with_writer(out, &format!("curve_{tag}.csv"), |w| model.write_curve_csv(w))?;
        let metrics = model.evaluate(&table, &split.test_rows)?;
        rows.push(MetricsRow { regime, learner: format!("{:?}", lcfg.kind).to_uppercase(), metrics });
    }
    let recs: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let m = &r.metrics;
            vec![
                r.regime.tag().to_string(),
                r.learner.clone(),
                sig17(m.log_loss),
                sig17(m.rig * 100.0),
                sig17(m.auc),
                sig17(m.base_rate),
                m.n.to_string(),
            ]
        })
        .collect();
    write_table(out, "table1_metrics.csv", &["regime", "learner", "log_loss", "rig_pct", "auc", "base_rate", "n"], &recs)?;
    Ok(rows)
}

/// Summary of the propensity stage written to `propensity_summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensitySummary {
    pub source: String,
    pub n_rows: usize,
    pub n_dropped: usize,
    /// Mean absolute error against the simulator's propensities.
    pub mae_vs_truth: f64,
    pub max_post_balance: f64,
    pub notes: Vec<String>,
}

/// Cross-fitted (or true) propensities on all kept rows; writes `propensities.csv`,
/// `balance.json`, `propensity_summary.json`.
pub fn stage_propensity(out: &Path) -> Result<PropensitySummary, ReportError> {
    let cfg = load_config(out)?;
    let log = load_log(out, &cfg)?;
    let market = load_market(out)?;
    let truth = read_truth_csv(open(out, "truth.csv")?)?;
    let filters: Vec<_> = market.ads.iter().map(|a| a.filter.clone()).collect();
    let e = build_eligibility(&log, &filters);
    let truth_kept: Vec<Vec<f64>> = e.kept.iter().map(|&i| truth.propensities[i].clone()).collect();
    let (matrix, source) = if cfg.use_true_propensities {
        let support = e.eligible.clone();
        let m =
            PropensityMatrix { n_ads: log.n_ads, probs: truth_kept.clone(), raw: truth_kept.clone(), support, notes: Vec::new() };
        (m, "truth")
    } else {
        (cross_fit_propensities(&log, &e, &cfg.propensity)?, "cross_fit")
    };
    let ids: Vec<u64> = e.kept.iter().map(|&i| log.rows[i].impression_id).collect();
    with_writer(out, "propensities.csv", |w| matrix.write_csv(&ids, w))?;
    let cov = default_covariates(&log, &e);
    let balance = balance_report(&log, &e, &matrix.probs, &cov)?;
    write_bytes(out, "balance.json", balance.to_json().as_bytes())?;
    let cells = (matrix.len() * log.n_ads).max(1) as f64;
    let mae =
        matrix.probs.iter().zip(&truth_kept).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs())).sum::<f64>() / cells;
    let summary = PropensitySummary {
        source: source.to_string(),
        n_rows: matrix.len(),
        n_dropped: e.dropped.len(),
        mae_vs_truth: mae,
        max_post_balance: balance.max_post(),
        notes: matrix.notes.clone(),
    };
    write_bytes(out, "propensity_summary.json", serde_json::to_string_pretty(&summary).expect("summary serializes").as_bytes())?;
    Ok(summary)
}

/// Test rows that have a propensity row, with their propensities, in log order.
fn eval_rows(out: &Path, log: &ImpressionLog, split: &UserSplit) -> Result<(Vec<usize>, Vec<Vec<f64>>), ReportError> {
    let (ids, probs) = read_propensity_csv(open(out, "propensities.csv")?)?;
    let by_id: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let mut rows = Vec::new();
    let mut props = Vec::new();
    for &i in &split.test_rows {
        if let Some(&k) = by_id.get(&log.rows[i].impression_id) {
            rows.push(i);
            props.push(probs[k].clone());
        }
    }
    if rows.is_empty() {
        return Err(ReportError::Policy(PolicyError::EmptyInput));
    }
    Ok((rows, props))
}

/// IPS values of the greedy regime policies and the logging policy on test rows; writes
/// `terms_<TAG>.csv`, `table2_policy_values.json`, `table2_policy_values.csv`.
pub fn stage_evaluate(out: &Path) -> Result<Vec<PolicyValueEstimate>, ReportError> {
    let cfg = load_config(out)?;
    let log = load_log(out, &cfg)?;
    let split = load_split(out)?;
    let table = load_table(out, &cfg, &log)?;
    let (rows, props) = eval_rows(out, &log, &split)?;
    let data = EvalData::from_log(&log.select(&rows), props);
    let rewards = vec![1.0; log.n_ads];
    let mut estimates = Vec::new();
    let (logging, _) = ips_estimate(&data, &LoggingPolicy, &rewards)?;
    estimates.push(logging);
    for &regime in &cfg.regimes {
        let model = load_model(out, regime)?;
        let policy = induce_greedy_policy(&model, &table, &rows)?;
        let (est, terms) = ips_estimate(&data, &policy, &rewards)?;
        with_writer(out, &format!("terms_{}.csv", regime.tag()), |w| write_terms_csv(&terms, w))?;
        estimates.push(est);
    }
    write_bytes(out, "table2_policy_values.json", policy_table_json(&estimates).as_bytes())?;
    let recs: Vec<Vec<String>> = estimates
        .iter()
        .map(|e| {
            vec![
                e.policy.clone(),
                sig17(e.value),
                sig17(e.ci95.0),
                sig17(e.ci95.1),
                opt(e.t_stat),
                sig17(e.se),
                sig17(e.lift_pct),
                sig17(e.ess),
                e.n_matched.to_string(),
                e.n.to_string(),
            ]
        })
        .collect();
    write_table(
        out,
        "table2_policy_values.csv",
        &["policy", "estimate", "ci_lo", "ci_hi", "t", "se", "lift_pct", "ess", "n_matched", "n"],
        &recs,
    )?;
    Ok(estimates)
}

/// Outputs of the interaction stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaOutputs {
    pub aggregate: Option<DeltaResult>,
    pub depth: Option<Vec<DepthBinResult>>,
}

/// Aggregate and depth-binned interaction tests; writes `table4_delta.csv`, `tableD1_depth.csv`,
/// `depth_levels.csv`, or `.SKIPPED` markers when disabled or when a regime is missing.
pub fn stage_delta(out: &Path) -> Result<DeltaOutputs, ReportError> {
    let cfg = load_config(out)?;
    let have_all = Regime::ALL.iter().all(|r| cfg.regimes.contains(r));
    let depth_files = ["tableD1_depth.csv", "depth_levels.csv"];
    let mut res = DeltaOutputs { aggregate: None, depth: None };
    if !have_all || !(cfg.analyses.delta || cfg.analyses.depth) {
        let reason = if have_all { "analysis disabled" } else { "needs all four regimes" };
        skip(out, "table4_delta.csv", reason)?;
        for f in depth_files {
            skip(out, f, reason)?;
        }
        return Ok(res);
    }
    let log = load_log(out, &cfg)?;
    let load = |r: Regime| -> Result<Vec<PerImpressionTerm>, ReportError> {
        Ok(read_terms_csv(open(out, &format!("terms_{}.csv", r.tag()))?)?)
    };
    let [t0, tg, tb, tgb] = [load(Regime::ContextOnly)?, load(Regime::Geo)?, load(Regime::Behavior)?, load(Regime::GeoBehavior)?];
    let terms = RegimeTerms { empty: &t0, geo: &tg, behavior: &tb, geo_behavior: &tgb };
    if cfg.analyses.delta {
        clear_skip(out, "table4_delta.csv");
        let d = aggregate_delta_test(&terms, &cfg.delta)?;
        let rec = vec![
            sig17(d.delta_hat),
            sig17(d.se_clustered),
            sig17(d.ci95.0),
            sig17(d.ci95.1),
            sig17(d.t_stat),
            sig17(d.p_two_sided),
            sig17(d.p_delta_pos),
            sig17(d.p_delta_neg),
            d.decision.label().to_string(),
            d.tier.label().to_string(),
            d.n.to_string(),
            d.n_clusters.to_string(),
        ];
        write_table(
            out,
            "table4_delta.csv",
            &[
                "delta_hat",
                "se",
                "ci_lo",
                "ci_hi",
                "t_stat",
                "p_two_sided",
                "p_delta_pos",
                "p_delta_neg",
                "decision",
                "signif",
                "n",
                "n_clusters",
            ],
            &[rec],
        )?;
        res.aggregate = Some(d);
    } else {
        skip(out, "table4_delta.csv", "analysis disabled")?;
    }
    if cfg.analyses.depth {
        let depth_of: BTreeMap<u64, u32> = log.rows.iter().map(|r| r.impression_id).zip(log.depths()).collect();
        let depths: Vec<u32> = t0.iter().map(|t| depth_of.get(&t.impression_id).copied().unwrap_or(0)).collect();
        let bins = depth_binned_delta(&terms, &depths, &cfg.delta)?;
        for f in depth_files {
            clear_skip(out, f);
        }
        with_writer(out, depth_files[0], |w| write_depth_table_csv(&bins, w))?;
        with_writer(out, depth_files[1], |w| write_levels_csv(&bins, w))?;
        res.depth = Some(bins);
    } else {
        for f in depth_files {
            skip(out, f, "analysis disabled")?;
        }
    }
    Ok(res)
}

/// Residual spatial autocorrelation with the behavior-only model; writes `rsa_table.csv`.
pub fn stage_rsa(out: &Path) -> Result<Option<Vec<RsaRow>>, ReportError> {
    let cfg = load_config(out)?;
    let name = "rsa_table.csv";
    if !cfg.analyses.rsa || !cfg.regimes.contains(&Regime::Behavior) {
        let reason = if cfg.analyses.rsa { "needs the behavior-only regime" } else { "analysis disabled" };
        skip(out, name, reason)?;
        return Ok(None);
    }
    let log = load_log(out, &cfg)?;
    let table = load_table(out, &cfg, &log)?;
    let model = load_model(out, Regime::Behavior)?;
    let all: Vec<usize> = (0..log.len()).collect();
    let pred = model.predict_logged(&table, &all)?;
    let rows = rsa_pipeline(&log, &pred, &cfg.rsa)?;
    clear_skip(out, name);
    write_rsa_csv(out, name, &rows)?;
    Ok(Some(rows))
}

fn write_rsa_csv(out: &Path, name: &str, rows: &[RsaRow]) -> Result<(), ReportError> {
    let recs: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{:?}", r.region_key).to_uppercase(),
                format!("{:?}", r.split).to_uppercase(),
                format!("{:?}", r.residual).to_uppercase(),
                sig17(r.moran_i),
                sig17(r.moran_p),
                sig17(r.geary_c),
                sig17(r.geary_p),
                r.n_regions.to_string(),
                r.n_perm.to_string(),
            ]
        })
        .collect();
    write_table(
        out,
        name,
        &["region_key", "split", "residual", "moran_i", "moran_p", "geary_c", "geary_p", "n_regions", "n_perm"],
        &recs,
    )
}

// ── Report ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    /// `OK` or `SKIPPED`.
    pub status: String,
    pub sha256: String,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub provenance: Provenance,
    pub persistence_slope: Option<f64>,
    pub files: Vec<FileEntry>,
}

/// Everything a full run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub provenance: Provenance,
    pub metrics: Vec<MetricsRow>,
    pub policy_values: Vec<PolicyValueEstimate>,
    pub propensity: PropensitySummary,
    pub aggregate_delta: Option<DeltaResult>,
    pub depth_table: Option<Vec<DepthBinResult>>,
    pub rsa: Option<Vec<RsaRow>>,
    pub curves: DescriptiveCurves,
    pub files: Vec<FileEntry>,
}

fn write_descriptive(out: &Path, curves: &DescriptiveCurves) -> Result<(), ReportError> {
    let conc: Vec<Vec<String>> =
        curves.concentration.iter().map(|p| vec![p.depth.to_string(), sig17(p.impression_share), sig17(p.click_share)]).collect();
    write_table(out, "descriptive_concentration.csv", &["depth", "impression_share", "click_share"], &conc)?;
    let pers: Vec<Vec<String>> =
        curves.persistence.iter().map(|p| vec![p.prior_clicks.to_string(), p.n.to_string(), sig17(p.next_click_rate)]).collect();
    write_table(out, "descriptive_persistence.csv", &["prior_clicks", "n", "next_click_rate"], &pers)?;
    let reg: Vec<Vec<String>> = curves
        .regions
        .iter()
        .map(|r| {
            vec![
                r.region_id.to_string(),
                r.impressions.to_string(),
                r.clicks.to_string(),
                sig17(r.ctr),
                sig17(r.lat),
                sig17(r.lon),
            ]
        })
        .collect();
    write_table(out, "region_ctr.csv", &["region_id", "impressions", "clicks", "ctr", "lat", "lon"], &reg)
}

fn write_plots(out: &Path, cfg: &ExperimentConfig, curves: &DescriptiveCurves) -> Result<(), ReportError> {
    use svg::{heatmap, line_chart, Series};
    let conc = Series {
        label: "clicks",
        points: std::iter::once((0.0, 0.0))
            .chain(curves.concentration.iter().map(|p| (p.impression_share, p.click_share)))
            .collect(),
    };
    let diag = Series { label: "uniform", points: vec![(0.0, 0.0), (1.0, 1.0)] };
    let chart = line_chart("Click concentration over exposure history", "share of impressions", "share of clicks", &[conc, diag]);
    write_bytes(out, "concentration.svg", chart.as_bytes())?;

    let pers = Series {
        label: "next click",
        points: curves.persistence.iter().map(|p| (p.prior_clicks as f64, p.next_click_rate)).collect(),
    };
    write_bytes(out, "persistence.svg", line_chart("Click persistence", "prior clicks", "next-click rate", &[pers]).as_bytes())?;

    let g = &cfg.sim.geography;
    let mut cells = vec![vec![None; g.cols as usize]; g.rows as usize];
    for r in &curves.regions {
        let (row, col) = ((r.region_id / g.cols) as usize, (r.region_id % g.cols) as usize);
        if row < cells.len() && col < g.cols as usize {
            cells[row][col] = Some(r.ctr);
        }
    }
    write_bytes(out, "region_ctr.svg", heatmap("Click-through rate by region", &cells).as_bytes())?;

    let mut curves_by_regime = Vec::new();
    for &regime in &cfg.regimes {
        let p = path(out, &format!("curve_{}.csv", regime.tag()));
        if let Ok(mut rdr) = csv::Reader::from_path(&p) {
            let pts: Vec<(f64, f64)> = rdr
                .records()
                .filter_map(|r| r.ok())
                .filter_map(|r| Some((r.get(0)?.parse().ok()?, r.get(1)?.parse().ok()?)))
                .collect();
            curves_by_regime.push((regime.tag(), pts));
        }
    }
    let series: Vec<Series> = curves_by_regime.iter().map(|(t, p)| Series { label: t, points: p.clone() }).collect();
    write_bytes(out, "learning_curves.svg", line_chart("Training loss", "epoch", "loss", &series).as_bytes())?;

    if let Ok(mut rdr) = csv::Reader::from_path(path(out, "depth_levels.csv")) {
        let recs: Vec<csv::StringRecord> = rdr.records().filter_map(|r| r.ok()).collect();
        let series: Vec<Series> = ["EMPTY", "G", "B", "GB"]
            .iter()
            .enumerate()
            .map(|(k, tag)| Series {
                label: tag,
                points: recs.iter().filter_map(|r| Some((r.get(1)?.parse().ok()?, r.get(3 + k)?.parse().ok()?))).collect(),
            })
            .collect();
        write_bytes(
            out,
            "depth_levels.svg",
            line_chart("Policy value by impression depth", "last depth in bin", "value", &series).as_bytes(),
        )?;
    } else {
        skip(out, "depth_levels.svg", "no depth table")?;
    }
    Ok(())
}

const PLOT_FILES: [&str; 5] =
    ["concentration.svg", "persistence.svg", "region_ctr.svg", "learning_curves.svg", "depth_levels.svg"];

/// Descriptive tables, figures and the `report.json` index with per-file hashes.
pub fn stage_report(out: &Path) -> Result<(ReportIndex, DescriptiveCurves), ReportError> {
    let cfg = load_config(out)?;
    let log = load_log(out, &cfg)?;
    let curves = descriptive_curves(&log);
    write_descriptive(out, &curves)?;
    if cfg.analyses.plots {
        for f in PLOT_FILES {
            clear_skip(out, f);
        }
        write_plots(out, &cfg, &curves)?;
    } else {
        for f in PLOT_FILES {
            skip(out, f, "plots disabled")?;
        }
    }
    let mut names: Vec<String> = fs::read_dir(out)
        .map_err(|e| io_err(out, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n != "report.json" && n != INCOMPLETE_MARKER)
        .collect();
    names.sort();
    let mut files = Vec::with_capacity(names.len());
    for name in names {
        let p = path(out, &name);
        let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
        let status = if name.ends_with(".SKIPPED") { "SKIPPED" } else { "OK" };
        files.push(FileEntry { name, status: status.to_string(), sha256: hex::encode(Sha256::digest(&bytes)) });
    }
    let index = ReportIndex {
        provenance: Provenance { config_hash: cfg.hash(), seed: cfg.seed, version: env!("CARGO_PKG_VERSION").to_string() },
        persistence_slope: persistence_slope(&curves.persistence),
        files,
    };
    write_bytes(out, "report.json", serde_json::to_string_pretty(&index).expect("index serializes").as_bytes())?;
    Ok((index, curves))
}

// ── Full run ────────────────────────────────────────────────────────────

/// Pipeline stages in execution order.
pub const STAGES: [&str; 8] = ["simulate", "features", "train", "propensity", "evaluate", "delta", "rsa", "report"];

/// Run every stage, reporting each stage name to `progress` before it starts. On failure an
/// `INCOMPLETE` marker naming the failed stage is left in the output directory.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentReport, ReportError> {
    let _ = fs::remove_file(path(out, INCOMPLETE_MARKER));
    let mut stage = STAGES[0];
    let result = (|| {
        progress(stage);
        stage_simulate(cfg, out)?;
        stage = STAGES[1];
        progress(stage);
        stage_features(out)?;
        stage = STAGES[2];
        progress(stage);
        let metrics = stage_train(out)?;
        stage = STAGES[3];
        progress(stage);
        let propensity = stage_propensity(out)?;
        stage = STAGES[4];
        progress(stage);
        let policy_values = stage_evaluate(out)?;
        stage = STAGES[5];
        progress(stage);
        let delta = stage_delta(out)?;
        stage = STAGES[6];
        progress(stage);
        let rsa = stage_rsa(out)?;
        stage = STAGES[7];
        progress(stage);
        let (index, curves) = stage_report(out)?;
        Ok(ExperimentReport {
            provenance: index.provenance,
            metrics,
            policy_values,
            propensity,
            aggregate_delta: delta.aggregate,
            depth_table: delta.depth,
            rsa,
            curves,
            files: index.files,
        })
    })();
    if let Err(e) = &result {
        if out.is_dir() {
            let _ = fs::write(path(out, INCOMPLETE_MARKER), format!("stage: {stage}\nerror: {e}\n"));
        }
    }
    result
}

pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport, ReportError> {
    run_experiment_with(cfg, out, &mut |_| {})
}

/// Output directory from an explicit override, the config, or `./voilab_out`.
pub fn output_dir(cfg: &ExperimentConfig, over: Option<&Path>) -> PathBuf {
    over.map(Path::to_path_buf).or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("voilab_out"))
}
