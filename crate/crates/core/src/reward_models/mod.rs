//! Click models `f(a, x) = Pr(click | features x, ad a)` for each information regime.
//!
//! Two learners share one interface. `LOGISTIC` is an L2-penalized logistic
//! regression on one-hot and standardized features with per-ad interaction
//! blocks, fitted by L-BFGS. `SEQUENCE` runs each user's impression history
//! through LSTM layers, causal multi-head attention and a gated projection,
//! trained with AdamW on the mean binary cross-entropy. Both score any
//! candidate ad, which is what off-policy evaluation needs.

pub mod lbfgs;
mod logistic;
pub mod metrics;
pub mod optim;
pub mod sequence;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_pipeline::{FeatureSchema, FeatureTable, Regime, Transform};

pub(crate) use logistic::sigmoid;
pub use logistic::{fit_sparse_logistic, LogisticModel, SparseDesign, SparseFit};
pub use metrics::{auc, binary_entropy, evaluate_predictions, relative_information_gain, PredictionMetrics};
pub use sequence::{
    causal_attention_forward, gradient_check, lstm_cell_step, GradCheckOptions, GradCheckScope, LstmLayer, LstmStep,
    SequenceModel, SequenceParams, Tensor,
};

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("negative time gap {gap}")]
    InvalidTimeGap { gap: f64 },
    #[error("invalid label: {0}")]
    Label(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid learner config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

// ── Config ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LearnerKind {
    Logistic,
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    /// Penalty `(l2/2) * ||w||^2` added to the mean loss of the logistic learner.
    pub l2_penalty: f64,
    /// Include per-ad copies of every feature in the logistic learner.
    pub ad_interactions: bool,
    pub max_iter: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Sequences per AdamW step.
    pub batch_size: usize,
    pub hidden_size: usize,
    pub lstm_layers: usize,
    pub attention_heads: usize,
    pub window: usize,
    pub embedding_dim: usize,
    /// Per-categorical overrides of `embedding_dim`.
    pub embedding_dims: BTreeMap<String, usize>,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            kind: LearnerKind::Logistic,
            l2_penalty: 1e-3,
            ad_interactions: true,
            max_iter: 300,
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            epochs: 6,
            batch_size: 32,
            hidden_size: 32,
            lstm_layers: 1,
            attention_heads: 2,
            window: 32,
            embedding_dim: 8,
            embedding_dims: BTreeMap::new(),
            dropout_rate: 0.1,
            seed: 11,
        }
    }
}

impl LearnerConfig {
    pub fn sequence() -> Self {
        Self { kind: LearnerKind::Sequence, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.l2_penalty >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("penalties must be >= 0");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.window == 0 || self.hidden_size == 0 || self.lstm_layers == 0 || self.batch_size == 0 {
            return bad("window, hidden_size, lstm_layers and batch_size must be >= 1");
        }
        if self.attention_heads == 0 || !self.hidden_size.is_multiple_of(self.attention_heads) {
            return bad("hidden_size must be divisible by attention_heads");
        }
        Ok(())
    }

    pub fn embedding_dim_for(&self, name: &str) -> usize {
        *self.embedding_dims.get(name).unwrap_or(&self.embedding_dim)
    }
}

// ── Dense preprocessing ─────────────────────────────────────────────────

/// Transform then standardize dense features with statistics from training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseScaler {
    pub transforms: Vec<Transform>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

fn apply_transform(t: Transform, x: f64) -> f64 {
    match t {
        Transform::Identity => x,
        Transform::SignedLog => x.signum() * x.abs().ln_1p(),
        Transform::Logit => {
            let p = x.clamp(0.005, 0.995);
            (p / (1.0 - p)).ln()
        }
    }
}

impl DenseScaler {
    pub fn fit<'a>(schema: &FeatureSchema, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let transforms: Vec<Transform> = schema.dense.iter().map(|d| d.transform).collect();
        let d = transforms.len();
        let (mut s, mut ss, mut n) = (vec![0.0; d], vec![0.0; d], 0.0);
        for row in rows {
            for j in 0..d {
                let v = apply_transform(transforms[j], row[j]);
                s[j] += v;
                ss[j] += v * v;
            }
            n += 1.0;
        }
        let n = f64::max(n, 1.0);
        let mean: Vec<f64> = s.iter().map(|v| v / n).collect();
        let sd = (0..d)
            .map(|j| {
                let var = (ss[j] / n - mean[j] * mean[j]).max(0.0);
                if var.sqrt() > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { transforms, mean, sd }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(j, &v)| (apply_transform(self.transforms[j], v) - self.mean[j]) / self.sd[j]).collect()
    }
}

pub(crate) fn check_labels(table: &FeatureTable, rows: &[usize]) -> Result<(), ModelError> {
    if rows.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    for &i in rows {
        let y = table.click[i];
        if y != 0.0 && y != 1.0 {
            return Err(ModelError::Label(format!("row {i} has label {y}")));
        }
    }
    Ok(())
}

// ── Fitted models ───────────────────────────────────────────────────────

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Learner {
    Logistic(LogisticModel),
    Sequence(SequenceModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub loss: f64,
}

/// A trained click model for one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub format_version: u32,
    pub regime: Regime,
    pub config: LearnerConfig,
    pub learner: Learner,
    /// Training loss per epoch, or per L-BFGS iteration for the logistic learner.
    pub curve: Vec<CurvePoint>,
}

/// Fit a click model on `rows` of `table` using the features of `regime`.
pub fn train_learner(
    table: &FeatureTable,
    regime: Regime,
    rows: &[usize],
    cfg: &LearnerConfig,
) -> Result<FittedModel, ModelError> {
    cfg.validate()?;
    check_labels(table, rows)?;
    let (learner, curve) = match cfg.kind {
        LearnerKind::Logistic => {
            let (m, c) = LogisticModel::fit(table, regime, rows, cfg)?;
            (Learner::Logistic(m), c)
        }
        LearnerKind::Sequence => {
            let (m, c) = SequenceModel::fit(table, regime, rows, cfg)?;
            (Learner::Sequence(m), c)
        }
    };
    Ok(FittedModel { format_version: MODEL_FORMAT_VERSION, regime, config: cfg.clone(), learner, curve })
}

impl FittedModel {
    /// Click probabilities of the logged ads.
    pub fn predict_logged(&self, table: &FeatureTable, rows: &[usize]) -> Result<Vec<f64>, ModelError> {
        let all = self.predict_all_ads(table, rows)?;
        Ok(rows.iter().zip(all).map(|(&i, p)| p[table.logged_ad[i] as usize]).collect())
    }

    /// Click probabilities of every ad at each row, `[row][ad]`.
    pub fn predict_all_ads(&self, table: &FeatureTable, rows: &[usize]) -> Result<Vec<Vec<f64>>, ModelError> {
        match &self.learner {
            Learner::Logistic(m) => Ok(m.predict_all_ads(table, self.regime, rows)),
            Learner::Sequence(m) => m.predict_all_ads(table, self.regime, rows),
        }
    }

    pub fn evaluate(&self, table: &FeatureTable, rows: &[usize]) -> Result<PredictionMetrics, ModelError> {
        let p = self.predict_logged(table, rows)?;
        let y: Vec<f64> = rows.iter().map(|&i| table.click[i]).collect();
        evaluate_predictions(&y, &p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let m: Self = serde_json::from_str(text).map_err(|e| ModelError::Io(e.to_string()))?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Io(format!("unsupported model format version {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn write_curve_csv<W: Write>(&self, w: W) -> Result<(), ModelError> {
        let mut wtr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| ModelError::Io(e.to_string());
        wtr.write_record(["epoch", "loss"]).map_err(io)?;
        for c in &self.curve {
            wtr.write_record([c.epoch.to_string(), crate::sig17(c.loss)]).map_err(io)?;
        }
        wtr.flush().map_err(|e| ModelError::Io(e.to_string()))
    }
}

#[cfg(test)]
mod tests;
