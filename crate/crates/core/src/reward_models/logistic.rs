use serde::{Deserialize, Serialize};

use super::lbfgs::{minimize, LbfgsOptions};
use super::{CurvePoint, DenseScaler, LearnerConfig, ModelError};
use crate::feature_pipeline::{FeatureRow, FeatureSchema, FeatureTable, Regime};

// ── Sparse logistic regression ──────────────────────────────────────────

/// Row-compressed sparse design matrix.
#[derive(Debug, Clone, Default)]
pub struct SparseDesign {
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseDesign {
    pub fn new(n_cols: usize) -> Self {
        Self { n_cols, indptr: vec![0], indices: Vec::new(), values: Vec::new() }
    }

    pub fn push_row(&mut self, entries: &[(u32, f64)]) {
        for &(j, v) in entries {
            self.indices.push(j);
            self.values.push(v);
        }
        self.indptr.push(self.indices.len());
    }

    pub fn n_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn dot(&self, row: usize, w: &[f64]) -> f64 {
        let (a, b) = (self.indptr[row], self.indptr[row + 1]);
        self.indices[a..b].iter().zip(&self.values[a..b]).map(|(&j, v)| w[j as usize] * v).sum()
    }
}

#[derive(Debug, Clone)]
pub struct SparseFit {
    pub weights: Vec<f64>,
    pub iterations: usize,
    /// Penalized mean loss after each iteration.
    pub trace: Vec<f64>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Minimize `mean BCE + sum_j (penalty_j / 2) * w_j^2`. Column `intercept`, if given, starts at the
/// logit of the label mean.
pub fn fit_sparse_logistic(
    x: &SparseDesign,
    y: &[f64],
    penalty: &[f64],
    intercept: Option<usize>,
    max_iter: usize,
) -> Result<SparseFit, ModelError> {
    let n = x.n_rows();
    if n == 0 {
        return Err(ModelError::EmptyInput);
    }
    if y.len() != n || penalty.len() != x.n_cols {
        return Err(ModelError::Dimension(format!("{n} rows, {} labels, {} columns", y.len(), x.n_cols)));
    }
    let mut w0 = vec![0.0; x.n_cols];
    if let Some(c) = intercept {
        let m = (y.iter().sum::<f64>() / n as f64).clamp(1e-4, 1.0 - 1e-4);
        w0[c] = (m / (1.0 - m)).ln();
    }
    let inv_n = 1.0 / n as f64;
    let objective = |w: &[f64], g: &mut [f64]| {
        g.iter_mut().for_each(|v| *v = 0.0);
        let mut loss = 0.0;
        for i in 0..n {
            let z = x.dot(i, w);
            loss += softplus(z) - y[i] * z;
            let r = (sigmoid(z) - y[i]) * inv_n;
            let (a, b) = (x.indptr[i], x.indptr[i + 1]);
            for (&j, v) in x.indices[a..b].iter().zip(&x.values[a..b]) {
                g[j as usize] += r * v;
            }
        }
        loss *= inv_n;
        for j in 0..w.len() {
            loss += 0.5 * penalty[j] * w[j] * w[j];
            g[j] += penalty[j] * w[j];
        }
        loss
    };
    let r = minimize(objective, w0, LbfgsOptions { max_iter, ..Default::default() });
    if !r.f.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Numerical("logistic fit diverged".into()));
    }
    Ok(SparseFit { weights: r.x, iterations: r.iterations, trace: r.trace })
}

// ── Regime learner ──────────────────────────────────────────────────────

/// Logistic click model with an optional per-ad copy of every feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub schema: FeatureSchema,
    pub scaler: DenseScaler,
    pub n_ads: usize,
    pub ad_interactions: bool,
    pub weights: Vec<f64>,
}

impl LogisticModel {
    /// Columns of the shared block: intercept, dense features, then one-hot blocks.
    fn base_width(&self) -> usize {
        1 + self.schema.dense.len() + self.schema.categorical.iter().map(|c| c.vocab as usize).sum::<usize>()
    }

    fn width(&self) -> usize {
        self.base_width() * if self.ad_interactions { 1 + self.n_ads } else { 1 }
    }

    fn encode(&self, row: &FeatureRow, ad: usize, out: &mut Vec<(u32, f64)>) {
        out.clear();
        out.push((0, 1.0));
        for (j, v) in self.scaler.apply(&row.dense).into_iter().enumerate() {
            out.push((1 + j as u32, v));
        }
        let mut offset = 1 + self.schema.dense.len();
        let mut ad_col = None;
        for (spec, &code) in self.schema.categorical.iter().zip(&row.categorical) {
            if spec.name == "ad" {
                ad_col = Some(out.len());
            }
            out.push(((offset + code.min(spec.vocab - 1) as usize) as u32, 1.0));
            offset += spec.vocab as usize;
        }
        if self.ad_interactions {
            let block = (self.base_width() * (1 + ad)) as u32;
            let base_len = out.len();
            for k in 0..base_len {
                if Some(k) != ad_col {
                    let (j, v) = out[k];
                    out.push((j + block, v));
                }
            }
        }
    }

    pub(crate) fn fit(
        table: &FeatureTable,
        regime: Regime,
        rows: &[usize],
        cfg: &LearnerConfig,
    ) -> Result<(Self, Vec<CurvePoint>), ModelError> {
        let schema = table.schema(regime);
        let logged: Vec<FeatureRow> = rows.iter().map(|&i| table.assemble(regime, i, table.logged_ad[i] as usize)).collect();
        let scaler = DenseScaler::fit(&schema, logged.iter().map(|r| r.dense.as_slice()));
        let mut model =
            Self { schema, scaler, n_ads: table.space.n_ads as usize, ad_interactions: cfg.ad_interactions, weights: Vec::new() };
        let mut design = SparseDesign::new(model.width());
        let mut buf = Vec::new();
        for (r, &i) in logged.iter().zip(rows) {
            model.encode(r, table.logged_ad[i] as usize, &mut buf);
            design.push_row(&buf);
        }
        let y: Vec<f64> = rows.iter().map(|&i| table.click[i]).collect();
        let mut penalty = vec![cfg.l2_penalty; design.n_cols];
        penalty[0] = 0.0;
        let fit = fit_sparse_logistic(&design, &y, &penalty, Some(0), cfg.max_iter)?;
        model.weights = fit.weights;
        let curve = fit.trace.iter().enumerate().map(|(epoch, &loss)| CurvePoint { epoch, loss }).collect();
        Ok((model, curve))
    }

    pub fn predict_row(&self, row: &FeatureRow, ad: usize) -> f64 {
        let mut buf = Vec::new();
        self.encode(row, ad, &mut buf);
        sigmoid(buf.iter().map(|&(j, v)| self.weights[j as usize] * v).sum())
    }

    pub fn predict_all_ads(&self, table: &FeatureTable, regime: Regime, rows: &[usize]) -> Vec<Vec<f64>> {
        rows.iter().map(|&i| (0..self.n_ads).map(|a| self.predict_row(&table.assemble(regime, i, a), a)).collect()).collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::market_sim::indexed_rng;

    #[test]
    fn recovers_known_coefficients() {
        let truth = [-0.7, 1.2, -0.8];
        let mut rng = indexed_rng(3, 0);
        let mut x = SparseDesign::new(3);
        let mut y = Vec::new();
        for _ in 0..60_000 {
            let (a, b): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let p = sigmoid(truth[0] + truth[1] * a + truth[2] * b);
            x.push_row(&[(0, 1.0), (1, a), (2, b)]);
            y.push(if rng.gen::<f64>() < p { 1.0 } else { 0.0 });
        }
        let fit = fit_sparse_logistic(&x, &y, &[0.0; 3], Some(0), 200).unwrap();
        for (w, t) in fit.weights.iter().zip(truth) {
            assert!((w - t).abs() < 0.05 * t.abs(), "{w} vs {t}");
        }
        assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn all_zero_labels_give_near_zero_probability() {
        let mut x = SparseDesign::new(2);
        for i in 0..500 {
            x.push_row(&[(0, 1.0), (1, (i % 7) as f64 / 7.0)]);
        }
        let fit = fit_sparse_logistic(&x, &vec![0.0; 500], &[0.0, 10.0], Some(0), 100).unwrap();
        assert!(sigmoid(x.dot(3, &fit.weights)) < 1e-3);
        assert!(fit.weights[1].abs() < 1e-3);
    }
}
