//! LSTM plus causal attention click model over user impression histories.
//!
//! Step input: dense features and categorical embeddings, plus a learned
//! positional row and a projection of the standardized `ln(1 + gap minutes)`.
//! Then `L` LSTM layers, layer norm, causal multi-head attention, layer norm,
//! a gated projection `sigmoid(W_g r) * tanh(W_b r)` with dropout, and a
//! linear readout with one intercept per ad.

mod gradcheck;
mod layers;
mod params;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::logistic::{sigmoid, softplus};
use super::optim::AdamW;
use super::{CurvePoint, DenseScaler, LearnerConfig, ModelError};
use crate::feature_pipeline::{FeatureSchema, FeatureTable, Regime};
use crate::market_sim::indexed_rng;

pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport, GradCheckScope};
pub use layers::{causal_attention_forward, lstm_cell_step, AttentionOutput, LstmStep};
pub use params::{LstmLayer, SeqDims, SequenceParams, Tensor};

use layers::{attend, attention_backward, attention_forward, layer_norm, layer_norm_backward, lstm_step_backward, LnCache};

// ── Network ─────────────────────────────────────────────────────────────

/// One step of a user sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    /// Standardized dense features.
    pub dense: Vec<f64>,
    pub cats: Vec<u32>,
    /// Seconds since the previous impression in the sequence.
    pub gap_s: f64,
    pub ad: usize,
}

/// Parameters plus the fixed normalization of the time gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqNet {
    pub dims: SeqDims,
    pub params: SequenceParams,
    pub gap_mean: f64,
    pub gap_sd: f64,
}

pub(crate) struct Cache {
    x: Vec<Vec<f64>>,
    lstm: Vec<Vec<LstmStep>>,
    ln1: Vec<LnCache>,
    a: Vec<Vec<f64>>,
    att: layers::AttentionCache,
    ln2: Vec<LnCache>,
    r: Vec<Vec<f64>>,
    gate: Vec<Vec<f64>>,
    body: Vec<Vec<f64>>,
    keep: Option<Vec<Vec<f64>>>,
    z: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

fn gap_feature(gap_s: f64) -> f64 {
    (gap_s / 60.0).ln_1p()
}

impl SeqNet {
    pub fn new(dims: SeqDims, seed: u64) -> Self {
        let params = SequenceParams::init(&dims, &mut indexed_rng(seed, 0x5E9));
        Self { dims, params, gap_mean: 0.0, gap_sd: 1.0 }
    }

    fn check(&self, steps: &[StepInput]) -> Result<(), ModelError> {
        if steps.len() > self.dims.window {
            return Err(ModelError::Dimension(format!("sequence of {} exceeds window {}", steps.len(), self.dims.window)));
        }
        for s in steps {
            if !(s.gap_s >= 0.0) {
                return Err(ModelError::InvalidTimeGap { gap: s.gap_s });
            }
            if s.dense.len() != self.dims.n_dense || s.cats.len() != self.dims.vocabs.len() || s.ad >= self.dims.n_ads {
                return Err(ModelError::Dimension("step input does not match the model".into()));
            }
        }
        Ok(())
    }

    fn embed(&self, s: &StepInput, t: usize) -> Vec<f64> {
        let p = &self.params;
        let mut x = s.dense.clone();
        for (k, &c) in s.cats.iter().enumerate() {
            let table = &p.embeddings[k];
            x.extend_from_slice(table.row((c as usize).min(table.rows - 1)));
        }
        let g = (gap_feature(s.gap_s) - self.gap_mean) / self.gap_sd;
        let pos = p.positional.row(t);
        for j in 0..x.len() {
            x[j] += pos[j] + p.gap_w.data[j] * g + p.gap_b.data[j];
        }
        x
    }

    fn head(&self, a: &[f64]) -> (Vec<f64>, LnCache, Vec<f64>, Vec<f64>) {
        let p = &self.params;
        let (r, ln) = layer_norm(a, &p.ln2_scale, &p.ln2_shift);
        let gate: Vec<f64> = p.w_gate.affine(&r, &p.b_gate).into_iter().map(sigmoid).collect();
        let body: Vec<f64> = p.w_body.affine(&r, &p.b_body).into_iter().map(f64::tanh).collect();
        (r, ln, gate, body)
    }

    fn readout(&self, z: &[f64], ad: usize) -> f64 {
        self.params.b_out.data[ad] + self.params.w_out.data.iter().zip(z).map(|(w, v)| w * v).sum::<f64>()
    }

    /// Full forward pass. Dropout draws from `rng` when given.
    pub(crate) fn forward(&self, steps: &[StepInput], dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<Cache, ModelError> {
        self.check(steps)?;
        let p = &self.params;
        let (n, h) = (steps.len(), self.dims.hidden);
        let x: Vec<Vec<f64>> = steps.iter().enumerate().map(|(t, s)| self.embed(s, t)).collect();
        let mut lstm: Vec<Vec<LstmStep>> = Vec::with_capacity(p.lstm.len());
        for (l, layer) in p.lstm.iter().enumerate() {
            let mut out: Vec<LstmStep> = Vec::with_capacity(n);
            let zero = vec![0.0; h];
            for t in 0..n {
                let input: &[f64] = if l == 0 { &x[t] } else { &lstm[l - 1][t].h };
                let (hp, cp) = if t == 0 { (&zero, &zero) } else { (&out[t - 1].h, &out[t - 1].c) };
                let step = lstm_cell_step(layer, input, hp, cp)?;
                out.push(step);
            }
            lstm.push(out);
        }
        let top = lstm.last().expect("at least one layer");
        let mut a = Vec::with_capacity(n);
        let mut ln1 = Vec::with_capacity(n);
        for s in top {
            let (y, c) = layer_norm(&s.h, &p.ln1_scale, &p.ln1_shift);
            a.push(y);
            ln1.push(c);
        }
        let att = attention_forward(p, &a, &vec![true; n], self.dims.heads);
        let (mut ln2, mut r, mut gate, mut body, mut z, mut logits) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut keep = None;
        if let Some((rate, rng)) = dropout {
            if rate > 0.0 {
                let scale = 1.0 / (1.0 - rate);
                keep = Some(
                    (0..n)
                        .map(|_| (0..h).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale }).collect())
                        .collect::<Vec<Vec<f64>>>(),
                );
            }
        }
        for t in 0..n {
            let (rt, lnc, g, b) = self.head(&att.out[t]);
            let mut zt: Vec<f64> = g.iter().zip(&b).map(|(x, y)| x * y).collect();
            if let Some(k) = &keep {
                zt.iter_mut().zip(&k[t]).for_each(|(v, m)| *v *= m);
            }
            logits.push(self.readout(&zt, steps[t].ad));
            ln2.push(lnc);
            r.push(rt);
            gate.push(g);
            body.push(b);
            z.push(zt);
        }
        Ok(Cache { x, lstm, ln1, a, att, ln2, r, gate, body, keep, z, logits })
    }

    /// Sum of per-step BCE; accumulates `scale * d(sum)/d(params)` into `grad`.
    pub(crate) fn backward(
        &self,
        steps: &[StepInput],
        labels: &[f64],
        cache: &Cache,
        scale: f64,
        grad: &mut SequenceParams,
    ) -> f64 {
        let p = &self.params;
        let (n, h) = (steps.len(), self.dims.hidden);
        let mut loss = 0.0;
        let mut dout = vec![vec![0.0; h]; n];
        for t in 0..n {
            let s = cache.logits[t];
            loss += softplus(s) - labels[t] * s;
            let ds = (sigmoid(s) - labels[t]) * scale;
            grad.b_out.data[steps[t].ad] += ds;
            let mut dz = vec![0.0; h];
            for j in 0..h {
                grad.w_out.data[j] += ds * cache.z[t][j];
                dz[j] = ds * p.w_out.data[j];
            }
            if let Some(k) = &cache.keep {
                dz.iter_mut().zip(&k[t]).for_each(|(v, m)| *v *= m);
            }
            let (g, b) = (&cache.gate[t], &cache.body[t]);
            let dug: Vec<f64> = (0..h).map(|j| dz[j] * b[j] * g[j] * (1.0 - g[j])).collect();
            let dub: Vec<f64> = (0..h).map(|j| dz[j] * g[j] * (1.0 - b[j] * b[j])).collect();
            let mut dr = vec![0.0; h];
            p.w_gate.affine_backward(&mut grad.w_gate, &cache.r[t], &dug, Some(&mut dr));
            p.w_body.affine_backward(&mut grad.w_body, &cache.r[t], &dub, Some(&mut dr));
            for j in 0..h {
                grad.b_gate.data[j] += dug[j];
                grad.b_body.data[j] += dub[j];
            }
            dout[t] = layer_norm_backward(&dr, &cache.ln2[t], &p.ln2_scale, &mut grad.ln2_scale, &mut grad.ln2_shift);
        }
        let da = attention_backward(p, grad, &cache.a, &cache.att, &dout, self.dims.heads);
        let mut dh_above: Vec<Vec<f64>> = (0..n)
            .map(|t| layer_norm_backward(&da[t], &cache.ln1[t], &p.ln1_scale, &mut grad.ln1_scale, &mut grad.ln1_shift))
            .collect();
        let zero = vec![0.0; h];
        for l in (0..p.lstm.len()).rev() {
            let steps_l = &cache.lstm[l];
            let mut dinput = vec![Vec::new(); n];
            let (mut dh_next, mut dc_next) = (vec![0.0; h], vec![0.0; h]);
            for t in (0..n).rev() {
                let dh: Vec<f64> = (0..h).map(|j| dh_above[t][j] + dh_next[j]).collect();
                let input: &[f64] = if l == 0 { &cache.x[t] } else { &cache.lstm[l - 1][t].h };
                let (hp, cp) = if t == 0 { (&zero, &zero) } else { (&steps_l[t - 1].h, &steps_l[t - 1].c) };
                let (dx, dhp, dcp) = lstm_step_backward(&p.lstm[l], &mut grad.lstm[l], input, hp, cp, &steps_l[t], &dh, &dc_next);
                dinput[t] = dx;
                dh_next = dhp;
                dc_next = dcp;
            }
            dh_above = dinput;
        }
        let nd = self.dims.n_dense;
        for (t, s) in steps.iter().enumerate() {
            let dx = &dh_above[t];
            let g = (gap_feature(s.gap_s) - self.gap_mean) / self.gap_sd;
            for j in 0..dx.len() {
                grad.positional.row_mut(t)[j] += dx[j];
                grad.gap_w.data[j] += dx[j] * g;
                grad.gap_b.data[j] += dx[j];
            }
            let mut off = nd;
            for (k, &c) in s.cats.iter().enumerate() {
                let table = &mut grad.embeddings[k];
                let e = table.cols;
                let row = (c as usize).min(table.rows - 1);
                for (gv, d) in table.row_mut(row).iter_mut().zip(&dx[off..off + e]) {
                    *gv += d;
                }
                off += e;
            }
        }
        loss
    }

    /// Inference logits of each step.
    pub fn logits(&self, steps: &[StepInput]) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward(steps, None)?.logits)
    }

    /// Logit at step `t` had `alt` replaced the logged input there, holding earlier steps fixed.
    pub(crate) fn counterfactual_logit(&self, cache: &Cache, t: usize, alt: &StepInput) -> Result<f64, ModelError> {
        self.check(std::slice::from_ref(alt))?;
        let p = &self.params;
        let h = self.dims.hidden;
        let zero = vec![0.0; h];
        let mut input = self.embed(alt, t);
        for (l, layer) in p.lstm.iter().enumerate() {
            let (hp, cp) = if t == 0 { (&zero, &zero) } else { (&cache.lstm[l][t - 1].h, &cache.lstm[l][t - 1].c) };
            input = lstm_cell_step(layer, &input, hp, cp)?.h;
        }
        let (a, _) = layer_norm(&input, &p.ln1_scale, &p.ln1_shift);
        let (q, k, v) = (p.wq.affine(&a, &p.bq), p.wk.matvec(&a), p.wv.affine(&a, &p.bv));
        let mut keys: Vec<&[f64]> = (0..t).map(|s| cache.att.k[s].as_slice()).collect();
        let mut vals: Vec<&[f64]> = (0..t).map(|s| cache.att.v[s].as_slice()).collect();
        keys.push(&k);
        vals.push(&v);
        let (ctx, _) = attend(&q, &keys, &vals, self.dims.heads);
        let o = p.wo.affine(&ctx, &p.bo);
        let (_, _, g, b) = self.head(&o);
        let z: Vec<f64> = g.iter().zip(&b).map(|(x, y)| x * y).collect();
        Ok(self.readout(&z, alt.ad))
    }
}

/// Inference click probabilities for each sequence of a batch.
pub fn sequence_forward(net: &SeqNet, batch: &[Vec<StepInput>]) -> Result<Vec<Vec<f64>>, ModelError> {
    batch.iter().map(|s| Ok(net.logits(s)?.into_iter().map(prob).collect())).collect()
}

/// Sigmoid clipped into the open unit interval.
pub(crate) fn prob(logit: f64) -> f64 {
    sigmoid(logit).clamp(1e-15, 1.0 - 1e-15)
}

// ── Training ────────────────────────────────────────────────────────────

/// One training sequence with its labels.
#[derive(Debug, Clone)]
pub struct Example {
    pub steps: Vec<StepInput>,
    pub labels: Vec<f64>,
}

fn grad_slices(g: &SequenceParams) -> Vec<&[f64]> {
    let mut out = Vec::new();
    g.visit(|_, _, t| out.push(t.data.as_slice()));
    out
}

/// Mean BCE minimization with AdamW. Returns the average training loss of each epoch.
pub fn train_sequences(net: &mut SeqNet, data: &[Example], cfg: &LearnerConfig) -> Result<Vec<CurvePoint>, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = indexed_rng(cfg.seed, 1000 + epoch as u64);
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let steps: usize = batch.iter().map(|&i| data[i].steps.len()).sum();
            if steps == 0 {
                continue;
            }
            let mut grad = net.params.zeros_like();
            let scale = 1.0 / steps as f64;
            for &i in batch {
                let ex = &data[i];
                let cache = net.forward(&ex.steps, Some((cfg.dropout_rate, &mut rng)))?;
                total += net.backward(&ex.steps, &ex.labels, &cache, scale, &mut grad);
            }
            count += steps;
            let grads = grad_slices(&grad);
            opt.tick();
            let mut k = 0;
            net.params.visit_mut(|_, decay, t| {
                opt.update(k, &mut t.data, grads[k], decay);
                k += 1;
            });
        }
        let loss = total / count.max(1) as f64;
        if !loss.is_finite() || !net.params.all_finite() {
            return Err(ModelError::Numerical(format!("training diverged at epoch {epoch}")));
        }
        curve.push(CurvePoint { epoch, loss });
    }
    Ok(curve)
}

// ── Regime learner ──────────────────────────────────────────────────────

/// Sequence click model bound to a regime's feature schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceModel {
    pub schema: FeatureSchema,
    pub scaler: DenseScaler,
    pub net: SeqNet,
}

impl SequenceModel {
    fn step(&self, table: &FeatureTable, regime: Regime, i: usize, ad: usize, gap_s: f64) -> StepInput {
        let row = table.assemble(regime, i, ad);
        StepInput { dense: self.scaler.apply(&row.dense), cats: row.categorical, gap_s, ad }
    }

    /// Split `rows` into per-user chunks of at most `window` consecutive impressions, with gaps.
    fn chunks(&self, table: &FeatureTable, rows: &[usize]) -> Result<Vec<Vec<(usize, f64)>>, ModelError> {
        chunk_rows(table, rows, self.net.dims.window)
    }

    pub(crate) fn fit(
        table: &FeatureTable,
        regime: Regime,
        rows: &[usize],
        cfg: &LearnerConfig,
    ) -> Result<(Self, Vec<CurvePoint>), ModelError> {
        let schema = table.schema(regime);
        let logged: Vec<Vec<f64>> = rows.iter().map(|&i| table.assemble(regime, i, table.logged_ad[i] as usize).dense).collect();
        let scaler = DenseScaler::fit(&schema, logged.iter().map(|r| r.as_slice()));
        let dims = SeqDims {
            n_dense: schema.dense.len(),
            vocabs: schema.categorical.iter().map(|c| c.vocab as usize).collect(),
            emb_dims: schema.categorical.iter().map(|c| cfg.embedding_dim_for(&c.name)).collect(),
            hidden: cfg.hidden_size,
            layers: cfg.lstm_layers,
            heads: cfg.attention_heads,
            window: cfg.window,
            n_ads: table.space.n_ads as usize,
        };
        let mut model = Self { schema, scaler, net: SeqNet::new(dims, cfg.seed) };
        let chunks = model.chunks(table, rows)?;
        let gaps: Vec<f64> = chunks.iter().flatten().map(|&(_, g)| gap_feature(g)).collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / gaps.len() as f64).sqrt();
        model.net.gap_mean = mean;
        model.net.gap_sd = if sd > 1e-12 { sd } else { 1.0 };
        let data: Vec<Example> = chunks
            .iter()
            .map(|c| Example {
                steps: c.iter().map(|&(i, g)| model.step(table, regime, i, table.logged_ad[i] as usize, g)).collect(),
                labels: c.iter().map(|&(i, _)| table.click[i]).collect(),
            })
            .collect();
        let curve = train_sequences(&mut model.net, &data, cfg)?;
        Ok((model, curve))
    }

    /// Probabilities of every ad at each row, holding the logged history fixed.
    pub fn predict_all_ads(&self, table: &FeatureTable, regime: Regime, rows: &[usize]) -> Result<Vec<Vec<f64>>, ModelError> {
        let n_ads = self.net.dims.n_ads;
        let mut by_row = std::collections::HashMap::with_capacity(rows.len());
        for chunk in self.chunks(table, rows)? {
            let steps: Vec<StepInput> =
                chunk.iter().map(|&(i, g)| self.step(table, regime, i, table.logged_ad[i] as usize, g)).collect();
            let cache = self.net.forward(&steps, None)?;
            for (t, &(i, g)) in chunk.iter().enumerate() {
                let logged = table.logged_ad[i] as usize;
                let mut out = vec![0.0; n_ads];
                for (a, o) in out.iter_mut().enumerate() {
                    let logit = if a == logged {
                        cache.logits[t]
                    } else {
                        self.net.counterfactual_logit(&cache, t, &self.step(table, regime, i, a, g))?
                    };
                    *o = prob(logit);
                }
                by_row.insert(i, out);
            }
        }
        Ok(rows.iter().map(|i| by_row.remove(i).expect("row scored")).collect())
    }
}

/// Per-user windows over `rows` in their given order, each row paired with the gap in seconds
/// to the user's previous row (0 for the first).
pub(crate) fn chunk_rows(table: &FeatureTable, rows: &[usize], window: usize) -> Result<Vec<Vec<(usize, f64)>>, ModelError> {
    let mut out: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut prev: Option<usize> = None;
    for &i in rows {
        let same = prev.is_some_and(|p| table.user[p] == table.user[i]);
        let gap = if same { table.timestamp_s[i] - table.timestamp_s[prev.unwrap()] } else { 0.0 };
        if gap < 0.0 {
            return Err(ModelError::InvalidTimeGap { gap });
        }
        if !same || out.last().is_none_or(|c| c.len() == window) {
            out.push(Vec::new());
        }
        out.last_mut().unwrap().push((i, gap));
        prev = Some(i);
    }
    Ok(out)
}
