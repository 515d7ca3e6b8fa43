use super::{Example, SeqNet, SequenceParams};
use crate::market_sim::indexed_rng;
use crate::reward_models::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckScope {
    /// Every parameter tensor.
    Full,
    /// Readout weights and intercepts only.
    ReadoutOnly,
}

pub struct GradCheckOptions<'a> {
    /// Finite-difference step; 1e-3 is near the round-off optimum for the fourth-order stencil.
    pub epsilon: f64,
    pub scope: GradCheckScope,
    /// Dropout rate and mask seed; the same mask is reused for every evaluation.
    pub dropout: Option<(f64, u64)>,
    /// Applied to the analytic gradient before comparison.
    pub corrupt: Option<&'a dyn Fn(&mut SequenceParams)>,
}

impl Default for GradCheckOptions<'_> {
    fn default() -> Self {
        Self { epsilon: 1e-3, scope: GradCheckScope::Full, dropout: None, corrupt: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub n_checked: usize,
}

fn mean_loss(net: &SeqNet, batch: &[Example], dropout: Option<(f64, u64)>) -> Result<f64, ModelError> {
    let mut rng = indexed_rng(dropout.map_or(0, |d| d.1), 77);
    let (mut total, mut n) = (0.0, 0usize);
    for ex in batch {
        let cache = net.forward(&ex.steps, dropout.map(|d| (d.0, &mut rng)))?;
        total +=
            ex.labels.iter().zip(&cache.logits).map(|(y, s)| crate::reward_models::logistic::softplus(*s) - y * s).sum::<f64>();
        n += ex.steps.len();
    }
    let loss = total / n.max(1) as f64;
    if !loss.is_finite() {
        return Err(ModelError::Numerical("non-finite loss".into()));
    }
    Ok(loss)
}

fn nudge(p: &mut SequenceParams, tensor: usize, j: usize, delta: f64) {
    let mut k = 0;
    p.visit_mut(|_, _, t| {
        if k == tensor {
            t.data[j] += delta;
        }
        k += 1;
    });
}

/// Compare the analytic gradient of the mean BCE of `batch` with fourth-order central
/// differences. Returns the largest `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)`.
pub fn gradient_check(net: &SeqNet, batch: &[Example], opts: &GradCheckOptions) -> Result<GradCheckReport, ModelError> {
    let steps: usize = batch.iter().map(|e| e.steps.len()).sum();
    if steps == 0 {
        return Err(ModelError::EmptyInput);
    }
    mean_loss(net, batch, opts.dropout)?;
    let mut analytic = net.params.zeros_like();
    let mut rng = indexed_rng(opts.dropout.map_or(0, |d| d.1), 77);
    for ex in batch {
        let cache = net.forward(&ex.steps, opts.dropout.map(|d| (d.0, &mut rng)))?;
        net.backward(&ex.steps, &ex.labels, &cache, 1.0 / steps as f64, &mut analytic);
    }
    if let Some(f) = opts.corrupt {
        f(&mut analytic);
    }
    let mut tensors = Vec::new();
    analytic.visit(|name, _, t| tensors.push((name, t.data.clone())));

    let mut work = net.clone();
    let h = opts.epsilon;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (String::new(), 0), n_checked: 0 };
    for (k, (name, grads)) in tensors.iter().enumerate() {
        if opts.scope == GradCheckScope::ReadoutOnly && name != "w_out" && name != "b_out" {
            continue;
        }
        for (j, &ga) in grads.iter().enumerate() {
            let mut eval = |d: f64| -> Result<f64, ModelError> {
                nudge(&mut work.params, k, j, d);
                let l = mean_loss(&work, batch, opts.dropout);
                nudge(&mut work.params, k, j, -d);
                l
            };
            let (p1, m1, p2, m2) = (eval(h)?, eval(-h)?, eval(2.0 * h)?, eval(-2.0 * h)?);
            let gn = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let rel = (ga - gn).abs() / f64::max(1e-8, ga.abs() + gn.abs());
            report.n_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (name.clone(), j);
            }
        }
    }
    Ok(report)
}
