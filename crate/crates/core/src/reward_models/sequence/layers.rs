use super::params::{LstmLayer, SequenceParams, Tensor};
use crate::reward_models::logistic::sigmoid;
use crate::reward_models::ModelError;

pub(crate) const LN_EPS: f64 = 1e-5;

// ── LSTM ────────────────────────────────────────────────────────────────

/// State and activations of one LSTM step.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStep {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    /// Post-activation gates `[i, f, candidate, o]`, each of length `H`.
    pub gates: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// One LSTM step: `c = f*c_prev + i*g`, `h = o*tanh(c)`.
pub fn lstm_cell_step(layer: &LstmLayer, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<LstmStep, ModelError> {
    let h = h_prev.len();
    if c_prev.len() != h || layer.w.rows != 4 * h || layer.w.cols != h + x.len() || layer.b.data.len() != 4 * h {
        return Err(ModelError::Dimension(format!(
            "lstm weights {}x{} with input {} and state {}/{}",
            layer.w.rows,
            layer.w.cols,
            x.len(),
            h,
            c_prev.len()
        )));
    }
    let mut z = Vec::with_capacity(h + x.len());
    z.extend_from_slice(h_prev);
    z.extend_from_slice(x);
    let mut gates = layer.w.affine(&z, &layer.b);
    for (k, g) in gates.iter_mut().enumerate() {
        *g = if (2 * h..3 * h).contains(&k) { g.tanh() } else { sigmoid(*g) };
    }
    let c: Vec<f64> = (0..h).map(|j| gates[h + j] * c_prev[j] + gates[j] * gates[2 * h + j]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let hn = (0..h).map(|j| gates[3 * h + j] * tanh_c[j]).collect();
    Ok(LstmStep { h: hn, c, gates, tanh_c })
}

/// Backward through one step. Accumulates weight gradients and returns `(dx, dh_prev, dc_prev)`.
pub(crate) fn lstm_step_backward(
    layer: &LstmLayer,
    grad: &mut LstmLayer,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    step: &LstmStep,
    dh: &[f64],
    dc_next: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let h = h_prev.len();
    let g = &step.gates;
    let mut dz = vec![0.0; 4 * h];
    let mut dc_prev = vec![0.0; h];
    for j in 0..h {
        let (i, f, cand, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
        let tc = step.tanh_c[j];
        let dc = dh[j] * o * (1.0 - tc * tc) + dc_next[j];
        dz[j] = dc * cand * i * (1.0 - i);
        dz[h + j] = dc * c_prev[j] * f * (1.0 - f);
        dz[2 * h + j] = dc * i * (1.0 - cand * cand);
        dz[3 * h + j] = dh[j] * tc * o * (1.0 - o);
        dc_prev[j] = dc * f;
    }
    let mut z = Vec::with_capacity(h + x.len());
    z.extend_from_slice(h_prev);
    z.extend_from_slice(x);
    let mut dzin = vec![0.0; z.len()];
    layer.w.affine_backward(&mut grad.w, &z, &dz, Some(&mut dzin));
    for (b, d) in grad.b.data.iter_mut().zip(&dz) {
        *b += d;
    }
    let dx = dzin.split_off(h);
    (dx, dzin, dc_prev)
}

// ── Layer norm ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
}

pub(crate) fn layer_norm(x: &[f64], scale: &Tensor, shift: &Tensor) -> (Vec<f64>, LnCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat.iter().enumerate().map(|(j, v)| scale.data[j] * v + shift.data[j]).collect();
    (y, LnCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    scale: &Tensor,
    dscale: &mut Tensor,
    dshift: &mut Tensor,
) -> Vec<f64> {
    let n = dy.len() as f64;
    let mut dxhat = vec![0.0; dy.len()];
    for j in 0..dy.len() {
        dscale.data[j] += dy[j] * cache.xhat[j];
        dshift.data[j] += dy[j];
        dxhat[j] = dy[j] * scale.data[j];
    }
    let m1 = dxhat.iter().sum::<f64>() / n;
    let m2 = dxhat.iter().zip(&cache.xhat).map(|(a, b)| a * b).sum::<f64>() / n;
    dxhat.iter().zip(&cache.xhat).map(|(d, xh)| cache.inv_std * (d - m1 - xh * m2)).collect()
}

// ── Causal attention ────────────────────────────────────────────────────

/// Scaled dot-product attention of one query over `keys`, per head. Returns the
/// concatenated context and each head's weights over the keys.
pub(crate) fn attend(q: &[f64], keys: &[&[f64]], values: &[&[f64]], heads: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let h = q.len();
    let dh = h / heads;
    let norm = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0.0; h];
    let mut all = Vec::with_capacity(heads);
    for hd in 0..heads {
        let r = hd * dh..(hd + 1) * dh;
        let scores: Vec<f64> =
            keys.iter().map(|k| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() * norm).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let w: Vec<f64> = exps.iter().map(|e| e / total).collect();
        for (ws, v) in w.iter().zip(values) {
            for j in r.clone() {
                ctx[j] += ws * v[j];
            }
        }
        all.push(w);
    }
    (ctx, all)
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// `[t][head]`: weights over the valid positions `s <= t`, in increasing `s`.
    pub weights: Vec<Vec<Vec<f64>>>,
    /// `[t]`: the valid positions attended by `t`.
    pub support: Vec<Vec<usize>>,
    pub ctx: Vec<Vec<f64>>,
    pub out: Vec<Vec<f64>>,
}

pub(crate) fn attention_forward(p: &SequenceParams, a: &[Vec<f64>], valid: &[bool], heads: usize) -> AttentionCache {
    let n = a.len();
    let h = p.wq.rows;
    let q: Vec<Vec<f64>> = a.iter().map(|x| p.wq.affine(x, &p.bq)).collect();
    let k: Vec<Vec<f64>> = a.iter().map(|x| p.wk.matvec(x)).collect();
    let v: Vec<Vec<f64>> = a.iter().map(|x| p.wv.affine(x, &p.bv)).collect();
    let mut cache = AttentionCache {
        weights: Vec::with_capacity(n),
        support: Vec::with_capacity(n),
        ctx: Vec::with_capacity(n),
        out: Vec::with_capacity(n),
        q: Vec::new(),
        k: Vec::new(),
        v: Vec::new(),
    };
    for t in 0..n {
        let support: Vec<usize> = if valid[t] { (0..=t).filter(|&s| valid[s]).collect() } else { Vec::new() };
        if support.is_empty() {
            cache.weights.push(vec![Vec::new(); heads]);
            cache.ctx.push(vec![0.0; h]);
            cache.out.push(vec![0.0; h]);
        } else {
            let keys: Vec<&[f64]> = support.iter().map(|&s| k[s].as_slice()).collect();
            let vals: Vec<&[f64]> = support.iter().map(|&s| v[s].as_slice()).collect();
            let (ctx, w) = attend(&q[t], &keys, &vals, heads);
            cache.out.push(p.wo.affine(&ctx, &p.bo));
            cache.ctx.push(ctx);
            cache.weights.push(w);
        }
        cache.support.push(support);
    }
    cache.q = q;
    cache.k = k;
    cache.v = v;
    cache
}

/// Returns gradients with respect to the attention inputs.
pub(crate) fn attention_backward(
    p: &SequenceParams,
    g: &mut SequenceParams,
    a: &[Vec<f64>],
    cache: &AttentionCache,
    dout: &[Vec<f64>],
    heads: usize,
) -> Vec<Vec<f64>> {
    let n = a.len();
    if n == 0 {
        return Vec::new();
    }
    let h = p.wq.rows;
    let dh = h / heads;
    let norm = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![vec![0.0; h]; n];
    let mut dk = vec![vec![0.0; h]; n];
    let mut dv = vec![vec![0.0; h]; n];
    for t in 0..n {
        let support = &cache.support[t];
        if support.is_empty() {
            continue;
        }
        let mut dctx = vec![0.0; h];
        p.wo.affine_backward(&mut g.wo, &cache.ctx[t], &dout[t], Some(&mut dctx));
        for (b, d) in g.bo.data.iter_mut().zip(&dout[t]) {
            *b += d;
        }
        for hd in 0..heads {
            let r = hd * dh..(hd + 1) * dh;
            let w = &cache.weights[t][hd];
            let dw: Vec<f64> =
                support.iter().map(|&s| dctx[r.clone()].iter().zip(&cache.v[s][r.clone()]).map(|(a, b)| a * b).sum()).collect();
            let dot: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            for (idx, &s) in support.iter().enumerate() {
                for j in r.clone() {
                    dv[s][j] += w[idx] * dctx[j];
                }
                let ds = w[idx] * (dw[idx] - dot) * norm;
                for j in r.clone() {
                    dq[t][j] += ds * cache.k[s][j];
                    dk[s][j] += ds * cache.q[t][j];
                }
            }
        }
    }
    let mut da = vec![vec![0.0; a[0].len()]; n];
    for t in 0..n {
        p.wq.affine_backward(&mut g.wq, &a[t], &dq[t], Some(&mut da[t]));
        p.wk.affine_backward(&mut g.wk, &a[t], &dk[t], Some(&mut da[t]));
        p.wv.affine_backward(&mut g.wv, &a[t], &dv[t], Some(&mut da[t]));
        for j in 0..h {
            g.bq.data[j] += dq[t][j];
            g.bv.data[j] += dv[t][j];
        }
    }
    da
}

/// Attention output and dense `[head][t][s]` weight matrices.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Vec<Vec<f64>>,
    pub weights: Vec<Vec<Vec<f64>>>,
}

/// Multi-head causal self-attention over `h` (`T × H`). Position `s` is visible to `t` only when
/// `s <= t` and `pad_mask[s]` holds; padded rows output zeros.
pub fn causal_attention_forward(
    h: &[Vec<f64>],
    params: &SequenceParams,
    heads: usize,
    pad_mask: &[bool],
) -> Result<AttentionOutput, ModelError> {
    let dim = params.wq.rows;
    if pad_mask.len() != h.len() || h.iter().any(|r| r.len() != dim) || heads == 0 || !dim.is_multiple_of(heads) {
        return Err(ModelError::Dimension(format!("attention over {} rows of width {dim} with {heads} heads", h.len())));
    }
    let cache = attention_forward(params, h, pad_mask, heads);
    let n = h.len();
    let mut weights = vec![vec![vec![0.0; n]; n]; heads];
    for t in 0..n {
        for (hd, w) in cache.weights[t].iter().enumerate() {
            for (idx, &s) in cache.support[t].iter().enumerate() {
                weights[hd][t][s] = w[idx];
            }
        }
    }
    Ok(AttentionOutput { out: cache.out, weights })
}
