use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Row-major matrix or vector of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self { rows, cols, data: (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect() }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `y = W x + b` for a `rows × cols` matrix.
    pub fn affine(&self, x: &[f64], b: &Tensor) -> Vec<f64> {
        (0..self.rows).map(|r| b.data[r] + self.row(r).iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).collect()
    }

    /// `y = W x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).collect()
    }

    /// `dx += W^T dy` and `dW += dy x^T`.
    pub fn affine_backward(&self, grad: &mut Tensor, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        for (r, &d) in dy.iter().enumerate() {
            if d != 0.0 {
                for (g, v) in grad.row_mut(r).iter_mut().zip(x) {
                    *g += d * v;
                }
            }
        }
        if let Some(dx) = dx {
            for (r, &d) in dy.iter().enumerate() {
                if d != 0.0 {
                    for (o, w) in dx.iter_mut().zip(self.row(r)) {
                        *o += d * w;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    /// `4H × (H + d)`, gate blocks in the order input, forget, candidate, output; the first
    /// `H` columns multiply `h_{t-1}`.
    pub w: Tensor,
    pub b: Tensor,
}

/// Every learnable tensor of the sequence model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceParams {
    pub embeddings: Vec<Tensor>,
    /// `T × d_in`.
    pub positional: Tensor,
    pub gap_w: Tensor,
    pub gap_b: Tensor,
    pub lstm: Vec<LstmLayer>,
    pub ln1_scale: Tensor,
    pub ln1_shift: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    /// Keys carry no bias: a shared key offset cancels in the softmax.
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_shift: Tensor,
    pub w_gate: Tensor,
    pub b_gate: Tensor,
    pub w_body: Tensor,
    pub b_body: Tensor,
    pub w_out: Tensor,
    /// One intercept per ad.
    pub b_out: Tensor,
}

/// Shape parameters of a sequence model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqDims {
    pub n_dense: usize,
    pub vocabs: Vec<usize>,
    pub emb_dims: Vec<usize>,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub window: usize,
    pub n_ads: usize,
}

impl SeqDims {
    pub fn d_in(&self) -> usize {
        self.n_dense + self.emb_dims.iter().sum::<usize>()
    }
}

impl SequenceParams {
    pub fn init(dims: &SeqDims, rng: &mut ChaCha8Rng) -> Self {
        let (d, h) = (dims.d_in(), dims.hidden);
        let embeddings = dims.vocabs.iter().zip(&dims.emb_dims).map(|(&v, &e)| Tensor::uniform(v, e, e, rng)).collect();
        let positional = Tensor::uniform(dims.window, d, d, rng);
        let gap_w = Tensor::uniform(d, 1, 1, rng);
        let lstm = (0..dims.layers)
            .map(|l| {
                let input = if l == 0 { d } else { h };
                LstmLayer { w: Tensor::uniform(4 * h, h + input, h + input, rng), b: Tensor::zeros(4 * h, 1) }
            })
            .collect();
        let sq = |rng: &mut ChaCha8Rng| Tensor::uniform(h, h, h, rng);
        Self {
            embeddings,
            positional,
            gap_w,
            gap_b: Tensor::zeros(d, 1),
            lstm,
            ln1_scale: Tensor::filled(h, 1, 1.0),
            ln1_shift: Tensor::zeros(h, 1),
            wq: sq(rng),
            bq: Tensor::zeros(h, 1),
            wk: sq(rng),
            wv: sq(rng),
            bv: Tensor::zeros(h, 1),
            wo: sq(rng),
            bo: Tensor::zeros(h, 1),
            ln2_scale: Tensor::filled(h, 1, 1.0),
            ln2_shift: Tensor::zeros(h, 1),
            w_gate: sq(rng),
            b_gate: Tensor::zeros(h, 1),
            w_body: sq(rng),
            b_body: Tensor::zeros(h, 1),
            w_out: Tensor::uniform(1, h, h, rng),
            b_out: Tensor::zeros(dims.n_ads, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, _, t| t.data.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Visit every tensor with its name and whether weight decay applies to it.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, bool, &'a Tensor)) {
        for (k, e) in self.embeddings.iter().enumerate() {
            f(format!("embedding_{k}"), true, e);
        }
        f("positional".into(), true, &self.positional);
        f("gap_w".into(), true, &self.gap_w);
        f("gap_b".into(), false, &self.gap_b);
        for (l, layer) in self.lstm.iter().enumerate() {
            f(format!("lstm_{l}_w"), true, &layer.w);
            f(format!("lstm_{l}_b"), false, &layer.b);
        }
        f("ln1_scale".into(), false, &self.ln1_scale);
        f("ln1_shift".into(), false, &self.ln1_shift);
        f("wq".into(), true, &self.wq);
        f("bq".into(), false, &self.bq);
        f("wk".into(), true, &self.wk);
        f("wv".into(), true, &self.wv);
        f("bv".into(), false, &self.bv);
        f("wo".into(), true, &self.wo);
        f("bo".into(), false, &self.bo);
        f("ln2_scale".into(), false, &self.ln2_scale);
        f("ln2_shift".into(), false, &self.ln2_shift);
        f("w_gate".into(), true, &self.w_gate);
        f("b_gate".into(), false, &self.b_gate);
        f("w_body".into(), true, &self.w_body);
        f("b_body".into(), false, &self.b_body);
        f("w_out".into(), true, &self.w_out);
        f("b_out".into(), false, &self.b_out);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, bool, &mut Tensor)) {
        for (k, e) in self.embeddings.iter_mut().enumerate() {
            f(format!("embedding_{k}"), true, e);
        }
        f("positional".into(), true, &mut self.positional);
        f("gap_w".into(), true, &mut self.gap_w);
        f("gap_b".into(), false, &mut self.gap_b);
        for (l, layer) in self.lstm.iter_mut().enumerate() {
            f(format!("lstm_{l}_w"), true, &mut layer.w);
            f(format!("lstm_{l}_b"), false, &mut layer.b);
        }
        f("ln1_scale".into(), false, &mut self.ln1_scale);
        f("ln1_shift".into(), false, &mut self.ln1_shift);
        f("wq".into(), true, &mut self.wq);
        f("bq".into(), false, &mut self.bq);
        f("wk".into(), true, &mut self.wk);
        f("wv".into(), true, &mut self.wv);
        f("bv".into(), false, &mut self.bv);
        f("wo".into(), true, &mut self.wo);
        f("bo".into(), false, &mut self.bo);
        f("ln2_scale".into(), false, &mut self.ln2_scale);
        f("ln2_shift".into(), false, &mut self.ln2_shift);
        f("w_gate".into(), true, &mut self.w_gate);
        f("b_gate".into(), false, &mut self.b_gate);
        f("w_body".into(), true, &mut self.w_body);
        f("b_body".into(), false, &mut self.b_body);
        f("w_out".into(), true, &mut self.w_out);
        f("b_out".into(), false, &mut self.b_out);
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, t| n += t.data.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, _, t| ok &= t.data.iter().all(|v| v.is_finite()));
        ok
    }
}
