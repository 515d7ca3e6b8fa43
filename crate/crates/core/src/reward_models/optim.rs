//! Adaptive-moment optimizer with decoupled weight decay.

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update. `params[k]` pairs with `grads[k]`; decay applies where `decay[k]` holds.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], decay: &[bool]) {
        self.tick();
        for k in 0..params.len() {
            self.update(k, params[k], grads[k], decay[k]);
        }
    }

    /// Advance the step counter; call once before the `update`s of a step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Update parameter group `k`.
    pub fn update(&mut self, k: usize, p: &mut [f64], g: &[f64], decay: bool) {
        while self.m.len() <= k {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        if self.m[k].is_empty() {
            self.m[k] = vec![0.0; p.len()];
            self.v[k] = vec![0.0; p.len()];
        }
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let wd = if decay { self.weight_decay } else { 0.0 };
        let (m, v) = (&mut self.m[k], &mut self.v[k]);
        for j in 0..p.len() {
            m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
            v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            p[j] -= self.lr * (update + wd * p[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = AdamW::new(0.1, 0.0);
        let mut p = vec![1.0, -2.0];
        opt.step(&mut [&mut p], &[&[3.0, -0.5]], &[false]);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let mut opt = AdamW::new(0.1, 0.5);
        let mut p = vec![2.0];
        opt.step(&mut [&mut p], &[&[0.0]], &[true]);
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdamW::new(0.05, 0.0);
        let mut p = vec![3.0, -4.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.step(&mut [&mut p], &[&g], &[false]);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }
}
