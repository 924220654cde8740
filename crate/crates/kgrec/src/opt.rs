//! First-order adaptive-moment optimizer over ndarray tensors.

use ndarray::{Array, Dimension};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Default::default() }
    }
}

/// Per-tensor moment state.
#[derive(Debug, Clone)]
pub struct AdamState<D: Dimension> {
    m: Array<f64, D>,
    v: Array<f64, D>,
}

impl<D: Dimension> AdamState<D> {
    pub fn like(param: &Array<f64, D>) -> Self {
        Self { m: Array::zeros(param.raw_dim()), v: Array::zeros(param.raw_dim()) }
    }

    /// One update. `step` is the global 1-based step count shared by all tensors.
    pub fn update(&mut self, cfg: &AdamConfig, step: usize, param: &mut Array<f64, D>, grad: &Array<f64, D>) {
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let bias1 = 1.0 - b1.powi(step as i32);
        let bias2 = 1.0 - b2.powi(step as i32);
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_lr_leaves_params_untouched() {
        let mut p = array![[1.0, -2.0], [0.5, 3.0]];
        let orig = p.clone();
        let g = array![[0.3, 0.1], [-0.2, 0.9]];
        let cfg = AdamConfig::with_lr(0.0);
        let mut state = AdamState::like(&p);
        for step in 1..=5 {
            state.update(&cfg, step, &mut p, &g);
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (x - 3)^2
        let mut x = array![0.0];
        let cfg = AdamConfig::with_lr(0.1);
        let mut state = AdamState::like(&x);
        for step in 1..=500 {
            let g = array![2.0 * (x[0] - 3.0)];
            state.update(&cfg, step, &mut x, &g);
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "got {}", x[0]);
    }
}
