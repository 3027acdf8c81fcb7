use std::f64::consts::PI;

use crate::nn::Params;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam over a flat parameter vector. Frozen tensors keep zero moments and
/// are never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Adam {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn update<P: Params>(&mut self, params: &mut P, grad: &[f64], lr: f64) {
        let mask = trainable_mask(params);
        assert_eq!(mask.len(), self.m.len(), "optimizer/parameter size mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let mut theta = params.flat();
        for i in 0..theta.len() {
            if !mask[i] {
                continue;
            }
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        params.set_flat(&theta);
    }
}

/// `true` for every flat coordinate belonging to a trainable tensor.
pub fn trainable_mask<P: Params>(params: &P) -> Vec<bool> {
    params
        .tensors()
        .iter()
        .flat_map(|t| std::iter::repeat_n(t.trainable, t.data.len()))
        .collect()
}

/// Cosine decay from `lr` at step 0 to `min_factor·lr` at `total`.
pub fn cosine_lr(lr: f64, min_factor: f64, step: usize, total: usize) -> f64 {
    let min = min_factor * lr;
    let frac = if total == 0 { 1.0 } else { step as f64 / total as f64 };
    min + 0.5 * (lr - min) * (1.0 + (PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerNorm;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(5e-4, 0.1, 0, 100), 5e-4);
        assert!((cosine_lr(5e-4, 0.1, 100, 100) - 5e-5).abs() < 1e-12 * 5e-4);
        assert!((cosine_lr(1.0, 0.1, 50, 100) - 0.55).abs() < 1e-12);
        for s in 1..100 {
            assert!(cosine_lr(1.0, 0.1, s, 100) < cosine_lr(1.0, 0.1, s - 1, 100));
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = LayerNorm::new(3);
        let mut opt = Adam::new(p.num_params());
        opt.update(&mut p, &[1.0, -2.0, 0.0, 0.5, 0.5, 0.5], 0.1);
        assert!((p.gamma[0] - 0.9).abs() < 1e-8);
        assert!((p.gamma[1] - 1.1).abs() < 1e-8);
        assert_eq!(p.gamma[2], 1.0);
        // ε shifts the step by lr·ε/|g|
        assert!((p.beta[0] + 0.1 * 0.5 / (0.5 + ADAM_EPS)).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = LayerNorm::new(2);
        let mut opt = Adam::new(4);
        for _ in 0..2000 {
            let g: Vec<f64> = p.flat().iter().map(|v| 2.0 * (v - 3.0)).collect();
            opt.update(&mut p, &g, 0.05);
        }
        assert!(p.flat().iter().all(|v| (v - 3.0).abs() < 1e-3));
    }
}
