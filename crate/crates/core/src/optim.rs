//! Adam with decoupled weight decay.

use crate::tensor::Mat;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` must list tensors in the same
    /// order on every call.
    pub fn step(&mut self, params: Vec<&mut Mat>, grads: Vec<&Mat>) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let w = &mut p.data[j];
                *w -= self.lr * self.weight_decay * *w;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = Mat::from_vec(1, 3, vec![1.0, -2.0, 3.0]);
        let g = Mat::from_vec(1, 3, vec![0.5, 0.5, -1.0]);
        let mut opt = AdamW::new(0.0, 0.01);
        opt.step(vec![&mut p], vec![&g]);
        assert_eq!(p.data, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Mat::from_vec(1, 2, vec![0.0, 0.0]);
        let g = Mat::from_vec(1, 2, vec![3.0, -0.1]);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(vec![&mut p], vec![&g]);
        assert!((p.data[0] + 0.1).abs() < 1e-6);
        assert!((p.data[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut p = Mat::from_vec(1, 1, vec![2.0]);
        let g = Mat::from_vec(1, 1, vec![0.0]);
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(vec![&mut p], vec![&g]);
        assert!((p.data[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }
}
