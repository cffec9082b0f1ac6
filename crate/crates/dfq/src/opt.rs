//! Optimizers over named parameters.
//!
//! Parameters are immutable tensors; a step reads the accumulated gradient
//! off the old leaf and swaps in a fresh one. State (momentum, moments) is
//! keyed by parameter name, so it survives the swap. Parameters that saw
//! no gradient this step are left untouched.

use std::collections::HashMap;

use crate::tensor::Tensor;

pub struct Momentum {
    lr: f32,
    momentum: f32,
    velocity: HashMap<String, Vec<f32>>,
}

impl Momentum {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Momentum { lr, momentum, velocity: HashMap::new() }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn step_param(&mut self, name: &str, t: &mut Tensor) {
        let Some(grad) = t.grad() else { return };
        let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
        let mut data = t.data().to_vec();
        for i in 0..data.len() {
            v[i] = self.momentum * v[i] + grad[i];
            data[i] -= self.lr * v[i];
        }
        *t = Tensor::param(data, t.shape());
    }
}

pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    /// Advance the shared timestep; call once per optimizer step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn step_param(&mut self, name: &str, t: &mut Tensor) {
        let Some(grad) = t.grad() else { return };
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut data = t.data().to_vec();
        for i in 0..data.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        *t = Tensor::param(data, t.shape());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_descends_a_quadratic() {
        let mut opt = Momentum::new(0.1, 0.9);
        let mut x = Tensor::param(vec![5.0], &[1]);
        for _ in 0..100 {
            let loss = x.square().sum();
            loss.backward().unwrap();
            opt.step_param("x", &mut x);
        }
        assert!(x.data()[0].abs() < 0.05, "{}", x.data()[0]);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut opt = Adam::new(0.3);
        let mut x = Tensor::param(vec![-4.0, 6.0], &[2]);
        for _ in 0..200 {
            let loss = x.square().sum();
            loss.backward().unwrap();
            opt.begin_step();
            opt.step_param("x", &mut x);
        }
        assert!(x.data().iter().all(|v| v.abs() < 0.05), "{:?}", x.data());
    }

    #[test]
    fn missing_gradient_leaves_parameter_untouched() {
        let mut opt = Momentum::new(0.1, 0.9);
        let mut x = Tensor::param(vec![1.0], &[1]);
        let before = x.data().to_vec();
        opt.step_param("x", &mut x);
        assert_eq!(x.data(), &before[..]);
    }
}
