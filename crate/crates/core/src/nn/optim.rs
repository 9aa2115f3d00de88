use serde::{Deserialize, Serialize};

use super::{Param, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "optimizer/parameter mismatch");
        let mu = T::of(self.config.momentum);
        let wd = T::of(self.config.weight_decay);
        let lr = T::of(lr);
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            for ((w, &g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                let d = g + wd * *w;
                *vel = mu * *vel + d;
                *w -= lr * *vel;
            }
        }
    }

    pub fn state(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn load_state(&mut self, velocity: Vec<Vec<T>>) {
        self.velocity = velocity;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    steps: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "optimizer/parameter mismatch");
        self.steps += 1;
        let c = self.config;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let step = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(c.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w -= step * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn state(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    pub fn load_state(&mut self, steps: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) {
        self.steps = steps;
        self.first = first;
        self.second = second;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Param<f64> {
        let mut p = Param::new("p".into(), vec![1], vec![v]);
        p.grad[0] = g;
        p
    }

    #[test]
    fn sgd_applies_momentum_and_decay() {
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.9,
            weight_decay: 0.1,
        });
        let mut p = param(1.0, 0.5);
        opt.step(&mut [&mut p], 0.1);
        // v = 0.5 + 0.1 = 0.6, w = 1 - 0.06
        assert!((p.value[0] - 0.94).abs() < 1e-12);
        p.grad[0] = 0.0;
        opt.step(&mut [&mut p], 0.1);
        // v = 0.9*0.6 + 0.094 = 0.634
        assert!((p.value[0] - (0.94 - 0.0634)).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::new(AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-12,
        });
        let mut p = param(0.0, -3.0);
        opt.step(&mut [&mut p], 0.01);
        assert!((p.value[0] - 0.01).abs() < 1e-9);
    }
}
