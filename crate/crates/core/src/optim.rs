//! Parameter updates over flat parameter arrays.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Plain gradient step `θ ← θ − lr·g`, skipping frozen coordinates.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64, frozen: Option<&[bool]>) {
    for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
        if frozen.is_some_and(|f| f[i]) {
            continue;
        }
        *p -= lr * g;
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (math::sqrt(vh) + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(math::norm(&x) < 1e-2);
    }

    #[test]
    fn frozen_coordinates_do_not_move() {
        let mut x = vec![1.0, 1.0];
        sgd_step(&mut x, &[1.0, 1.0], 0.5, Some(&[true, false]));
        assert_eq!(x, vec![1.0, 0.5]);
    }
}
