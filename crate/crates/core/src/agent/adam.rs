//! Adam with bias correction.

use crate::network::{Real, Tensor};

/// Adam state for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[Tensor<T>], learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    /// `θ ← θ − lr·m̂/(√v̂ + ε)` with gradients multiplied by `grad_scale` first.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], grad_scale: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let scale = T::of(grad_scale);
        let step = T::of(self.learning_rate / c1);
        let inv_c2 = T::of(1.0 / c2.sqrt());
        let eps = T::of(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                let g = g * scale;
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *p -= step * *m / (v.sqrt() * inv_c2 + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor {
            shape: vec![2],
            data: vec![1.0f64, -1.0],
        }];
        let g = vec![Tensor {
            shape: vec![2],
            data: vec![3.0f64, -0.5],
        }];
        let mut adam = Adam::new(&p, 0.1, 0.9, 0.999, 0.0);
        adam.step(&mut p, &g, 1.0);
        assert!((p[0].data[0] - 0.9).abs() < 1e-12);
        assert!((p[0].data[1] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn matches_reference_recurrence() {
        let mut p = vec![Tensor {
            shape: vec![1],
            data: vec![0.5f64],
        }];
        let grads = [0.2, -0.1, 0.4];
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-3);
        let mut adam = Adam::new(&p, lr, b1, b2, eps);
        let (mut theta, mut m, mut v) = (0.5f64, 0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
            adam.step(
                &mut p,
                &[Tensor {
                    shape: vec![1],
                    data: vec![g],
                }],
                1.0,
            );
        }
        assert!((p[0].data[0] - theta).abs() < 1e-12);
    }
}
