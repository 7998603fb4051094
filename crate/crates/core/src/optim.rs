//! First-order parameter updates over flat tensor lists.

use serde::{Deserialize, Serialize};

use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent with a fixed step.
    #[default]
    Sgd,
    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adam,
}

pub struct Optimizer<T> {
    kind: OptimizerKind,
    learning_rate: T,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self { kind, learning_rate: lit(learning_rate), step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) {
        debug_assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, &dw) in p.iter_mut().zip(g) {
                        *w -= self.learning_rate * dw;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first.is_empty() {
                    self.first = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
                    self.second = self.first.clone();
                }
                self.step += 1;
                let (b1, b2, eps) = (lit::<T>(0.9), lit::<T>(0.999), lit::<T>(1e-8));
                let c1 = T::one() - b1.powi(self.step);
                let c2 = T::one() - b2.powi(self.step);
                for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut w = vec![1.0f64, -1.0];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        opt.step(vec![&mut w], vec![&[2.0, -4.0]]);
        assert_eq!(w, vec![0.8, -0.6]);
    }

    #[test]
    fn adam_first_step_is_learning_rate_sized() {
        let mut w = vec![0.0f64];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        opt.step(vec![&mut w], vec![&[123.0]]);
        assert!((w[0] + 0.01).abs() < 1e-9);
    }
}
