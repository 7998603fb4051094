//! Dense layers and activations with hand-written backward passes.

use serde::{Deserialize, Serialize};

use crate::rng::{uniform, SeededRng};
use crate::scalar::{from_usize, Scalar};

/// Fully connected layer, `weight` row-major `n_out × n_in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    /// Weights `U(-1/√n_in, 1/√n_in)`, zero bias.
    pub fn init(n_in: usize, n_out: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let weight = (0..n_in * n_out).map(|_| uniform(rng, -bound, bound)).collect();
        Self { n_in, n_out, weight, bias: vec![T::zero(); n_out] }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { n_in, n_out, weight: vec![T::zero(); n_in * n_out], bias: vec![T::zero(); n_out] }
    }

    pub fn forward(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.n_in);
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.n_in..(o + 1) * self.n_in];
            *y = row.iter().zip(x).fold(self.bias[o], |acc, (&w, &xi)| acc + w * xi);
        }
    }

    /// Accumulates parameter gradients into `grad` and, when given, input
    /// gradients into `dx`.
    pub fn backward(&self, x: &[T], dy: &[T], grad: &mut Dense<T>, dx: Option<&mut [T]>) {
        for (o, &g) in dy.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            grad.bias[o] += g;
            let row = &mut grad.weight[o * self.n_in..(o + 1) * self.n_in];
            for (w, &xi) in row.iter_mut().zip(x) {
                *w += g * xi;
            }
        }
        if let Some(dx) = dx {
            for (o, &g) in dy.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let row = &self.weight[o * self.n_in..(o + 1) * self.n_in];
                for (d, &w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }

    pub fn tensors(&self) -> [&[T]; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)`, stable for large `|x|`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Mean and sample standard deviation; the deviation falls back to 1 when
/// fewer than two values are given or they do not spread.
pub fn standardization<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> (T, T) {
    let n = values.clone().count();
    let mean = values.clone().fold(T::zero(), |a, b| a + b) / from_usize(n.max(1));
    if n < 2 {
        return (mean, T::one());
    }
    let var = values.map(|v| (v - mean) * (v - mean)).fold(T::zero(), |a, b| a + b) / from_usize(n - 1);
    let std = var.sqrt();
    if std > T::from_f64_lossy(1e-12) && std.is_finite() {
        (mean, std)
    } else {
        (mean, T::one())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activations_are_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) == 1.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0f64), 800.0);
        assert!(softplus(-800.0f64) >= 0.0);
    }

    #[test]
    fn dense_backward_matches_definition() {
        let layer = Dense { n_in: 2, n_out: 2, weight: vec![1.0, 2.0, 3.0, 4.0], bias: vec![0.5, -0.5] };
        let mut y = [0.0; 2];
        layer.forward(&[1.0, -1.0], &mut y);
        assert_eq!(y, [-0.5, -1.5]);
        let mut grad = Dense::zeros(2, 2);
        let mut dx = [0.0; 2];
        layer.backward(&[1.0, -1.0], &[1.0, 2.0], &mut grad, Some(&mut dx));
        assert_eq!(grad.weight, vec![1.0, -1.0, 2.0, -2.0]);
        assert_eq!(grad.bias, vec![1.0, 2.0]);
        assert_eq!(dx, [7.0, 10.0]);
    }
}
