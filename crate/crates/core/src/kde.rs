//! Gaussian kernel density estimate over scalar property labels, used to
//! draw generation conditions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{index, seeded, standard_normal};
use crate::scalar::{from_usize, lit, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeModel<T> {
    pub points: Vec<T>,
    pub bandwidth: T,
}

/// Fits with Silverman's normal-reference bandwidth `1.06 σ n^(-1/5)`,
/// `σ` the sample standard deviation. With fewer than two points or zero
/// spread the bandwidth is `max(1e-3 · max(|mean|, 1), 1e-9)`.
pub fn fit_kde<T: Scalar>(values: &[T]) -> Result<KdeModel<T>> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let n = values.len();
    let mean = values.iter().fold(T::zero(), |a, &b| a + b) / from_usize(n);
    let sigma = if n < 2 {
        T::zero()
    } else {
        let ss = values.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean));
        (ss / from_usize(n - 1)).sqrt()
    };
    let bandwidth = if n < 2 || sigma == T::zero() {
        (lit::<T>(1e-3) * mean.abs().max(T::one())).max(lit(1e-9))
    } else {
        lit::<T>(1.06) * sigma * from_usize::<T>(n).powf(lit(-0.2))
    };
    Ok(KdeModel { points: values.to_vec(), bandwidth })
}

impl<T: Scalar> KdeModel<T> {
    pub fn min_point(&self) -> T {
        self.points.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_point(&self) -> T {
        self.points.iter().copied().fold(T::neg_infinity(), T::max)
    }
}

pub fn kde_pdf<T: Scalar>(model: &KdeModel<T>, x: T) -> T {
    let h = model.bandwidth;
    let norm = T::one() / (from_usize::<T>(model.points.len()) * h * T::TAU().sqrt());
    let two_h2 = lit::<T>(2.0) * h * h;
    let sum = model
        .points
        .iter()
        .map(|&p| (-(x - p) * (x - p) / two_h2).exp())
        .fold(T::zero(), |a, b| a + b);
    norm * sum
}

/// Each draw picks a training point uniformly and adds `N(0, h²)` noise.
pub fn sample_kde<T: Scalar>(model: &KdeModel<T>, n: usize, seed: u64) -> Vec<T> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| {
            let center = model.points[index(&mut rng, model.points.len())];
            center + model.bandwidth * standard_normal::<T>(&mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silverman_on_two_points() {
        let m = fit_kde(&[0.0f64, 10.0]).unwrap();
        let sigma = 50f64.sqrt();
        assert!((sigma - 7.0711).abs() < 1e-4);
        assert!((m.bandwidth - 1.06 * sigma * 2f64.powf(-0.2)).abs() < 1e-12);
        assert!((m.bandwidth - 6.525).abs() < 1e-3);
    }

    #[test]
    fn degenerate_inputs_use_fallback() {
        assert_eq!(fit_kde(&[5.0f64]).unwrap().bandwidth, 5e-3);
        assert_eq!(fit_kde(&[3.0f64, 3.0, 3.0]).unwrap().bandwidth, 3e-3);
        assert_eq!(fit_kde(&[0.0f64]).unwrap().bandwidth, 1e-3);
        assert!(matches!(fit_kde::<f64>(&[]), Err(Error::EmptyInput)));
        assert!(matches!(fit_kde(&[1.0, f64::NAN]), Err(Error::NonFiniteInput)));
    }

    #[test]
    fn single_kernel_peak_and_symmetry() {
        let m = KdeModel { points: vec![2.0f64], bandwidth: 0.5 };
        let peak = 1.0 / (0.5 * (2.0 * std::f64::consts::PI).sqrt());
        assert!((kde_pdf(&m, 2.0) - peak).abs() < 1e-15);
        for dx in [0.1, 0.7, 3.0] {
            assert!((kde_pdf(&m, 2.0 + dx) - kde_pdf(&m, 2.0 - dx)).abs() < 1e-15);
        }
    }

    #[test]
    fn sampling_edge_cases() {
        let m = KdeModel { points: vec![5.0f64], bandwidth: 1e-9 };
        assert!(sample_kde(&m, 0, 1).is_empty());
        let draws = sample_kde(&m, 500, 1);
        assert!(draws.iter().all(|x| (x - 5.0).abs() < 1e-7));
        assert_eq!(draws, sample_kde(&m, 500, 1));
    }
}
