#![allow(dead_code)]

use nalgebra::{DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use splr::types::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn positive_vector(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(lo..hi))
}

/// `A A^T + shift I` with Gaussian `A`.
pub fn random_pd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Matrix {
    let a = gaussian(rng, n, n);
    &a * a.transpose() + Matrix::identity(n, n) * shift
}

/// Activations whose columns mix a few shared latent factors plus small
/// independent noise. Column scales are log-uniform over `decades`.
pub fn correlated_activations(rng: &mut ChaCha8Rng, samples: usize, width: usize, decades: f64) -> Matrix {
    let latent = (width / 4).max(1);
    let z = gaussian(rng, samples, latent);
    let mix = gaussian(rng, latent, width);
    let noise = gaussian(rng, samples, width) * 1e-2;
    let mut x = z * mix + noise;
    for j in 0..width {
        let scale = 10f64.powf(decades * (rng.random_range(0.0..1.0) - 0.5));
        x.column_mut(j).scale_mut(scale);
    }
    x
}

/// Textbook `X^T X` by explicit summation.
pub fn naive_gram(x: &Matrix) -> Matrix {
    let (n, d) = x.shape();
    Matrix::from_fn(d, d, |a, b| (0..n).map(|s| x[(s, a)] * x[(s, b)]).sum())
}

pub fn condition_number(h: &Matrix) -> f64 {
    let eig = SymmetricEigen::new(h.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
