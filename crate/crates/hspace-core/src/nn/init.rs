//! Parameter initialization helpers.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;

use crate::scalar::{fl, Scalar};

/// Normal(0, std) init.
pub fn normal<F: Scalar, R: Rng>(rng: &mut R, std: f64, n: usize) -> Vec<F> {
    (0..n)
        .map(|_| F::standard_normal(rng) * fl::<F>(std))
        .collect()
}

/// Kaiming-style conv init: std = sqrt(2 / fan_in).
pub fn conv_kaiming<F: Scalar, R: Rng>(
    rng: &mut R,
    cout: usize,
    cin: usize,
    kh: usize,
    kw: usize,
) -> Array4<F> {
    let fan_in = cin * kh * kw;
    let std = (2.0 / fan_in as f64).sqrt();
    Array4::from_shape_vec((cout, cin, kh, kw), normal(rng, std, cout * cin * kh * kw)).unwrap()
}

pub fn conv_zero<F: Scalar>(cout: usize, cin: usize, kh: usize, kw: usize) -> Array4<F> {
    Array4::zeros((cout, cin, kh, kw))
}

pub fn linear_kaiming<F: Scalar, R: Rng>(rng: &mut R, out: usize, inp: usize) -> Array2<F> {
    let std = (2.0 / inp as f64).sqrt();
    Array2::from_shape_vec((out, inp), normal(rng, std, out * inp)).unwrap()
}

pub fn embedding<F: Scalar, R: Rng>(rng: &mut R, vocab: usize, dim: usize) -> Array2<F> {
    Array2::from_shape_vec((vocab, dim), normal(rng, 0.02, vocab * dim)).unwrap()
}

pub fn zeros1<F: Scalar>(n: usize) -> Array1<F> {
    Array1::zeros(n)
}
