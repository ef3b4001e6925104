//! Deterministic inputs shared by the benchmarks.

use mocolab::backbone::Tensor;
use mocolab::data::{DomainTag, SynthParams};
use mocolab::seed::rng;
use mocolab::PredictionSet;
use nalgebra::DMatrix;
use rand::Rng as _;

/// `n` synthetic small-domain images as input tensors.
pub fn images(n: usize, size: usize) -> Vec<Tensor<f32>> {
    SynthParams::new(DomainTag::SmallDomain, n, 0.5, 1)
        .with_image_size(size)
        .generate()
        .expect("synthetic images")
        .samples
        .iter()
        .map(|s| Tensor::from_image(&s.pixels))
        .collect()
}

/// `rows` unit vectors of length `dim`, row-major.
pub fn unit_rows(rows: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed, &[]);
    let mut out = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f32> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        out.extend(v.into_iter().map(|x| x / norm));
    }
    out
}

/// Scores loosely correlated with labels, with ties from rounding.
pub fn predictions(n: usize, arity: usize, seed: u64) -> PredictionSet {
    let mut r = rng(seed, &[]);
    let labels: Vec<u8> = (0..n * arity).map(|_| u8::from(r.random_bool(0.3))).collect();
    let scores = labels
        .iter()
        .map(|&y| ((f64::from(y) * 0.5 + r.random_range(0.0..1.0)) * 100.0).round() / 100.0)
        .collect();
    PredictionSet::new(scores, labels, arity, "bench", "bench").expect("valid rows")
}

/// `rows x cols` activations with a decaying spectrum.
pub fn activations(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed, &[]);
    DMatrix::from_fn(rows, cols, |_, c| r.random_range(-1.0..1.0) / (1.0 + c as f64))
}
