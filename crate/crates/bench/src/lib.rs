//! Shared fixtures for the criterion benches.

use dms_core::numerics::Tensor;
use dms_core::rng::{normal, stream, RandomStream};

pub fn rng(label: &str) -> RandomStream {
    stream(0xbe4c, label)
}

pub fn random_tensor(rng: &mut RandomStream, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| normal(rng)).collect()).expect("shape")
}

pub fn random_vec(rng: &mut RandomStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
