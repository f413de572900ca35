//! Shared fixtures for the benchmarks.

use fdr_core::synth::{generate_dataset, Sample};
use fdr_core::{SplitMix64, Tensor};

pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f32> {
    let mut rng = SplitMix64::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal() as f32).collect()).expect("shape matches data")
}

pub fn samples(seed: u64, per_class: usize) -> Vec<Sample> {
    generate_dataset(seed, per_class, per_class, 0.3)
        .expect("valid generator arguments")
        .iter()
        .map(Sample::from)
        .collect()
}
