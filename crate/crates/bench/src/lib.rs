//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use remix_core::reducer::reduce_bag;
use remix_core::{rng, BagDictionary, FeatureBag, ReduceConfig};

/// An `n × d` bag of standard normal features.
pub fn random_bag(id: &str, label: usize, n: usize, d: usize, seed: u64) -> FeatureBag {
    let mut r = rng::seeded(seed);
    let features = Array2::from_shape_fn((n, d), |_| {
        let v: f64 = StandardNormal.sample(&mut r);
        v as f32
    });
    FeatureBag::new(id, label, features).expect("finite features")
}

pub fn random_dictionary(id: &str, label: usize, n: usize, d: usize, cfg: &ReduceConfig, seed: u64) -> BagDictionary {
    reduce_bag(&random_bag(id, label, n, d, seed), cfg).expect("reduction succeeds")
}
