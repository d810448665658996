//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vtfpar_core::data::{generate, Dataset, SyntheticSpec};
use vtfpar_core::{AttributeSchema, ModelConfig, Tensor, VtfModel};

/// Standard-normal tensor, reproducible from `seed`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    let data = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Default-sized model plus a small synthetic dataset for it.
pub fn desk_fixture(tracklets: usize) -> (VtfModel<f32>, Dataset) {
    let spec = SyntheticSpec {
        tracklets,
        ..SyntheticSpec::default()
    };
    let data = generate(&spec, &AttributeSchema::default_mars()).expect("valid spec");
    let model = VtfModel::new(ModelConfig::default(), data.schema.clone(), 0).expect("valid config");
    (model, data)
}
