//! Fixtures shared by the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roundfit::{
    language_calib, model_init, BlockInputCache, ModelConfig, ModelWeights, QuantConfig,
    Tensor,
};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn([rows, cols], 1.0, &mut rng)
}

/// Untrained default toy model and its block-0 calibration inputs.
pub fn toy_block_fixture(nsamples: usize) -> (ModelWeights<f32>, BlockInputCache<f32>) {
    let cfg = ModelConfig::default();
    let model = model_init(&cfg).expect("default config is valid");
    let calib = language_calib(cfg.vocab_size, 0, 64, nsamples).expect("calibration set");
    let cache = BlockInputCache::embeddings(&model, &calib).expect("embeddings");
    (model, cache)
}

pub fn w2g8() -> QuantConfig {
    QuantConfig::new(2, 8).expect("valid")
}
