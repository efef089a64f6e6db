//! Shared fixtures for the benchmarks.

use effipose::data::{make_batch, synthetic_dataset, Batch};
use effipose::{build_variant, ModelGraph, ParamStore, RunConfig, Shape, Tensor, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: Shape, seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A named variant at a reduced input side.
pub fn model_at(variant: Variant, res: usize) -> (RunConfig, ModelGraph, ParamStore<f32>) {
    let mut cfg = RunConfig::named(variant);
    cfg.variant.high_res = res;
    cfg.train.augment = false;
    let model = build_variant(&cfg.variant).expect("variant builds");
    let params = model.graph.init_params(0).expect("params initialise");
    (cfg, model, params)
}

/// A synthetic training batch for `model`.
pub fn batch_for(cfg: &RunConfig, model: &ModelGraph, size: usize) -> Batch<f32> {
    let res = cfg.variant.high_res;
    let data = synthetic_dataset(size, res, 0).expect("synthetic data");
    let ids: Vec<usize> = (0..size).collect();
    make_batch(
        &data,
        &ids,
        model,
        None,
        &cfg.train.sigma,
        cfg.train.paf_width,
        0,
        0.0,
    )
    .expect("batch")
}
