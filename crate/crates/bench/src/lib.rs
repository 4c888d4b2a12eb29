//! Shared fixtures for the benchmarks in `benches/`.

use pairx_core::model::{ForwardTrace, ModelGraph};
use pairx_core::synthetic::{blob_model, generate, SyntheticConfig};

/// The synthetic blob model and forward traces of two views of one
/// individual at 128×128.
pub fn synthetic_pair() -> (ModelGraph, ForwardTrace, ForwardTrace) {
    let cfg = SyntheticConfig {
        individuals: 1,
        train_individuals: 0,
        ..SyntheticConfig::default()
    };
    let images = generate(&cfg).expect("synthetic images");
    let model = blob_model(cfg.size).expect("blob model");
    let a = model.forward_image(&images[0].image).expect("forward");
    let b = model.forward_image(&images[3].image).expect("forward");
    (model, a, b)
}
