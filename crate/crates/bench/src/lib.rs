//! Shared fixtures for the criterion benchmarks.

use lvfm_core::model::{Model, ModelConfig};
use lvfm_core::seqcond::{temporal_normalize, ConditioningSet};
use lvfm_core::{ParameterSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A freshly initialised desk-scale network plus a conditioning set with a
/// single observed frame and two padded slots.
pub fn fixture() -> (Model, ParameterSet, ConditioningSet) {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone()).expect("default config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = model.init_params(&mut rng);
    let frames: Vec<Tensor> = (0..cfg.frames - 2)
        .map(|_| Tensor::randn(&[cfg.in_channels, cfg.height, cfg.width], &mut rng))
        .collect();
    let video = temporal_normalize(&frames, cfg.frames).expect("frames fit");
    let c = ConditioningSet::from_video(&video, 0.5, &[0]).expect("frame 0 is valid");
    (model, params, c)
}
