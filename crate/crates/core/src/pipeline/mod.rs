//! End-to-end workflow: toy dataset generation, training with checkpoints,
//! evaluation of EF adherence and throughput benchmarking.
//!
//! Everything is a pure function of the [`RunConfig`] seed; two runs with
//! the same configuration on one platform produce byte-identical artifacts.

mod bench;
mod checkpoint;
mod config;
mod data;
mod eval;
mod train;

pub use bench::{bench_samplers, BenchRow, BenchTable};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DataConfig, EvalConfig, RunConfig, TrainConfig};
pub use data::{generate_dataset, load_dataset, to_image, to_model, Dataset, ManifestEntry, MANIFEST_FILE};
pub use eval::{evaluate, segmentation_estimator, EvalOutcome};
pub use train::{train, AdamState, EpochLog, TrainState};

/// Decorrelated child seed for stream `stream` of `seed` (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
