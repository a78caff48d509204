//! One-step masked MeanFlow video generation at desk scale.
//!
//! The crate is organised bottom-up: [`autodiff`] provides the tensor
//! engine, [`seqcond`] handles variable-length padding and masked
//! conditioning, [`flowobjectives`] holds the training losses, [`model`] the
//! conditional spatio-temporal network, [`samplers`] the generators,
//! [`toyecho`] the synthetic echo-like data and EF proxy, and [`evalbench`]
//! the metrics. [`pipeline`] ties them into datagen/train/sample/eval/bench.

pub mod autodiff;
pub mod error;
pub mod evalbench;
pub mod flowobjectives;
pub mod model;
pub mod pipeline;
pub mod samplers;
pub mod seqcond;
pub mod toyecho;

pub use autodiff::{Graph, ParameterSet, Tensor, Var};
pub use error::{Error, Result};
