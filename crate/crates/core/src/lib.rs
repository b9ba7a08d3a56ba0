//! Image restoration by truncated Taylor composition.
//!
//! A mapping network `F` produces a coarse restoration of a degraded image;
//! a small derivative network `G`, shared across stages, is unrolled `n`
//! times to produce correction terms that are summed with weights `1/k!`.
//! Everything needed to train and evaluate that model is here: a dense
//! tensor type with reverse-mode differentiation, synthetic rain and blur
//! degradations, Adam training with step decay, PSNR/SSIM and file formats.

pub mod checkpoint;
pub mod composer;
mod conv;
pub mod corpus;
pub mod degrade;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod nets;
pub mod ppm;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use composer::{ComposerConfig, ComposerTrace, RecurrenceVariant, SeedTerm};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use nets::{DerivativeNet, MappingNet, ModelSpec, ParamSet};
pub use tensor::Tensor;
