//! Representation learning for visual place recognition.
//!
//! The pipeline mirrors a standard place-recognition training setup at
//! desk scale: a database of places (each photographed several times),
//! a P×K batch sampler, an aggregation head turning backbone feature maps
//! into unit-norm global descriptors ([`aggregators`]), pairwise cosine
//! similarities ([`embedding`]), online in-batch mining ([`mining`]),
//! pair/triplet losses with analytic gradients ([`losses`]), an SGD
//! trainer ([`trainer`]), and recall@k evaluation plus PCA whitening
//! ([`evaluator`]).
//!
//! All numerics run in `f64`. The on-disk tensor format stores `f32`.

pub mod aggregators;
pub mod embedding;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod mining;
pub mod places;
pub mod trainer;

pub use error::{Error, Result};
