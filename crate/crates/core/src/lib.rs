//! Training and evaluation engine for single-domain-generalization
//! experiments on volumetric data.
//!
//! The crate is self-contained: it ships its own dense-array autodiff core,
//! exact and learnable 3D grayscale morphology, class-routed augmentation,
//! a weighted supervised contrastive loss, a deterministic SGD training
//! loop, a synthetic phantom-volume dataset with controllable domain shift,
//! and the metrics used to score cross-domain generalization. Everything is
//! reproducible bit-for-bit from a single seed.

pub mod augment;
pub mod check;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod morphology;
pub mod phantom;
pub mod pseudo_morph;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Result, SdgError};
