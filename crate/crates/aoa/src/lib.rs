//! Attention-map adversarial attacks on small image classifiers.
//!
//! The crate turns layer-wise relevance propagation into a differentiable
//! attack surface: heat maps are computed on an autodiff tape, attention
//! losses are minimized by a normalized-gradient loop under an l-inf budget,
//! and the resulting samples are evaluated for black-box transfer across a
//! small model zoo, optionally through preprocessing defenses.
//!
//! Module map:
//! - [`tensor`], [`tape`]: dense tensors and reverse-mode autodiff.
//! - [`network`]: layer specs, models, training, the model zoo, model files.
//! - [`data`]: datasets (synthetic shapes, IDX files, PNG corpora).
//! - [`relevance`]: heat maps via relevance propagation, on the tape.
//! - [`attack`]: attention losses, transfer enhancements, the attack loop.
//! - [`defense`]: JPEG, pixel deflection, TV minimization, smoothing.
//! - [`evaluation`]: transfer matrices, reports, adversarial dataset export.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
mod kernels;
pub mod network;
pub mod relevance;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use tensor::{Real, Tensor};
