//! Core math for decoding visual search targets from gaze fixations.
//!
//! The crate is split along the pipeline stages:
//!
//! * [`tensor`] / [`ops`] / [`params`] — a minimal dense f32 tensor kernel
//!   with explicit forward/backward passes for the fixed layer set used
//!   here (linear, 3x3 conv, relu/sigmoid, softmax cross-entropy, spatial
//!   mean) plus an Adam optimizer.
//! * [`gradcheck`] — central-difference verification of every backward
//!   pass against an f64 reference forward.
//! * [`rng`] — the splittable SplitMix64 generator all randomness flows
//!   through.
//! * [`stimuli`] — synthetic garment-glyph exemplars and search collages.
//! * [`gaze`] — simulated search fixations and fixation density maps.
//! * [`encoder`] — conv feature extractor, gaze pooling, class posterior,
//!   top-k pruning and session aggregation.
//! * [`cvae`] — category-conditioned VAE trained on the evidence lower
//!   bound, used to decode posteriors into images.
//! * [`stats`] — chi-square goodness of fit and confusion bookkeeping.
//!
//! Everything is deterministic: identical inputs (including seeds) produce
//! bitwise-identical outputs. Reductions run in fixed row-major order and
//! all transcendentals go through `libm`, so results do not depend on the
//! build host's libc.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cvae;
pub mod encoder;
pub mod error;
pub mod gaze;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod rng;
pub mod stats;
pub mod stimuli;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
