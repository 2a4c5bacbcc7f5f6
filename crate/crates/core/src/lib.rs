// SPDX-License-Identifier: MIT OR Apache-2.0

//! # langsteer
//!
//! Inference-time language control for decoder-only language models.
//!
//! The pipeline has four stages:
//!
//! 1. **Extraction** ([`extraction`]): run a model through the
//!    [`ModelAdapter`](extraction::ModelAdapter) contract and mean-pool the
//!    block outputs of one layer into one vector per sentence.
//! 2. **Projection** ([`lda`]): fit an SVD-solver linear discriminant
//!    analysis over the pooled states and train a single linear layer on the
//!    projected space.
//! 3. **Language vectors** ([`langvec`]): threshold the probe weights into
//!    per-language active dimensions, average the projected states over those
//!    dimensions and map the result back to the hidden space with the
//!    pseudo-inverse of the projection. Everything lands in a
//!    [`SteeringPack`](langvec::SteeringPack).
//! 4. **Steering** ([`steer`]): add `alpha * delta` to the middle-layer hidden
//!    state of the covered positions while decoding.
//!
//! [`probes`] and [`confusion`] hold the analysis side: cross-lingual
//! alignment, KNN / linear-probe language identification and the line- and
//! word-level pass rates used to score language confusion.
//!
//! A deterministic 4-block transformer ([`extraction::tinylm`]) ships with
//! the crate so every stage runs at desk scale.
//!
//! ## Features
//!
//! - `parallel` (default): data-parallel loops run on rayon. Without it, the
//!   same code paths run sequentially and produce identical results.

pub mod confusion;
pub mod error;
pub mod exec;
pub mod extraction;
pub mod langvec;
pub mod lda;
pub mod numkit;
pub mod probes;
pub mod steer;

pub use error::{Error, Result};
pub use exec::Exec;
