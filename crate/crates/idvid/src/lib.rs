//! Identity-preserving video diffusion at desk scale.
//!
//! A self-contained study rig: procedurally generated face videos, a small
//! video diffusion transformer, frequency-decomposed identity conditioning
//! (a coarse spatial pathway plus fine token-level injection), the training
//! recipe that makes the conditioning stick, spectral and identity metrics,
//! and a dataset curation pipeline. Everything runs on CPU with f64 math and
//! a bespoke reverse-mode tape; runs are bit-reproducible given a seed.

pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod curation;
pub mod diffusion;
pub mod error;
pub mod extractors;
pub mod generate;
pub mod gradcheck;
pub mod graph;
pub mod injection;
pub mod nn;
pub mod pretrain;
pub mod report;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use cli::cli_main;
pub use error::{IdvidError, Result};
