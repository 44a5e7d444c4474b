//! Focus analysis and hard-negative tooling for composed image retrieval.
//!
//! A composed query pairs a reference image with a modification text. The
//! [`refinement`] engine prunes query tokens while the retrieval result is
//! unchanged, and [`metrics`] turns the surviving tokens into per-modality
//! focus ratios. [`augment`] builds hard-negative pools, and [`synthworld`]
//! is a small closed-form training world that exercises the losses end to end.

pub mod augment;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod protocol;
pub mod refinement;
pub mod scoring;
pub mod synthworld;
pub mod types;

pub use error::{Error, Result};
