//! Footprint-based credit assessment.
//!
//! Stage one learns credit-aware region embeddings with an attention-merged
//! multi-graph convolution ([`ren`]); stage two embeds each daily trajectory
//! with an attention-gated GRU and aggregates a user's trajectories into a
//! credit prediction ([`tcan`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod graphs;
pub mod mobility;
pub mod pipeline;
pub mod ren;
pub mod tcan;

pub use error::{Error, Result};
