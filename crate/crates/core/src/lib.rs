//! Scene graph generation at desk scale: a transformer encoder-decoder that
//! contextualizes detected objects (node-to-node attention), accumulates node
//! context into candidate edges (edge-to-node cross-attention with an
//! interleaved edge positional encoding), and classifies directed relations,
//! together with a synthetic planted-rule dataset, an SGD training loop and
//! the standard recall@K evaluation protocol.

pub mod ablate;
pub mod autodiff;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod freq;
pub mod embed;
pub mod geometry;
pub mod matrix;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
