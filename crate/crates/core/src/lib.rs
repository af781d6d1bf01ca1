//! Commonsense knowledge graph completion.
//!
//! The pipeline pretrains a phrase encoder contrastively on graph edges,
//! clusters the resulting semantic vectors into latent concepts, encodes
//! graph structure with a GCN, fuses the three views into node embeddings
//! and ranks candidate tails with a convolutional 1-vs-N decoder.

pub mod checkpoint;
pub mod clustering;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gcn;
pub mod gradcheck;
pub mod kg;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, Result};
