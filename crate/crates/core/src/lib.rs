//! Multimodal conditional random fields with latent soft-correspondence
//! nodes.
//!
//! The crate covers the whole pipeline: building multimodal graphs and
//! inserting latent nodes on cross-modality links ([`graph`]), grounding
//! linear potentials ([`potentials`]), truncated tree-reweighted inference
//! with exact enumeration oracles ([`inference`]), clique-marginal loss
//! training ([`learning`]), synthetic scene generation ([`scene_sim`]),
//! text file formats ([`format`]), evaluation metrics ([`eval`]) and model
//! variants ([`preset`]).

pub mod error;
pub mod eval;
pub mod format;
pub mod graph;
pub mod inference;
pub mod learning;
pub mod matrix;
pub mod potentials;
pub mod preset;
pub mod scene_sim;

pub use error::{Error, Result};
