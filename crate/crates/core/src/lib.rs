//! Fuzzy set embeddings for taxonomy expansion.
//!
//! Concepts are mapped to membership vectors over a fixed partition of a
//! latent universe. Set operations act elementwise under a t-norm, and the
//! weighted "volume" of a set gives both a membership score and an
//! asymmetric containment probability used to rank candidate parents.

pub mod algebra;
pub mod approx;
pub mod checkpoint;
pub mod evaluator;
pub mod gradcheck;
pub mod mapper;
pub mod model;
pub mod objectives;
pub mod taxonomy;
pub mod trainer;
