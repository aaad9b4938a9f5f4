//! Exact small-scale deep RBM stacks analysed as renormalization-group
//! flows, and the output-poisoning defence against model cloning that the
//! analysis suggests.
//!
//! Everything is computed by enumeration over at most 16 binary nodes, so
//! every probability, coupling and Fisher matrix is exact up to floating
//! point and finite-difference error.

pub mod artifact;
pub mod cli;
pub mod clone;
pub mod dataset;
pub mod error;
pub mod fim;
pub mod flow;
pub mod model;
pub mod pipeline;
pub mod provenance;
pub mod rbm;
pub mod stability;
pub mod state;
pub mod train;

pub use error::{Error, Result};
