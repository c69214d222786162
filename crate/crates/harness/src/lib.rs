//! Synthetic corpus, toy model training, experiment drivers and the `rico`
//! command line.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod train;
pub mod vocab;

pub use error::{HarnessError, Result};
