//! Continuous learning for drift-prone binary classification.
//!
//! The crate bundles a hierarchical contrastive encoder-classifier ([`hcc`]),
//! uncertainty scorers that pick samples for an analyst to label
//! ([`selectors`], [`svmconf`]), and a monthly active-learning harness
//! ([`harness`]) that runs them over time-ordered sample streams
//! ([`dataset`]).

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod hcc;
pub mod mlp;
pub mod ndcore;
pub mod par;
pub mod seed;
pub mod selectors;
pub mod svmconf;

pub use error::{Error, Result};
pub use par::Exec;
