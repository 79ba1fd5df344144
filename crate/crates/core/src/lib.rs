//! Protein crystallization image triage: corpus handling, augmentation,
//! CNN training and evaluation, and the triage service.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod labels;
pub mod nn;
pub mod preprocess;
pub mod seed;
pub mod synthgen;
pub mod trainer;
pub mod triage;
pub mod zoo;

pub use error::{Error, Result};
pub use labels::{ClassLabel, NUM_CLASSES};
