//! Prostate mpMRI slice triage.
//!
//! Preprocesses co-registered T2/ADC volumes, crops peripheral-zone and
//! central-gland regions with a sequence-wide bounding box, builds 2.5D
//! paired samples, trains one convolutional detector per zone under a bounded
//! Bayesian search, and ranks and explains the slices of unseen sequences.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod roi;
pub mod search;
pub mod selftest;
pub mod triage;
pub mod volume;

pub use error::{Error, Result};
