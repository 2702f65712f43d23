//! Similarity-aware contrastive losses for noisy image-text alignment.
//!
//! The crate provides InfoNCE, the similarity-aware SimCon loss, its two-view
//! extension with joint image positives, the stop-gradient view-consistency
//! loss and their sum, all with analytic gradients. Brute-force oracles,
//! finite-difference checks, toy encoders, a synthetic noisy-caption dataset
//! and a deterministic training harness sit around them.

pub mod cli;
pub mod config;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod numerics;
pub mod oracle;
pub mod oracle_diff;
pub mod report;
pub mod schedules;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
