//! Appearance-based gaze estimation: self-supervised local/global encoder
//! pretraining, patch-network fine-tuning with an explained-variance
//! weighted loss, and the evaluation protocols around them.

// Comparisons are written as `!(x > 0.0)` where NaN must be rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod plot;
pub mod pmn;
pub mod training;

pub use error::{Error, Result};
