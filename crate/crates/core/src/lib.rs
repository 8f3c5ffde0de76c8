//! Background-aware, motion-guided object discovery on synthetic video.
//!
//! The crate is split along the data path:
//!
//! - [`scenegen`]: deterministic synthetic sequences with instance, motion and
//!   flow ground truth, plus the on-disk dataset format.
//! - [`motion_cues`]: moving-object masks from flow, label-noise injection,
//!   the top-tier filter and resizing to the attention grid.
//! - [`autograd`]: a small reverse-mode tape used by the model.
//! - [`model`]: convolutional encoder, convGRU, slot attention with a reserved
//!   background slot, and the broadcast decoder.
//! - [`objectives`]: Hungarian mask/slot matching and the training losses.
//! - [`metrics`]: ARI variants, Jaccard scores, background fallback.
//! - [`runner`]: configuration, training, evaluation and experiment suites.

pub mod autograd;
pub mod error;
pub mod metrics;
pub mod model;
pub mod motion_cues;
pub mod objectives;
pub mod runner;
pub mod scenegen;

pub use error::{Error, Result};
