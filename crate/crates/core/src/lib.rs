//! Unsupervised foreground/background segmentation from a frozen
//! style-based generator.
//!
//! The generator is split into a foreground branch whose features feed a
//! small alpha network, and a background branch obtained by zeroing one
//! synthesis layer. The alpha network is trained adversarially against a
//! weak critic on composites of the two branches.

pub mod alpha;
pub mod autograd;
pub mod background;
pub mod critic;
pub mod dataset_eval;
pub mod error;
pub mod io;
pub mod layer_select;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod stylegen;
pub mod trainer;

pub use error::{Error, Result};
