//! Staged text-to-image GAN on synthetic captioned shapes, with a
//! captioner-encoder perceptual loss on the first stage.

pub mod captioner;
pub mod condaug;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod stages;
pub mod textenc;
pub mod train_util;

pub use error::{Error, Result};
