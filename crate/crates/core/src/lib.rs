//! Spectral sensitivity maps and spectral adversarial data augmentation.

// Range checks are written as `!(x >= 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod consistency;
pub mod data;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod model;
pub mod plot;
pub mod sensitivity;
pub mod spectral;

pub use error::{Result, SadaError};
