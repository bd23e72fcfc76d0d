//! Domain-aware sharpness minimization.
//!
//! A two-pass sharpness-aware optimizer whose objective adds a domain-supervised
//! contrastive term and an adaptive domain-gap term to cross-entropy, plus the
//! pieces needed to study it at desk scale: a small reverse-mode autodiff
//! engine, an MLP encoder/classifier, synthetic multi-domain cover/stego
//! benchmarks, loss-geometry diagnostics and an experiment harness.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gap;
pub mod harness;
pub mod losses;
pub mod model;
pub mod optim;
pub mod par;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
