//! Contrastive audio-text joint embedding core.
//!
//! Everything in this crate is pure computation over in-memory data: the
//! log-mel front end, the desk-scale encoders, the projection model with its
//! symmetric contrastive loss and analytic gradients, the Adam training loop,
//! and the retrieval metrics. Filesystem access, file formats and the CLI live
//! in the `jointspace` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod dataset;
pub mod dsp;
pub mod encoders;
pub mod error;
pub mod jointspace;
pub mod linalg;
pub mod retrieval;
pub mod rng;
pub mod stopwords;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use linalg::Matrix;
