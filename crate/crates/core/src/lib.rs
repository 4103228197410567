//! Desk-scale simulator of federated unsupervised domain adaptation for face
//! recognition on synthetic data.
//!
//! Target clients get pseudo labels by thresholded first-neighbor clustering
//! of pre-trained embeddings. Federated rounds then average backbones only,
//! with a proximal term pulling the source client toward the global model.

// `!(x > 0.0)` guards reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod pseudo;
pub mod rng;

pub use error::{Error, Result};
