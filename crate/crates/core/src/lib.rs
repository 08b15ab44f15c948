//! Autoregressive neural implicit-surface body model.
//!
//! Pipeline: encode an implicit surface as signed heights over articulated
//! observer points, render the shape/pose history into UV space, run a
//! convolutional encoder to per-vertex dynamic features, decode signed
//! distances with a k-NN pooling network, train directly from oriented point
//! clouds with implicit geometric regularization, and evaluate with an
//! autoregressive rollout protocol.

pub mod error;
pub mod heights;
pub mod knn;
pub mod math;
pub mod pose;
pub mod scan_io;
pub mod skinning;
pub mod synth;
pub mod template;
pub mod uv;

pub use error::{CoreError, Result};
