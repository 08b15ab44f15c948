//! Minimal differentiable dense-array engine.
//!
//! Supports reverse-mode parameter gradients over an eager tape,
//! forward-mode input-direction derivatives ([`Dual`]), and their
//! composition: a forward tangent is built out of ordinary tape operations,
//! so it can appear inside a scalar loss whose parameter gradient is then
//! requested. Everything is f64 and deterministic.

pub mod adam;
pub mod checkpoint;
pub mod dual;
pub mod error;
pub mod graph;
pub mod init;
pub mod tensor;

pub use adam::AdamState;
pub use checkpoint::Checkpoint;
pub use dual::{forward_jvp, Dual};
pub use error::{AdError, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
