//! Minimal dense tensor engine with reverse-mode differentiation, the
//! training losses, the Adam optimizer, and checkpoint I/O.
//!
//! Training and inference run in `f32`; gradient checks instantiate the
//! same graphs in `f64` against central finite differences.

mod adam;
pub mod gradcheck;
mod params;
mod tensor;

pub use adam::Adam;
pub use params::{LeafSet, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tensor::{Gradients, Scalar, Tape, Tensor};
