//! Minimal dense network substrate shared by every learned component.

pub mod adam;
pub mod checkpoint;
pub mod dense;
pub mod gaussian;

pub use adam::AdamState;
pub use checkpoint::{Checkpoint, Tensor};
pub use dense::{Activation, DenseNet, ForwardCache, Gradients, Layer};
pub use gaussian::{gaussian_head, HeadMode, HeadSample};
