//! Dense N-dimensional tensors with a tape-based reverse-mode autodiff.
//!
//! The engine covers exactly what a small 3-D convolutional registration
//! network needs: 3-D convolution, fully connected layers, global average
//! pooling, a handful of elementwise ops with channel/spatial broadcasting,
//! channel concatenation and an L1 loss. Parameters live in a
//! [`ParamStore`] and are updated with [`adam_step`].
//!
//! Feature maps use a batch × channel × depth × height × width layout with
//! the width (x) axis fastest.

mod adam;
mod checkpoint;
mod element;
mod error;
pub mod kernels;
mod param;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointEntry, CheckpointIndex};
pub use element::Element;
pub use error::{Result, TensorError};
pub use kernels::Broadcast;
pub use param::{AdamState, Bound, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
