//! Dense tensor arithmetic, tape-based reverse-mode gradients for small
//! feed-forward networks, and the Adam optimizer.

pub mod adam;
pub mod net;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use net::{Activation, FeedForwardNet, NetVars};
pub use tape::{Tape, VarId};
pub use tensor::Tensor;
