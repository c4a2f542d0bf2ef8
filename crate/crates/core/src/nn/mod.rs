//! Network architecture documents and a small dense/conv1d/relu network with
//! exact reverse-mode gradients and an Adam optimiser.

mod adam;
mod arch;
mod network;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use arch::{
    propagate_shapes, validate_architecture, validate_dims, validate_structure, ModuleSpec,
    NetworkArchitectureSpec, Shape,
};
pub use network::{Gradients, NetworkInstance, Tape};
