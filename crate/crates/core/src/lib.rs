//! Training engine for supervised contrastive parallel learning: a
//! tape-based f64 autodiff core, layer primitives, local contrastive
//! objectives, component-split networks with blocked inter-component
//! gradients, and sequential plus pipelined trainers with desk-scale data
//! tooling.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod optim;
pub mod scl;
mod seedmix;
pub mod tensor;
pub mod trainers;

pub use error::{Result, ScplError};
pub use tensor::{detach, Gradients, NodeId, Tape, Tensor};
