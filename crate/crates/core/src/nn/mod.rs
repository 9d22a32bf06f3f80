//! Minimal dense network stack: tensors, a reverse-mode tape, a U-Net and Adam.

mod adam;
mod graph;
mod kernels;
mod params;
mod tensor;
mod unet;

pub use adam::Adam;
pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
pub use unet::{timestep_embedding, UNet, UNetConfig};
