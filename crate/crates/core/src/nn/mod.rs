//! Layers, parameter storage and optimization on top of [`crate::tensor`].

mod layers;
mod optim;
mod params;
mod transformer;

pub use layers::{BatchNorm, Conv3d, LayerNorm, Linear};
#[cfg(test)]
pub(crate) use layers::normal_tensor;
pub use optim::Adam;
pub use params::{Ctx, ParamId, ParamStore};
pub use transformer::{BertConfig, BertEncoder, EncoderOutput};
