//! Small neural-network substrate: kernels, reverse-mode tape, layers, Adam.

pub mod layers;
pub mod ops;
pub mod params;
pub mod tape;

pub use layers::{Affine, Layer, LayerKind, LayerSpec, ResidualBlock, SelfAttention};
pub use ops::{conv2d_forward, dense_forward, relu_forward, self_attention_forward};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
