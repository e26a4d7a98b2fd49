//! Minimal reverse-mode autodiff for 3D feature maps.

pub mod conv;
pub(crate) mod gemm;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;

pub use params::{ParamBuilder, ParamId, ParamKind, ParamStore};
pub use tape::{Gradients, Mode, NodeId, Tape};
