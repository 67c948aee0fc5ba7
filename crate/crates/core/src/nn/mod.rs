//! Neural building blocks on top of candle tensors.

pub mod layers;
pub mod params;
pub mod swin;

pub use params::{Init, ParamBuilder, ParamStore};
