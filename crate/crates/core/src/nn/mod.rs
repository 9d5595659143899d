//! Minimal neural-network toolkit: tape autograd, convolution, layers,
//! parameter storage and the Adam optimizer.

pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;

pub use conv::ConvGeom;
pub use layers::NormMode;
pub use params::{Adam, AdamConfig, Bound, ParamStore};
pub use tape::{Gradients, Tape, Var};
