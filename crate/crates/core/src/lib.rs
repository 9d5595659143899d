//! Joint image alignment and RAW-to-sRGB mapping under misaligned supervision.
//!
//! A pixel-wise global color mapper ([`gcm`]) turns the demosaicked raw frame
//! into a color-matched proxy of the target, an optical-flow stage
//! ([`flowalign`]) warps the misaligned target onto that proxy, and the warped
//! target (with its validity mask) supervises a wavelet U-Net
//! ([`backbone`]) through the losses in [`losses`]. [`rawdata`] provides the
//! raw data model and a synthetic misaligned-pair generator; [`metrics`] and
//! [`harness`] cover evaluation, training, ablations and checkpoints.

pub mod backbone;
pub mod error;
pub mod flowalign;
pub mod gcm;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod rawdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Image, Real, Tensor};
