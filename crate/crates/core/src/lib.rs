//! Differentiable Gaussian splatting in which every primitive carries its own
//! underwater medium parameters (attenuation, backscatter, veiling light).
//!
//! A scene renders through two branches: the water branch applies the image
//! formation model per primitive, the clear branch uses the base colors alone.

pub mod diff;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optics;
pub mod optimizer;
pub mod raster;
pub mod scene;
pub mod ssim;
pub mod synth;

pub use error::{Error, Result};
