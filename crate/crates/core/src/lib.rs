//! Source-free adaptation of a desk-view segmentation model to panoramic images.

pub mod config;
pub mod cram;
mod error;
pub mod eval;
pub mod io;
pub mod optim;
pub mod panosynth;
pub mod pcgd;
pub mod params;
pub mod segnet;
pub mod trainer;

pub use error::{Error, Result};
