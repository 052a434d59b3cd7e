//! Text-guided shifted-window U-Net for binary segmentation, built on a
//! small define-by-run autodiff engine.

pub mod augment;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
mod binio;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod swin;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;
pub mod verify;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::{Init, ParamStore};
pub use tensor::{Real, Tensor};
