//! Factorized implicit global convolution networks for surface-pressure and
//! drag-coefficient regression on 3D geometries.

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod figconv;
pub mod grid;
pub mod nn;
pub mod pointconv;
pub mod spatial;
pub mod train;
pub mod unet;
pub mod verify;

pub use error::{Error, Result};
