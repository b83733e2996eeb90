//! Feature-inversion attacks on split neural networks.

pub mod assets;
pub mod blackbox;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod image;
pub mod io;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod priors;
pub mod runner;
pub mod splitnet;
pub mod whitebox;

pub use error::{Error, Result};
pub use image::Image;
