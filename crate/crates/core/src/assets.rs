//! Weights bundled with the library.
//!
//! Both files come from `cargo run --release --example train_assets`.

use std::path::Path;

use crate::error::Result;
use crate::io::Blob;
use crate::priors::toy_decoder::{autoencoder_from_blob, Autoencoder};
use crate::priors::ToyDecoderPrior;
use crate::splitnet::zoo::{load_weights, toy_cnn as toy_cnn_arch};
use crate::splitnet::TargetModel;

const TOY_CNN: &[u8] = include_bytes!("../assets/toy_cnn.finv");
const TOY_AUTOENCODER: &[u8] = include_bytes!("../assets/toy_autoencoder.finv");

const TOY_CNN_ORIGIN: &str = "<bundled>/toy_cnn.finv";
const TOY_AUTOENCODER_ORIGIN: &str = "<bundled>/toy_autoencoder.finv";

fn blob(bytes: &[u8], origin: &str) -> Result<Blob> {
    Blob::from_bytes(bytes, Path::new(origin))
}

/// The toy CNN with its trained weights.
pub fn toy_cnn() -> Result<TargetModel> {
    let mut model = toy_cnn_arch(0);
    load_weights(&mut model, &blob(TOY_CNN, TOY_CNN_ORIGIN)?, Path::new(TOY_CNN_ORIGIN))?;
    Ok(model)
}

/// Metadata stored next to the bundled classifier weights.
pub fn toy_cnn_meta() -> Result<serde_json::Value> {
    Ok(blob(TOY_CNN, TOY_CNN_ORIGIN)?.meta)
}

/// Decoder half of the bundled autoencoder.
pub fn toy_decoder_prior() -> Result<ToyDecoderPrior> {
    ToyDecoderPrior::from_blob(&blob(TOY_AUTOENCODER, TOY_AUTOENCODER_ORIGIN)?, Path::new(TOY_AUTOENCODER_ORIGIN))
}

/// Encoder and decoder of the bundled autoencoder.
pub fn toy_autoencoder() -> Result<Autoencoder> {
    autoencoder_from_blob(&blob(TOY_AUTOENCODER, TOY_AUTOENCODER_ORIGIN)?, Path::new(TOY_AUTOENCODER_ORIGIN))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_weights_load() {
        let m = toy_cnn().unwrap();
        assert_eq!(m.output_shape(), vec![10]);
        assert!(toy_cnn_meta().unwrap()["heldout_accuracy"].as_f64().unwrap() > 0.8);
        toy_decoder_prior().unwrap();
        toy_autoencoder().unwrap();
    }
}
