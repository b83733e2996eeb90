//! Train the weights bundled in `assets/`.
//!
//! cargo run --release --example train_assets -- <out-dir> [quick] [autoencoder-only]

use std::path::{Path, PathBuf};
use std::time::Instant;

use featinv_core::data::synthetic_dataset;
use featinv_core::metrics::psnr;
use featinv_core::priors::toy_decoder::{autoencoder_blob, Autoencoder, AutoencoderTraining, DecoderShape};
use featinv_core::priors::{decode_batch, LatentVariable, TextEmbedding, ToyDecoderPrior};
use featinv_core::splitnet::zoo::{self, ClassifierTraining};

fn main() -> featinv_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("assets"));
    let quick = args.iter().any(|a| a == "quick");
    let ae_only = args.iter().any(|a| a == "autoencoder-only");
    std::fs::create_dir_all(&out).unwrap();

    let (n_cls, cls_epochs, n_ae, ae_epochs) = if quick { (400, 1, 200, 1) } else { (4000, 12, 4000, 30) };

    if !ae_only {
        train_classifier(&out, n_cls, cls_epochs)?;
    }

    let t = Instant::now();
    let train = synthetic_dataset(n_ae, 3000);
    let held = synthetic_dataset(200, 4000);
    let shape = DecoderShape::default();
    let mut ae = Autoencoder::new(7, shape);
    let cfg = AutoencoderTraining {
        epochs: ae_epochs,
        batch_size: 32,
        learning_rate: 2e-3,
        text_dropout: 0.5,
        latent_noise: 0.5,
        seed: 7,
    };
    ae.train(&train, &cfg, |e, l| {
        eprintln!("  ae epoch {e}: mse {l:.5} ({:.1?})", t.elapsed())
    })?;
    let images: Vec<_> = held.iter().map(|d| d.image.clone()).collect();
    let latents: Vec<LatentVariable> = ae.encode(&images)?.into_iter().map(LatentVariable::new).collect();
    let prior = ToyDecoderPrior::new(ae.decoder.clone(), cfg.seed);
    let recon = decode_batch(&prior, &latents, &TextEmbedding::zeros(shape_dim(&prior)))?;
    let mean_psnr = images.iter().zip(&recon).map(|(a, b)| psnr(a, b).unwrap()).sum::<f64>() / images.len() as f64;
    eprintln!("autoencoder: held-out PSNR {mean_psnr:.2} dB in {:.1?}", t.elapsed());
    autoencoder_blob(&ae, &cfg, serde_json::json!({"train_seed": 3000, "heldout_psnr": mean_psnr}))
        .save(&out.join("toy_autoencoder.finv"))?;
    Ok(())
}

fn train_classifier(out: &Path, n: usize, epochs: usize) -> featinv_core::Result<()> {
    let t = Instant::now();
    let train = synthetic_dataset(n, 1000);
    let test = synthetic_dataset(500, 2000);
    let mut cnn = zoo::toy_cnn(0);
    let cfg = ClassifierTraining {
        epochs,
        batch_size: 32,
        learning_rate: 2e-3,
        seed: 1,
    };
    let hist = zoo::train_classifier(&mut cnn, &train, &cfg)?;
    let acc = zoo::accuracy(&cnn, &test)?;
    eprintln!("classifier: losses {hist:?} held-out accuracy {acc:.3} in {:.1?}", t.elapsed());
    zoo::save_weights(
        &cnn,
        &out.join("toy_cnn.finv"),
        serde_json::json!({"model": "toy_cnn", "train_seed": 1000, "epochs": cfg.epochs, "heldout_accuracy": acc}),
    )
}

fn shape_dim(p: &ToyDecoderPrior) -> usize {
    use featinv_core::priors::GenerativePrior;
    p.text_dim()
}
