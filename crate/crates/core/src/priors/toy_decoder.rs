//! Small convolutional decoder trained as half of an autoencoder on the
//! synthetic dataset, optionally conditioned on a caption embedding.

use std::path::Path;

use featinv_tensor::module::{apply_norm_stats, load_state_dict, state_dict, visit_child, visit_child_mut};
use featinv_tensor::nn::{Conv2d, ConvTranspose2d, Linear, RELU_GAIN};
use featinv_tensor::optim::{Adam, StagedLr};
use featinv_tensor::{Ctx, Graph, Module, StateKind, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{normalize_var, GenerativePrior, HashTextEncoder, TextEncoder};
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::Blob;
use crate::splitnet::stack_images;

const SLOPE: f64 = 0.1;

/// Architecture knobs, stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderShape {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub width: usize,
    pub text_dim: usize,
}

impl Default for DecoderShape {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 8,
            width: 32,
            text_dim: 16,
        }
    }
}

/// Latent `[c, 8, 8]` to image `[3, 32, 32]`, sigmoid output.
#[derive(Clone, Debug)]
pub struct ToyDecoder {
    pub shape: DecoderShape,
    pub text: Linear,
    pub conv_in: Conv2d,
    pub up1: ConvTranspose2d,
    pub conv1: Conv2d,
    pub up2: ConvTranspose2d,
    pub conv2: Conv2d,
    pub conv_out: Conv2d,
}

impl ToyDecoder {
    pub fn new(rng: &mut impl Rng, shape: DecoderShape) -> Self {
        let w = shape.width;
        let h = w / 2;
        Self {
            text: Linear::new(rng, shape.text_dim.max(1), w, 1.0),
            conv_in: Conv2d::new(rng, shape.latent_channels, w, 3, 1, 1, true, RELU_GAIN),
            up1: ConvTranspose2d::new(rng, w, w, 4, 2, 1, true, RELU_GAIN),
            conv1: Conv2d::new(rng, w, h, 3, 1, 1, true, RELU_GAIN),
            up2: ConvTranspose2d::new(rng, h, h, 4, 2, 1, true, RELU_GAIN),
            conv2: Conv2d::new(rng, h, h, 3, 1, 1, true, RELU_GAIN),
            conv_out: Conv2d::new(rng, h, 3, 3, 1, 1, true, 1.0),
            shape,
        }
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        vec![self.shape.latent_channels, self.shape.latent_size, self.shape.latent_size]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [3, self.shape.latent_size * 4, self.shape.latent_size * 4]
    }

    pub fn forward<'g>(&self, ctx: &mut Ctx<'g>, z: Var<'g>, text: Option<Var<'g>>) -> Var<'g> {
        let mut h = self.conv_in.forward(ctx, z);
        if let Some(t) = text {
            h = h.add_sample_channel(self.text.forward(ctx, t));
        }
        let h = h.leaky_relu(SLOPE);
        let h = self.up1.forward(ctx, h).leaky_relu(SLOPE);
        let h = self.conv1.forward(ctx, h).leaky_relu(SLOPE);
        let h = self.up2.forward(ctx, h).leaky_relu(SLOPE);
        let h = self.conv2.forward(ctx, h).leaky_relu(SLOPE);
        self.conv_out.forward(ctx, h).sigmoid()
    }
}

impl Module for ToyDecoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        visit_child("text", &self.text, f);
        visit_child("conv_in", &self.conv_in, f);
        visit_child("up1", &self.up1, f);
        visit_child("conv1", &self.conv1, f);
        visit_child("up2", &self.up2, f);
        visit_child("conv2", &self.conv2, f);
        visit_child("conv_out", &self.conv_out, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        visit_child_mut("text", &mut self.text, f);
        visit_child_mut("conv_in", &mut self.conv_in, f);
        visit_child_mut("up1", &mut self.up1, f);
        visit_child_mut("conv1", &mut self.conv1, f);
        visit_child_mut("up2", &mut self.up2, f);
        visit_child_mut("conv2", &mut self.conv2, f);
        visit_child_mut("conv_out", &mut self.conv_out, f);
    }
}

/// Image `[3, 32, 32]` to a per-sample normalized latent.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    pub conv_out: Conv2d,
}

impl ToyEncoder {
    pub fn new(rng: &mut impl Rng, shape: &DecoderShape) -> Self {
        let w = shape.width;
        Self {
            conv1: Conv2d::new(rng, 3, w, 3, 2, 1, true, RELU_GAIN),
            conv2: Conv2d::new(rng, w, w, 3, 2, 1, true, RELU_GAIN),
            conv3: Conv2d::new(rng, w, w, 3, 1, 1, true, RELU_GAIN),
            conv_out: Conv2d::new(rng, w, shape.latent_channels, 3, 1, 1, true, 1.0),
        }
    }

    pub fn forward<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.conv1.forward(ctx, x.add_scalar(-0.5)).leaky_relu(SLOPE);
        let h = self.conv2.forward(ctx, h).leaky_relu(SLOPE);
        let h = self.conv3.forward(ctx, h).leaky_relu(SLOPE);
        normalize_var(self.conv_out.forward(ctx, h))
    }
}

impl Module for ToyEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        visit_child("conv1", &self.conv1, f);
        visit_child("conv2", &self.conv2, f);
        visit_child("conv3", &self.conv3, f);
        visit_child("conv_out", &self.conv_out, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        visit_child_mut("conv1", &mut self.conv1, f);
        visit_child_mut("conv2", &mut self.conv2, f);
        visit_child_mut("conv3", &mut self.conv3, f);
        visit_child_mut("conv_out", &mut self.conv_out, f);
    }
}

/// Encoder and decoder trained jointly.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub encoder: ToyEncoder,
    pub decoder: ToyDecoder,
}

impl Module for Autoencoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        visit_child("encoder", &self.encoder, f);
        visit_child("decoder", &self.decoder, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        visit_child_mut("encoder", &mut self.encoder, f);
        visit_child_mut("decoder", &mut self.decoder, f);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AutoencoderTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing a caption embedding by zeros.
    pub text_dropout: f64,
    /// Latents are mixed with standard normal noise as
    /// `sqrt(1 - s^2) * z + s * eps` before decoding, so the decoder also
    /// sees latents off the encoder's manifold.
    #[serde(default)]
    pub latent_noise: f64,
    pub seed: u64,
}

impl Autoencoder {
    pub fn new(seed: u64, shape: DecoderShape) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            encoder: ToyEncoder::new(&mut rng, &shape),
            decoder: ToyDecoder::new(&mut rng, shape),
        }
    }

    /// Mean-squared-error training; returns the mean loss per epoch.
    /// `progress` is called after every epoch.
    pub fn train(
        &mut self,
        data: &[LabeledImage],
        cfg: &AutoencoderTraining,
        mut progress: impl FnMut(usize, f64),
    ) -> Result<Vec<f64>> {
        let enc = HashTextEncoder::new(self.decoder.shape.text_dim);
        let captions: Vec<Vec<f64>> = data
            .iter()
            .map(|d| enc.embed(&d.caption).map(|e| e.values))
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(0.9, 0.999);
        let steps = cfg.epochs * data.len().div_ceil(cfg.batch_size);
        let sched = StagedLr::at_fractions(cfg.learning_rate, steps, &[0.6, 0.85], 0.3);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut history = Vec::new();
        let mut step = 0;
        let dim = self.decoder.shape.text_dim;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let images: Vec<Image> = chunk.iter().map(|&i| data[i].image.clone()).collect();
                let x = stack_images(&images, [3, 32, 32])?;
                let mut text = Vec::with_capacity(chunk.len() * dim);
                for &i in chunk {
                    if rng.random::<f64>() < cfg.text_dropout {
                        text.extend(std::iter::repeat_n(0.0, dim));
                    } else {
                        text.extend(&captions[i]);
                    }
                }
                let g = Graph::new();
                let mut ctx = Ctx::training(&g);
                let xv = g.constant(x);
                let mut z = self.encoder.forward(&mut ctx, xv);
                if cfg.latent_noise > 0.0 {
                    let n = z.value().numel();
                    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                    let s = cfg.latent_noise;
                    z = z.scale((1.0 - s * s).sqrt()).add(g.constant(Tensor::new(z.shape(), eps.into_iter().map(|e| e * s).collect())));
                }
                let t = g.constant(Tensor::new(vec![chunk.len(), dim], text));
                let y = self.decoder.forward(&mut ctx, z, Some(t));
                let loss = y.mse(xv);
                let v = loss.item();
                if !v.is_finite() {
                    return Err(Error::numeric("autoencoder loss diverged", Some(epoch)));
                }
                total += v * chunk.len() as f64;
                let grads = g.backward(loss);
                let pg = ctx.param_grads(self, &grads);
                let stats = ctx.take_norm_stats();
                adam.step_module(self, &pg, sched.rate(step));
                apply_norm_stats(self, &stats, 0.1);
                step += 1;
            }
            let mean = total / data.len() as f64;
            progress(epoch, mean);
            history.push(mean);
        }
        Ok(history)
    }

    /// Normalized latents for a batch of images.
    pub fn encode(&self, images: &[Image]) -> Result<Vec<Tensor>> {
        let x = stack_images(images, self.decoder.output_shape())?;
        let g = Graph::new();
        let mut ctx = Ctx::frozen(&g);
        Ok(self.encoder.forward(&mut ctx, g.constant(x)).to_tensor().unstack())
    }
}

/// [`ToyDecoder`] exposed as a generative prior.
#[derive(Clone, Debug)]
pub struct ToyDecoderPrior {
    decoder: ToyDecoder,
    latent: Vec<usize>,
    pub training_seed: u64,
}

impl ToyDecoderPrior {
    pub fn new(decoder: ToyDecoder, training_seed: u64) -> Self {
        Self {
            latent: decoder.latent_shape(),
            decoder,
            training_seed,
        }
    }

    pub fn decoder(&self) -> &ToyDecoder {
        &self.decoder
    }

    pub fn from_blob(blob: &Blob, origin: &Path) -> Result<Self> {
        let shape: DecoderShape = serde_json::from_value(blob.meta["decoder_shape"].clone())
            .map_err(|e| Error::format(origin, format!("decoder_shape: {e}")))?;
        let seed = blob.meta["training_seed"].as_u64().unwrap_or(0);
        let mut dec = ToyDecoder::new(&mut ChaCha8Rng::seed_from_u64(0), shape);
        load_state_dict(&mut dec, &blob.scoped("decoder")).map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(Self::new(dec, seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_blob(&Blob::load(path)?, path)
    }
}

/// Blob holding a trained autoencoder under `encoder.*` and `decoder.*`.
pub fn autoencoder_blob(ae: &Autoencoder, cfg: &AutoencoderTraining, extra: serde_json::Value) -> Blob {
    let mut tensors = Vec::new();
    for (n, t) in state_dict(&ae.encoder) {
        tensors.push((format!("encoder.{n}"), t));
    }
    for (n, t) in state_dict(&ae.decoder) {
        tensors.push((format!("decoder.{n}"), t));
    }
    let meta = serde_json::json!({
        "kind": "toy_autoencoder",
        "decoder_shape": ae.decoder.shape,
        "training_seed": cfg.seed,
        "training": cfg,
        "extra": extra,
    });
    Blob::with_tensors(tensors, meta)
}

pub fn autoencoder_from_blob(blob: &Blob, origin: &Path) -> Result<Autoencoder> {
    let prior = ToyDecoderPrior::from_blob(blob, origin)?;
    let shape = prior.decoder.shape.clone();
    let mut encoder = ToyEncoder::new(&mut ChaCha8Rng::seed_from_u64(0), &shape);
    load_state_dict(&mut encoder, &blob.scoped("encoder")).map_err(|e| Error::format(origin, e.to_string()))?;
    Ok(Autoencoder {
        encoder,
        decoder: prior.decoder,
    })
}

impl GenerativePrior for ToyDecoderPrior {
    fn name(&self) -> &str {
        "toy_decoder"
    }

    fn latent_shape(&self) -> &[usize] {
        &self.latent
    }

    fn output_shape(&self) -> [usize; 3] {
        self.decoder.output_shape()
    }

    fn supports_text(&self) -> bool {
        true
    }

    fn text_dim(&self) -> usize {
        self.decoder.shape.text_dim
    }

    fn pixel_range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn decode_var<'g>(&self, ctx: &mut Ctx<'g>, v: Var<'g>, text: Option<Var<'g>>) -> Var<'g> {
        self.decoder.forward(ctx, v, text)
    }
}
