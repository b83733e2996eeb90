//! Latent-diffusion adapter: deterministic DDIM-style reverse steps on a
//! beta schedule, followed by a latent-to-image decoder.
//!
//! No weights ship with the toolkit; the adapter loads a blob holding a
//! `denoiser.*` and a `decoder.*` state dict.

use std::fmt::Debug;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use featinv_tensor::module::{load_state_dict, state_dict, visit_child, visit_child_mut};
use featinv_tensor::nn::{Conv2d, Linear, RELU_GAIN};
use featinv_tensor::{Ctx, Module, StateKind, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::toy_decoder::{DecoderShape, ToyDecoder};
use super::GenerativePrior;
use crate::error::{Error, Result};
use crate::io::Blob;

pub const TRAIN_TIMESTEPS: usize = 1000;
const TIME_DIM: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    /// Betas evenly spaced in `[1e-4, 0.02]`.
    #[default]
    Linear,
    /// Square roots of the betas evenly spaced.
    ScaledLinear,
}

impl Scheduler {
    /// Cumulative products `alpha_bar_t` for `t = 0..TRAIN_TIMESTEPS`.
    pub fn alpha_bars(self) -> Vec<f64> {
        let (b0, b1) = (1e-4f64, 0.02f64);
        let n = TRAIN_TIMESTEPS;
        let mut acc = 1.0;
        (0..n)
            .map(|i| {
                let f = i as f64 / (n - 1) as f64;
                let beta = match self {
                    Scheduler::Linear => b0 + f * (b1 - b0),
                    Scheduler::ScaledLinear => (b0.sqrt() + f * (b1.sqrt() - b0.sqrt())).powi(2),
                };
                acc *= 1.0 - beta;
                acc
            })
            .collect()
    }
}

/// Descending timesteps visited by a `steps`-step sampler.
pub fn sampling_timesteps(steps: usize) -> Vec<usize> {
    let last = TRAIN_TIMESTEPS - 1;
    match steps {
        0 => Vec::new(),
        1 => vec![last],
        s => (0..s)
            .map(|i| ((last * (s - 1 - i)) as f64 / (s - 1) as f64).round() as usize)
            .collect(),
    }
}

/// Noise predictor `eps(z_t, t, e)`.
pub trait Denoiser: Module + Send + Sync + Debug {
    fn predict_noise<'g>(&self, ctx: &mut Ctx<'g>, z: Var<'g>, t: usize, text: Option<Var<'g>>) -> Var<'g>;
}

/// Two-layer convolutional noise predictor with time and text biases.
#[derive(Clone, Debug)]
pub struct ConvDenoiser {
    pub conv1: Conv2d,
    pub time: Linear,
    pub text: Linear,
    pub conv2: Conv2d,
    pub conv_out: Conv2d,
}

impl ConvDenoiser {
    pub fn new(seed: u64, channels: usize, width: usize, text_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            conv1: Conv2d::new(&mut rng, channels, width, 3, 1, 1, true, RELU_GAIN),
            time: Linear::new(&mut rng, TIME_DIM, width, 1.0),
            text: Linear::new(&mut rng, text_dim.max(1), width, 1.0),
            conv2: Conv2d::new(&mut rng, width, width, 3, 1, 1, true, RELU_GAIN),
            conv_out: Conv2d::new(&mut rng, width, channels, 3, 1, 1, true, 0.1),
        }
    }

    fn width(&self) -> usize {
        self.conv1.out_channels()
    }

    fn time_embedding(t: usize) -> Tensor {
        Tensor::from_fn(vec![1, TIME_DIM], |i| {
            let freq = 1.0 / 10_000f64.powf((i / 2) as f64 / (TIME_DIM / 2) as f64);
            let a = t as f64 * freq;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
    }
}

impl Module for ConvDenoiser {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        visit_child("conv1", &self.conv1, f);
        visit_child("time", &self.time, f);
        visit_child("text", &self.text, f);
        visit_child("conv2", &self.conv2, f);
        visit_child("conv_out", &self.conv_out, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        visit_child_mut("conv1", &mut self.conv1, f);
        visit_child_mut("time", &mut self.time, f);
        visit_child_mut("text", &mut self.text, f);
        visit_child_mut("conv2", &mut self.conv2, f);
        visit_child_mut("conv_out", &mut self.conv_out, f);
    }
}

impl Denoiser for ConvDenoiser {
    fn predict_noise<'g>(&self, ctx: &mut Ctx<'g>, z: Var<'g>, t: usize, text: Option<Var<'g>>) -> Var<'g> {
        let temb = ctx.constant(Self::time_embedding(t));
        let tb = self.time.forward(ctx, temb).reshape(vec![self.width()]);
        let mut h = self.conv1.forward(ctx, z).add_channel(tb);
        if let Some(e) = text {
            h = h.add_sample_channel(self.text.forward(ctx, e));
        }
        let h = h.relu();
        let h = self.conv2.forward(ctx, h).relu();
        self.conv_out.forward(ctx, h)
    }
}

/// Diffusion-style prior: `v_n` is treated as `z_T` and denoised in
/// `sampling_steps` deterministic steps before decoding.
#[derive(Debug)]
pub struct LdmAdapter {
    denoiser: Box<dyn Denoiser>,
    decoder: ToyDecoder,
    latent: Vec<usize>,
    steps: usize,
    guidance_scale: f64,
    scheduler: Scheduler,
    alpha_bars: Vec<f64>,
    executed: AtomicUsize,
}

impl LdmAdapter {
    pub fn new(
        denoiser: Box<dyn Denoiser>,
        decoder: ToyDecoder,
        steps: usize,
        guidance_scale: f64,
        scheduler: Scheduler,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("prior.sampling_steps", "must be at least 1"));
        }
        if !guidance_scale.is_finite() || guidance_scale < 0.0 {
            return Err(Error::config("prior.guidance_scale", "must be finite and non-negative"));
        }
        Ok(Self {
            latent: decoder.latent_shape(),
            denoiser,
            decoder,
            steps,
            guidance_scale,
            scheduler,
            alpha_bars: scheduler.alpha_bars(),
            executed: AtomicUsize::new(0),
        })
    }

    /// Randomly initialized adapter, for plumbing and tests.
    pub fn untrained(seed: u64, steps: usize) -> Result<Self> {
        let shape = DecoderShape::default();
        let den = ConvDenoiser::new(seed, shape.latent_channels, 16, shape.text_dim);
        let dec = ToyDecoder::new(&mut ChaCha8Rng::seed_from_u64(seed + 1), shape);
        Self::new(Box::new(den), dec, steps, 1.0, Scheduler::Linear)
    }

    pub fn load(path: &Path, steps: usize, guidance_scale: f64, scheduler: Scheduler) -> Result<Self> {
        let blob = Blob::load(path)?;
        if blob.meta["kind"] != "ldm_adapter" {
            return Err(Error::format(path, "not an ldm_adapter blob"));
        }
        let shape: DecoderShape = serde_json::from_value(blob.meta["decoder_shape"].clone())
            .map_err(|e| Error::format(path, format!("decoder_shape: {e}")))?;
        let width = blob.meta["denoiser_width"]
            .as_u64()
            .ok_or_else(|| Error::format(path, "missing denoiser_width"))? as usize;
        let mut den = ConvDenoiser::new(0, shape.latent_channels, width, shape.text_dim);
        let mut dec = ToyDecoder::new(&mut ChaCha8Rng::seed_from_u64(0), shape);
        load_state_dict(&mut den, &blob.scoped("denoiser")).map_err(|e| Error::format(path, e.to_string()))?;
        load_state_dict(&mut dec, &blob.scoped("decoder")).map_err(|e| Error::format(path, e.to_string()))?;
        Self::new(Box::new(den), dec, steps, guidance_scale, scheduler)
    }

    /// Serialize a convolutional denoiser and decoder in the format
    /// [`LdmAdapter::load`] reads.
    pub fn save_parts(den: &ConvDenoiser, dec: &ToyDecoder, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (n, t) in state_dict(den) {
            tensors.push((format!("denoiser.{n}"), t));
        }
        for (n, t) in state_dict(dec) {
            tensors.push((format!("decoder.{n}"), t));
        }
        let meta = serde_json::json!({
            "kind": "ldm_adapter",
            "decoder_shape": dec.shape,
            "denoiser_width": den.width(),
        });
        Blob::with_tensors(tensors, meta).save(path)
    }

    pub fn guidance_scale(&self) -> f64 {
        self.guidance_scale
    }

    pub fn scheduler(&self) -> Scheduler {
        self.scheduler
    }

    /// Reverse steps run since construction or the last reset.
    pub fn reverse_steps_executed(&self) -> usize {
        self.executed.load(Ordering::Relaxed)
    }

    pub fn reset_step_counter(&self) {
        self.executed.store(0, Ordering::Relaxed);
    }

    fn eps<'g>(&self, ctx: &mut Ctx<'g>, z: Var<'g>, t: usize, text: Option<Var<'g>>) -> Var<'g> {
        let cond = self.denoiser.predict_noise(ctx, z, t, text);
        match text {
            Some(e) if self.guidance_scale != 1.0 => {
                let zero = ctx.constant(Tensor::zeros(e.shape()));
                let uncond = self.denoiser.predict_noise(ctx, z, t, Some(zero));
                uncond.add(cond.sub(uncond).scale(self.guidance_scale))
            }
            _ => cond,
        }
    }
}

impl GenerativePrior for LdmAdapter {
    fn name(&self) -> &str {
        "ldm_adapter"
    }

    fn latent_shape(&self) -> &[usize] {
        &self.latent
    }

    fn output_shape(&self) -> [usize; 3] {
        self.decoder.output_shape()
    }

    fn sampling_steps(&self) -> usize {
        self.steps
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
        let ts = sampling_timesteps(self.steps);
        let mut z = v;
        for (i, &t) in ts.iter().enumerate() {
            let a_t = self.alpha_bars[t];
            let a_prev = ts.get(i + 1).map_or(1.0, |&p| self.alpha_bars[p]);
            let eps = self.eps(ctx, z, t, text);
            let x0 = z.sub(eps.scale((1.0 - a_t).sqrt())).scale(1.0 / a_t.sqrt());
            z = x0.scale(a_prev.sqrt()).add(eps.scale((1.0 - a_prev).sqrt()));
            self.executed.fetch_add(1, Ordering::Relaxed);
        }
        self.decoder.forward(ctx, z, text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_grid() {
        assert_eq!(sampling_timesteps(1), vec![999]);
        let t = sampling_timesteps(20);
        assert_eq!(t.len(), 20);
        assert_eq!((t[0], t[19]), (999, 0));
        assert!(t.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn alpha_bars_decrease() {
        for s in [Scheduler::Linear, Scheduler::ScaledLinear] {
            let a = s.alpha_bars();
            assert!(a.windows(2).all(|w| w[1] < w[0]));
            assert!(a[0] < 1.0 && a[999] > 0.0);
        }
    }
}
