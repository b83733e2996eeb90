//! Differentiable generative priors `D(v_n, e)`, latent normalization and
//! text embeddings.

mod identity;
pub mod ldm;
pub mod toy_decoder;

use std::path::PathBuf;
use std::sync::Arc;

use featinv_tensor::{Ctx, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
pub use identity::IdentityPrior;
pub use ldm::{LdmAdapter, Scheduler};
pub use toy_decoder::ToyDecoderPrior;

/// Smallest population standard deviation a latent may have before
/// normalization is refused.
pub const MIN_LATENT_STD: f64 = 1e-12;

/// The optimization variable fed to a prior.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVariable {
    pub values: Tensor,
    pub requires_grad: bool,
}

impl LatentVariable {
    pub fn new(values: Tensor) -> Self {
        Self {
            values,
            requires_grad: true,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

pub fn population_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// `(v - mean) / std` with the population standard deviation.
pub fn normalize_latent(v: &LatentVariable) -> Result<LatentVariable> {
    if !v.values.is_finite() {
        return Err(Error::numeric("latent has non-finite entries", None));
    }
    let std = population_std(v.values.data());
    if std.is_nan() || std <= MIN_LATENT_STD {
        return Err(Error::DegenerateLatent { std });
    }
    let g = Graph::new();
    let shape = v.values.shape().to_vec();
    let batched = v.values.clone().reshape(vec![1, v.values.numel()]);
    let out = normalize_var(g.constant(batched)).to_tensor().reshape(shape);
    Ok(LatentVariable {
        values: out,
        requires_grad: v.requires_grad,
    })
}

/// Differentiable per-sample normalization of a batched latent `[N, ...]`.
pub fn normalize_var<'g>(v: Var<'g>) -> Var<'g> {
    let shape = v.shape();
    let n = shape[0];
    let d: usize = shape[1..].iter().product();
    v.reshape(vec![n, d]).standardize_last(0.0).reshape(shape)
}

/// `E(t)`; the all-zero vector stands for "no prompt".
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub values: Vec<f64>,
    pub source_text: Option<String>,
}

impl TextEmbedding {
    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            source_text: None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Trim and lowercase; prompts differing only in case or surrounding
/// whitespace share an embedding.
pub fn canonicalize_text(t: &str) -> String {
    t.trim().to_lowercase()
}

pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, t: &str) -> Result<TextEmbedding>;
}

/// Bag-of-words encoder: each whitespace token hashes to a fixed
/// pseudo-random vector, the prompt embedding is their normalized mean.
#[derive(Clone, Debug)]
pub struct HashTextEncoder {
    dim: usize,
}

impl HashTextEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "text embedding dimension must be positive");
        Self { dim }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        let mut block = 0u32;
        while out.len() < self.dim {
            let digest = Sha256::new()
                .chain_update(token.as_bytes())
                .chain_update(block.to_le_bytes())
                .finalize();
            for pair in digest.chunks(2) {
                if out.len() == self.dim {
                    break;
                }
                let u = u16::from_le_bytes([pair[0], pair[1]]) as f64 / 65535.0;
                out.push(2.0 * u - 1.0);
            }
            block += 1;
        }
        out
    }
}

impl TextEncoder for HashTextEncoder {
    fn name(&self) -> &str {
        "hash_bow"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, t: &str) -> Result<TextEmbedding> {
        let canon = canonicalize_text(t);
        if canon.is_empty() {
            return Ok(TextEmbedding::zeros(self.dim));
        }
        let mut acc = vec![0.0; self.dim];
        let tokens: Vec<&str> = canon.split_whitespace().collect();
        for tok in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(tok)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(TextEmbedding {
            values: acc,
            source_text: Some(canon),
        })
    }
}

/// Stand-in for a missing encoder: only the empty prompt is accepted.
#[derive(Clone, Debug)]
pub struct UnavailableTextEncoder;

impl TextEncoder for UnavailableTextEncoder {
    fn name(&self) -> &str {
        "unavailable"
    }

    fn dim(&self) -> usize {
        0
    }

    fn embed(&self, t: &str) -> Result<TextEmbedding> {
        if canonicalize_text(t).is_empty() {
            Ok(TextEmbedding::zeros(0))
        } else {
            Err(Error::capability("no text encoder is available for this prior"))
        }
    }
}

pub fn embed_text(encoder: &dyn TextEncoder, t: &str) -> Result<TextEmbedding> {
    encoder.embed(t)
}

/// The encoder a prior was trained with.
pub fn text_encoder_for(prior: &dyn GenerativePrior) -> Box<dyn TextEncoder> {
    if prior.supports_text() {
        Box::new(HashTextEncoder::new(prior.text_dim()))
    } else {
        Box::new(UnavailableTextEncoder)
    }
}

/// A differentiable decoder from normalized latents to images.
pub trait GenerativePrior: Send + Sync {
    fn name(&self) -> &str;
    fn latent_shape(&self) -> &[usize];
    fn output_shape(&self) -> [usize; 3];
    /// Reverse diffusion steps per decode; zero for single-pass decoders.
    fn sampling_steps(&self) -> usize {
        0
    }
    fn supports_text(&self) -> bool {
        false
    }
    fn text_dim(&self) -> usize {
        0
    }
    /// Inclusive bounds of decoded pixel values.
    fn pixel_range(&self) -> (f64, f64);
    /// Whether engines standardize the latent before decoding. Pixel-space
    /// priors opt out, since a standardized image cannot match a target.
    fn expects_normalized_latent(&self) -> bool {
        true
    }
    /// Batched decode of `[N, latent...]` into `[N, C, H, W]`; `text` is
    /// `[N, text_dim]` when given.
    fn decode_var<'g>(&self, ctx: &mut Ctx<'g>, v: Var<'g>, text: Option<Var<'g>>) -> Var<'g>;
}

/// Validate an embedding against a prior and tile it over a batch.
///
/// Zero embeddings are accepted by every prior; text-capable priors then
/// receive explicit zeros.
pub fn text_batch(prior: &dyn GenerativePrior, e: Option<&TextEmbedding>, n: usize) -> Result<Option<Tensor>> {
    let zero = e.is_none_or(TextEmbedding::is_zero);
    if !prior.supports_text() {
        if zero {
            return Ok(None);
        }
        return Err(Error::capability(format!(
            "prior `{}` does not accept text conditioning",
            prior.name()
        )));
    }
    let dim = prior.text_dim();
    match e {
        Some(e) if !zero => {
            if e.dim() != dim {
                return Err(Error::input(format!(
                    "text embedding has dimension {}, prior `{}` expects {dim}",
                    e.dim(),
                    prior.name()
                )));
            }
            let data = (0..n).flat_map(|_| e.values.iter().copied()).collect();
            Ok(Some(Tensor::new(vec![n, dim], data)))
        }
        _ => Ok(Some(Tensor::zeros(vec![n, dim]))),
    }
}

/// Decode one (already normalized) latent.
pub fn decode(prior: &dyn GenerativePrior, v_n: &LatentVariable, e: &TextEmbedding) -> Result<Image> {
    Ok(decode_batch(prior, std::slice::from_ref(v_n), e)?.remove(0))
}

pub fn decode_batch(prior: &dyn GenerativePrior, vs: &[LatentVariable], e: &TextEmbedding) -> Result<Vec<Image>> {
    for v in vs {
        if v.shape() != prior.latent_shape() {
            return Err(Error::input(format!(
                "latent shape {:?} does not match prior `{}` latent {:?}",
                v.shape(),
                prior.name(),
                prior.latent_shape()
            )));
        }
    }
    let text = text_batch(prior, Some(e), vs.len())?;
    let g = Graph::new();
    let mut ctx = Ctx::frozen(&g);
    let parts: Vec<Tensor> = vs.iter().map(|v| v.values.clone()).collect();
    let v = g.constant(Tensor::stack(&parts));
    let t = text.map(|t| g.constant(t));
    let out = prior.decode_var(&mut ctx, v, t).to_tensor();
    out.unstack().into_iter().map(Image::from_tensor).collect()
}

/// Everything needed to instantiate a prior by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub name: String,
    pub weights_path: Option<PathBuf>,
    pub sampling_steps: usize,
    pub guidance_scale: f64,
    pub scheduler: Scheduler,
}

pub const PRIOR_NAMES: [&str; 3] = ["identity", "toy_decoder", "ldm_adapter"];

/// Registry lookup; `image_shape` sizes pixel-space priors.
pub fn load_prior(spec: &PriorSpec, image_shape: [usize; 3]) -> Result<Arc<dyn GenerativePrior>> {
    match spec.name.as_str() {
        "identity" => Ok(Arc::new(IdentityPrior::new(image_shape))),
        "toy_decoder" => {
            let p = match &spec.weights_path {
                Some(path) => ToyDecoderPrior::load(path)?,
                None => crate::assets::toy_decoder_prior()?,
            };
            if p.output_shape() != image_shape {
                return Err(Error::input(format!(
                    "toy decoder emits {:?} images, model expects {image_shape:?}",
                    p.output_shape()
                )));
            }
            Ok(Arc::new(p))
        }
        "ldm_adapter" => {
            let path = spec.weights_path.as_ref().ok_or_else(|| {
                Error::capability("the ldm_adapter prior needs `prior.weights_path`; no weights are bundled")
            })?;
            Ok(Arc::new(LdmAdapter::load(
                path,
                spec.sampling_steps,
                spec.guidance_scale,
                spec.scheduler,
            )?))
        }
        other => Err(Error::config(
            "prior.name",
            format!("unknown prior `{other}`; known priors: {}", PRIOR_NAMES.join(", ")),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_hand_case() {
        let v = LatentVariable::new(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let n = normalize_latent(&v).unwrap();
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in n.values.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_latent_is_degenerate() {
        let v = LatentVariable::new(Tensor::full(vec![4], 5.0));
        assert!(matches!(normalize_latent(&v), Err(Error::DegenerateLatent { .. })));
    }

    #[test]
    fn text_canonicalization() {
        let enc = HashTextEncoder::new(16);
        assert!(enc.embed("").unwrap().is_zero());
        assert!(enc.embed("   ").unwrap().is_zero());
        let a = enc.embed("blue sky").unwrap();
        assert_eq!(a.values, enc.embed("  Blue Sky\t").unwrap().values);
        assert_eq!(a, enc.embed("blue sky").unwrap());
        let norm: f64 = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_ne!(a.values, enc.embed("snow").unwrap().values);
    }

    #[test]
    fn unavailable_encoder() {
        let e = UnavailableTextEncoder.embed("blue sky").unwrap_err();
        assert_eq!(e.exit_code(), 4);
        assert!(UnavailableTextEncoder.embed("").unwrap().is_zero());
    }

    #[test]
    fn text_to_incapable_prior_is_refused() {
        let p = IdentityPrior::new([3, 4, 4]);
        let v = LatentVariable::new(Tensor::zeros(vec![3, 4, 4]));
        let e = HashTextEncoder::new(8).embed("snow").unwrap();
        assert_eq!(decode(&p, &v, &e).unwrap_err().exit_code(), 4);
        assert!(decode(&p, &v, &TextEmbedding::zeros(8)).is_ok());
        let bad = LatentVariable::new(Tensor::zeros(vec![3, 4, 5]));
        assert!(matches!(decode(&p, &bad, &TextEmbedding::zeros(0)), Err(Error::Input(_))));
    }
}
