//! Black-box inversion: learn `F_u` from query pairs, then decode
//! `D(F_u(z))` for intercepted features.

mod dataset;
mod net;

pub use dataset::{collect_queries, collect_queries_with_text, collect_query_groups, QueryDataset, QueryPair};
pub use net::{
    build_inverter, build_inverter_with, spatial_shape, Branch, InverterNet, InverterNetSpec, InverterOptions, Stage,
};

use std::path::Path;

use featinv_tensor::module::{apply_norm_stats, load_state_dict, state_dict};
use featinv_tensor::optim::Adam;
use featinv_tensor::{Ctx, Graph, Module, StateKind, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::Blob;
use crate::losses::{self, LossWeights, NegentropyMode};
use crate::priors::{text_batch, text_encoder_for, GenerativePrior, TextEmbedding};
use crate::splitnet::{FeatureTensor, SplitDescriptor};
use crate::whitebox::LrSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    /// Milestones are fractions of the epoch count.
    pub lr_schedule: LrSchedule,
    pub weights: LossWeights,
    pub negentropy_mode: NegentropyMode,
    /// Share of the queries held out for the validation loss.
    pub holdout_fraction: f64,
    pub bn_momentum: f64,
    /// Epochs at the start during which only the linear 1x1 path trains.
    pub linear_warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 96,
            batch_size: 128,
            learning_rate: 0.1,
            betas: (0.9, 0.999),
            lr_schedule: LrSchedule::default(),
            weights: LossWeights::default(),
            negentropy_mode: NegentropyMode::Literal,
            holdout_fraction: 0.1,
            bn_momentum: 0.1,
            linear_warmup_epochs: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, scope: &str) -> Result<()> {
        let key = |k: &str| format!("{scope}.{k}");
        if self.epochs == 0 {
            return Err(Error::config(key("epochs"), "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(key("batch_size"), "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(key("learning_rate"), "must be positive"));
        }
        for (name, b) in [("betas", self.betas.0), ("betas", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key(name), "must lie in [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config(key("holdout_fraction"), "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config(key("bn_momentum"), "must lie in [0, 1]"));
        }
        if self.linear_warmup_epochs > self.epochs {
            return Err(Error::config(key("linear_warmup_epochs"), "cannot exceed epochs"));
        }
        self.lr_schedule.validate(&key("lr_schedule"))?;
        self.weights.validate(scope)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub config: TrainConfig,
    pub prior: String,
    pub split: SplitDescriptor,
    pub frames: usize,
    pub text_conditioned: bool,
    pub parameter_count: usize,
    pub train_size: usize,
    pub validation_size: usize,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Mean held-out loss per epoch; empty without a held-out set.
    pub validation_loss: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedInverter {
    pub net: InverterNet,
    pub manifest: TrainingManifest,
}

struct Sample<'a> {
    ys: Vec<&'a Tensor>,
    xs: Vec<&'a Image>,
    text: Option<Vec<f64>>,
}

pub fn train_inverter(
    ds: &QueryDataset,
    spec: &InverterNetSpec,
    prior: &dyn GenerativePrior,
    cfg: &TrainConfig,
) -> Result<TrainedInverter> {
    if spec.frame_count != 1 {
        return Err(Error::input(format!(
            "inverter spec expects {} frames; use train_inverter_multiframe",
            spec.frame_count
        )));
    }
    let samples = ds
        .pairs
        .iter()
        .map(|p| Sample {
            ys: vec![&p.features.values],
            xs: vec![&p.image],
            text: None,
        })
        .collect();
    train_core(samples, ds, spec, prior, cfg, false)
}

/// Every query must carry a caption; it is embedded with the prior's
/// text encoder.
pub fn train_inverter_with_text(
    ds: &QueryDataset,
    spec: &InverterNetSpec,
    prior: &dyn GenerativePrior,
    cfg: &TrainConfig,
) -> Result<TrainedInverter> {
    if !prior.supports_text() {
        return Err(Error::capability(format!(
            "prior `{}` does not accept text conditioning",
            prior.name()
        )));
    }
    if spec.frame_count != 1 {
        return Err(Error::input("text-conditioned training takes single frames"));
    }
    let missing: Vec<&str> = ds.pairs.iter().filter(|p| p.text.is_none()).map(|p| p.id.as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::input(format!("queries without a caption: {}", missing.join(", "))));
    }
    let encoder = text_encoder_for(prior);
    let mut samples = Vec::with_capacity(ds.len());
    for p in &ds.pairs {
        let e = encoder.embed(p.text.as_deref().unwrap_or_default())?;
        samples.push(Sample {
            ys: vec![&p.features.values],
            xs: vec![&p.image],
            text: Some(e.values),
        });
    }
    train_core(samples, ds, spec, prior, cfg, true)
}

pub fn train_inverter_multiframe(
    ds: &QueryDataset,
    spec: &InverterNetSpec,
    prior: &dyn GenerativePrior,
    cfg: &TrainConfig,
) -> Result<TrainedInverter> {
    let k = ds.frames_per_group()?;
    if k != spec.frame_count {
        return Err(Error::input(format!(
            "query groups have {k} frames, inverter spec expects {}",
            spec.frame_count
        )));
    }
    let samples = ds
        .groups
        .iter()
        .map(|g| Sample {
            ys: g.iter().map(|&i| &ds.pairs[i].features.values).collect(),
            xs: g.iter().map(|&i| &ds.pairs[i].image).collect(),
            text: None,
        })
        .collect();
    train_core(samples, ds, spec, prior, cfg, false)
}

fn check_compatible(spec: &InverterNetSpec, feature_shape: &[usize], prior: &dyn GenerativePrior) -> Result<()> {
    if spec.input_feature_shape != feature_shape {
        return Err(Error::input(format!(
            "inverter expects features {:?}, got {:?}",
            spec.input_feature_shape, feature_shape
        )));
    }
    if spec.latent_shape != prior.latent_shape() {
        return Err(Error::input(format!(
            "inverter produces latents {:?}, prior `{}` takes {:?}",
            spec.latent_shape,
            prior.name(),
            prior.latent_shape()
        )));
    }
    if spec.normalize_output != prior.expects_normalized_latent() {
        return Err(Error::input(format!(
            "inverter output normalization ({}) does not match prior `{}`",
            spec.normalize_output,
            prior.name()
        )));
    }
    Ok(())
}

/// Stack a batch into `[B, K, feature...]`, targets `[K*B, C, H, W]`
/// (frame-major, matching the net's output order) and tiled text.
fn assemble(batch: &[&Sample], prior: &dyn GenerativePrior) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let b = batch.len();
    let k = batch[0].ys.len();
    let mut y_shape = vec![b, k];
    y_shape.extend(batch[0].ys[0].shape());
    let y_data: Vec<f64> = batch.iter().flat_map(|s| s.ys.iter().flat_map(|t| t.data().iter().copied())).collect();
    let x_parts: Vec<Tensor> = (0..k)
        .flat_map(|f| batch.iter().map(move |s| s.xs[f].tensor().clone()))
        .collect();
    let text = match batch[0].text {
        Some(_) => {
            let dim = prior.text_dim();
            let data: Vec<f64> = (0..k)
                .flat_map(|_| batch.iter().flat_map(|s| s.text.as_deref().unwrap_or_default().iter().copied()))
                .collect();
            Some(Tensor::new(vec![k * b, dim], data))
        }
        None => text_batch(prior, None, k * b)?,
    };
    Ok((Tensor::new(y_shape, y_data), Tensor::stack(&x_parts), text))
}

fn batch_loss<'g>(
    g: &'g Graph,
    net_ctx: &mut Ctx<'g>,
    net: &InverterNet,
    prior: &dyn GenerativePrior,
    (y, x, text): (Tensor, Tensor, Option<Tensor>),
    cfg: &TrainConfig,
) -> Result<Var<'g>> {
    let mut prior_ctx = Ctx::frozen(g);
    let v = net.forward(net_ctx, g.constant(y));
    let t = text.map(|t| g.constant(t));
    let img = prior.decode_var(&mut prior_ctx, v, t);
    let rec = losses::graph::reconstruction(img, g.constant(x))?;
    let w = &cfg.weights;
    let tv = (w.lambda_s != 0.0).then(|| losses::graph::tv(img));
    let ng = (w.lambda_txt != 0.0).then(|| losses::graph::negentropy(v, w.alpha, cfg.negentropy_mode));
    Ok(losses::graph::compose(rec, tv, ng, None, w))
}

fn train_core(
    samples: Vec<Sample>,
    ds: &QueryDataset,
    spec: &InverterNetSpec,
    prior: &dyn GenerativePrior,
    cfg: &TrainConfig,
    text_conditioned: bool,
) -> Result<TrainedInverter> {
    cfg.validate("blackbox.train")?;
    if samples.is_empty() {
        return Err(Error::input("query dataset is empty"));
    }
    check_compatible(spec, ds.feature_shape(), prior)?;
    let [c, h, w] = prior.output_shape();
    if let Some(p) = ds.pairs.iter().find(|p| p.image.shape() != [c, h, w]) {
        return Err(Error::input(format!(
            "query `{}` is {:?}, prior `{}` produces {:?}",
            p.id,
            p.image.shape(),
            prior.name(),
            [c, h, w]
        )));
    }

    // The last pairs in dataset order are held out.
    let n_val = (samples.len() as f64 * cfg.holdout_fraction).floor() as usize;
    let n_val = n_val.min(samples.len() - 1);
    let mut train_idx: Vec<usize> = (0..samples.len() - n_val).collect();
    let val_idx: Vec<usize> = (samples.len() - n_val..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut net = InverterNet::new(spec, cfg.seed);
    let mut adam = Adam::new(cfg.betas.0, cfg.betas.1);
    let sched = cfg.lr_schedule.staged(cfg.learning_rate, cfg.epochs);
    let mut linear_mask = Vec::new();
    net.visit(&mut |name, _, kind| {
        if kind == StateKind::Param {
            linear_mask.push(name.starts_with("branch.skip."));
        }
    });
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut validation_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let lr = sched.rate(epoch);
        let mut total = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let g = Graph::new();
            let mut ctx = Ctx::training(&g);
            let loss = batch_loss(&g, &mut ctx, &net, prior, assemble(&batch, prior)?, cfg)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::numeric(format!("training loss became {value}"), Some(epoch)));
            }
            total += value * chunk.len() as f64;
            let grads = g.backward(loss);
            let mut pg = ctx.param_grads(&net, &grads);
            if epoch < cfg.linear_warmup_epochs {
                for (g, &keep) in pg.iter_mut().zip(&linear_mask) {
                    if !keep {
                        g.data_mut().fill(0.0);
                    }
                }
            }
            let stats = ctx.take_norm_stats();
            adam.step_module(&mut net, &pg, lr);
            apply_norm_stats(&mut net, &stats, cfg.bn_momentum);
        }
        train_loss.push(total / train_idx.len() as f64);
        if !val_idx.is_empty() {
            let mut vt = 0.0;
            for chunk in val_idx.chunks(cfg.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                let g = Graph::new();
                let mut ctx = Ctx::frozen(&g);
                vt += batch_loss(&g, &mut ctx, &net, prior, assemble(&batch, prior)?, cfg)?.item() * chunk.len() as f64;
            }
            validation_loss.push(vt / val_idx.len() as f64);
        }
    }

    let manifest = TrainingManifest {
        config: cfg.clone(),
        prior: prior.name().to_string(),
        split: ds.split.clone(),
        frames: spec.frame_count,
        text_conditioned,
        parameter_count: spec.parameter_count,
        train_size: train_idx.len(),
        validation_size: val_idx.len(),
        train_loss,
        validation_loss,
    };
    Ok(TrainedInverter { net, manifest })
}

impl TrainedInverter {
    pub fn spec(&self) -> &InverterNetSpec {
        &self.net.spec
    }

    /// Weights, spec and training manifest in one blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = state_dict(&self.net).into_iter().map(|(n, t)| (format!("net.{n}"), t)).collect();
        let meta = json!({
            "kind": "trained_inverter",
            "spec": self.net.spec,
            "manifest": self.manifest,
        });
        Blob::with_tensors(tensors, meta).save(path)
    }

    pub fn load(path: &Path) -> Result<TrainedInverter> {
        let blob = Blob::load(path)?;
        if blob.meta.get("kind").and_then(|k| k.as_str()) != Some("trained_inverter") {
            return Err(Error::format(path, "not a trained inverter archive"));
        }
        let field = |name: &str| blob.meta.get(name).cloned().unwrap_or_default();
        let spec: InverterNetSpec =
            serde_json::from_value(field("spec")).map_err(|e| Error::format(path, format!("spec: {e}")))?;
        let manifest: TrainingManifest =
            serde_json::from_value(field("manifest")).map_err(|e| Error::format(path, format!("manifest: {e}")))?;
        let mut net = InverterNet::new(&spec, 0);
        load_state_dict(&mut net, &blob.scoped("net")).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(TrainedInverter { net, manifest })
    }

    fn check_use(&self, prior: &dyn GenerativePrior, zs: &[FeatureTensor]) -> Result<()> {
        if prior.name() != self.manifest.prior {
            return Err(Error::input(format!(
                "inverter was trained for prior `{}`, not `{}`",
                self.manifest.prior,
                prior.name()
            )));
        }
        check_compatible(&self.net.spec, &self.manifest.split.feature_shape, prior)?;
        if zs.is_empty() {
            return Err(Error::input("no features to invert"));
        }
        if let Some(z) = zs.iter().find(|z| z.shape() != self.net.spec.input_feature_shape.as_slice()) {
            return Err(Error::input(format!(
                "feature shape {:?} does not match inverter input {:?}",
                z.shape(),
                self.net.spec.input_feature_shape
            )));
        }
        Ok(())
    }

    /// Decode `[N, K, ...]`-ordered features; returns images frame-major
    /// within each sample (`n * K + k`).
    fn decode(&self, prior: &dyn GenerativePrior, zs: &[FeatureTensor], text: Option<&TextEmbedding>) -> Result<Vec<Image>> {
        let k = self.net.spec.frame_count;
        let n = zs.len() / k;
        let mut y_shape = vec![n, k];
        y_shape.extend(&self.net.spec.input_feature_shape);
        let y = Tensor::new(y_shape, zs.iter().flat_map(|z| z.values.data().iter().copied()).collect());
        let t = text_batch(prior, text, n * k)?;
        let g = Graph::new();
        let mut ctx = Ctx::frozen(&g);
        let mut pctx = Ctx::frozen(&g);
        let v = self.net.forward(&mut ctx, g.constant(y));
        let img = prior.decode_var(&mut pctx, v, t.map(|t| g.constant(t))).to_tensor();
        let frames: Vec<Image> = img.unstack().into_iter().map(Image::from_tensor).collect::<Result<_>>()?;
        // Net output is frame-major over the batch; reorder to sample-major.
        Ok((0..n).flat_map(|i| (0..k).map(move |f| f * n + i)).map(|j| frames[j].clone()).collect())
    }

    fn require_text(&self, text: Option<&TextEmbedding>) -> Result<()> {
        if self.manifest.text_conditioned && text.is_none() {
            return Err(Error::input("inverter was trained with captions; a prompt is required"));
        }
        Ok(())
    }
}

const RUN_CHUNK: usize = 64;

pub fn run_inverter(inv: &TrainedInverter, prior: &dyn GenerativePrior, z: &FeatureTensor) -> Result<Image> {
    Ok(run_inverter_batch(inv, prior, std::slice::from_ref(z))?.remove(0))
}

pub fn run_inverter_batch(inv: &TrainedInverter, prior: &dyn GenerativePrior, zs: &[FeatureTensor]) -> Result<Vec<Image>> {
    inv.require_text(None)?;
    run_single(inv, prior, zs, None)
}

pub fn run_inverter_with_text(
    inv: &TrainedInverter,
    prior: &dyn GenerativePrior,
    z: &FeatureTensor,
    e: &TextEmbedding,
) -> Result<Image> {
    inv.require_text(Some(e))?;
    Ok(run_single(inv, prior, std::slice::from_ref(z), Some(e))?.remove(0))
}

fn run_single(
    inv: &TrainedInverter,
    prior: &dyn GenerativePrior,
    zs: &[FeatureTensor],
    text: Option<&TextEmbedding>,
) -> Result<Vec<Image>> {
    if inv.net.spec.frame_count != 1 {
        return Err(Error::input(format!(
            "inverter expects groups of {} frames",
            inv.net.spec.frame_count
        )));
    }
    inv.check_use(prior, zs)?;
    let mut out = Vec::with_capacity(zs.len());
    for chunk in zs.chunks(RUN_CHUNK) {
        out.extend(inv.decode(prior, chunk, text)?);
    }
    Ok(out)
}

/// Invert one group of exactly `K` frames.
pub fn run_inverter_frames(inv: &TrainedInverter, prior: &dyn GenerativePrior, frames: &[FeatureTensor]) -> Result<Vec<Image>> {
    let k = inv.net.spec.frame_count;
    if frames.len() != k {
        return Err(Error::input(format!("inverter expects {k} frames, got {}", frames.len())));
    }
    inv.require_text(None)?;
    inv.check_use(prior, frames)?;
    inv.decode(prior, frames, None)
}
