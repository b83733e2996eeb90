//! Toy target models and the name-keyed registry.

use std::path::Path;

use featinv_tensor::module::{load_state_dict, state_dict};
use featinv_tensor::optim::{Adam, StagedLr};
use featinv_tensor::{Ctx, Graph, Module, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{AttentionBlock, Block, ConvBlock, IdentityBlock, PatchEmbedBlock, PoolHead, TokenHead};
use super::{stack_images, Preprocessing, TargetModel};
use crate::data::{LabeledImage, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::io::Blob;

pub const MODEL_NAMES: [&str; 3] = ["toy_cnn", "toy_vit", "identity_probe"];

fn desk_preprocessing() -> Preprocessing {
    Preprocessing {
        mean: vec![0.5; 3],
        std: vec![0.25; 3],
    }
}

/// Three convolution blocks and a pooled linear head on 32x32 RGB.
///
/// Block outputs: 16x32x32, 32x16x16, 32x8x8, 10 logits.
pub fn toy_cnn(seed: u64) -> TargetModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: Vec<Box<dyn Block>> = vec![
        Box::new(ConvBlock::new(&mut rng, 3, 16, 1)),
        Box::new(ConvBlock::new(&mut rng, 16, 32, 2)),
        Box::new(ConvBlock::new(&mut rng, 32, 32, 2)),
        Box::new(PoolHead::new(&mut rng, 32, CLASS_NAMES.len())),
    ];
    TargetModel::new("toy_cnn", blocks, [3, 32, 32], desk_preprocessing()).expect("static architecture")
}

/// 4x4 patches into 64 tokens of width 32, four attention blocks (the
/// first fused with the patch embedding) and a token-mean head.
pub fn toy_vit(seed: u64) -> TargetModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, hidden) = (32, 64);
    let blocks: Vec<Box<dyn Block>> = vec![
        Box::new(PatchEmbedBlock::new(&mut rng, 3, 4, 64, dim, hidden)),
        Box::new(AttentionBlock::new(&mut rng, dim, hidden)),
        Box::new(AttentionBlock::new(&mut rng, dim, hidden)),
        Box::new(AttentionBlock::new(&mut rng, dim, hidden)),
        Box::new(TokenHead::new(&mut rng, dim, CLASS_NAMES.len())),
    ];
    TargetModel::new("toy_vit", blocks, [3, 32, 32], desk_preprocessing()).expect("static architecture")
}

/// `base` with an identity block in front, so split index 1 exposes the
/// preprocessed input itself.
pub fn identity_probe(base: &TargetModel) -> TargetModel {
    let mut blocks: Vec<Box<dyn Block>> = vec![Box::new(IdentityBlock)];
    blocks.extend(base.blocks.iter().cloned());
    TargetModel::new("identity_probe", blocks, base.input_shape, base.preprocessing.clone())
        .expect("identity prefix keeps shapes")
}

pub fn save_weights(model: &TargetModel, path: &Path, meta: serde_json::Value) -> Result<()> {
    Blob::with_tensors(state_dict(model), meta).save(path)
}

pub fn load_weights(model: &mut TargetModel, blob: &Blob, origin: &Path) -> Result<()> {
    load_state_dict(model, &blob.tensors).map_err(|e| Error::format(origin, e.to_string()))
}

/// Look up a model by registry name. Without `weights_path` the toy CNN
/// comes with its bundled trained weights; other models are seeded inits.
pub fn load_model(name: &str, weights_path: Option<&Path>) -> Result<TargetModel> {
    let mut model = match name {
        "toy_cnn" => match weights_path {
            Some(_) => toy_cnn(0),
            None => crate::assets::toy_cnn()?,
        },
        "toy_vit" => toy_vit(0),
        "identity_probe" => match weights_path {
            Some(_) => identity_probe(&toy_cnn(0)),
            None => identity_probe(&crate::assets::toy_cnn()?),
        },
        other => {
            return Err(Error::config(
                "model.name",
                format!("unknown model `{other}`; known models: {}", MODEL_NAMES.join(", ")),
            ))
        }
    };
    if let Some(p) = weights_path {
        let blob = Blob::load(p)?;
        load_weights(&mut model, &blob, p)?;
    }
    Ok(model)
}

/// Settings for fitting a target classifier on labelled images.
#[derive(Clone, Debug)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Cross-entropy training with Adam; returns the mean loss of each epoch.
pub fn train_classifier(
    model: &mut TargetModel,
    data: &[LabeledImage],
    cfg: &ClassifierTraining,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::input("classifier training needs data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(0.9, 0.999);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let sched = StagedLr::at_fractions(
        cfg.learning_rate,
        cfg.epochs * steps_per_epoch,
        &[0.5, 0.75],
        0.3,
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<_> = chunk.iter().map(|&i| data[i].image.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
            let x: Tensor = stack_images(&images, model.input_shape)?;
            let g = Graph::new();
            let mut ctx = Ctx::training(&g);
            let loss = model.forward_var(&mut ctx, g.constant(x)).cross_entropy(&labels);
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::numeric("classifier loss diverged", Some(epoch)));
            }
            total += value * chunk.len() as f64;
            let grads = g.backward(loss);
            let pg = ctx.param_grads(model, &grads);
            adam.step_module(model as &mut dyn Module, &pg, sched.rate(step));
            step += 1;
        }
        history.push(total / data.len() as f64);
    }
    Ok(history)
}

/// Fraction of `data` the model labels correctly.
pub fn accuracy(model: &TargetModel, data: &[LabeledImage]) -> Result<f64> {
    let mut hits = 0;
    for chunk in data.chunks(64) {
        let images: Vec<_> = chunk.iter().map(|d| d.image.clone()).collect();
        let pred = model.predict(&images)?;
        hits += pred.iter().zip(chunk).filter(|(p, d)| **p == d.label).count();
    }
    Ok(hits as f64 / data.len() as f64)
}
