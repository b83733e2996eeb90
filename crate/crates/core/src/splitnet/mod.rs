//! Target models, split points and feature extraction.

pub mod blocks;
pub mod zoo;

use std::sync::Arc;

use featinv_tensor::module::{visit_child, visit_child_mut};
use featinv_tensor::{Ctx, Graph, Module, StateKind, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
pub use blocks::Block;

/// Per-channel `(x - mean) / std`, applied at the start of F1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Preprocessing {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply<'g>(&self, x: Var<'g>) -> Var<'g> {
        let g = x.graph();
        let c = self.mean.len();
        let scale = Tensor::from_fn(vec![c], |i| 1.0 / self.std[i]);
        let shift = Tensor::from_fn(vec![c], |i| -self.mean[i] / self.std[i]);
        x.mul_channel(g.constant(scale)).add_channel(g.constant(shift))
    }

    pub fn apply_image(&self, img: &Image) -> Tensor {
        let [c, h, w] = img.shape();
        Tensor::from_fn(vec![c, h, w], |i| {
            let ch = i / (h * w);
            (img.data()[i] - self.mean[ch]) / self.std[ch]
        })
    }
}

/// A classifier made of an ordered list of blocks.
#[derive(Clone, Debug)]
pub struct TargetModel {
    pub name: String,
    pub blocks: Vec<Box<dyn Block>>,
    pub input_shape: [usize; 3],
    pub preprocessing: Preprocessing,
}

impl TargetModel {
    pub fn new(
        name: impl Into<String>,
        blocks: Vec<Box<dyn Block>>,
        input_shape: [usize; 3],
        preprocessing: Preprocessing,
    ) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::input("a target model needs at least one block"));
        }
        if preprocessing.mean.len() != input_shape[0] || preprocessing.std.len() != input_shape[0] {
            return Err(Error::input("preprocessing constants must match the channel count"));
        }
        let m = Self {
            name: name.into(),
            blocks,
            input_shape,
            preprocessing,
        };
        m.block_shapes()?;
        Ok(m)
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    /// Output shape of every block, by symbolic propagation from the input.
    pub fn block_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            shape = b
                .output_shape(&shape)
                .map_err(|e| Error::input(format!("block {} ({}): {e}", i + 1, b.kind())))?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.block_shapes().expect("validated").pop().unwrap()
    }

    /// Run blocks `range` (zero-based) on an already batched input.
    pub fn forward_blocks<'g>(
        &self,
        ctx: &mut Ctx<'g>,
        x: Var<'g>,
        range: std::ops::Range<usize>,
    ) -> Var<'g> {
        self.blocks[range].iter().fold(x, |h, b| b.forward(ctx, h))
    }

    /// Full model F on raw pixels.
    pub fn forward_var<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.preprocessing.apply(x);
        self.forward_blocks(ctx, h, 0..self.blocks.len())
    }

    /// Logits for a batch of images.
    pub fn forward(&self, images: &[Image]) -> Result<Tensor> {
        let x = stack_images(images, self.input_shape)?;
        let g = Graph::new();
        let mut ctx = Ctx::frozen(&g);
        Ok(self.forward_var(&mut ctx, g.constant(x)).to_tensor())
    }

    pub fn predict(&self, images: &[Image]) -> Result<Vec<usize>> {
        let logits = self.forward(images)?;
        Ok(argmax_rows(&logits))
    }
}

impl Module for TargetModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        for (i, b) in self.blocks.iter().enumerate() {
            visit_child(&format!("blocks.{i}"), b.as_ref(), f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_mut(&format!("blocks.{i}"), b.as_mut(), f);
        }
    }
}

pub(crate) fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = *t.shape().last().unwrap();
    t.data()
        .chunks(cols)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Stack images into an `[N, C, H, W]` batch, checking each shape.
pub fn stack_images(images: &[Image], expected: [usize; 3]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::input("empty image batch"));
    }
    for (i, im) in images.iter().enumerate() {
        if im.shape() != expected {
            return Err(Error::input(format!(
                "image {i} has shape {:?}, model expects {expected:?}",
                im.shape()
            )));
        }
    }
    let parts: Vec<Tensor> = images.iter().map(|im| im.tensor().clone()).collect();
    Ok(Tensor::stack(&parts))
}

/// An intermediate activation `z = F1(x)` for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub values: Tensor,
    pub source_layer: usize,
}

impl FeatureTensor {
    pub fn new(values: Tensor, source_layer: usize) -> Self {
        Self { values, source_layer }
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

/// Identifies a split for manifests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub model: String,
    pub split_index: usize,
    pub feature_shape: Vec<usize>,
}

/// A target model cut after block `split_index` (one-based).
#[derive(Clone, Debug)]
pub struct SplitModel {
    base: Arc<TargetModel>,
    split_index: usize,
    feature_shape: Vec<usize>,
}

pub fn split(model: Arc<TargetModel>, split_index: usize) -> Result<SplitModel> {
    let n = model.layer_count();
    if split_index < 1 || split_index >= n {
        return Err(Error::config(
            "model.split_index",
            format!(
                "split index {split_index} out of range for `{}`; valid range is 1..={}",
                model.name,
                n.saturating_sub(1)
            ),
        ));
    }
    let feature_shape = model.block_shapes()?[split_index - 1].clone();
    Ok(SplitModel {
        base: model,
        split_index,
        feature_shape,
    })
}

impl SplitModel {
    pub fn base(&self) -> &Arc<TargetModel> {
        &self.base
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.base.input_shape
    }

    pub fn descriptor(&self) -> SplitDescriptor {
        SplitDescriptor {
            model: self.base.name.clone(),
            split_index: self.split_index,
            feature_shape: self.feature_shape.clone(),
        }
    }

    /// User side: preprocessing and blocks `1..=split_index`, batched.
    pub fn f1<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.base.preprocessing.apply(x);
        self.base.forward_blocks(ctx, h, 0..self.split_index)
    }

    /// Cloud side: the remaining blocks, batched.
    pub fn f2<'g>(&self, ctx: &mut Ctx<'g>, z: Var<'g>) -> Var<'g> {
        self.base
            .forward_blocks(ctx, z, self.split_index..self.base.layer_count())
    }

    pub fn extract_features(&self, x: &Image) -> Result<FeatureTensor> {
        Ok(self.extract_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn extract_batch(&self, xs: &[Image]) -> Result<Vec<FeatureTensor>> {
        let x = stack_images(xs, self.base.input_shape)?;
        let g = Graph::new();
        let mut ctx = Ctx::frozen(&g);
        let z = self.f1(&mut ctx, g.constant(x)).to_tensor();
        Ok(z.unstack()
            .into_iter()
            .map(|v| FeatureTensor::new(v, self.split_index))
            .collect())
    }

    fn check_feature(&self, z: &FeatureTensor) -> Result<()> {
        if z.shape() != self.feature_shape.as_slice() {
            return Err(Error::input(format!(
                "feature shape {:?} does not match split output {:?}",
                z.shape(),
                self.feature_shape
            )));
        }
        Ok(())
    }

    /// Stack features into a batch after validating their shapes.
    pub fn stack_features(&self, zs: &[FeatureTensor]) -> Result<Tensor> {
        if zs.is_empty() {
            return Err(Error::input("empty feature batch"));
        }
        for z in zs {
            self.check_feature(z)?;
        }
        let parts: Vec<Tensor> = zs.iter().map(|z| z.values.clone()).collect();
        Ok(Tensor::stack(&parts))
    }

    /// Logits `F2(z)` for a batch of features.
    pub fn f2_logits(&self, zs: &[FeatureTensor]) -> Result<Tensor> {
        let z = self.stack_features(zs)?;
        let g = Graph::new();
        let mut ctx = Ctx::frozen(&g);
        Ok(self.f2(&mut ctx, g.constant(z)).to_tensor())
    }

    pub fn classify_features(&self, zs: &[FeatureTensor]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.f2_logits(zs)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splitnet::blocks::{IdentityBlock, MeanPoolBlock};

    #[test]
    fn split_range_is_enforced() {
        let m = Arc::new(zoo::toy_cnn(0));
        assert!(split(m.clone(), 0).is_err());
        assert!(split(m.clone(), m.layer_count()).is_err());
        let e = split(m.clone(), 9).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("1..=3"));
        assert!(split(m, 1).is_ok());
    }

    #[test]
    fn mean_pool_of_constant() {
        let m = TargetModel::new(
            "pool",
            vec![Box::new(MeanPoolBlock { k: 2 }), Box::new(IdentityBlock)],
            [1, 4, 4],
            Preprocessing::identity(1),
        )
        .unwrap();
        let sm = split(Arc::new(m), 1).unwrap();
        let z = sm.extract_features(&Image::filled(1, 4, 4, 1.0)).unwrap();
        assert_eq!(z.shape(), &[1, 2, 2]);
        assert!(z.values.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn wrong_input_shape_is_an_input_error() {
        let sm = split(Arc::new(zoo::toy_cnn(0)), 1).unwrap();
        let e = sm.extract_features(&Image::filled(3, 8, 8, 0.0)).unwrap_err();
        assert!(matches!(e, Error::Input(_)));
    }
}
