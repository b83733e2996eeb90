//! Layer blocks the toy target models are assembled from.

use featinv_tensor::module::{visit_child, visit_child_mut};
use featinv_tensor::nn::{Conv2d, LayerNorm, Linear, RELU_GAIN};
use featinv_tensor::ops::spatial::conv_out_size;
use featinv_tensor::{Ctx, Module, StateKind, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// One "layer" of a target model, in the block granularity used for
/// split indices.
pub trait Block: Module + Send + Sync + std::fmt::Debug {
    fn kind(&self) -> &'static str;
    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;
    /// Batched forward; the leading axis is the batch.
    fn forward<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g>;
    fn box_clone(&self) -> Box<dyn Block>;
}

impl Clone for Box<dyn Block> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

fn expect_rank(kind: &str, input: &[usize], rank: usize) -> Result<()> {
    if input.len() != rank {
        return Err(Error::input(format!(
            "{kind} expects a rank-{rank} input, got {input:?}"
        )));
    }
    Ok(())
}

/// Convolution followed by an optional rectifier.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub relu: bool,
}

impl ConvBlock {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            conv: Conv2d::new(rng, cin, cout, 3, stride, 1, true, RELU_GAIN),
            relu: true,
        }
    }
}

impl Module for ConvBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        visit_child("conv", &self.conv, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        visit_child_mut("conv", &mut self.conv, f);
    }
}

impl Block for ConvBlock {
    fn kind(&self) -> &'static str {
        "conv"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("conv block", input, 3)?;
        if input[0] != self.conv.in_channels() {
            return Err(Error::input(format!(
                "conv block expects {} channels, got {}",
                self.conv.in_channels(),
                input[0]
            )));
        }
        let k = self.conv.weight.shape()[2];
        let size = |n| {
            conv_out_size(n, k, self.conv.stride, self.conv.pad)
                .ok_or_else(|| Error::input(format!("conv block: spatial size {n} too small")))
        };
        Ok(vec![self.conv.out_channels(), size(input[1])?, size(input[2])?])
    }

    fn forward<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let y = self.conv.forward(ctx, x);
        if self.relu {
            y.relu()
        } else {
            y
        }
    }

    fn box_clone(&self) -> Box<dyn Block> {
        Box::new(self.clone())
    }
}

/// Pass-through, used to put a split point directly after preprocessing.
#[derive(Clone, Debug, Default)]
pub struct IdentityBlock;

impl Module for IdentityBlock {
    fn visit(&self, _: &mut dyn FnMut(&str, &Tensor, StateKind)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {}
}

impl Block for IdentityBlock {
    fn kind(&self) -> &'static str {
        "identity"
    }
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }
    fn forward<'g>(&self, _: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        x
    }
    fn box_clone(&self) -> Box<dyn Block> {
        Box::new(self.clone())
    }
}

/// Non-overlapping `k x k` average pooling.
#[derive(Clone, Debug)]
pub struct MeanPoolBlock {
    pub k: usize,
}

impl Module for MeanPoolBlock {
    fn visit(&self, _: &mut dyn FnMut(&str, &Tensor, StateKind)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {}
}

impl Block for MeanPoolBlock {
    fn kind(&self) -> &'static str {
        "mean_pool"
    }
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("mean pool", input, 3)?;
        if input[1] % self.k != 0 || input[2] % self.k != 0 {
            return Err(Error::input(format!(
                "mean pool {}: spatial size {:?} not divisible",
                self.k,
                &input[1..]
            )));
        }
        Ok(vec![input[0], input[1] / self.k, input[2] / self.k])
    }
    fn forward<'g>(&self, _: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        x.avg_pool2d(self.k)
    }
    fn box_clone(&self) -> Box<dyn Block> {
        Box::new(self.clone())
    }
}

/// Global average pooling and a linear classifier.
#[derive(Clone, Debug)]
pub struct PoolHead {
    pub fc: Linear,
}

impl PoolHead {
    pub fn new(rng: &mut impl Rng, channels: usize, classes: usize) -> Self {
        Self {
            fc: Linear::new(rng, channels, classes, 1.0),
        }
    }
}

impl Module for PoolHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        visit_child("fc", &self.fc, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        visit_child_mut("fc", &mut self.fc, f);
    }
}

impl Block for PoolHead {
    fn kind(&self) -> &'static str {
        "pool_head"
    }
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("pool head", input, 3)?;
        if input[0] != self.fc.weight.shape()[0] {
            return Err(Error::input("pool head: channel mismatch"));
        }
        Ok(vec![self.fc.weight.shape()[1]])
    }
    fn forward<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        self.fc.forward(ctx, x.global_avg_pool())
    }
    fn box_clone(&self) -> Box<dyn Block> {
        Box::new(self.clone())
    }
}

/// Pre-norm single-head self-attention plus MLP, both residual, on
/// `[tokens, dim]` inputs.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl AttentionBlock {
    pub fn new(rng: &mut impl Rng, dim: usize, hidden: usize) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            q: Linear::new(rng, dim, dim, 1.0),
            k: Linear::new(rng, dim, dim, 1.0),
            v: Linear::new(rng, dim, dim, 1.0),
            proj: Linear::new(rng, dim, dim, 0.5),
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(rng, dim, hidden, RELU_GAIN),
            fc2: Linear::new(rng, hidden, dim, 0.5),
        }
    }

    fn dim(&self) -> usize {
        self.q.weight.shape()[0]
    }

    fn attend<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let d = self.dim();
        let h = self.norm1.forward(ctx, x);
        let q = self.q.forward(ctx, h);
        let k = self.k.forward(ctx, h);
        let v = self.v.forward(ctx, h);
        let att = q
            .bmm(k.transpose_last2())
            .scale(1.0 / (d as f64).sqrt())
            .softmax_last();
        let x = x.add(self.proj.forward(ctx, att.bmm(v)));
        let h = self.norm2.forward(ctx, x);
        let m = self.fc1.forward(ctx, h).gelu();
        x.add(self.fc2.forward(ctx, m))
    }
}

impl Module for AttentionBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        visit_child("norm1", &self.norm1, f);
        visit_child("q", &self.q, f);
        visit_child("k", &self.k, f);
        visit_child("v", &self.v, f);
        visit_child("proj", &self.proj, f);
        visit_child("norm2", &self.norm2, f);
        visit_child("fc1", &self.fc1, f);
        visit_child("fc2", &self.fc2, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        visit_child_mut("norm1", &mut self.norm1, f);
        visit_child_mut("q", &mut self.q, f);
        visit_child_mut("k", &mut self.k, f);
        visit_child_mut("v", &mut self.v, f);
        visit_child_mut("proj", &mut self.proj, f);
        visit_child_mut("norm2", &mut self.norm2, f);
        visit_child_mut("fc1", &mut self.fc1, f);
        visit_child_mut("fc2", &mut self.fc2, f);
    }
}

impl Block for AttentionBlock {
    fn kind(&self) -> &'static str {
        "attention"
    }
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("attention block", input, 2)?;
        if input[1] != self.dim() {
            return Err(Error::input(format!(
                "attention block expects dim {}, got {}",
                self.dim(),
                input[1]
            )));
        }
        Ok(input.to_vec())
    }
    fn forward<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        self.attend(ctx, x)
    }
    fn box_clone(&self) -> Box<dyn Block> {
        Box::new(self.clone())
    }
}

/// Patchify with a strided convolution, add learned positions, then one
/// attention block. Maps `[C, H, W]` to `[tokens, dim]`.
#[derive(Clone, Debug)]
pub struct PatchEmbedBlock {
    pub embed: Conv2d,
    pub pos: Tensor,
    pub attn: AttentionBlock,
}

impl PatchEmbedBlock {
    pub fn new(rng: &mut impl Rng, cin: usize, patch: usize, tokens: usize, dim: usize, hidden: usize) -> Self {
        let embed = Conv2d::new(rng, cin, dim, patch, patch, 0, true, 1.0);
        let pos = Tensor::from_fn(vec![tokens * dim], |_| rng.random_range(-0.02..0.02));
        Self {
            embed,
            pos,
            attn: AttentionBlock::new(rng, dim, hidden),
        }
    }

    fn patch(&self) -> usize {
        self.embed.stride
    }
}

impl Module for PatchEmbedBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        visit_child("embed", &self.embed, f);
        f("pos", &self.pos, StateKind::Param);
        visit_child("attn", &self.attn, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        visit_child_mut("embed", &mut self.embed, f);
        f("pos", &mut self.pos, StateKind::Param);
        visit_child_mut("attn", &mut self.attn, f);
    }
}

impl Block for PatchEmbedBlock {
    fn kind(&self) -> &'static str {
        "patch_embed"
    }
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("patch embedding", input, 3)?;
        let p = self.patch();
        if input[0] != self.embed.in_channels() || input[1] % p != 0 || input[2] % p != 0 {
            return Err(Error::input(format!("patch embedding cannot tile input {input:?}")));
        }
        let tokens = (input[1] / p) * (input[2] / p);
        let dim = self.embed.out_channels();
        if tokens * dim != self.pos.numel() {
            return Err(Error::input("patch embedding: token count mismatch"));
        }
        Ok(vec![tokens, dim])
    }
    fn forward<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let y = self.embed.forward(ctx, x);
        let s = y.shape();
        let (n, d, t) = (s[0], s[1], s[2] * s[3]);
        let pos = ctx.param(&self.pos);
        let tokens = y
            .reshape(vec![n, d, t])
            .transpose_last2()
            .reshape(vec![n, t * d])
            .add_bias_last(pos)
            .reshape(vec![n, t, d]);
        self.attn.forward(ctx, tokens)
    }
    fn box_clone(&self) -> Box<dyn Block> {
        Box::new(self.clone())
    }
}

/// Layer norm, token mean, linear classifier.
#[derive(Clone, Debug)]
pub struct TokenHead {
    pub norm: LayerNorm,
    pub fc: Linear,
}

impl TokenHead {
    pub fn new(rng: &mut impl Rng, dim: usize, classes: usize) -> Self {
        Self {
            norm: LayerNorm::new(dim),
            fc: Linear::new(rng, dim, classes, 1.0),
        }
    }
}

impl Module for TokenHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        visit_child("norm", &self.norm, f);
        visit_child("fc", &self.fc, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        visit_child_mut("norm", &mut self.norm, f);
        visit_child_mut("fc", &mut self.fc, f);
    }
}

impl Block for TokenHead {
    fn kind(&self) -> &'static str {
        "token_head"
    }
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("token head", input, 2)?;
        Ok(vec![self.fc.weight.shape()[1]])
    }
    fn forward<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.norm.forward(ctx, x);
        let pooled = h.transpose_last2().mean_last();
        self.fc.forward(ctx, pooled)
    }
    fn box_clone(&self) -> Box<dyn Block> {
        Box::new(self.clone())
    }
}
