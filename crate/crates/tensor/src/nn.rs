//! Standard layers built on the graph ops.

use rand::Rng;

use crate::graph::Var;
use crate::module::{Ctx, Module, StateKind};
use crate::tensor::Tensor;

/// Uniform `[-bound, bound]` initialization with `bound = gain * sqrt(3 / fan_in)`.
pub fn init_uniform(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Gain appropriate for layers followed by a rectifier.
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut impl Rng,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            weight: init_uniform(rng, vec![cout, cin, kernel, kernel], fan_in, gain),
            bias: bias.then(|| Tensor::zeros(vec![cout])),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let w = ctx.param(&self.weight);
        let y = x.conv2d(w, self.stride, self.pad);
        match &self.bias {
            Some(b) => y.add_channel(ctx.param(b)),
            None => y,
        }
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        f("weight", &self.weight, StateKind::Param);
        if let Some(b) = &self.bias {
            f("bias", b, StateKind::Param);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        f("weight", &mut self.weight, StateKind::Param);
        if let Some(b) = &mut self.bias {
            f("bias", b, StateKind::Param);
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut impl Rng,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        // Each output pixel sees roughly cin * (kernel / stride)^2 inputs.
        let per_axis = kernel.div_ceil(stride.max(1));
        let fan_in = cin * per_axis * per_axis;
        Self {
            weight: init_uniform(rng, vec![cin, cout, kernel, kernel], fan_in, gain),
            bias: bias.then(|| Tensor::zeros(vec![cout])),
            stride,
            pad,
            out_pad: 0,
        }
    }

    pub fn forward<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let w = ctx.param(&self.weight);
        let y = x.conv_transpose2d(w, self.stride, self.pad, self.out_pad);
        match &self.bias {
            Some(b) => y.add_channel(ctx.param(b)),
            None => y,
        }
    }
}

impl Module for ConvTranspose2d {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        f("weight", &self.weight, StateKind::Param);
        if let Some(b) = &self.bias {
            f("bias", b, StateKind::Param);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        f("weight", &mut self.weight, StateKind::Param);
        if let Some(b) = &mut self.bias {
            f("bias", b, StateKind::Param);
        }
    }
}

/// `y = x W + b` over the last axis; `weight` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, din: usize, dout: usize, gain: f64) -> Self {
        Self {
            weight: init_uniform(rng, vec![din, dout], din, gain),
            bias: Tensor::zeros(vec![dout]),
        }
    }

    pub fn forward<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let shape = x.shape();
        let din = *shape.last().expect("linear on scalar");
        let rows = shape.iter().product::<usize>() / din;
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        let dout = self.weight.shape()[1];
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = dout;
        x.reshape(vec![rows, din])
            .matmul(w)
            .add_bias_last(b)
            .reshape(out_shape)
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        f("weight", &self.weight, StateKind::Param);
        f("bias", &self.bias, StateKind::Param);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        f("weight", &mut self.weight, StateKind::Param);
        f("bias", &mut self.bias, StateKind::Param);
    }
}

/// Batch normalization over NCHW channels.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::ones(vec![channels]),
            eps: 1e-5,
        }
    }

    pub fn forward<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let gamma = ctx.param(&self.gamma);
        let beta = ctx.param(&self.beta);
        if ctx.is_training() {
            let (mean, var) = crate::ops::spatial::channel_moments(&x.value());
            ctx.record_norm_stats(&self.running_mean, mean, var);
            x.standardize_channels(self.eps).mul_channel(gamma).add_channel(beta)
        } else {
            let c = self.running_mean.numel();
            let scale = Tensor::from_fn(vec![c], |i| {
                1.0 / (self.running_var.data()[i] + self.eps).sqrt()
            });
            let shift = Tensor::from_fn(vec![c], |i| -self.running_mean.data()[i] * scale.data()[i]);
            let g = ctx.graph();
            x.mul_channel(g.constant(scale))
                .add_channel(g.constant(shift))
                .mul_channel(gamma)
                .add_channel(beta)
        }
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        f("gamma", &self.gamma, StateKind::Param);
        f("beta", &self.beta, StateKind::Param);
        f("running_mean", &self.running_mean, StateKind::Buffer);
        f("running_var", &self.running_var, StateKind::Buffer);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        f("gamma", &mut self.gamma, StateKind::Param);
        f("beta", &mut self.beta, StateKind::Param);
        f("running_mean", &mut self.running_mean, StateKind::Buffer);
        f("running_var", &mut self.running_var, StateKind::Buffer);
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::ones(vec![dim]),
            beta: Tensor::zeros(vec![dim]),
            eps: 1e-5,
        }
    }

    pub fn forward<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let g = ctx.param(&self.gamma);
        let b = ctx.param(&self.beta);
        x.standardize_last(self.eps).mul_last(g).add_bias_last(b)
    }
}

impl Module for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        f("gamma", &self.gamma, StateKind::Param);
        f("beta", &self.beta, StateKind::Param);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        f("gamma", &mut self.gamma, StateKind::Param);
        f("beta", &mut self.beta, StateKind::Param);
    }
}
