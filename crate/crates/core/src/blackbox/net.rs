//! The inversion network `F_u`: features in, prior latent out.
//!
//! Layout: bilinear resize to `L * 2^k`, a stem convolution, `|k|` strided
//! convolutions (or transposed convolutions when the features are smaller
//! than the latent) down to the latent size `L`, a small U-Net at `L`, and a
//! 1x1 head. A linear 1x1 path from the resized input is added to the head
//! so near-linear inversions are easy to learn. With `K > 1` frames a 1x1
//! pointwise layer mixes the stacked frames first and every frame then goes
//! through the same branch.

use featinv_tensor::module::{visit_child, visit_child_mut};
use featinv_tensor::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, RELU_GAIN};
use featinv_tensor::{concat, Ctx, Module, StateKind, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::normalize_var;

/// One entry of the block plan, with the shapes it maps between.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    Fusion { channels: usize, frames: usize },
    Resize { from: [usize; 2], to: [usize; 2] },
    Stem { cin: usize, cout: usize, size: usize },
    Reduce { cin: usize, cout: usize, size: usize },
    Expand { cin: usize, cout: usize, size: usize },
    Down { cin: usize, cout: usize, size: usize },
    Up { cin: usize, cout: usize, size: usize },
    Head { cin: usize, cout: usize },
    Skip { cin: usize, cout: usize },
    Normalize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverterNetSpec {
    pub input_feature_shape: Vec<usize>,
    pub latent_shape: Vec<usize>,
    pub frame_count: usize,
    pub fusion: bool,
    pub normalize_output: bool,
    pub width: usize,
    /// Channels added at the deepest U-Net level to fine-tune the size.
    pub bottleneck_extra: usize,
    pub unet_depth: usize,
    pub block_plan: Vec<Stage>,
    pub parameter_count: usize,
}

/// Choices [`build_inverter`] leaves at their defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct InverterOptions {
    /// Mix frames with a pointwise layer when `K > 1`.
    pub fusion: bool,
    /// Standardize each output latent; must match the prior.
    pub normalize_output: bool,
    /// Base channel width; ignored when a parameter budget is given.
    pub width: usize,
    /// Down/up levels of the U-Net core; `None` picks up to two.
    pub unet_depth: Option<usize>,
}

impl Default for InverterOptions {
    fn default() -> Self {
        Self {
            fusion: true,
            normalize_output: true,
            width: 16,
            unet_depth: None,
        }
    }
}

/// `[C, H, W]` as is; `[T, D]` with square `T` as `[D, sqrt T, sqrt T]`.
pub fn spatial_shape(feature_shape: &[usize]) -> Result<[usize; 3]> {
    match feature_shape {
        [c, h, w] => Ok([*c, *h, *w]),
        [t, d] => {
            let s = (*t as f64).sqrt().round() as usize;
            if s * s != *t {
                return Err(Error::Construction {
                    stage: "input".into(),
                    message: format!("token count {t} is not a square"),
                });
            }
            Ok([*d, s, s])
        }
        other => Err(Error::Construction {
            stage: "input".into(),
            message: format!("unsupported feature shape {other:?}"),
        }),
    }
}

pub fn build_inverter(
    feature_shape: &[usize],
    latent_shape: &[usize],
    k: usize,
    param_budget: Option<usize>,
) -> Result<InverterNetSpec> {
    build_inverter_with(feature_shape, latent_shape, k, param_budget, &InverterOptions::default())
}

pub fn build_inverter_with(
    feature_shape: &[usize],
    latent_shape: &[usize],
    k: usize,
    param_budget: Option<usize>,
    opts: &InverterOptions,
) -> Result<InverterNetSpec> {
    let Some(budget) = param_budget else {
        return plan(feature_shape, latent_shape, k, opts.width, 0, opts);
    };
    let count = |w: usize| plan(feature_shape, latent_shape, k, w, 0, opts).map(|s| s.parameter_count);
    let (mut lo, mut hi) = (1usize, 1usize);
    while count(hi)? < budget {
        lo = hi;
        hi *= 2;
        if hi > 4096 {
            return Err(Error::Construction {
                stage: "width search".into(),
                message: format!("budget {budget} needs a width above 4096"),
            });
        }
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if count(mid)? < budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Widen the bottleneck of the narrower candidate to close the gap.
    let with_extra = |e: usize| plan(feature_shape, latent_shape, k, lo, e, opts);
    let mut candidates = vec![plan(feature_shape, latent_shape, k, hi, 0, opts)?];
    if with_extra(1)?.parameter_count > with_extra(0)?.parameter_count {
        let (mut a, mut b) = (0usize, 1usize);
        while with_extra(b)?.parameter_count < budget {
            a = b;
            b *= 2;
        }
        while b - a > 1 {
            let mid = (a + b) / 2;
            if with_extra(mid)?.parameter_count < budget {
                a = mid;
            } else {
                b = mid;
            }
        }
        candidates.push(with_extra(a)?);
        candidates.push(with_extra(b)?);
    } else {
        candidates.push(with_extra(0)?);
    }
    let spec = candidates
        .into_iter()
        .min_by_key(|s| s.parameter_count.abs_diff(budget))
        .expect("at least one candidate");
    let rel = spec.parameter_count.abs_diff(budget) as f64 / budget as f64;
    if rel > 0.05 {
        return Err(Error::Construction {
            stage: "width search".into(),
            message: format!(
                "closest width {} gives {} parameters, more than 5% away from budget {budget}",
                spec.width, spec.parameter_count
            ),
        });
    }
    Ok(spec)
}

fn plan(
    feature_shape: &[usize],
    latent_shape: &[usize],
    k: usize,
    width: usize,
    extra: usize,
    opts: &InverterOptions,
) -> Result<InverterNetSpec> {
    let fail = |stage: &str, message: String| Error::Construction {
        stage: stage.into(),
        message,
    };
    if k < 1 {
        return Err(fail("frames", "frame count must be at least 1".into()));
    }
    let [c, h, w] = spatial_shape(feature_shape)?;
    let (cl, l) = match latent_shape {
        [cl, a, b] if a == b && *a > 0 && *cl > 0 => (*cl, *a),
        other => return Err(fail("latent", format!("latent shape {other:?} is not [C, L, L]"))),
    };
    if width == 0 {
        return Err(fail("width", "width must be positive".into()));
    }
    let mut stages = Vec::new();
    let fused = opts.fusion && k > 1;
    if fused {
        stages.push(Stage::Fusion { channels: c, frames: k });
    }
    let ratio = h.max(w) as f64 / l as f64;
    let steps = ratio.log2().round() as i32;
    let entry = if steps >= 0 {
        l << steps
    } else {
        let div = 1usize << (-steps);
        if l % div != 0 {
            return Err(fail("resize", format!("latent size {l} is not divisible by {div}")));
        }
        l / div
    };
    if [h, w] != [entry, entry] {
        stages.push(Stage::Resize {
            from: [h, w],
            to: [entry, entry],
        });
    }
    let stem_c = if steps < 0 { width << (-steps) } else { width };
    stages.push(Stage::Stem {
        cin: c,
        cout: stem_c,
        size: entry,
    });
    let mut ch = stem_c;
    let mut size = entry;
    for _ in 0..steps.unsigned_abs() {
        if steps > 0 {
            size /= 2;
            stages.push(Stage::Reduce {
                cin: ch,
                cout: ch * 2,
                size,
            });
            ch *= 2;
        } else {
            size *= 2;
            stages.push(Stage::Expand {
                cin: ch,
                cout: ch / 2,
                size,
            });
            ch /= 2;
        }
    }
    debug_assert_eq!(size, l);
    let max_depth = {
        let mut d = 0;
        while d < 2 && l % (1 << (d + 1)) == 0 && l >> (d + 1) >= 2 {
            d += 1;
        }
        d
    };
    let depth = opts.unet_depth.unwrap_or(max_depth);
    if depth > max_depth {
        return Err(fail("unet", format!("latent size {l} supports at most {max_depth} U-Net levels")));
    }
    let mut s = l;
    let mut cc = ch;
    let extra = if depth == 0 { 0 } else { extra };
    for level in 0..depth {
        s /= 2;
        let cout = if level + 1 == depth { cc * 2 + extra } else { cc * 2 };
        stages.push(Stage::Down { cin: cc, cout, size: s });
        cc = cout;
    }
    for level in 0..depth {
        s *= 2;
        let cout = if level == 0 { (cc - extra) / 2 } else { cc / 2 };
        stages.push(Stage::Up { cin: cc, cout, size: s });
        cc = cout;
    }
    stages.push(Stage::Head { cin: ch, cout: cl });
    stages.push(Stage::Skip { cin: c, cout: cl });
    if opts.normalize_output {
        stages.push(Stage::Normalize);
    }
    let mut spec = InverterNetSpec {
        input_feature_shape: feature_shape.to_vec(),
        latent_shape: latent_shape.to_vec(),
        frame_count: k,
        fusion: fused,
        normalize_output: opts.normalize_output,
        width,
        bottleneck_extra: extra,
        unet_depth: depth,
        block_plan: stages,
        parameter_count: 0,
    };
    spec.parameter_count = count_parameters(&spec);
    Ok(spec)
}

fn count_parameters(spec: &InverterNetSpec) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
    let bn = |c: usize| 2 * c;
    spec.block_plan
        .iter()
        .map(|s| match *s {
            Stage::Fusion { channels, frames } => conv(channels * frames, channels * frames, 1) + channels * frames,
            Stage::Resize { .. } | Stage::Normalize => 0,
            Stage::Stem { cin, cout, .. } | Stage::Reduce { cin, cout, .. } => conv(cin, cout, 3) + bn(cout),
            Stage::Expand { cin, cout, .. } => conv(cin, cout, 4) + bn(cout),
            Stage::Down { cin, cout, .. } => conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout),
            Stage::Up { cin, cout, .. } => conv(cin, cout, 4) + bn(cout) + conv(2 * cout, cout, 3) + bn(cout),
            Stage::Head { cin, cout } | Stage::Skip { cin, cout } => conv(cin, cout, 1) + cout,
        })
        .sum()
}

#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            conv: Conv2d::new(rng, cin, cout, 3, stride, 1, false, RELU_GAIN),
            bn: BatchNorm2d::new(cout),
        }
    }

    fn forward<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let y = self.conv.forward(ctx, x);
        self.bn.forward(ctx, y).relu()
    }
}

impl Module for ConvBnRelu {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        visit_child("conv", &self.conv, f);
        visit_child("bn", &self.bn, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        visit_child_mut("conv", &mut self.conv, f);
        visit_child_mut("bn", &mut self.bn, f);
    }
}

#[derive(Clone, Debug)]
pub struct DeconvBnRelu {
    pub deconv: ConvTranspose2d,
    pub bn: BatchNorm2d,
}

impl DeconvBnRelu {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        Self {
            deconv: ConvTranspose2d::new(rng, cin, cout, 4, 2, 1, false, RELU_GAIN),
            bn: BatchNorm2d::new(cout),
        }
    }

    fn forward<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let y = self.deconv.forward(ctx, x);
        self.bn.forward(ctx, y).relu()
    }
}

impl Module for DeconvBnRelu {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        visit_child("deconv", &self.deconv, f);
        visit_child("bn", &self.bn, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        visit_child_mut("deconv", &mut self.deconv, f);
        visit_child_mut("bn", &mut self.bn, f);
    }
}

#[derive(Clone, Debug)]
enum PathBlock {
    Reduce(ConvBnRelu),
    Expand(DeconvBnRelu),
}

/// Everything after the optional fusion layer; shared by all frames.
#[derive(Clone, Debug)]
pub struct Branch {
    resize: Option<[usize; 2]>,
    stem: ConvBnRelu,
    path: Vec<PathBlock>,
    downs: Vec<(ConvBnRelu, ConvBnRelu)>,
    ups: Vec<(DeconvBnRelu, ConvBnRelu)>,
    head: Conv2d,
    skip: Conv2d,
    latent_size: usize,
}

impl Branch {
    fn forward<'g>(&self, ctx: &mut Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let x = match self.resize {
            Some([h, w]) => x.resize_bilinear(h, w),
            None => x,
        };
        let mut h = self.stem.forward(ctx, x);
        for b in &self.path {
            h = match b {
                PathBlock::Reduce(r) => r.forward(ctx, h),
                PathBlock::Expand(e) => e.forward(ctx, h),
            };
        }
        let mut skips = Vec::with_capacity(self.downs.len());
        for (down, conv) in &self.downs {
            skips.push(h);
            let d = down.forward(ctx, h);
            h = conv.forward(ctx, d);
        }
        for (up, conv) in &self.ups {
            let u = up.forward(ctx, h);
            let s = skips.pop().expect("one skip per level");
            h = conv.forward(ctx, concat(&[u, s], 1));
        }
        let l = self.latent_size;
        let xs = x.shape();
        let lin_in = if xs[2] == l && xs[3] == l { x } else { x.resize_bilinear(l, l) };
        self.head.forward(ctx, h).add(self.skip.forward(ctx, lin_in))
    }
}

impl Module for Branch {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        visit_child("stem", &self.stem, f);
        for (i, b) in self.path.iter().enumerate() {
            match b {
                PathBlock::Reduce(r) => visit_child(&format!("path.{i}"), r, f),
                PathBlock::Expand(e) => visit_child(&format!("path.{i}"), e, f),
            }
        }
        for (i, (a, b)) in self.downs.iter().enumerate() {
            visit_child(&format!("down.{i}.a"), a, f);
            visit_child(&format!("down.{i}.b"), b, f);
        }
        for (i, (a, b)) in self.ups.iter().enumerate() {
            visit_child(&format!("up.{i}.a"), a, f);
            visit_child(&format!("up.{i}.b"), b, f);
        }
        visit_child("head", &self.head, f);
        visit_child("skip", &self.skip, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        visit_child_mut("stem", &mut self.stem, f);
        for (i, b) in self.path.iter_mut().enumerate() {
            match b {
                PathBlock::Reduce(r) => visit_child_mut(&format!("path.{i}"), r, f),
                PathBlock::Expand(e) => visit_child_mut(&format!("path.{i}"), e, f),
            }
        }
        for (i, (a, b)) in self.downs.iter_mut().enumerate() {
            visit_child_mut(&format!("down.{i}.a"), a, f);
            visit_child_mut(&format!("down.{i}.b"), b, f);
        }
        for (i, (a, b)) in self.ups.iter_mut().enumerate() {
            visit_child_mut(&format!("up.{i}.a"), a, f);
            visit_child_mut(&format!("up.{i}.b"), b, f);
        }
        visit_child_mut("head", &mut self.head, f);
        visit_child_mut("skip", &mut self.skip, f);
    }
}

#[derive(Clone, Debug)]
pub struct InverterNet {
    pub spec: InverterNetSpec,
    fusion: Option<Conv2d>,
    branch: Branch,
}

impl InverterNet {
    pub fn new(spec: &InverterNetSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fusion = None;
        let mut resize = None;
        let mut stem = None;
        let mut path = Vec::new();
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        let mut head = None;
        let mut skip = None;
        for s in &spec.block_plan {
            match *s {
                Stage::Fusion { channels, frames } => {
                    let kc = channels * frames;
                    let mut conv = Conv2d::new(&mut rng, kc, kc, 1, 1, 0, true, 1.0);
                    // Start at the identity so early training sees each frame.
                    conv.weight = Tensor::from_fn(vec![kc, kc, 1, 1], |i| {
                        let (o, c) = (i / kc, i % kc);
                        if o == c {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    fusion = Some(conv);
                }
                Stage::Resize { to, .. } => resize = Some(to),
                Stage::Stem { cin, cout, .. } => stem = Some(ConvBnRelu::new(&mut rng, cin, cout, 1)),
                Stage::Reduce { cin, cout, .. } => path.push(PathBlock::Reduce(ConvBnRelu::new(&mut rng, cin, cout, 2))),
                Stage::Expand { cin, cout, .. } => path.push(PathBlock::Expand(DeconvBnRelu::new(&mut rng, cin, cout))),
                Stage::Down { cin, cout, .. } => downs.push((
                    ConvBnRelu::new(&mut rng, cin, cout, 2),
                    ConvBnRelu::new(&mut rng, cout, cout, 1),
                )),
                Stage::Up { cin, cout, .. } => ups.push((
                    DeconvBnRelu::new(&mut rng, cin, cout),
                    ConvBnRelu::new(&mut rng, 2 * cout, cout, 1),
                )),
                Stage::Head { cin, cout } => {
                    let mut conv = Conv2d::new(&mut rng, cin, cout, 1, 1, 0, true, 1.0);
                    conv.weight = Tensor::zeros(conv.weight.shape().to_vec());
                    head = Some(conv);
                }
                Stage::Skip { cin, cout } => skip = Some(Conv2d::new(&mut rng, cin, cout, 1, 1, 0, true, 1.0)),
                Stage::Normalize => {}
            }
        }
        Self {
            spec: spec.clone(),
            fusion,
            branch: Branch {
                resize,
                stem: stem.expect("plan has a stem"),
                path,
                downs,
                ups,
                head: head.expect("plan has a head"),
                skip: skip.expect("plan has a skip"),
                latent_size: spec.latent_shape[1],
            },
        }
    }

    /// The branch frame `k` runs through; all frames share one.
    pub fn branch(&self, k: usize) -> &Branch {
        assert!(k < self.spec.frame_count, "frame {k} out of range");
        &self.branch
    }

    /// Map `[N, K, feature...]` (frames stacked on axis 1) to latents
    /// `[K * N, latent...]`, frame-major.
    pub fn forward<'g>(&self, ctx: &mut Ctx<'g>, y: Var<'g>) -> Var<'g> {
        let s = y.shape();
        let (n, k) = (s[0], s[1]);
        let [c, h, w] = spatial_shape(&self.spec.input_feature_shape).expect("validated at build time");
        let x = if self.spec.input_feature_shape.len() == 2 {
            let t = h * w;
            y.reshape(vec![n * k, t, c])
                .transpose_last2()
                .reshape(vec![n, k * c, h, w])
        } else {
            y.reshape(vec![n, k * c, h, w])
        };
        let x = match &self.fusion {
            Some(f) => f.forward(ctx, x),
            None => x,
        };
        let frames: Vec<Var<'g>> = (0..k).map(|i| x.narrow(1, i * c, c)).collect();
        let stacked = if k == 1 { frames[0] } else { concat(&frames, 0) };
        let out = self.branch.forward(ctx, stacked);
        if self.spec.normalize_output {
            normalize_var(out)
        } else {
            out
        }
    }
}

impl Module for InverterNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind)) {
        if let Some(fu) = &self.fusion {
            visit_child("fusion", fu, f);
        }
        visit_child("branch", &self.branch, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind)) {
        if let Some(fu) = &mut self.fusion {
            visit_child_mut("fusion", fu, f);
        }
        visit_child_mut("branch", &mut self.branch, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use featinv_tensor::Graph;

    fn run(spec: &InverterNetSpec, n: usize) -> Vec<usize> {
        let net = InverterNet::new(spec, 0);
        let g = Graph::new();
        let mut ctx = Ctx::frozen(&g);
        let mut shape = vec![n, spec.frame_count];
        shape.extend(&spec.input_feature_shape);
        let y = g.constant(Tensor::from_fn(shape, |i| (i % 7) as f64 * 0.1));
        net.forward(&mut ctx, y).shape()
    }

    #[test]
    fn counted_parameters_match_modules() {
        for (f, l, k) in [
            (vec![16, 32, 32], vec![4, 8, 8], 1),
            (vec![32, 8, 8], vec![3, 32, 32], 1),
            (vec![64, 32], vec![4, 8, 8], 3),
            (vec![3, 32, 32], vec![3, 32, 32], 2),
        ] {
            let spec = build_inverter_with(&f, &l, k, None, &InverterOptions { width: 4, ..Default::default() }).unwrap();
            assert_eq!(spec.parameter_count, InverterNet::new(&spec, 1).parameter_count(), "{f:?}");
            assert_eq!(run(&spec, 2), {
                let mut s = vec![2 * k];
                s.extend(&l);
                s
            });
        }
    }

    #[test]
    fn budget_is_met() {
        for budget in [20_000, 60_000, 150_000] {
            let s = build_inverter(&[32, 8, 8], &[4, 8, 8], 1, Some(budget)).unwrap();
            let rel = s.parameter_count.abs_diff(budget) as f64 / budget as f64;
            assert!(rel <= 0.05, "{budget}: {}", s.parameter_count);
            assert_eq!(InverterNet::new(&s, 0).parameter_count(), s.parameter_count);
            assert_eq!(run(&s, 2), vec![2, 4, 8, 8]);
        }
        let e = build_inverter(&[32, 8, 8], &[4, 8, 8], 1, Some(10)).unwrap_err();
        assert!(e.to_string().contains("width search"));
    }

    #[test]
    fn bad_shapes_name_the_stage() {
        let e = build_inverter(&[5, 32], &[4, 8, 8], 1, None).unwrap_err();
        assert!(e.to_string().contains("input"));
        let e = build_inverter(&[3, 32, 32], &[4, 8, 6], 1, None).unwrap_err();
        assert!(e.to_string().contains("latent"));
    }
}
