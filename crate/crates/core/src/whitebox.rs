//! White-box inversion: optimize a prior latent so that `F1(D(v_n))`
//! matches an intercepted feature.

use featinv_tensor::optim::{Adam, StagedLr};
use featinv_tensor::{Ctx, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::sha256_hex;
use crate::losses::{self, compose, LossBreakdown, LossComponents, LossWeights, NegentropyMode};
use crate::metrics::MetricsReport;
use crate::priors::{normalize_var, population_std, text_batch, GenerativePrior, LatentVariable, TextEmbedding, MIN_LATENT_STD};
use crate::splitnet::{FeatureTensor, SplitDescriptor, SplitModel};

/// Step-decay schedule: the rate is multiplied by `factor` at each
/// fraction of the total iteration count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            milestones: vec![1.0 / 3.0, 2.0 / 3.0],
            factor: 0.5,
        }
    }
}

impl LrSchedule {
    pub fn staged(&self, base: f64, total: usize) -> StagedLr {
        StagedLr::at_fractions(base, total, &self.milestones, self.factor)
    }

    pub fn validate(&self, scope: &str) -> Result<()> {
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::config(format!("{scope}.milestones"), "fractions must lie in [0, 1]"));
        }
        if !(self.factor > 0.0 && self.factor.is_finite()) {
            return Err(Error::config(format!("{scope}.factor"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub lr_schedule: LrSchedule,
    pub init_std: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Recorded for the manifest; diffusion priors carry their own setting.
    pub sampling_steps: usize,
    pub negentropy_mode: NegentropyMode,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            learning_rate: 0.1,
            betas: (0.9, 0.999),
            lr_schedule: LrSchedule::default(),
            init_std: 0.1,
            seed: 0,
            weights: LossWeights::default(),
            sampling_steps: 20,
            negentropy_mode: NegentropyMode::Literal,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::config("attack.iterations", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("attack.learning_rate", "must be positive"));
        }
        for (i, b) in [self.betas.0, self.betas.1].into_iter().enumerate() {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("attack.betas[{i}]"), "must lie in [0, 1)"));
            }
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("attack.init_std", "must be positive"));
        }
        self.lr_schedule.validate("attack.lr_schedule")?;
        self.weights.validate("attack")
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AttackStatus {
    Completed,
    /// Stopped early; the outputs come from the last valid iterate.
    Aborted { iteration: usize, reason: String },
}

/// Enough to re-run an attack bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackManifest {
    pub config_hash: String,
    pub config: InversionConfig,
    pub seed: u64,
    pub prior: String,
    pub prior_sampling_steps: usize,
    pub split: SplitDescriptor,
    pub text: Option<String>,
    pub frames: usize,
    pub status: AttackStatus,
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub image: Image,
    /// The latent handed to the prior for `image`.
    pub latent: LatentVariable,
    pub loss_trace: Vec<LossBreakdown>,
    pub manifest: AttackManifest,
    pub metrics: Option<MetricsReport>,
}

/// K intercepted features to be inverted jointly.
#[derive(Clone, Debug)]
pub struct FrameGroup {
    pub frames: Vec<FeatureTensor>,
}

impl FrameGroup {
    pub fn new(frames: Vec<FeatureTensor>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::input("a frame group needs at least one frame"));
        }
        if frames.iter().any(|f| f.shape() != frames[0].shape()) {
            return Err(Error::input("all frames in a group must share one feature shape"));
        }
        Ok(Self { frames })
    }

    pub fn k(&self) -> usize {
        self.frames.len()
    }
}

/// Plain inversion of one feature.
pub fn invert(sm: &SplitModel, z_mid: &FeatureTensor, prior: &dyn GenerativePrior, cfg: &InversionConfig) -> Result<AttackResult> {
    let mut out = optimize(sm, std::slice::from_ref(z_mid), prior, None, cfg, Coupling::Joint)?;
    Ok(out.remove(0))
}

/// Inversion with the prior conditioned on `e` and the negentropy term
/// weighted by `lambda_txt`.
pub fn invert_with_text(
    sm: &SplitModel,
    z_mid: &FeatureTensor,
    prior: &dyn GenerativePrior,
    e: &TextEmbedding,
    cfg: &InversionConfig,
) -> Result<AttackResult> {
    let mut out = optimize(sm, std::slice::from_ref(z_mid), prior, Some(e), cfg, Coupling::Joint)?;
    Ok(out.remove(0))
}

/// Joint inversion of K frames with the temporal term pulling each latent
/// towards the group mean.
pub fn invert_multiframe(
    sm: &SplitModel,
    group: &FrameGroup,
    prior: &dyn GenerativePrior,
    cfg: &InversionConfig,
) -> Result<Vec<AttackResult>> {
    FrameGroup::new(group.frames.clone())?;
    optimize(sm, &group.frames, prior, None, cfg, Coupling::Joint)
}

/// Independent inversions of several features, run as one batch. Frame
/// `k` draws its initial latent from stream `k` of the seeded generator,
/// so frame 0 starts exactly where a single [`invert`] would.
pub fn invert_batch(
    sm: &SplitModel,
    zs: &[FeatureTensor],
    prior: &dyn GenerativePrior,
    text: Option<&TextEmbedding>,
    cfg: &InversionConfig,
) -> Result<Vec<AttackResult>> {
    if zs.is_empty() {
        return Err(Error::input("nothing to invert"));
    }
    optimize(sm, zs, prior, text, cfg, Coupling::Independent)
}

#[derive(Clone, Copy, PartialEq)]
enum Coupling {
    Joint,
    Independent,
}

fn initial_latents(cfg: &InversionConfig, k: usize, shape: &[usize]) -> Tensor {
    let normal = Normal::new(0.0, cfg.init_std).expect("validated std");
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(k * per);
    for frame in 0..k {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(frame as u64);
        data.extend((0..per).map(|_| normal.sample(&mut rng)));
    }
    let mut full = vec![k];
    full.extend_from_slice(shape);
    Tensor::new(full, data)
}

fn tv_of(data: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let mut s = 0.0;
    for ch in 0..c {
        let p = &data[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let v = p[i * w + j];
                if i + 1 < h {
                    s += (p[(i + 1) * w + j] - v).powi(2);
                }
                if j + 1 < w {
                    s += (p[i * w + j + 1] - v).powi(2);
                }
            }
        }
    }
    s / (h * w) as f64
}

fn frame_stds_ok(v: &Tensor, k: usize) -> Option<f64> {
    let per = v.numel() / k;
    v.data()
        .chunks(per)
        .map(population_std)
        .find(|s| s.is_nan() || *s <= MIN_LATENT_STD)
}

fn optimize(
    sm: &SplitModel,
    targets: &[FeatureTensor],
    prior: &dyn GenerativePrior,
    text: Option<&TextEmbedding>,
    cfg: &InversionConfig,
    coupling: Coupling,
) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    if prior.output_shape() != sm.input_shape() {
        return Err(Error::input(format!(
            "prior `{}` produces {:?} images but the model takes {:?}",
            prior.name(),
            prior.output_shape(),
            sm.input_shape()
        )));
    }
    let k = targets.len();
    let z_target = sm.stack_features(targets)?;
    let text_t = text_batch(prior, text, k)?;
    let normalized = prior.expects_normalized_latent();
    let w = &cfg.weights;
    let temporal_on = coupling == Coupling::Joint && k > 1;
    let [c, h, wd] = prior.output_shape();
    let img_per = c * h * wd;
    let lat_per: usize = prior.latent_shape().iter().product();
    let z_per = z_target.numel() / k;

    let mut v = initial_latents(cfg, k, prior.latent_shape());
    let mut adam = Adam::new(cfg.betas.0, cfg.betas.1);
    let sched = cfg.lr_schedule.staged(cfg.learning_rate, cfg.iterations);
    let mut traces: Vec<Vec<LossBreakdown>> = vec![Vec::with_capacity(cfg.iterations); k];
    let mut status = AttackStatus::Completed;

    for it in 0..cfg.iterations {
        if normalized {
            if let Some(std) = frame_stds_ok(&v, k) {
                status = AttackStatus::Aborted {
                    iteration: it,
                    reason: Error::DegenerateLatent { std }.to_string(),
                };
                break;
            }
        }
        let g = Graph::new();
        let mut ctx = Ctx::frozen(&g);
        let lv = g.leaf(v.clone());
        let vn = if normalized { normalize_var(lv) } else { lv };
        let tv_text = text_t.clone().map(|t| g.constant(t));
        let img = prior.decode_var(&mut ctx, vn, tv_text);
        let z = sm.f1(&mut ctx, img);
        let zt = g.constant(z_target.clone());
        let rec = losses::graph::reconstruction(z, zt)?;
        let tv = losses::graph::tv(img);
        let neg = (w.lambda_txt != 0.0).then(|| losses::graph::negentropy(vn, w.alpha, cfg.negentropy_mode));
        let temp = (temporal_on && w.lambda_c != 0.0).then(|| losses::graph::temporal(lv));
        let total = losses::graph::compose(rec, Some(tv), neg, temp, w).scale(k as f64);

        // Per-frame bookkeeping from the forward values.
        let zv = z.value();
        let iv = img.value();
        let vnv = vn.value();
        let vbar = temporal_on.then(|| {
            let frames: Vec<Tensor> = v.unstack();
            losses::latent_mean(&frames).expect("equal shapes")
        });
        let mut frame_totals = 0.0;
        for f in 0..k {
            let comps = LossComponents {
                reconstruction: losses::mean_squared_difference(
                    &zv.data()[f * z_per..(f + 1) * z_per],
                    &z_target.data()[f * z_per..(f + 1) * z_per],
                ),
                tv: tv_of(&iv.data()[f * img_per..(f + 1) * img_per], c, h, wd),
                negentropy: {
                    let s = &vnv.data()[f * lat_per..(f + 1) * lat_per];
                    losses::negentropy_loss(&Tensor::new(vec![lat_per], s.to_vec()), w.alpha, cfg.negentropy_mode)
                },
                temporal: vbar.as_ref().map_or(0.0, |m| {
                    losses::mean_squared_difference(&v.data()[f * lat_per..(f + 1) * lat_per], m.data())
                }),
            };
            let b = compose(comps, w).map_err(|e| match e {
                Error::Numeric { message, .. } => Error::numeric(message, Some(it)),
                e => e,
            })?;
            frame_totals += b.total;
            traces[f].push(b);
        }
        let tot = total.item();
        if !tot.is_finite() || !frame_totals.is_finite() {
            return Err(Error::numeric(format!("total loss is {tot}"), Some(it)));
        }
        drop((zv, iv, vnv));
        let grads = g.backward(total);
        let grad = grads.get_or_zeros(lv);
        if !grad.is_finite() {
            return Err(Error::numeric("gradient is not finite", Some(it)));
        }
        adam.step(&mut [&mut v], &[grad], sched.rate(it));
        if !v.is_finite() {
            return Err(Error::numeric("latent update produced non-finite values", Some(it)));
        }
    }

    // Final decode of normalize(v), as inside the loop.
    let g = Graph::new();
    let mut ctx = Ctx::frozen(&g);
    let lv = g.constant(v.clone());
    let vn = if normalized { normalize_var(lv) } else { lv };
    let img = prior.decode_var(&mut ctx, vn, text_t.map(|t| g.constant(t))).to_tensor();
    let images: Vec<Image> = img.unstack().into_iter().map(Image::from_tensor).collect::<Result<_>>()?;
    let latents = vn.to_tensor().unstack();

    let manifest = AttackManifest {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        seed: cfg.seed,
        prior: prior.name().to_string(),
        prior_sampling_steps: prior.sampling_steps(),
        split: sm.descriptor(),
        text: text.and_then(|e| e.source_text.clone()),
        frames: if coupling == Coupling::Joint { k } else { 1 },
        status,
    };
    Ok(images
        .into_iter()
        .zip(latents)
        .zip(traces)
        .map(|((image, lat), loss_trace)| AttackResult {
            image,
            latent: LatentVariable::new(lat),
            loss_trace,
            manifest: manifest.clone(),
            metrics: None,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_paper_settings() {
        let c = InversionConfig::default();
        assert_eq!(c.iterations, 1500);
        assert_eq!(c.learning_rate, 0.1);
        assert_eq!(c.betas, (0.9, 0.999));
        assert_eq!(c.init_std, 0.1);
        assert_eq!(c.sampling_steps, 20);
        assert_eq!(c.weights.lambda_s, 1.0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn validation_names_keys() {
        let c = InversionConfig {
            iterations: 0,
            ..InversionConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("attack.iterations"));
        let c = InversionConfig {
            init_std: 0.0,
            ..InversionConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn latent_streams() {
        let cfg = InversionConfig::default();
        let a = initial_latents(&cfg, 1, &[2, 3]);
        let b = initial_latents(&cfg, 3, &[2, 3]);
        assert_eq!(a.data(), &b.data()[..6]);
        assert_ne!(&b.data()[..6], &b.data()[6..12]);
        let std = population_std(b.data());
        assert!(std > 0.03 && std < 0.3);
    }

    #[test]
    fn tv_helper_matches_loss() {
        let img = Image::new(2, 3, 4, (0..24).map(|i| ((i * 7) % 5) as f64).collect()).unwrap();
        assert!((tv_of(img.data(), 2, 3, 4) - losses::tv_loss(&img)).abs() < 1e-12);
    }
}
