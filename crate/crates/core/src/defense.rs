//! Noise injection on intercepted features and privacy/utility sweeps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{psnr, ssim};
use crate::splitnet::{FeatureTensor, SplitModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// Scale `sigma / sqrt(2)`, so `sigma` is the standard deviation.
    Laplace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub sigma: f64,
    pub noise_kind: NoiseKind,
    pub seed: u64,
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("defense.sigma", format!("must be finite and >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

fn laplace(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    use rand::Rng;
    // Inverse CDF on u in (-1/2, 1/2).
    let u: f64 = rng.random::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}

/// Add noise to one feature, with a generator seeded from the config.
pub fn perturb_features(z: &FeatureTensor, d: &DefenseConfig) -> Result<FeatureTensor> {
    Ok(perturb_batch(std::slice::from_ref(z), d)?.remove(0))
}

/// Add noise to several features from a single seeded stream, so each
/// feature gets a different draw.
pub fn perturb_batch(zs: &[FeatureTensor], d: &DefenseConfig) -> Result<Vec<FeatureTensor>> {
    d.validate()?;
    if d.sigma == 0.0 {
        return Ok(zs.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    let normal = Normal::new(0.0, d.sigma).expect("validated sigma");
    let scale = d.sigma / std::f64::consts::SQRT_2;
    Ok(zs
        .iter()
        .map(|z| {
            let mut values = z.values.clone();
            for v in values.data_mut() {
                *v += match d.noise_kind {
                    NoiseKind::Gaussian => normal.sample(&mut rng),
                    NoiseKind::Laplace => laplace(&mut rng, scale),
                };
            }
            FeatureTensor::new(values, z.source_layer)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub sigma: f64,
    pub task_accuracy: f64,
    pub attack_psnr: Option<f64>,
    pub attack_ssim: Option<f64>,
    pub error: Option<String>,
}

/// Inputs of a sweep besides the model and the attack.
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub sigmas: Vec<f64>,
    pub noise_kind: NoiseKind,
    pub seed: u64,
    /// How many of the images are attacked; accuracy uses all of them.
    pub attack_count: usize,
}

/// For every sigma: accuracy of `F2` on perturbed features and mean
/// PSNR/SSIM of `attack` run on the perturbed features of the first
/// `attack_count` images. Attack failures are recorded per row.
pub fn tradeoff_sweep(
    sm: &SplitModel,
    images: &[LabeledImage],
    attack: &mut dyn FnMut(&SplitModel, &[FeatureTensor]) -> Result<Vec<Image>>,
    spec: &SweepSpec,
) -> Result<Vec<TradeoffRow>> {
    if spec.sigmas.is_empty() {
        return Err(Error::config("defense.sigmas", "at least one sigma is required"));
    }
    if images.is_empty() {
        return Err(Error::input("tradeoff sweep needs images"));
    }
    let mut sigmas = spec.sigmas.clone();
    for &s in &sigmas {
        DefenseConfig {
            sigma: s,
            noise_kind: spec.noise_kind,
            seed: spec.seed,
        }
        .validate()?;
    }
    sigmas.sort_by(f64::total_cmp);
    let raw: Vec<Image> = images.iter().map(|d| d.image.clone()).collect();
    let clean = sm.extract_batch(&raw)?;
    let n_attack = spec.attack_count.min(images.len());
    let mut rows = Vec::with_capacity(sigmas.len());
    for sigma in sigmas {
        let d = DefenseConfig {
            sigma,
            noise_kind: spec.noise_kind,
            seed: spec.seed,
        };
        let noisy = perturb_batch(&clean, &d)?;
        let pred = sm.classify_features(&noisy)?;
        let hits = pred.iter().zip(images).filter(|(p, d)| **p == d.label).count();
        let task_accuracy = hits as f64 / images.len() as f64;
        let mut row = TradeoffRow {
            sigma,
            task_accuracy,
            attack_psnr: None,
            attack_ssim: None,
            error: None,
        };
        if n_attack > 0 {
            match attack(sm, &noisy[..n_attack]) {
                Ok(recons) if recons.len() == n_attack => {
                    let mut p = 0.0;
                    let mut s = 0.0;
                    for (r, orig) in recons.iter().zip(&raw) {
                        p += psnr(orig, r)?;
                        s += ssim(orig, r)?;
                    }
                    row.attack_psnr = Some(p / n_attack as f64);
                    row.attack_ssim = Some(s / n_attack as f64);
                }
                Ok(recons) => {
                    row.error = Some(format!("attack returned {} images for {n_attack} features", recons.len()))
                }
                Err(e) => row.error = Some(e.to_string()),
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn tradeoff_csv(rows: &[TradeoffRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut out = String::from("sigma,task_accuracy,attack_psnr,attack_ssim,error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sigma,
            r.task_accuracy,
            opt(r.attack_psnr),
            opt(r.attack_ssim),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use featinv_tensor::Tensor;

    fn z() -> FeatureTensor {
        FeatureTensor::new(Tensor::from_fn(vec![2, 3, 3], |i| i as f64 * 0.1), 2)
    }

    #[test]
    fn zero_sigma_is_identity() {
        for kind in [NoiseKind::Gaussian, NoiseKind::Laplace] {
            let d = DefenseConfig {
                sigma: 0.0,
                noise_kind: kind,
                seed: 4,
            };
            assert_eq!(perturb_features(&z(), &d).unwrap(), z());
        }
    }

    #[test]
    fn negative_sigma_rejected() {
        let d = DefenseConfig {
            sigma: -0.1,
            noise_kind: NoiseKind::Gaussian,
            seed: 0,
        };
        assert_eq!(perturb_features(&z(), &d).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn seeded_noise_repeats() {
        let d = DefenseConfig {
            sigma: 0.3,
            noise_kind: NoiseKind::Laplace,
            seed: 11,
        };
        let a = perturb_features(&z(), &d).unwrap();
        assert_eq!(a, perturb_features(&z(), &d).unwrap());
        assert_ne!(a, z());
    }
}
