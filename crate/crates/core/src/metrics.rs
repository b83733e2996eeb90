//! PSNR, SSIM and Inception Score, plus per-run reports.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::io::write_atomic;
use crate::splitnet::TargetModel;

/// Reported for identical images instead of infinity.
pub const PSNR_CAP: f64 = 100.0;

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::input(format!(
            "image shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `10 log10(255^2 / MSE)` on pixels clamped to `[0, 255]`.
pub fn psnr(original: &Image, recon: &Image) -> Result<f64> {
    check_same_shape(original, recon)?;
    let mse = original
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| {
            let d = 255.0 * (a.clamp(0.0, 1.0) - b.clamp(0.0, 1.0));
            d * d
        })
        .sum::<f64>()
        / original.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

const WIN: usize = 11;
const SIGMA: f64 = 1.5;

fn gaussian_kernel() -> [f64; WIN] {
    let r = (WIN / 2) as f64;
    let mut k = [0.0; WIN];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; WIN]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h - WIN + 1, w - WIN + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..WIN).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..WIN).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity of the luma channels, 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, L = 255, over positions where the
/// window fits; clamped to `[0, 1]`.
pub fn ssim(original: &Image, recon: &Image) -> Result<f64> {
    check_same_shape(original, recon)?;
    let (h, w) = (original.height(), original.width());
    if h < WIN || w < WIN {
        return Err(Error::input(format!(
            "SSIM needs images of at least {WIN}x{WIN}, got {h}x{w}"
        )));
    }
    Ok(ssim_gray(&original.luma255(), &recon.luma255(), h, w).clamp(0.0, 1.0))
}

/// Unclamped SSIM of two `h x w` grayscale planes on the `[0, 255]` scale.
pub fn ssim_gray(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_kernel();
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, _, _) = filter_valid(a, h, w, &k);
    let (mu_b, _, _) = filter_valid(b, h, w, &k);
    let (aa, _, _) = filter_valid(&prod(a, a), h, w, &k);
    let (bb, _, _) = filter_valid(&prod(b, b), h, w, &k);
    let (ab, _, _) = filter_valid(&prod(a, b), h, w, &k);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Source of class posteriors for the Inception Score.
pub trait Classifier {
    fn name(&self) -> &str;
    fn predict_proba(&self, images: &[Image]) -> Result<Vec<Vec<f64>>>;
}

/// Softmax over a target model's logits.
pub struct ModelClassifier<'a> {
    pub model: &'a TargetModel,
}

impl Classifier for ModelClassifier<'_> {
    fn name(&self) -> &str {
        &self.model.name
    }

    fn predict_proba(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let clamped: Vec<Image> = images.iter().map(Image::clamped).collect();
        let logits = self.model.forward(&clamped)?;
        let cols = *logits.shape().last().unwrap();
        Ok(logits
            .data()
            .chunks(cols)
            .map(|row| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect())
    }
}

/// `exp(mean_x KL(p(y|x) || p(y)))` from class posteriors.
pub fn inception_score_from_probs(probs: &[Vec<f64>]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::input("inception score needs at least two images"));
    }
    let classes = probs[0].len();
    for (i, p) in probs.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if p.len() != classes || p.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "classifier output {i} is not a probability simplex over {classes} classes"
            )));
        }
    }
    let n = probs.len() as f64;
    let marginal: Vec<f64> = (0..classes).map(|c| probs.iter().map(|p| p[c]).sum::<f64>() / n).collect();
    let mean_kl = probs
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(&pc, _)| pc > 0.0)
                .map(|(&pc, &m)| pc * (pc.ln() - m.ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(mean_kl.exp())
}

pub fn inception_score(images: &[Image], classifier: &dyn Classifier) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::input("inception score needs at least two images"));
    }
    inception_score_from_probs(&classifier.predict_proba(images)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub inception_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: AggregateMetrics,
    pub classifier_name: Option<String>,
}

/// Pair originals and reconstructions by id and score them. The
/// Inception Score is computed on the reconstructions when a classifier is
/// given and there are at least two of them.
pub fn evaluate(
    originals: &[(String, Image)],
    recons: &[(String, Image)],
    classifier: Option<&dyn Classifier>,
) -> Result<MetricsReport> {
    if originals.len() != recons.len() {
        return Err(Error::input(format!(
            "{} originals but {} reconstructions",
            originals.len(),
            recons.len()
        )));
    }
    if originals.is_empty() {
        return Err(Error::input("nothing to evaluate"));
    }
    let by_id: HashMap<&str, &Image> = recons.iter().map(|(id, im)| (id.as_str(), im)).collect();
    let mut per_image = Vec::with_capacity(originals.len());
    let mut ordered = Vec::with_capacity(originals.len());
    for (id, orig) in originals {
        let rec = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::input(format!("no reconstruction with id `{id}`")))?;
        per_image.push(ImageMetrics {
            id: id.clone(),
            psnr: psnr(orig, rec)?,
            ssim: ssim(orig, rec)?,
        });
        ordered.push((*rec).clone());
    }
    let n = per_image.len() as f64;
    let inception = match classifier {
        Some(c) if ordered.len() >= 2 => Some(inception_score(&ordered, c)?),
        _ => None,
    };
    Ok(MetricsReport {
        aggregate: AggregateMetrics {
            mean_psnr: per_image.iter().map(|m| m.psnr).sum::<f64>() / n,
            mean_ssim: per_image.iter().map(|m| m.ssim).sum::<f64>() / n,
            inception_score: inception,
        },
        per_image,
        classifier_name: classifier.map(|c| c.name().to_string()),
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::input(format!("metrics report: {e}")))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim\n");
        for m in &self.per_image {
            out.push_str(&format!("{},{},{}\n", m.id, m.psnr, m.ssim));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).at(path)?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_offset_case() {
        let a = Image::filled(3, 8, 8, 100.0 / 255.0);
        let b = Image::filled(3, 8, 8, 116.0 / 255.0);
        let v = psnr(&a, &b).unwrap();
        assert!((v - 10.0 * (65025.0f64 / 256.0).log10()).abs() < 1e-9);
        assert!((v - 24.05).abs() < 0.01);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_small_image_rejected() {
        let a = Image::filled(1, 10, 20, 0.5);
        assert!(matches!(ssim(&a, &a), Err(Error::Input(_))));
    }

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[10]);
    }

    #[test]
    fn is_analytic_cases() {
        let one_hot = |c: usize, n: usize| (0..n).map(|i| if i == c { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        assert!((inception_score_from_probs(&[one_hot(0, 3), one_hot(0, 3)]).unwrap() - 1.0).abs() < 1e-12);
        assert!((inception_score_from_probs(&[one_hot(0, 2), one_hot(1, 2)]).unwrap() - 2.0).abs() < 1e-12);
        let bad = vec![vec![0.5, 0.6], vec![1.0, 0.0]];
        assert!(matches!(inception_score_from_probs(&bad), Err(Error::Contract(_))));
    }
}
