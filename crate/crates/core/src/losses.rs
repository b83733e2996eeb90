//! Loss terms and their weighted composition.
//!
//! Every l2-type term is a mean over elements, not a sum, so the default
//! weights carry over between feature shapes.

use featinv_tensor::{log_cosh, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::splitnet::FeatureTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_txt: f64,
    pub lambda_c: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 1.0,
            lambda_txt: 0.0,
            lambda_c: 0.0,
            alpha: 1.0,
        }
    }
}

impl LossWeights {
    /// Check ranges; `scope` prefixes key paths in errors.
    pub fn validate(&self, scope: &str) -> Result<()> {
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_txt", self.lambda_txt),
            ("lambda_c", self.lambda_c),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{scope}.{name}"), format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(1.0..=2.0).contains(&self.alpha) {
            return Err(Error::config(
                format!("{scope}.alpha"),
                format!("must lie in [1, 2], got {}", self.alpha),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegentropyMode {
    /// `-E[(1/a^2) log cosh^2(a v)]`.
    #[default]
    Literal,
    /// `(E[G(v)] - E[G(nu)])^2` with `G(u) = (1/a^2) log cosh^2(a u)` and
    /// `nu` standard normal.
    SquaredDifference,
}

/// Unweighted loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub reconstruction: f64,
    pub tv: f64,
    pub negentropy: f64,
    pub temporal: f64,
}

/// Components plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub tv: f64,
    pub negentropy: f64,
    pub temporal: f64,
}

impl LossBreakdown {
    /// `total - (reconstruction + weighted terms)`, zero up to rounding.
    pub fn accounting_error(&self, w: &LossWeights) -> f64 {
        (self.total
            - (self.reconstruction + w.lambda_s * self.tv + w.lambda_txt * self.negentropy + w.lambda_c * self.temporal))
            .abs()
    }
}

pub fn compose(c: LossComponents, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [
        ("reconstruction", c.reconstruction),
        ("tv", c.tv),
        ("negentropy", c.negentropy),
        ("temporal", c.temporal),
    ] {
        if !v.is_finite() {
            return Err(Error::numeric(format!("{name} loss is {v}"), None));
        }
    }
    Ok(LossBreakdown {
        total: c.reconstruction + w.lambda_s * c.tv + w.lambda_txt * c.negentropy + w.lambda_c * c.temporal,
        reconstruction: c.reconstruction,
        tv: c.tv,
        negentropy: c.negentropy,
        temporal: c.temporal,
    })
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::input(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

pub fn mean_squared_difference(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mean squared difference between two features.
pub fn reconstruction_loss(z_hat: &FeatureTensor, z_mid: &FeatureTensor) -> Result<f64> {
    same_shape(z_hat.shape(), z_mid.shape(), "reconstruction loss")?;
    Ok(mean_squared_difference(z_hat.values.data(), z_mid.values.data()))
}

/// Squared forward differences over valid neighbours, summed over
/// channels, divided by `H * W`.
pub fn tv_loss(x: &Image) -> f64 {
    let [c, h, w] = x.shape();
    let g = Graph::new();
    g.constant(x.tensor().clone().reshape(vec![1, c, h, w]))
        .total_variation()
        .item()
}

pub fn negentropy_loss(v: &Tensor, alpha: f64, mode: NegentropyMode) -> f64 {
    let g_mean = v.data().iter().map(|&x| contrast(x, alpha)).sum::<f64>() / v.numel() as f64;
    match mode {
        NegentropyMode::Literal => -g_mean,
        NegentropyMode::SquaredDifference => (g_mean - gaussian_contrast(alpha)).powi(2),
    }
}

/// `G(u) = (1/a^2) log cosh^2(a u)`, overflow-safe.
fn contrast(u: f64, alpha: f64) -> f64 {
    2.0 * log_cosh(alpha * u) / (alpha * alpha)
}

/// `E[G(nu)]` for standard normal `nu`, by composite Simpson quadrature.
pub fn gaussian_contrast(alpha: f64) -> f64 {
    let (lo, hi, n) = (-12.0f64, 12.0f64, 4000usize);
    let h = (hi - lo) / n as f64;
    let f = |x: f64| contrast(x, alpha) * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

pub fn temporal_loss(v_k: &Tensor, v_bar: &Tensor) -> Result<f64> {
    same_shape(v_k.shape(), v_bar.shape(), "temporal loss")?;
    Ok(mean_squared_difference(v_k.data(), v_bar.data()))
}

/// Elementwise mean of equally shaped latents.
pub fn latent_mean(vs: &[Tensor]) -> Result<Tensor> {
    let first = vs.first().ok_or_else(|| Error::input("mean of no latents"))?;
    let mut acc = Tensor::zeros(first.shape().to_vec());
    for v in vs {
        same_shape(v.shape(), first.shape(), "latent mean")?;
        acc.add_scaled(v, 1.0 / vs.len() as f64);
    }
    Ok(acc)
}

/// Graph versions, operating on batched variables. Batch reductions are
/// means, so a batch of `K` returns `(1/K) * sum_k term_k`.
pub mod graph {
    use super::*;

    pub fn reconstruction<'g>(z_hat: Var<'g>, z_mid: Var<'g>) -> Result<Var<'g>> {
        same_shape(&z_hat.shape(), &z_mid.shape(), "reconstruction loss")?;
        Ok(z_hat.mse(z_mid))
    }

    pub fn tv<'g>(x: Var<'g>) -> Var<'g> {
        x.total_variation()
    }

    pub fn negentropy<'g>(v: Var<'g>, alpha: f64, mode: NegentropyMode) -> Var<'g> {
        let g_mean = v.scale(alpha).log_cosh().mean().scale(2.0 / (alpha * alpha));
        match mode {
            NegentropyMode::Literal => g_mean.neg(),
            NegentropyMode::SquaredDifference => g_mean.add_scalar(-gaussian_contrast(alpha)).square(),
        }
    }

    /// Mean over frames of `mean((v_k - v_bar)^2)` for `v` shaped `[K, ...]`.
    pub fn temporal<'g>(v: Var<'g>) -> Var<'g> {
        let shape = v.shape();
        let k = shape[0];
        let d: usize = shape[1..].iter().product();
        let flat = v.reshape(vec![k, d]);
        let mean = flat.transpose_last2().mean_last();
        flat.add_bias_last(mean.neg()).square().mean()
    }

    /// Weighted total; terms with zero weight are left out of the graph.
    pub fn compose<'g>(
        reconstruction: Var<'g>,
        tv: Option<Var<'g>>,
        negentropy: Option<Var<'g>>,
        temporal: Option<Var<'g>>,
        w: &LossWeights,
    ) -> Var<'g> {
        let mut total = reconstruction;
        for (term, lambda) in [(tv, w.lambda_s), (negentropy, w.lambda_txt), (temporal, w.lambda_c)] {
            if let Some(t) = term {
                if lambda != 0.0 {
                    total = total.add(t.scale(lambda));
                }
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(v: Vec<f64>) -> FeatureTensor {
        FeatureTensor::new(Tensor::new(vec![v.len()], v), 1)
    }

    #[test]
    fn reconstruction_cases() {
        let z = feat((0..10).map(|i| i as f64).collect());
        assert_eq!(reconstruction_loss(&z, &z).unwrap(), 0.0);
        let z1 = feat((0..10).map(|i| i as f64 + 1.0).collect());
        assert_eq!(reconstruction_loss(&z1, &z).unwrap(), 1.0);
        let short = feat(vec![0.0; 5]);
        assert!(matches!(reconstruction_loss(&short, &z), Err(Error::Input(_))));
        let scalarish = FeatureTensor::new(Tensor::new(vec![1], vec![0.0]), 1);
        assert!(reconstruction_loss(&scalarish, &z).is_err());
    }

    #[test]
    fn tv_hand_case() {
        let img = Image::new(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((tv_loss(&img) - 0.5).abs() < 1e-12);
        assert_eq!(tv_loss(&Image::filled(3, 5, 4, 0.3)), 0.0);
    }

    #[test]
    fn negentropy_cases() {
        assert_eq!(negentropy_loss(&Tensor::zeros(vec![7]), 1.5, NegentropyMode::Literal), 0.0);
        let big = Tensor::new(vec![4], vec![1000.0, -1000.0, 1000.0, -1000.0]);
        let v = negentropy_loss(&big, 2.0, NegentropyMode::Literal);
        assert!(v.is_finite());
        // log cosh(2000) = 2000 - ln 2 to double precision.
        let expect = -2.0 * (2000.0 - std::f64::consts::LN_2) / 4.0;
        assert!((v - expect).abs() < 1e-9);
        assert!(negentropy_loss(&big, 2.0, NegentropyMode::SquaredDifference).is_finite());
    }

    #[test]
    fn temporal_hand_case() {
        let a = Tensor::new(vec![1], vec![0.0]);
        let b = Tensor::new(vec![1], vec![2.0]);
        let m = latent_mean(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.data(), &[1.0]);
        assert_eq!(temporal_loss(&a, &m).unwrap(), 1.0);
        assert_eq!(temporal_loss(&b, &m).unwrap(), 1.0);
        let one = latent_mean(std::slice::from_ref(&a)).unwrap();
        assert_eq!(temporal_loss(&a, &one).unwrap(), 0.0);
        assert!(temporal_loss(&a, &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn compose_rules() {
        let c = LossComponents {
            reconstruction: 0.7,
            tv: 0.2,
            negentropy: -0.3,
            temporal: 0.1,
        };
        let zero = LossWeights {
            lambda_s: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(compose(c, &zero).unwrap().total, 0.7);
        let w = LossWeights {
            lambda_s: 1.0,
            lambda_txt: 10.0,
            lambda_c: 5.0,
            alpha: 1.0,
        };
        let b = compose(c, &w).unwrap();
        assert!(b.accounting_error(&w) < 1e-12);
        let nan = LossComponents {
            tv: f64::NAN,
            ..c
        };
        let e = compose(nan, &w).unwrap_err();
        assert!(e.to_string().contains("tv"));
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::default().validate("attack").is_ok());
        let bad = LossWeights {
            alpha: 2.5,
            ..LossWeights::default()
        };
        let e = bad.validate("attack").unwrap_err();
        assert!(e.to_string().contains("attack.alpha"));
        let neg = LossWeights {
            lambda_c: -1.0,
            ..LossWeights::default()
        };
        assert!(neg.validate("attack").is_err());
    }

    #[test]
    fn temporal_graph_matches_per_frame_mean() {
        let v = Tensor::new(vec![2, 1], vec![0.0, 2.0]);
        let g = Graph::new();
        assert_eq!(graph::temporal(g.constant(v)).item(), 1.0);
    }
}
