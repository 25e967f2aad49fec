use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Isotropic Gaussian mixture with a shared component scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDistribution {
    means: Vec<Vec<f64>>,
    scale: f64,
    weights: Vec<f64>,
}

/// Mixture description as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixtureSpec {
    /// `components` equal-weight Gaussians evenly spaced on a circle in 2-D.
    Ring {
        components: usize,
        radius: f64,
        scale: f64,
    },
    Explicit {
        means: Vec<Vec<f64>>,
        scale: f64,
        weights: Vec<f64>,
    },
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec::Ring {
            components: 8,
            radius: 2.0,
            scale: 0.2,
        }
    }
}

impl MixtureSpec {
    pub fn build(&self) -> Result<ToyDistribution> {
        match self {
            MixtureSpec::Ring {
                components,
                radius,
                scale,
            } => ToyDistribution::ring(*components, *radius, *scale),
            MixtureSpec::Explicit {
                means,
                scale,
                weights,
            } => ToyDistribution::new(means.clone(), *scale, weights.clone()),
        }
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl ToyDistribution {
    pub fn new(means: Vec<Vec<f64>>, scale: f64, weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(Error::Config(
                "mixture needs one weight per component and at least one component".into(),
            ));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config(
                "mixture means must share a positive dimension".into(),
            ));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config("mixture scale must be positive".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("mixture weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        Ok(Self {
            means,
            scale,
            weights,
        })
    }

    pub fn ring(components: usize, radius: f64, scale: f64) -> Result<Self> {
        if components == 0 {
            return Err(Error::Config("ring needs at least one component".into()));
        }
        let means = (0..components)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / components as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(means, scale, vec![1.0 / components as f64; components])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Draws `n` samples and their component labels.
    pub fn sample<T: Scalar, R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> (Tensor<T>, Vec<usize>) {
        let pick = WeightedIndex::new(&self.weights).expect("validated weights");
        let labels: Vec<usize> = (0..n).map(|_| pick.sample(rng)).collect();
        let x = self.sample_components(&labels, rng);
        (x, labels)
    }

    /// One sample from each listed component.
    pub fn sample_components<T: Scalar, R: Rng + ?Sized>(
        &self,
        labels: &[usize],
        rng: &mut R,
    ) -> Tensor<T> {
        let d = self.dim();
        let mut data = Vec::with_capacity(labels.len() * d);
        for &k in labels {
            for j in 0..d {
                let e: f64 = StandardNormal.sample(rng);
                data.push(T::lit(self.means[k][j] + self.scale * e));
            }
        }
        Tensor::from_parts(vec![labels.len(), d], data)
    }

    /// Exact mixture log-density.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let s2 = self.scale * self.scale;
        let norm = -0.5 * d * (LN_2PI + s2.ln());
        let terms: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(m, &w)| {
                let sq: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() + norm - 0.5 * sq / s2
            })
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    /// Euclidean distance to the closest component mean.
    pub fn nearest_mean_distance(&self, x: &[f64]) -> f64 {
        self.means
            .iter()
            .map(|m| {
                m.iter()
                    .zip(x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }
}
