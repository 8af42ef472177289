//! Diagonal-covariance Gaussian mixtures: the synthetic target densities,
//! their exact log-density/gradient/samples, and the preset targets used by
//! the benchmark configurations.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::Reward;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return Err(Error::Config("mixture component count mismatch".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) || variances.iter().any(|v| v.len() != dim)
        {
            return Err(Error::Config("mixture dimension mismatch".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Config("mixture weights must be positive and finite".into()));
        }
        if variances.iter().flatten().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("mixture variances must be strictly positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "mixture weights sum to {total}, expected 1 within 1e-12"
            )));
        }
        Ok(GaussianMixture { weights, means, variances, dim })
    }

    /// Builds with weights normalized to sum 1.
    pub fn normalized(
        mut weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config("mixture weights must have positive sum".into()));
        }
        for w in &mut weights {
            *w /= total;
        }
        // renormalize residual rounding so the strict invariant holds
        let total: f64 = weights.iter().sum();
        if let Some(w0) = weights.first_mut() {
            *w0 += 1.0 - total;
        }
        GaussianMixture::new(weights, means, variances)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    fn component_log_density(&self, k: usize, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.dim {
            let d = x[j] - self.means[k][j];
            let v = self.variances[k][j];
            acc += -0.5 * (LN_2PI + v.ln()) - d * d / (2.0 * v);
        }
        acc
    }

    /// Exact log density via log-sum-exp over components.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|k| self.weights[k].ln() + self.component_log_density(k, x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
        let log_terms: Vec<f64> = (0..self.weights.len())
            .map(|k| self.weights[k].ln() + self.component_log_density(k, x))
            .collect();
        let total = log_sum_exp(&log_terms);
        let mut grad = vec![0.0; self.dim];
        for k in 0..self.weights.len() {
            let resp = (log_terms[k] - total).exp();
            for j in 0..self.dim {
                grad[j] += resp * (self.means[k][j] - x[j]) / self.variances[k][j];
            }
        }
        grad
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        (0..self.dim)
            .map(|j| {
                let z: f64 = StandardNormal.sample(rng);
                self.means[k][j] + self.variances[k][j].sqrt() * z
            })
            .collect()
    }

    /// Per-component mass fractions are just the weights; exposed for
    /// mode-mass oracles.
    pub fn component_means(&self) -> Vec<Vec<f64>> {
        self.means.clone()
    }

    // --- preset targets used by the benchmark configs ---

    pub fn std_normal(dim: usize) -> Self {
        GaussianMixture::new(vec![1.0], vec![vec![0.0; dim]], vec![vec![1.0; dim]]).unwrap()
    }

    /// Two equal modes at ±(2,2), variance 0.3.
    pub fn two_mode_2d() -> Self {
        GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![2.0, 2.0], vec![-2.0, -2.0]],
            vec![vec![0.3, 0.3], vec![0.3, 0.3]],
        )
        .unwrap()
    }

    /// Nine equal modes on the grid {-4, 0, 4}^2, variance 0.3.
    pub fn grid9_2d() -> Self {
        let mut means = Vec::new();
        for &a in &[-4.0, 0.0, 4.0] {
            for &b in &[-4.0, 0.0, 4.0] {
                means.push(vec![a, b]);
            }
        }
        let k = means.len();
        GaussianMixture::normalized(vec![1.0; k], means, vec![vec![0.3, 0.3]; k]).unwrap()
    }
}

/// Use a mixture directly as an unnormalized reward (TB target density).
impl Reward for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_r(&self, x: &[f64]) -> f64 {
        self.log_density(x)
    }

    fn grad_log_r(&self, x: &[f64]) -> Vec<f64> {
        self.grad_log_density(x)
    }
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_at_zero() {
        let g = GaussianMixture::std_normal(1);
        assert!((g.log_density(&[0.0]) - (-0.5 * LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn symmetric_two_component_midpoint() {
        let g = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![-1.0], vec![1.0]],
            vec![vec![0.5], vec![0.5]],
        )
        .unwrap();
        // At the midpoint both components contribute equally, so the density
        // equals either single component's contribution doubled and halved.
        let comp = -0.5 * (LN_2PI + 0.5f64.ln()) - 1.0 / (2.0 * 0.5);
        assert!((g.log_density(&[0.0]) - comp).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = GaussianMixture::two_mode_2d();
        for x in [[0.3, -0.7], [2.1, 1.8], [-3.0, 0.5]] {
            let grad = g.grad_log_density(&x);
            for j in 0..2 {
                let h = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let fd = (g.log_density(&xp) - g.log_density(&xm)) / (2.0 * h);
                let rel = (grad[j] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-6, "component {j}: {} vs {}", grad[j], fd);
            }
        }
    }

    #[test]
    fn unnormalized_weights_rejected() {
        let err = GaussianMixture::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![1.0]]);
        assert!(err.is_err());
    }
}
