//! Evaluation metrics: mean log reward, importance-sampling and ELBO
//! estimates of the log partition function, histogram total variation
//! against samples or an exact density, RTB residual statistics, and
//! per-mode mass.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{sample_forward_batch, trajectory_log_pf, Trajectory};
use crate::error::{Error, Result};
use crate::gmm::log_sum_exp;
use crate::posterior::{log_ratios, PosteriorModel};
use crate::prior::PriorModel;
use crate::reward::Reward;
use crate::util::mean_stderr;

const BOOTSTRAP_RESAMPLES: usize = 200;

/// Mean log reward over samples, with its standard error.
pub fn mean_log_reward(samples: &[Vec<f64>], reward: &dyn Reward) -> (f64, f64) {
    let vals: Vec<f64> = samples.iter().map(|x| reward.log_r(x)).collect();
    mean_stderr(&vals)
}

/// Importance-sampling estimate of log Z = log E_prior[r(x)] from reward
/// values at prior samples, with a bootstrap standard error. Constant
/// rewards give exactly their log value; all -inf is an error (no overlap).
pub fn is_log_z_from_log_rs(log_rs: &[f64], seed: u64) -> Result<(f64, f64)> {
    if log_rs.is_empty() {
        return Err(Error::Config("is_log_z needs at least one sample".into()));
    }
    if log_rs.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::numeric(
            "is_log_z",
            "every importance weight is zero; prior does not cover the reward",
        ));
    }
    let n = log_rs.len();
    let ln_n = (n as f64).ln();
    let est = log_sum_exp(log_rs) - ln_n;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boots = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut resample = vec![0.0; n];
    for _ in 0..BOOTSTRAP_RESAMPLES {
        for slot in resample.iter_mut() {
            *slot = log_rs[rng.gen_range(0..n)];
        }
        boots.push(log_sum_exp(&resample) - ln_n);
    }
    let mean = boots.iter().sum::<f64>() / boots.len() as f64;
    let var = boots.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / boots.len() as f64;
    Ok((est, var.sqrt()))
}

pub fn is_log_z(prior: &PriorModel, reward: &dyn Reward, n: usize, seed: u64) -> Result<(f64, f64)> {
    let samples = prior.sample_terminals(n, seed)?;
    let log_rs: Vec<f64> = samples.iter().map(|x| reward.log_r(x)).collect();
    is_log_z_from_log_rs(&log_rs, seed ^ 0xb007)
}

/// ELBO lower bound on log Z from a sampler q:
/// E_q[log r(x_1) + log P_F^prior(τ) - log q(τ)]. `log_q` must be the exact
/// trajectory log-likelihoods under the sampler that produced `trajs`.
pub fn elbo_log_z(
    prior: &PriorModel,
    reward: &dyn Reward,
    trajs: &[Trajectory],
    log_q: &[f64],
) -> Result<(f64, f64)> {
    if trajs.len() != log_q.len() || trajs.is_empty() {
        return Err(Error::Config("elbo needs matching non-empty trajectories and log_q".into()));
    }
    let policy = prior.policy();
    let vals: Vec<f64> = trajs
        .iter()
        .zip(log_q)
        .map(|(t, lq)| {
            Ok(reward.log_r(t.terminal()) + trajectory_log_pf(&policy, t)? - lq)
        })
        .collect::<Result<_>>()?;
    Ok(mean_stderr(&vals))
}

/// ELBO for an RTB posterior: roll out the posterior and score its own
/// trajectories.
pub fn elbo_log_z_posterior(
    model: &PosteriorModel,
    reward: &dyn Reward,
    conditioning: Option<&[f64]>,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = model.policy(
        if model.drift.gate.is_some() { Some(reward) } else { None },
        conditioning,
    );
    let mut trajs = Vec::with_capacity(n);
    let chunk = 1024;
    while trajs.len() < n {
        let take = chunk.min(n - trajs.len());
        let batch = sample_forward_batch(&policy, take, &mut rng, 0.0)?;
        trajs.extend(batch.trajectories);
    }
    // log q(τ) - log p_prior(τ) - log r = ratio, so elbo = -mean(ratio)
    let ratios = log_ratios(model, reward, conditioning, &trajs)?;
    let vals: Vec<f64> = ratios.iter().map(|r| -r).collect();
    Ok(mean_stderr(&vals))
}

/// Normalized mass histogram over a fixed 2-d grid; out-of-range samples
/// are clipped into the edge bins and counted.
#[derive(Debug, Clone)]
pub struct Histogram2d {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub mass: Vec<f64>,
    /// Fraction of total weight that fell outside [lo, hi]².
    pub clipped_fraction: f64,
}

impl Histogram2d {
    fn bin_of(&self, v: f64) -> (usize, bool) {
        let w = (self.hi - self.lo) / self.bins as f64;
        let raw = ((v - self.lo) / w).floor();
        if raw < 0.0 {
            (0, true)
        } else if raw >= self.bins as f64 {
            (self.bins - 1, v > self.hi)
        } else {
            (raw as usize, false)
        }
    }

    /// Samples restricted to coordinate pair `(ci, cj)`, optionally
    /// weighted (weights are normalized internally).
    pub fn from_samples(
        samples: &[Vec<f64>],
        weights: Option<&[f64]>,
        coords: (usize, usize),
        bins: usize,
        lo: f64,
        hi: f64,
    ) -> Result<Self> {
        if samples.is_empty() || bins == 0 || !(hi > lo) {
            return Err(Error::Config("histogram needs samples, bins > 0 and hi > lo".into()));
        }
        if let Some(w) = weights {
            if w.len() != samples.len() {
                return Err(Error::Config("weight count does not match samples".into()));
            }
        }
        let mut h = Histogram2d { bins, lo, hi, mass: vec![0.0; bins * bins], clipped_fraction: 0.0 };
        let mut total = 0.0;
        let mut clipped = 0.0;
        for (k, s) in samples.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[k]);
            if !(w.is_finite()) || w < 0.0 {
                return Err(Error::numeric("histogram", "invalid sample weight"));
            }
            let (bi, ci) = h.bin_of(s[coords.0]);
            let (bj, cj) = h.bin_of(s[coords.1]);
            h.mass[bi * bins + bj] += w;
            if ci || cj {
                clipped += w;
            }
            total += w;
        }
        if !(total > 0.0) {
            return Err(Error::numeric("histogram", "zero total weight"));
        }
        for m in &mut h.mass {
            *m /= total;
        }
        h.clipped_fraction = clipped / total;
        Ok(h)
    }

    /// Cell masses of a density by midpoint evaluation, normalized over the
    /// grid (mass outside the window is ignored, so pick a window that
    /// covers the density).
    pub fn from_log_density(
        log_density: impl Fn(f64, f64) -> f64,
        bins: usize,
        lo: f64,
        hi: f64,
    ) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::Config("histogram needs bins > 0 and hi > lo".into()));
        }
        let w = (hi - lo) / bins as f64;
        let mut logs = Vec::with_capacity(bins * bins);
        for i in 0..bins {
            let x = lo + (i as f64 + 0.5) * w;
            for j in 0..bins {
                let y = lo + (j as f64 + 0.5) * w;
                logs.push(log_density(x, y));
            }
        }
        let norm = log_sum_exp(&logs);
        let mass: Vec<f64> = logs.iter().map(|l| (l - norm).exp()).collect();
        Ok(Histogram2d { bins, lo, hi, mass, clipped_fraction: 0.0 })
    }

    /// Total variation distance: half the L1 distance of the mass vectors.
    pub fn tv(&self, other: &Histogram2d) -> Result<f64> {
        if self.bins != other.bins || self.lo != other.lo || self.hi != other.hi {
            return Err(Error::Config("histogram grids do not match".into()));
        }
        Ok(0.5
            * self
                .mass
                .iter()
                .zip(&other.mass)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }
}

/// RTB residual statistics over fresh posterior rollouts: mean and standard
/// deviation of log Z + log P_F^post - log r - log P_F^prior.
pub fn rtb_residual_stats(
    model: &PosteriorModel,
    reward: &dyn Reward,
    conditioning: Option<&[f64]>,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = model.policy(
        if model.drift.gate.is_some() { Some(reward) } else { None },
        conditioning,
    );
    let batch = sample_forward_batch(&policy, n, &mut rng, 0.0)?;
    if batch.trajectories.is_empty() {
        return Err(Error::numeric("rtb_residual_stats", "all rollouts aborted"));
    }
    let lz = model.log_z.value(conditioning)?;
    let ratios = log_ratios(model, reward, conditioning, &batch.trajectories)?;
    let resids: Vec<f64> = ratios.iter().map(|r| r + lz).collect();
    let mean = resids.iter().sum::<f64>() / resids.len() as f64;
    let var = resids.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / resids.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Fraction of samples nearest (in Euclidean distance) to each mode center.
pub fn mode_mass(samples: &[Vec<f64>], modes: &[Vec<f64>]) -> Result<Vec<f64>> {
    if samples.is_empty() || modes.is_empty() {
        return Err(Error::Config("mode_mass needs samples and mode centers".into()));
    }
    let mut counts = vec![0usize; modes.len()];
    for s in samples {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, m) in modes.iter().enumerate() {
            let d: f64 = s.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        counts[best] += 1;
    }
    Ok(counts.iter().map(|c| *c as f64 / samples.len() as f64).collect())
}

/// Self-normalized importance weights w_i ∝ r(x_i) for prior samples;
/// useful as a reference sample of the posterior.
pub fn importance_weights(log_rs: &[f64]) -> Result<Vec<f64>> {
    if log_rs.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::numeric("importance_weights", "all weights zero"));
    }
    let norm = log_sum_exp(log_rs);
    Ok(log_rs.iter().map(|l| (l - norm).exp()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::ConstReward;

    #[test]
    fn constant_reward_gives_exact_log_z() {
        let log_rs = vec![0.0; 100];
        let (z, se) = is_log_z_from_log_rs(&log_rs, 1).unwrap();
        assert_eq!(z, 0.0);
        assert_eq!(se, 0.0);
        let shifted = vec![-2.5; 50];
        let (z2, _) = is_log_z_from_log_rs(&shifted, 1).unwrap();
        assert!((z2 - (-2.5)).abs() < 1e-14);
    }

    #[test]
    fn zero_overlap_is_an_error() {
        let log_rs = vec![f64::NEG_INFINITY; 10];
        assert!(is_log_z_from_log_rs(&log_rs, 1).is_err());
    }

    #[test]
    fn is_log_z_two_point_oracle() {
        // r in {1, e}: Z = (1 + e)/2
        let log_rs = vec![0.0, 1.0];
        let (z, _) = is_log_z_from_log_rs(&log_rs, 1).unwrap();
        let expect = ((1.0 + 1.0f64.exp()) / 2.0).ln();
        assert!((z - expect).abs() < 1e-14);
    }

    #[test]
    fn histogram_tv_identical_is_zero_and_disjoint_is_one() {
        let a = vec![vec![0.5, 0.5]; 10];
        let b = vec![vec![-0.5, -0.5]; 10];
        let ha = Histogram2d::from_samples(&a, None, (0, 1), 4, -1.0, 1.0).unwrap();
        let hb = Histogram2d::from_samples(&b, None, (0, 1), 4, -1.0, 1.0).unwrap();
        assert_eq!(ha.tv(&ha).unwrap(), 0.0);
        assert_eq!(ha.tv(&hb).unwrap(), 1.0);
    }

    #[test]
    fn histogram_clips_out_of_range_samples() {
        let s = vec![vec![5.0, 0.0], vec![0.0, 0.0]];
        let h = Histogram2d::from_samples(&s, None, (0, 1), 4, -1.0, 1.0).unwrap();
        assert!((h.clipped_fraction - 0.5).abs() < 1e-15);
        assert!((h.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn density_histogram_matches_uniform() {
        let h = Histogram2d::from_log_density(|_, _| 0.0, 8, -1.0, 1.0).unwrap();
        for m in &h.mass {
            assert!((m - 1.0 / 64.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_histogram_uses_weights() {
        let s = vec![vec![0.5, 0.5], vec![-0.5, -0.5]];
        let h = Histogram2d::from_samples(&s, Some(&[3.0, 1.0]), (0, 1), 2, -1.0, 1.0).unwrap();
        // first sample in bin (1,1), second in (0,0)
        assert!((h.mass[3] - 0.75).abs() < 1e-15);
        assert!((h.mass[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn mode_mass_splits_by_nearest_center() {
        let samples = vec![vec![2.0, 2.0], vec![1.9, 2.2], vec![-2.0, -2.0], vec![-1.8, -2.1]];
        let modes = vec![vec![2.0, 2.0], vec![-2.0, -2.0]];
        let mass = mode_mass(&samples, &modes).unwrap();
        assert_eq!(mass, vec![0.5, 0.5]);
    }

    #[test]
    fn importance_weights_normalize() {
        let w = importance_weights(&[0.0, 0.0, (2.0f64).ln()]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!((w[2] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn mean_log_reward_of_constant() {
        let r = ConstReward { dim: 2, log_value: -1.25 };
        let samples = vec![vec![0.0, 0.0]; 5];
        let (m, se) = mean_log_reward(&samples, &r);
        assert_eq!(m, -1.25);
        assert_eq!(se, 0.0);
    }
}
