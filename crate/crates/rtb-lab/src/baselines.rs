//! Training-free guidance baselines on top of a frozen prior drift:
//! posterior-sampling guidance through the denoised point estimate (DPS)
//! and a covariance-law approximation for linear-Gaussian rewards (CLA).
//! Both modify sampling only; the prior parameters never move.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::{forward_step_logdensity, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::prior::PriorModel;
use crate::reward::Reward;
use crate::tasks::TaskReward;

/// Below this time (in steps) the denoised estimate x_t/t is too noisy;
/// guidance falls back to the current state / capped variance.
const MIN_TIME_STEPS: f64 = 4.0;

pub enum Guidance<'a> {
    /// u += ζ ∇_x log r(x̂₁), x̂₁ = x_t/t (chain-rule 1/t included); for
    /// t < 4Δt the estimate is x_t itself.
    Dps { reward: &'a dyn Reward, zeta: f64 },
    /// Linear-Gaussian only: u += ∇_x log N(y | A x̂₁, (σ_y² + σ²(1-t)/t) I)
    /// with the variance inflation capped below 4Δt.
    Cla { reward: &'a TaskReward },
}

pub struct GuidedSampler<'a> {
    pub prior: &'a PriorModel,
    pub guidance: Guidance<'a>,
}

pub struct GuidedRollout {
    pub trajectories: Vec<Trajectory>,
    pub aborted: usize,
    /// Guidance evaluations zeroed because the gradient was non-finite.
    pub zeroed: usize,
}

impl<'a> GuidedSampler<'a> {
    pub fn new(prior: &'a PriorModel, guidance: Guidance<'a>) -> Result<Self> {
        if let Guidance::Cla { reward } = &guidance {
            if reward.linear().is_none() {
                return Err(Error::Config("CLA guidance needs a linear-Gaussian reward".into()));
            }
        }
        let rdim = match &guidance {
            Guidance::Dps { reward, .. } => reward.dim(),
            Guidance::Cla { reward } => reward.dim(),
        };
        if rdim != prior.drift.dim {
            return Err(Error::Config("guidance reward dimension does not match prior".into()));
        }
        Ok(GuidedSampler { prior, guidance })
    }

    /// Guidance term added to the prior drift at (x, t); zero (and counted)
    /// when non-finite.
    fn guidance_term(&self, x: &[f64], t: f64, zeroed: &mut usize) -> Vec<f64> {
        let d = x.len();
        let dt = self.prior.schedule.dt();
        let min_t = MIN_TIME_STEPS * dt;
        let g = match &self.guidance {
            Guidance::Dps { reward, zeta } => {
                if t >= min_t {
                    let xhat: Vec<f64> = x.iter().map(|v| v / t).collect();
                    let mut g = reward.grad_log_r(&xhat);
                    for v in &mut g {
                        *v *= zeta / t;
                    }
                    g
                } else {
                    let mut g = reward.grad_log_r(x);
                    for v in &mut g {
                        *v *= zeta;
                    }
                    g
                }
            }
            Guidance::Cla { reward } => {
                let (a, _) = reward.linear().expect("validated");
                let sigma = self.prior.schedule.sigma();
                // cap both the denoising scale and the variance inflation
                let t_eff = t.max(min_t);
                let var = reward.sigma_y * reward.sigma_y
                    + sigma * sigma * (1.0 - t).max(0.0) / t_eff;
                let xhat = DVector::from_iterator(d, x.iter().map(|v| v / t_eff));
                let resid = DVector::from_column_slice(&reward.y) - a * xhat;
                let g = a.transpose() * resid / (var * t_eff);
                g.as_slice().to_vec()
            }
        };
        if g.iter().all(|v| v.is_finite()) {
            g
        } else {
            *zeroed += 1;
            vec![0.0; d]
        }
    }

    pub fn drift_at(&self, x: &[f64], t: f64, zeroed: &mut usize) -> Result<Vec<f64>> {
        let mut u = self.prior.policy().drift_at(x, t)?;
        let g = self.guidance_term(x, t, zeroed);
        for (ui, gi) in u.iter_mut().zip(&g) {
            *ui += gi;
        }
        Ok(u)
    }

    /// Euler-Maruyama rollout under the guided drift.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<GuidedRollout> {
        let d = self.prior.drift.dim;
        let schedule = self.prior.schedule;
        let t_steps = schedule.steps();
        let dt = schedule.dt();
        let step_sd = schedule.sigma2_dt().sqrt();
        let policy = self.prior.policy();

        let mut xs = Tensor::zeros(n, d);
        let mut alive = vec![true; n];
        let mut zeroed = 0;
        let mut paths: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut p = Vec::with_capacity((t_steps + 1) * d);
                p.extend(std::iter::repeat(0.0).take(d));
                p
            })
            .collect();

        for i in 0..t_steps {
            let t = schedule.time(i);
            let u = policy.drift_batch(&xs, t)?;
            for r in 0..n {
                if !alive[r] {
                    for _ in 0..d {
                        let _: f64 = StandardNormal.sample(rng);
                    }
                    continue;
                }
                let g = self.guidance_term(xs.row(r), t, &mut zeroed);
                let mut ok = true;
                let mut next = vec![0.0; d];
                for c in 0..d {
                    let z: f64 = StandardNormal.sample(rng);
                    next[c] = xs.get(r, c) + (u.get(r, c) + g[c]) * dt + step_sd * z;
                    if !next[c].is_finite() {
                        ok = false;
                    }
                }
                if !ok {
                    alive[r] = false;
                    continue;
                }
                paths[r].extend_from_slice(&next);
                for c in 0..d {
                    xs.set(r, c, next[c]);
                }
            }
        }

        let mut trajectories = Vec::new();
        let mut aborted = 0;
        for (r, p) in paths.into_iter().enumerate() {
            if alive[r] {
                trajectories.push(Trajectory::from_states(d, t_steps, p)?);
            } else {
                aborted += 1;
            }
        }
        Ok(GuidedRollout { trajectories, aborted, zeroed })
    }

    /// Chunked terminal sampling; aborted trajectories are re-drawn.
    pub fn sample_terminals(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        let chunk = 4096;
        while out.len() < n {
            let take = chunk.min(n - out.len());
            let roll = self.sample(take, &mut rng)?;
            for t in roll.trajectories {
                out.push(t.terminal().to_vec());
            }
        }
        Ok(out)
    }

    /// Exact log-likelihood of a trajectory under the guided policy.
    pub fn trajectory_log_pf(&self, traj: &Trajectory) -> Result<f64> {
        let mut zeroed = 0;
        let mut total = 0.0;
        for i in 0..traj.steps() {
            let t = self.prior.schedule.time(i);
            let u = self.drift_at(traj.state(i), t, &mut zeroed)?;
            total += forward_step_logdensity(
                traj.state(i),
                traj.state(i + 1),
                &u,
                &self.prior.schedule,
            )?;
        }
        Ok(total)
    }
}
