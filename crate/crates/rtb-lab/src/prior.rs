//! Prior training: trajectory-balance against a known target density, or
//! denoising regression onto the exact bridge drift. Both produce a
//! `PriorModel` whose terminal marginal approximates the target.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    collect_drift_grads, load_drift_params, sample_backward_trajectory, sample_forward_batch,
    trajectory_log_pb, DriftModel, Policy, Schedule, Trajectory, TransitionBatch,
};
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::numerics::{Activation, AdamState, Tape, Tensor};

/// Loss above this is treated as numerical divergence.
const DIVERGE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorTrainConfig {
    /// "tb" (trajectory balance) or "dsm" (denoising regression).
    pub method: String,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// The normalization estimate gets a faster learning rate.
    pub logz_lr_mult: f64,
    /// Initial uniform drift-noise amplitude, decayed linearly to zero.
    pub explore_eps: f64,
    /// Fraction of each batch built by noising exact target samples through
    /// the backward bridge (off-policy, TB only).
    pub backtrack_prob: f64,
    pub seed: u64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        PriorTrainConfig {
            method: "tb".into(),
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            iters: 2000,
            batch: 128,
            lr: 1e-3,
            logz_lr_mult: 10.0,
            explore_eps: 1.0,
            backtrack_prob: 0.25,
            seed: 0,
        }
    }
}

impl PriorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method != "tb" && self.method != "dsm" {
            return Err(Error::Config(format!(
                "unknown prior training method `{}` (use tb or dsm)",
                self.method
            )));
        }
        if self.batch == 0 || self.iters == 0 {
            return Err(Error::Config("prior training needs batch > 0 and iters > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.backtrack_prob) {
            return Err(Error::Config("backtrack_prob must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0) || !(self.logz_lr_mult > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.explore_eps < 0.0 {
            return Err(Error::Config("explore_eps must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A trained diffusion sampler for a known target density.
#[derive(Debug, Clone)]
pub struct PriorModel {
    pub drift: DriftModel,
    /// Learned log-normalization of the target (TB); 0 for denoising
    /// training, whose target density is normalized by construction.
    pub log_z: f64,
    pub schedule: Schedule,
    pub target: GaussianMixture,
}

impl PriorModel {
    pub fn policy(&self) -> Policy<'_> {
        Policy::unconditional(&self.drift, self.schedule)
    }

    /// Terminal samples in chunks (bounded peak memory); aborted
    /// trajectories are re-drawn so exactly `n` samples come back.
    pub fn sample_terminals(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = self.policy();
        let mut out = Vec::with_capacity(n);
        let chunk = 4096;
        while out.len() < n {
            let take = chunk.min(n - out.len());
            let batch = sample_forward_batch(&policy, take, &mut rng, 0.0)?;
            for t in batch.trajectories {
                out.push(t.terminal().to_vec());
            }
        }
        Ok(out)
    }

    pub fn checksum(&self) -> u64 {
        self.drift.checksum()
    }
}

/// Per-iteration diagnostics from a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub aborted: usize,
}

/// TB loss over a trajectory batch and its gradient in (drift params, log Z).
/// Loss = mean_b (log Z + log P_F(τ_b) - log ρ(x_1^b) - log P_B(τ_b))².
pub fn tb_loss_and_grads(
    drift: &DriftModel,
    log_z: f64,
    trajs: &[Trajectory],
    schedule: &Schedule,
    target: &GaussianMixture,
) -> Result<(f64, Vec<f64>, f64)> {
    let policy = Policy::unconditional(drift, *schedule);
    let tb = TransitionBatch::build(trajs, &policy)?;
    let consts: Vec<f64> = trajs
        .iter()
        .map(|t| {
            Ok(target.log_density(t.terminal()) + trajectory_log_pb(t, schedule)?)
        })
        .collect::<Result<_>>()?;

    let mut tape = Tape::new();
    let vars = load_drift_params(drift, &mut tape)?;
    let lz = tape.param(Tensor::scalar(log_z))?;
    let lp = crate::diffusion::log_pf_tape(&mut tape, drift, &vars, &tb, schedule, None)?;
    let shifted = tape.add_vec_scalar(lp, lz)?;
    let cvar = tape.constant(Tensor::new(trajs.len(), 1, consts)?)?;
    let resid = tape.sub(shifted, cvar)?;
    let sq = tape.square(resid)?;
    let loss = tape.mean_all(sq)?;

    let grads = tape.backward(loss)?;
    let drift_grads = collect_drift_grads(drift, &vars, &grads);
    let lz_grad = grads[lz].as_ref().map_or(0.0, |g| g.item());
    Ok((tape.value(loss).item(), drift_grads, lz_grad))
}

/// Train a TB prior against a normalized target density (log Z should
/// converge near zero).
pub fn train_prior_tb(
    target: &GaussianMixture,
    schedule: Schedule,
    cfg: &PriorTrainConfig,
) -> Result<(PriorModel, TrainLog)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let drift_rng = &mut rng;
    let mut drift = DriftModel::new(
        target.dim(),
        0,
        &cfg.hidden,
        None,
        cfg.activation,
        drift_rng,
    )?;
    let mut log_z = 0.0;
    let mut adam = AdamState::new(drift.param_count(), cfg.lr);
    let mut adam_z = AdamState::new(1, cfg.lr * cfg.logz_lr_mult);
    let mut log = TrainLog::default();

    for iter in 0..cfg.iters {
        let eps = cfg.explore_eps * (1.0 - iter as f64 / cfg.iters as f64);
        let n_bt = (cfg.batch as f64 * cfg.backtrack_prob).round() as usize;
        let n_on = cfg.batch - n_bt;

        let mut trajs = Vec::with_capacity(cfg.batch);
        if n_on > 0 {
            let policy = Policy::unconditional(&drift, schedule);
            let batch = sample_forward_batch(&policy, n_on, &mut rng, eps)?;
            log.aborted += batch.aborted;
            trajs.extend(batch.trajectories);
        }
        for _ in 0..n_bt {
            let x1 = target.sample(&mut rng);
            trajs.push(sample_backward_trajectory(&x1, &schedule, &mut rng)?);
        }
        if trajs.is_empty() {
            return Err(Error::Divergence("prior training loss blew up".into()));
        }

        let (loss, drift_grads, lz_grad) =
            tb_loss_and_grads(&drift, log_z, &trajs, &schedule, target)?;
        if !loss.is_finite() || loss > DIVERGE_LOSS {
            return Err(Error::Divergence("prior training loss blew up".into()));
        }
        log.losses.push(loss);

        let mut params = drift.flatten();
        adam.step(&mut params, &drift_grads);
        drift.unflatten(&params)?;
        let mut z = [log_z];
        adam_z.step(&mut z, &[lz_grad]);
        log_z = z[0];
    }

    Ok((PriorModel { drift, log_z, schedule, target: target.clone() }, log))
}

/// Denoising regression loss and gradient: draw x_1 from the target, noise
/// to x_t along the bridge, regress the drift net onto the exact bridge
/// drift (x_1 - x_t)/(1 - t).
pub fn dsm_loss_and_grads(
    drift: &DriftModel,
    target: &GaussianMixture,
    schedule: &Schedule,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<f64>)> {
    let d = target.dim();
    let t_steps = schedule.steps();
    let in_dim = DriftModel::input_dim(d, 0);
    let sigma2 = schedule.sigma() * schedule.sigma();

    let mut inputs = Vec::with_capacity(batch * in_dim);
    let mut targets = Vec::with_capacity(batch * d);
    for _ in 0..batch {
        let x1 = target.sample(rng);
        // time index uniform on {0, .., T-1}; i = 0 pins x_t at the origin
        let i = rng.gen_range(0..t_steps);
        let t = schedule.time(i);
        let var = sigma2 * t * (1.0 - t);
        let sd = var.sqrt();
        let mut xt = vec![0.0; d];
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            xt[j] = t * x1[j] + sd * z;
        }
        inputs.extend_from_slice(&xt);
        inputs.extend_from_slice(&crate::diffusion::time_embed(t));
        for j in 0..d {
            targets.push((x1[j] - xt[j]) / (1.0 - t));
        }
    }

    let mut tape = Tape::new();
    let vars = load_drift_params(drift, &mut tape)?;
    let input_var = tape.constant(Tensor::new(batch, in_dim, inputs)?)?;
    let u = drift.net.forward_tape(&mut tape, &vars.net, input_var)?;
    let dev = tape.sub_from_const(Tensor::new(batch, d, targets)?, u)?;
    let ss = tape.row_sum_sq(dev)?;
    let loss = tape.mean_all(ss)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), collect_drift_grads(drift, &vars, &grads)))
}

pub fn train_prior_dsm(
    target: &GaussianMixture,
    schedule: Schedule,
    cfg: &PriorTrainConfig,
) -> Result<(PriorModel, TrainLog)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drift =
        DriftModel::new(target.dim(), 0, &cfg.hidden, None, cfg.activation, &mut rng)?;
    let mut adam = AdamState::new(drift.param_count(), cfg.lr);
    let mut log = TrainLog::default();

    for _ in 0..cfg.iters {
        let (loss, grads) = dsm_loss_and_grads(&drift, target, &schedule, cfg.batch, &mut rng)?;
        if !loss.is_finite() || loss > DIVERGE_LOSS {
            return Err(Error::Divergence("prior training loss blew up".into()));
        }
        log.losses.push(loss);
        let mut params = drift.flatten();
        adam.step(&mut params, &grads);
        drift.unflatten(&params)?;
    }

    Ok((PriorModel { drift, log_z: 0.0, schedule, target: target.clone() }, log))
}

/// Dispatch on `cfg.method`.
pub fn train_prior(
    target: &GaussianMixture,
    schedule: Schedule,
    cfg: &PriorTrainConfig,
) -> Result<(PriorModel, TrainLog)> {
    cfg.validate()?;
    match cfg.method.as_str() {
        "tb" => train_prior_tb(target, schedule, cfg),
        "dsm" => train_prior_dsm(target, schedule, cfg),
        _ => unreachable!("validated"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(
        drift: &DriftModel,
        grads: &[f64],
        mut value_at: impl FnMut(&DriftModel) -> f64,
        tol: f64,
    ) {
        let flat = drift.flatten();
        let h = 1e-5;
        for k in (0..flat.len()).step_by(7) {
            let mut dp = drift.clone();
            let mut fp = flat.clone();
            fp[k] += h;
            dp.unflatten(&fp).unwrap();
            let vp = value_at(&dp);
            let mut dm = drift.clone();
            let mut fm = flat.clone();
            fm[k] -= h;
            dm.unflatten(&fm).unwrap();
            let vm = value_at(&dm);
            let fd = (vp - vm) / (2.0 * h);
            let denom = fd.abs().max(1e-4);
            assert!(
                (grads[k] - fd).abs() / denom < tol,
                "param {k}: {} vs {}",
                grads[k],
                fd
            );
        }
    }

    #[test]
    fn tb_gradient_matches_finite_differences() {
        let target = GaussianMixture::std_normal(1);
        let schedule = Schedule::new(4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let drift = DriftModel::new(1, 0, &[6], None, Activation::Tanh, &mut rng).unwrap();
        let policy = Policy::unconditional(&drift, schedule);
        let batch = sample_forward_batch(&policy, 5, &mut rng, 0.0).unwrap();
        let trajs = batch.trajectories;
        let log_z = 0.3;

        let (_, grads, lz_grad) =
            tb_loss_and_grads(&drift, log_z, &trajs, &schedule, &target).unwrap();
        fd_check(
            &drift,
            &grads,
            |d| tb_loss_and_grads(d, log_z, &trajs, &schedule, &target).unwrap().0,
            1e-4,
        );
        // log Z direction
        let h = 1e-6;
        let vp = tb_loss_and_grads(&drift, log_z + h, &trajs, &schedule, &target).unwrap().0;
        let vm = tb_loss_and_grads(&drift, log_z - h, &trajs, &schedule, &target).unwrap().0;
        let fd = (vp - vm) / (2.0 * h);
        assert!((lz_grad - fd).abs() / fd.abs().max(1e-4) < 1e-5, "{lz_grad} vs {fd}");
    }

    #[test]
    fn dsm_gradient_matches_finite_differences() {
        let target = GaussianMixture::two_mode_2d();
        let schedule = Schedule::new(8, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let drift = DriftModel::new(2, 0, &[6], None, Activation::Gelu, &mut rng).unwrap();
        // freeze the minibatch by reusing one RNG seed
        let grads = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            dsm_loss_and_grads(&drift, &target, &schedule, 6, &mut r).unwrap().1
        };
        fd_check(
            &drift,
            &grads,
            |d| {
                let mut r = ChaCha8Rng::seed_from_u64(9);
                dsm_loss_and_grads(d, &target, &schedule, 6, &mut r).unwrap().0
            },
            1e-4,
        );
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let target = GaussianMixture::std_normal(1);
        let schedule = Schedule::new(4, 1.0).unwrap();
        let cfg = PriorTrainConfig {
            hidden: vec![8],
            iters: 5,
            batch: 8,
            ..PriorTrainConfig::default()
        };
        let (a, la) = train_prior_tb(&target, schedule, &cfg).unwrap();
        let (b, lb) = train_prior_tb(&target, schedule, &cfg).unwrap();
        assert_eq!(a.drift.flatten(), b.drift.flatten());
        assert_eq!(a.log_z, b.log_z);
        assert_eq!(la.losses, lb.losses);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = PriorTrainConfig { backtrack_prob: 1.5, ..PriorTrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = PriorTrainConfig { batch: 0, ..PriorTrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
