//! Posterior fine-tuning with relative trajectory balance: starting from a
//! trained prior drift, learn a sampler for p(x) ∝ prior(x) · r(x) together
//! with the log-partition-function estimate. Supports a variance
//! (VarGrad-style) objective, residual clipping, partial-trajectory
//! backprop, replay-buffer backtracking, a Langevin drift head, and
//! amortization over measurements.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::ReplayBuffer;
use crate::diffusion::{
    collect_drift_grads, load_drift_params, log_pf_plain, log_pf_tape, sample_forward_batch,
    DriftModel, Policy, Schedule, Trajectory, TransitionBatch,
};
use crate::error::{Error, Result};
use crate::gmm::log_sum_exp;
use crate::numerics::{AdamState, FeedForwardNet, Tape, Tensor, VarId};
use crate::prior::PriorModel;
use crate::reward::Reward;
use crate::tasks::TaskFamily;

/// Mean |log-ratio| above this counts toward the divergence guard.
const DIVERGE_RATIO: f64 = 50.0;
/// Consecutive bad batches before training aborts.
const DIVERGE_PATIENCE: usize = 200;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RtbConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub logz_lr_mult: f64,
    /// Linear learning-rate decay: the last iteration runs at lr times this.
    pub lr_final_mult: f64,
    /// Variance-of-log-ratio objective instead of squared TB residual; the
    /// normalization is then tracked as a running estimate, not a parameter.
    pub vargrad: bool,
    /// Zero the gradient of samples whose |residual| is below this.
    pub clip_delta: Option<f64>,
    /// Backprop through only this many randomly placed consecutive
    /// transitions per trajectory (values stay exact).
    pub partial_steps: Option<usize>,
    /// Fraction of each batch drawn from the replay buffer by backtracking.
    pub offpolicy_frac: f64,
    pub buffer_capacity: usize,
    pub buffer_beta: f64,
    /// Add a gated reward-gradient term to the drift.
    pub langevin: bool,
    pub langevin_hidden: Vec<usize>,
    /// Evaluate reward gradients at x_t/t instead of x_t.
    pub rescale_intermediate: bool,
    /// Amortize over measurements: condition the drift on y and learn
    /// log Z(y) as a small network.
    pub conditional: bool,
    pub znet_hidden: Vec<usize>,
    /// Uniform drift-noise amplitude during rollouts, decayed linearly.
    pub explore_eps: f64,
    /// Polyak averaging: return the mean of the parameters over this final
    /// fraction of iterations instead of the last iterate. Squared-residual
    /// objectives sit at an SGD noise floor long after the loss plateaus;
    /// averaging removes that noise without more compute.
    pub tail_avg_frac: f64,
    pub seed: u64,
}

impl Default for RtbConfig {
    fn default() -> Self {
        RtbConfig {
            iters: 1500,
            batch: 64,
            lr: 5e-4,
            logz_lr_mult: 10.0,
            lr_final_mult: 1.0,
            vargrad: false,
            clip_delta: None,
            partial_steps: None,
            offpolicy_frac: 0.0,
            buffer_capacity: 10_000,
            buffer_beta: 10.0,
            langevin: false,
            langevin_hidden: vec![32],
            rescale_intermediate: false,
            conditional: false,
            znet_hidden: vec![64, 64],
            explore_eps: 0.0,
            tail_avg_frac: 0.0,
            seed: 0,
        }
    }
}

impl RtbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.iters == 0 {
            return Err(Error::Config("posterior training needs batch > 0 and iters > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.offpolicy_frac) {
            return Err(Error::Config("offpolicy_frac must lie in [0, 1]".into()));
        }
        if let Some(d) = self.clip_delta {
            if !(d > 0.0) {
                return Err(Error::Config("clip_delta must be positive".into()));
            }
        }
        if let Some(k) = self.partial_steps {
            if k == 0 {
                return Err(Error::Config("partial_steps must be positive".into()));
            }
        }
        if !(self.lr_final_mult > 0.0 && self.lr_final_mult <= 1.0) {
            return Err(Error::Config("lr_final_mult must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.tail_avg_frac) {
            return Err(Error::Config("tail_avg_frac must lie in [0, 1]".into()));
        }
        if self.vargrad && self.conditional {
            return Err(Error::Config(
                "vargrad tracks one normalization constant; it cannot amortize over y".into(),
            ));
        }
        Ok(())
    }
}

/// Log-partition estimate: a scalar for a fixed reward, a network over the
/// raw measurement when amortizing.
#[derive(Debug, Clone)]
pub enum LogZ {
    Scalar(f64),
    Net(FeedForwardNet),
}

impl LogZ {
    pub fn value(&self, y: Option<&[f64]>) -> Result<f64> {
        match self {
            LogZ::Scalar(v) => Ok(*v),
            LogZ::Net(net) => {
                let y = y.ok_or_else(|| Error::Config("log Z net needs a measurement".into()))?;
                let out = net.forward(&Tensor::new(1, y.len(), y.to_vec())?)?;
                Ok(out.item())
            }
        }
    }
}

/// A fine-tuned posterior sampler plus the frozen prior it is relative to.
#[derive(Debug, Clone)]
pub struct PosteriorModel {
    pub drift: DriftModel,
    pub log_z: LogZ,
    pub schedule: Schedule,
    pub prior_drift: DriftModel,
    /// Checksum of the prior drift at fine-tune start; the prior must never
    /// move during posterior training.
    pub prior_checksum: u64,
    pub rescale_intermediate: bool,
}

impl PosteriorModel {
    pub fn policy<'a>(
        &'a self,
        reward: Option<&'a dyn Reward>,
        conditioning: Option<&'a [f64]>,
    ) -> Policy<'a> {
        Policy {
            drift: &self.drift,
            schedule: self.schedule,
            conditioning,
            reward,
            rescale_intermediate: self.rescale_intermediate,
        }
    }

    pub fn prior_policy(&self) -> Policy<'_> {
        Policy::unconditional(&self.prior_drift, self.schedule)
    }

    pub fn sample_terminals(
        &self,
        reward: Option<&dyn Reward>,
        conditioning: Option<&[f64]>,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = self.policy(reward, conditioning);
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
}

/// What the posterior is trained against.
pub enum RewardSource<'a> {
    Single(&'a dyn Reward),
    /// Amortized: one measurement from `ys` per iteration, round robin.
    Conditional { family: &'a TaskFamily, ys: &'a [Vec<f64>] },
}

impl RewardSource<'_> {
    fn dim(&self) -> usize {
        match self {
            RewardSource::Single(r) => r.dim(),
            RewardSource::Conditional { family, .. } => family.dim(),
        }
    }

    fn cond_dim(&self, conditional: bool) -> usize {
        match (self, conditional) {
            (RewardSource::Conditional { family, .. }, true) => family.measurement_dim(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PosteriorTrainLog {
    pub losses: Vec<f64>,
    pub logz_track: Vec<f64>,
    pub aborted: usize,
    pub gate_zeroed: usize,
    /// Batches in which clipping removed every sample's gradient.
    pub all_clipped: usize,
    pub buffer_len: usize,
}

/// Copy prior first-layer weights into a wider input layout that appends
/// `extra` conditioning inputs; new rows start at zero so the fresh model
/// reproduces the prior drift exactly.
fn widen_first_layer(net: &FeedForwardNet, extra: usize) -> FeedForwardNet {
    if extra == 0 {
        return net.clone();
    }
    let mut widths = net.widths.clone();
    widths[0] += extra;
    let mut out = FeedForwardNet::zeros(&widths, net.activation);
    let old = &net.weights[0];
    for r in 0..old.rows() {
        for c in 0..old.cols() {
            out.weights[0].set(r, c, old.get(r, c));
        }
    }
    out.weights[1..].clone_from_slice(&net.weights[1..]);
    out.biases.clone_from_slice(&net.biases);
    out
}

/// Posterior drift initialized from the prior: identical output at start,
/// with optional zeroed conditioning rows and a Langevin gate head whose
/// output layer starts at zero (gate initially off).
fn init_posterior_drift(
    prior: &PriorModel,
    cond_dim: usize,
    cfg: &RtbConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DriftModel> {
    let net = widen_first_layer(&prior.drift.net, cond_dim);
    let gate = if cfg.langevin {
        let input = DriftModel::input_dim(prior.drift.dim, cond_dim);
        let mut gw = vec![input];
        gw.extend_from_slice(&cfg.langevin_hidden);
        gw.push(1);
        let mut g = FeedForwardNet::new(&gw, net.activation, rng)?;
        let last = g.weights.len() - 1;
        g.weights[last] = Tensor::zeros(g.weights[last].rows(), g.weights[last].cols());
        Some(g)
    } else {
        None
    };
    Ok(DriftModel { dim: prior.drift.dim, cond_dim, net, gate })
}

/// log Z parameters loaded on the tape for one iteration.
enum LogZVars {
    Scalar(VarId),
    Net(crate::numerics::NetVars),
}

/// One RTB objective evaluation: values, gradients, diagnostics.
struct StepOutput {
    loss: f64,
    mean_abs_resid: f64,
    logz_value: f64,
    drift_grads: Vec<f64>,
    logz_grads: Vec<f64>,
    all_clipped: bool,
    gate_zeroed: usize,
}

#[allow(clippy::too_many_arguments)]
fn rtb_step(
    drift: &DriftModel,
    log_z: &LogZ,
    prior_drift: &DriftModel,
    reward: &dyn Reward,
    conditioning: Option<&[f64]>,
    trajs: &[Trajectory],
    schedule: &Schedule,
    cfg: &RtbConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    let b = trajs.len();
    let t_steps = schedule.steps();

    let policy = Policy {
        drift,
        schedule: *schedule,
        conditioning,
        reward: if drift.gate.is_some() { Some(reward) } else { None },
        rescale_intermediate: cfg.rescale_intermediate,
    };
    let tb = TransitionBatch::build(trajs, &policy)?;

    // prior side carries no gradient; evaluate it outside the tape
    let prior_policy = Policy::unconditional(prior_drift, *schedule);
    let prior_tb = TransitionBatch::build(trajs, &prior_policy)?;
    let lp_prior = log_pf_plain(prior_drift, &prior_tb, schedule)?;

    let consts: Vec<f64> = trajs
        .iter()
        .zip(&lp_prior)
        .map(|(t, lp)| reward.log_r(t.terminal()) + lp)
        .collect();

    // partial backprop: one contiguous window of K transitions per trajectory
    let step_mask = cfg.partial_steps.map(|k| {
        let k = k.min(t_steps);
        let mut mask = vec![0.0; b * t_steps];
        for bi in 0..b {
            let start = rng.gen_range(0..=t_steps - k);
            for i in start..start + k {
                mask[bi * t_steps + i] = 1.0;
            }
        }
        Tensor::new(b * t_steps, 1, mask).expect("step mask")
    });

    let mut tape = Tape::new();
    let vars = load_drift_params(drift, &mut tape)?;
    let lp_post = log_pf_tape(&mut tape, drift, &vars, &tb, schedule, step_mask)?;
    let cvar = tape.constant(Tensor::new(b, 1, consts)?)?;

    // residual per trajectory; log Z enters except in vargrad mode
    let (resid, lz_vars, logz_value) = if cfg.vargrad {
        let r = tape.sub(lp_post, cvar)?;
        // variance minimizer: log Z* = -mean residual
        let v = -tape.value(r).data().iter().sum::<f64>() / b as f64;
        (r, None, v)
    } else {
        match log_z {
            LogZ::Scalar(z) => {
                let lz = tape.param(Tensor::scalar(*z))?;
                let shifted = tape.add_vec_scalar(lp_post, lz)?;
                (tape.sub(shifted, cvar)?, Some(LogZVars::Scalar(lz)), *z)
            }
            LogZ::Net(net) => {
                let y = conditioning
                    .ok_or_else(|| Error::Config("log Z net needs conditioning".into()))?;
                let zvars = net.load_params(&mut tape)?;
                let yin = tape.constant(Tensor::new(1, y.len(), y.to_vec())?)?;
                let lz = net.forward_tape(&mut tape, &zvars, yin)?;
                let zval = tape.value(lz).item();
                let shifted = tape.add_vec_scalar(lp_post, lz)?;
                (tape.sub(shifted, cvar)?, Some(LogZVars::Net(zvars)), zval)
            }
        }
    };

    // clipping: samples already fit within delta contribute no gradient
    let (resid, all_clipped) = match cfg.clip_delta {
        Some(delta) => {
            let vals = tape.value(resid).data().to_vec();
            let center = if cfg.vargrad {
                vals.iter().sum::<f64>() / b as f64
            } else {
                0.0
            };
            let mask: Vec<f64> = vals
                .iter()
                .map(|v| if (v - center).abs() < delta { 0.0 } else { 1.0 })
                .collect();
            let all = mask.iter().all(|&m| m == 0.0);
            (tape.grad_mask(resid, Tensor::new(b, 1, mask)?)?, all)
        }
        None => (resid, false),
    };

    let loss = if cfg.vargrad {
        let m = tape.mean_all(resid)?;
        let neg_m = tape.affine(m, -1.0, 0.0)?;
        let dev = tape.add_vec_scalar(resid, neg_m)?;
        let sq = tape.square(dev)?;
        tape.mean_all(sq)?
    } else {
        let sq = tape.square(resid)?;
        tape.mean_all(sq)?
    };

    let mean_abs_resid = {
        let vals = tape.value(resid).data();
        vals.iter().map(|v| v.abs()).sum::<f64>() / b as f64
    };

    let grads = tape.backward(loss)?;
    let drift_grads = collect_drift_grads(drift, &vars, &grads);
    let logz_grads = match (&lz_vars, log_z) {
        (Some(LogZVars::Scalar(lz)), _) => {
            vec![grads[*lz].as_ref().map_or(0.0, |g| g.item())]
        }
        (Some(LogZVars::Net(zvars)), LogZ::Net(net)) => net.collect_grads(zvars, &grads),
        _ => Vec::new(),
    };

    Ok(StepOutput {
        loss: tape.value(loss).item(),
        mean_abs_resid,
        logz_value,
        drift_grads,
        logz_grads,
        all_clipped,
        gate_zeroed: tb.gate_zeroed,
    })
}

/// Initial scalar log Z from importance sampling under the prior.
/// One RTB loss evaluation with gradients, for external gradient checks:
/// returns (loss, drift gradients, log-Z gradients). Deterministic given
/// `seed` (the rng only enters through partial-window choice).
pub fn rtb_loss_and_grads(
    drift: &DriftModel,
    log_z: &LogZ,
    prior_drift: &DriftModel,
    reward: &dyn Reward,
    conditioning: Option<&[f64]>,
    trajs: &[Trajectory],
    schedule: &Schedule,
    cfg: &RtbConfig,
    seed: u64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = rtb_step(drift, log_z, prior_drift, reward, conditioning, trajs, schedule, cfg, &mut rng)?;
    Ok((out.loss, out.drift_grads, out.logz_grads))
}

fn init_log_z(prior: &PriorModel, reward: &dyn Reward, seed: u64) -> Result<f64> {
    let samples = prior.sample_terminals(1024, seed)?;
    let logs: Vec<f64> = samples.iter().map(|x| reward.log_r(x)).collect();
    if logs.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Ok(-50.0);
    }
    Ok(log_sum_exp(&logs) - (logs.len() as f64).ln())
}

pub fn train_posterior(
    prior: &PriorModel,
    source: &RewardSource,
    cfg: &RtbConfig,
) -> Result<(PosteriorModel, PosteriorTrainLog)> {
    train_posterior_seeded(prior, source, cfg, &[])
}

/// As `train_posterior`, with the replay buffer pre-seeded with known
/// high-reward terminal points before the first iteration.
pub fn train_posterior_seeded(
    prior: &PriorModel,
    source: &RewardSource,
    cfg: &RtbConfig,
    seed_points: &[Vec<f64>],
) -> Result<(PosteriorModel, PosteriorTrainLog)> {
    cfg.validate()?;
    if source.dim() != prior.drift.dim {
        return Err(Error::Config("reward dimension does not match prior".into()));
    }
    if cfg.conditional && matches!(source, RewardSource::Single(_)) {
        return Err(Error::Config("conditional training needs a measurement set".into()));
    }
    let cond_dim = source.cond_dim(cfg.conditional);
    let prior_checksum = prior.drift.checksum();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drift = init_posterior_drift(prior, cond_dim, cfg, &mut rng)?;
    let mut log_z = if cfg.conditional {
        let mut zw = vec![cond_dim];
        zw.extend_from_slice(&cfg.znet_hidden);
        zw.push(1);
        LogZ::Net(FeedForwardNet::new(&zw, drift.net.activation, &mut rng)?)
    } else {
        let r0 = match source {
            RewardSource::Single(r) => *r,
            RewardSource::Conditional { .. } => {
                return Err(Error::Config(
                    "non-conditional training over a measurement set is ambiguous; pick one y"
                        .into(),
                ))
            }
        };
        LogZ::Scalar(init_log_z(prior, r0, cfg.seed ^ 0x5a5a)?)
    };

    let mut adam = AdamState::new(drift.param_count(), cfg.lr);
    let mut adam_z = match &log_z {
        LogZ::Scalar(_) => AdamState::new(1, cfg.lr * cfg.logz_lr_mult),
        LogZ::Net(n) => AdamState::new(n.param_count(), cfg.lr * cfg.logz_lr_mult),
    };
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, cfg.buffer_beta)?;
    if !seed_points.is_empty() {
        let seed_reward;
        let r: &dyn Reward = match source {
            RewardSource::Single(r) => *r,
            RewardSource::Conditional { family, ys } => {
                seed_reward = family.reward_with(ys[0].clone())?;
                &seed_reward
            }
        };
        for x in seed_points {
            buffer.insert(x.clone(), r.log_r(x), 0);
        }
    }
    let mut log = PosteriorTrainLog::default();
    let mut vargrad_z = f64::NAN;
    let mut bad_streak = 0usize;
    let mut diverge_at = DIVERGE_RATIO;

    let avg_from = cfg.iters - (cfg.tail_avg_frac * cfg.iters as f64).round() as usize;
    let mut avg_drift = vec![0.0; drift.param_count()];
    let mut avg_z = vec![
        0.0;
        match &log_z {
            LogZ::Scalar(_) => 1,
            LogZ::Net(n) => n.param_count(),
        }
    ];
    let mut avg_n = 0usize;

    for iter in 0..cfg.iters {
        // per-iteration reward and conditioning
        let owned_reward;
        let (reward, cond): (&dyn Reward, Option<Vec<f64>>) = match source {
            RewardSource::Single(r) => (*r, None),
            RewardSource::Conditional { family, ys } => {
                let y = &ys[iter % ys.len()];
                owned_reward = family.reward_with(y.clone())?;
                (&owned_reward, if cfg.conditional { Some(y.clone()) } else { None })
            }
        };
        let cond_slice = cond.as_deref();

        let eps = cfg.explore_eps * (1.0 - iter as f64 / cfg.iters as f64);
        let n_off = if buffer.is_empty() {
            0
        } else {
            (cfg.batch as f64 * cfg.offpolicy_frac).round() as usize
        };
        let n_on = cfg.batch - n_off;

        let mut trajs = Vec::with_capacity(cfg.batch);
        if n_on > 0 {
            let policy = Policy {
                drift: &drift,
                schedule: prior.schedule,
                conditioning: cond_slice,
                reward: if drift.gate.is_some() { Some(reward) } else { None },
                rescale_intermediate: cfg.rescale_intermediate,
            };
            let batch = sample_forward_batch(&policy, n_on, &mut rng, eps)?;
            log.aborted += batch.aborted;
            for t in &batch.trajectories {
                buffer.insert(t.terminal().to_vec(), reward.log_r(t.terminal()), iter as u64);
            }
            trajs.extend(batch.trajectories);
        }
        if n_off > 0 {
            trajs.extend(buffer.backtrack_batch(n_off, &prior.schedule, &mut rng)?);
        }
        if trajs.is_empty() {
            return Err(Error::Divergence("all rollouts aborted".into()));
        }

        let out = rtb_step(
            &drift,
            &log_z,
            &prior.drift,
            reward,
            cond_slice,
            &trajs,
            &prior.schedule,
            cfg,
            &mut rng,
        )?;
        if !out.loss.is_finite() {
            return Err(Error::Divergence("posterior loss went non-finite".into()));
        }
        log.losses.push(out.loss);
        log.logz_track.push(out.logz_value);
        log.gate_zeroed += out.gate_zeroed;
        if out.all_clipped {
            log.all_clipped += 1;
        }

        // Peaky rewards start with legitimately huge log ratios, so the
        // guard is relative to the scale seen at initialization.
        if iter == 0 {
            diverge_at = DIVERGE_RATIO.max(10.0 * out.mean_abs_resid);
        }
        if out.mean_abs_resid > diverge_at {
            bad_streak += 1;
            if bad_streak >= DIVERGE_PATIENCE {
                return Err(Error::Divergence(format!(
                    "mean |log ratio| above {diverge_at:.1} for {DIVERGE_PATIENCE} consecutive batches"
                )));
            }
        } else {
            bad_streak = 0;
        }

        let decay = 1.0 - (1.0 - cfg.lr_final_mult) * iter as f64 / cfg.iters as f64;
        adam.lr = cfg.lr * decay;
        adam_z.lr = cfg.lr * cfg.logz_lr_mult * decay;

        let mut params = drift.flatten();
        adam.step(&mut params, &out.drift_grads);
        drift.unflatten(&params)?;
        match &mut log_z {
            LogZ::Scalar(z) => {
                if cfg.vargrad {
                    // smoothed batch estimate of the variance minimizer
                    vargrad_z = if vargrad_z.is_nan() {
                        out.logz_value
                    } else {
                        0.99 * vargrad_z + 0.01 * out.logz_value
                    };
                    *z = vargrad_z;
                } else {
                    let mut zb = [*z];
                    adam_z.step(&mut zb, &out.logz_grads);
                    *z = zb[0];
                }
            }
            LogZ::Net(net) => {
                let mut zp = net.flatten();
                adam_z.step(&mut zp, &out.logz_grads);
                net.unflatten(&zp)?;
            }
        }

        if cfg.tail_avg_frac > 0.0 && iter >= avg_from {
            for (a, p) in avg_drift.iter_mut().zip(drift.flatten()) {
                *a += p;
            }
            match &log_z {
                LogZ::Scalar(z) => avg_z[0] += *z,
                LogZ::Net(net) => {
                    for (a, p) in avg_z.iter_mut().zip(net.flatten()) {
                        *a += p;
                    }
                }
            }
            avg_n += 1;
        }
    }

    if avg_n > 0 {
        for a in avg_drift.iter_mut().chain(avg_z.iter_mut()) {
            *a /= avg_n as f64;
        }
        drift.unflatten(&avg_drift)?;
        match &mut log_z {
            LogZ::Scalar(z) => *z = avg_z[0],
            LogZ::Net(net) => net.unflatten(&avg_z)?,
        }
    }

    if prior.drift.checksum() != prior_checksum {
        return Err(Error::OracleMismatch("prior drift moved during fine-tuning".into()));
    }
    log.buffer_len = buffer.len();
    Ok((
        PosteriorModel {
            drift,
            log_z,
            schedule: prior.schedule,
            prior_drift: prior.drift.clone(),
            prior_checksum,
            rescale_intermediate: cfg.rescale_intermediate,
        },
        log,
    ))
}

/// Per-trajectory RTB log-ratio (log Z excluded) for diagnostics and the
/// variance-objective identity checks.
pub fn log_ratios(
    model: &PosteriorModel,
    reward: &dyn Reward,
    conditioning: Option<&[f64]>,
    trajs: &[Trajectory],
) -> Result<Vec<f64>> {
    let policy = model.policy(
        if model.drift.gate.is_some() { Some(reward) } else { None },
        conditioning,
    );
    let tb = TransitionBatch::build(trajs, &policy)?;
    let lp_post = log_pf_plain(&model.drift, &tb, &model.schedule)?;
    let prior_policy = model.prior_policy();
    let prior_tb = TransitionBatch::build(trajs, &prior_policy)?;
    let lp_prior = log_pf_plain(&model.prior_drift, &prior_tb, &model.schedule)?;
    Ok(trajs
        .iter()
        .zip(lp_post.iter().zip(&lp_prior))
        .map(|(t, (post, prior))| post - reward.log_r(t.terminal()) - prior)
        .collect())
}
