//! Time discretization, forward (denoising) policy with learned drift,
//! fixed Brownian-bridge backward (noising) policy, trajectory sampling,
//! and exact trajectory log-densities.
//!
//! Conventions: trajectories start pinned at the origin (x_0 = 0), the
//! noise rate σ is constant, and the backward kernel from t = Δt to the
//! origin is deterministic and contributes log-density 0. With this
//! accounting P_F(τ)/P_B(τ|x_1) integrates to the terminal marginal.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, FeedForwardNet, NetVars, Tape, Tensor, VarId};
use crate::reward::Reward;
use crate::util::checksum_f64s;

pub const LN_2PI: f64 = 1.8378770664093453;
pub const TIME_EMBED_DIM: usize = 13;
/// Bound on the Langevin gate after squashing.
pub const GATE_BOUND: f64 = 5.0;

/// Fourier features up to frequency 32: the conditioned drift gain blows up
/// like 1/(1 - t + sigma_y^2 / sigma^2) near the terminal step, so the net
/// needs features that resolve time scales of a few percent.
pub fn time_embed(t: f64) -> [f64; TIME_EMBED_DIM] {
    use std::f64::consts::TAU;
    let mut out = [0.0; TIME_EMBED_DIM];
    out[0] = t;
    for (i, freq) in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0].iter().enumerate() {
        out[1 + 2 * i] = (freq * TAU * t).sin();
        out[2 + 2 * i] = (freq * TAU * t).cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    steps: usize,
    sigma: f64,
}

impl Schedule {
    pub fn new(steps: usize, sigma: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Config("noise rate sigma must be positive and finite".into()));
        }
        let s2dt = sigma * sigma / steps as f64;
        if s2dt < 1e-290 {
            return Err(Error::Config(format!(
                "step variance {s2dt:.3e} underflows; reduce steps or raise sigma"
            )));
        }
        Ok(Schedule { steps, sigma })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Time of index i, exactly i/T.
    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }

    pub fn sigma2_dt(&self) -> f64 {
        self.sigma * self.sigma * self.dt()
    }
}

/// States x_0 .. x_1 on the time grid i/T; x_0 is the origin exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    steps: usize,
    states: Vec<f64>, // (steps+1) * dim, row-major
}

impl Trajectory {
    pub fn from_states(dim: usize, steps: usize, states: Vec<f64>) -> Result<Self> {
        if states.len() != (steps + 1) * dim {
            return Err(Error::Config("trajectory state count mismatch".into()));
        }
        if states[..dim].iter().any(|&v| v != 0.0) {
            return Err(Error::Config("trajectory must start at the origin".into()));
        }
        if !states.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("trajectory", "non-finite state"));
        }
        Ok(Trajectory { dim, steps, states })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.steps)
    }
}

/// Drift network u(x_t, t; ·), optionally with a Langevin gate head and a
/// conditioning input appended to x and the time embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftModel {
    pub dim: usize,
    pub cond_dim: usize,
    pub net: FeedForwardNet,
    /// Second network emitting the scalar gate for the reward-gradient term.
    pub gate: Option<FeedForwardNet>,
}

impl DriftModel {
    pub fn input_dim(dim: usize, cond_dim: usize) -> usize {
        dim + TIME_EMBED_DIM + cond_dim
    }

    pub fn new(
        dim: usize,
        cond_dim: usize,
        hidden: &[usize],
        gate_hidden: Option<&[usize]>,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let input = Self::input_dim(dim, cond_dim);
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let net = FeedForwardNet::new(&widths, activation, rng)?;
        let gate = match gate_hidden {
            Some(h) => {
                let mut gw = vec![input];
                gw.extend_from_slice(h);
                gw.push(1);
                Some(FeedForwardNet::new(&gw, activation, rng)?)
            }
            None => None,
        };
        Ok(DriftModel { dim, cond_dim, net, gate })
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.net.flatten();
        if let Some(g) = &self.gate {
            out.extend(g.flatten());
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.net.param_count();
        self.net.unflatten(&flat[..n])?;
        if let Some(g) = &mut self.gate {
            g.unflatten(&flat[n..])?;
        } else if flat.len() != n {
            return Err(Error::Config("drift parameter vector too long".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count() + self.gate.as_ref().map_or(0, |g| g.param_count())
    }

    pub fn checksum(&self) -> u64 {
        checksum_f64s(&self.flatten())
    }
}

pub struct DriftVars {
    pub net: NetVars,
    pub gate: Option<NetVars>,
}

pub fn load_drift_params(drift: &DriftModel, tape: &mut Tape) -> Result<DriftVars> {
    let net = drift.net.load_params(tape)?;
    let gate = match &drift.gate {
        Some(g) => Some(g.load_params(tape)?),
        None => None,
    };
    Ok(DriftVars { net, gate })
}

/// Gradient vector aligned with `DriftModel::flatten`.
pub fn collect_drift_grads(
    drift: &DriftModel,
    vars: &DriftVars,
    grads: &[Option<Tensor>],
) -> Vec<f64> {
    let mut out = drift.net.collect_grads(&vars.net, grads);
    if let (Some(g), Some(gv)) = (&drift.gate, &vars.gate) {
        out.extend(g.collect_grads(gv, grads));
    }
    out
}

/// A drift model bound to a schedule and optional conditioning/reward; pure
/// given a parameter snapshot, so safe to fan out with derived seeds.
pub struct Policy<'a> {
    pub drift: &'a DriftModel,
    pub schedule: Schedule,
    pub conditioning: Option<&'a [f64]>,
    /// Needed when the drift model carries a Langevin gate.
    pub reward: Option<&'a dyn Reward>,
    /// Evaluate the reward gradient at x_t/t (bridge-mean denoised estimate)
    /// instead of x_t.
    pub rescale_intermediate: bool,
}

impl<'a> Policy<'a> {
    pub fn unconditional(drift: &'a DriftModel, schedule: Schedule) -> Self {
        Policy { drift, schedule, conditioning: None, reward: None, rescale_intermediate: false }
    }

    pub fn validate(&self) -> Result<()> {
        let cond = self.conditioning.map_or(0, |c| c.len());
        if cond != self.drift.cond_dim {
            return Err(Error::Config(format!(
                "conditioning dimension {cond} does not match drift model ({})",
                self.drift.cond_dim
            )));
        }
        if self.drift.gate.is_some() && self.reward.is_none() {
            return Err(Error::Config(
                "drift model has a Langevin gate but no reward is bound".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        DriftModel::input_dim(self.drift.dim, self.drift.cond_dim)
    }

    /// Input rows [x, time embed, cond] for a batch of states at time t.
    fn input_matrix(&self, xs: &Tensor, t: f64) -> Tensor {
        let d = self.drift.dim;
        let emb = time_embed(t);
        let in_dim = self.input_dim();
        let mut data = Vec::with_capacity(xs.rows() * in_dim);
        for r in 0..xs.rows() {
            data.extend_from_slice(xs.row(r));
            data.extend_from_slice(&emb);
            if let Some(c) = self.conditioning {
                data.extend_from_slice(c);
            }
        }
        debug_assert_eq!(d, xs.cols());
        Tensor::new(xs.rows(), in_dim, data).expect("input matrix")
    }

    /// Reward gradient rows for the gate term; non-finite gradients are
    /// forced to zero (gate off for that evaluation) and counted.
    fn gate_grad_rows(&self, xs: &Tensor, t: f64, zeroed: &mut usize) -> Tensor {
        let reward = self.reward.expect("gate requires reward");
        let d = self.drift.dim;
        let mut data = Vec::with_capacity(xs.rows() * d);
        for r in 0..xs.rows() {
            let x = xs.row(r);
            let point: Vec<f64> = if self.rescale_intermediate && t > 0.0 {
                x.iter().map(|v| v / t).collect()
            } else {
                x.to_vec()
            };
            let g = reward.grad_log_r(&point);
            if g.iter().all(|v| v.is_finite()) {
                data.extend_from_slice(&g);
            } else {
                *zeroed += 1;
                data.extend(std::iter::repeat(0.0).take(d));
            }
        }
        Tensor::new(xs.rows(), d, data).expect("gate grad matrix")
    }

    /// Batched drift u(x, t) for rows of `xs`.
    pub fn drift_batch(&self, xs: &Tensor, t: f64) -> Result<Tensor> {
        let inputs = self.input_matrix(xs, t);
        let mut u = self.drift.net.forward(&inputs)?;
        if let Some(gate_net) = &self.drift.gate {
            let raw = gate_net.forward(&inputs)?;
            let mut zeroed = 0;
            let grads = self.gate_grad_rows(xs, t, &mut zeroed);
            for r in 0..u.rows() {
                let gate = GATE_BOUND * (raw.get(r, 0) / GATE_BOUND).tanh();
                for c in 0..u.cols() {
                    let v = u.get(r, c) + gate * grads.get(r, c);
                    u.set(r, c, v);
                }
            }
        }
        Ok(u)
    }

    pub fn drift_at(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let xs = Tensor::new(1, x.len(), x.to_vec())?;
        Ok(self.drift_batch(&xs, t)?.data().to_vec())
    }
}

/// log N(x_next ; x_t + u Δt, σ²Δt I).
pub fn forward_step_logdensity(
    x_t: &[f64],
    x_next: &[f64],
    u: &[f64],
    schedule: &Schedule,
) -> Result<f64> {
    let s2 = schedule.sigma2_dt();
    let dt = schedule.dt();
    let d = x_t.len() as f64;
    let mut q = 0.0;
    for i in 0..x_t.len() {
        let dev = x_next[i] - x_t[i] - u[i] * dt;
        q += dev * dev;
    }
    let v = -0.5 * d * (LN_2PI + s2.ln()) - q / (2.0 * s2);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric("forward_step_logdensity", "non-finite log-density"))
    }
}

/// Brownian-bridge backward kernel from time index i to i-1:
/// N(x_{t-Δt} ; (t-Δt)/t · x_t, (t-Δt)/t · σ²Δt I) with t = i/T.
/// The terminal pinned step (i = 1) is deterministic and contributes 0.
pub fn backward_step_logdensity(
    x_t: &[f64],
    x_prev: &[f64],
    schedule: &Schedule,
    i: usize,
) -> Result<f64> {
    if i == 0 {
        return Err(Error::Config("no backward step from t = 0".into()));
    }
    if i == 1 {
        return Ok(0.0);
    }
    let ratio = (i - 1) as f64 / i as f64;
    let var = ratio * schedule.sigma2_dt();
    let d = x_t.len() as f64;
    let mut q = 0.0;
    for j in 0..x_t.len() {
        let dev = x_prev[j] - ratio * x_t[j];
        q += dev * dev;
    }
    let v = -0.5 * d * (LN_2PI + var.ln()) - q / (2.0 * var);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric("backward_step_logdensity", "non-finite log-density"))
    }
}

pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    /// Trajectories dropped because the drift went non-finite.
    pub aborted: usize,
}

/// Euler-Maruyama rollout of `n` trajectories under the policy. Uniform
/// exploration noise of amplitude `explore_eps` is added to the drift when
/// positive. Deterministic given the RNG state.
pub fn sample_forward_batch(
    policy: &Policy,
    n: usize,
    rng: &mut ChaCha8Rng,
    explore_eps: f64,
) -> Result<RolloutBatch> {
    policy.validate()?;
    let d = policy.drift.dim;
    let t_steps = policy.schedule.steps();
    let dt = policy.schedule.dt();
    let step_sd = policy.schedule.sigma2_dt().sqrt();

    let mut xs = Tensor::zeros(n, d);
    let mut states: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
    let mut alive = vec![true; n];
    let mut paths: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut p = Vec::with_capacity((t_steps + 1) * d);
            p.extend(std::iter::repeat(0.0).take(d));
            p
        })
        .collect();

    for i in 0..t_steps {
        let t = policy.schedule.time(i);
        let u = policy.drift_batch(&xs, t)?;
        for r in 0..n {
            if !alive[r] {
                // keep consuming the same number of draws so seeds stay aligned
                for _ in 0..d {
                    let _: f64 = StandardNormal.sample(rng);
                    if explore_eps > 0.0 {
                        let _: f64 = rng.gen();
                    }
                }
                continue;
            }
            let mut ok = true;
            for c in 0..d {
                let mut drift = u.get(r, c);
                if explore_eps > 0.0 {
                    drift += rng.gen_range(-explore_eps..explore_eps);
                }
                let z: f64 = StandardNormal.sample(rng);
                let next = states[r][c] + drift * dt + step_sd * z;
                if !next.is_finite() {
                    ok = false;
                }
                states[r][c] = next;
            }
            if !ok {
                alive[r] = false;
                continue;
            }
            paths[r].extend_from_slice(&states[r]);
            for c in 0..d {
                xs.set(r, c, states[r][c]);
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
    Ok(RolloutBatch { trajectories, aborted })
}

pub fn sample_forward_trajectory(policy: &Policy, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = sample_forward_batch(policy, 1, &mut rng, 0.0)?;
    batch
        .trajectories
        .pop()
        .ok_or_else(|| Error::numeric("sample_forward_trajectory", "trajectory aborted"))
}

/// Noising trajectory from x_1 down to the origin via the bridge kernels;
/// returned in forward orientation. Ends at x_1 bit-exactly.
pub fn sample_backward_trajectory(
    x1: &[f64],
    schedule: &Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    if !x1.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("sample_backward_trajectory", "non-finite endpoint"));
    }
    let d = x1.len();
    let t_steps = schedule.steps();
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); t_steps + 1];
    rows[t_steps] = x1.to_vec();
    let mut cur = x1.to_vec();
    for i in (2..=t_steps).rev() {
        let ratio = (i - 1) as f64 / i as f64;
        let sd = (ratio * schedule.sigma2_dt()).sqrt();
        let mut prev = vec![0.0; d];
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            prev[j] = ratio * cur[j] + sd * z;
        }
        rows[i - 1] = prev.clone();
        cur = prev;
    }
    rows[0] = vec![0.0; d];
    let states: Vec<f64> = rows.into_iter().flatten().collect();
    Trajectory::from_states(d, t_steps, states)
}

/// Exact forward trajectory log-likelihood under the policy.
pub fn trajectory_log_pf(policy: &Policy, traj: &Trajectory) -> Result<f64> {
    policy.validate()?;
    if traj.dim() != policy.drift.dim || traj.steps() != policy.schedule.steps() {
        return Err(Error::Config("trajectory does not match policy schedule".into()));
    }
    let mut total = 0.0;
    for i in 0..traj.steps() {
        let t = policy.schedule.time(i);
        let u = policy.drift_at(traj.state(i), t)?;
        total += forward_step_logdensity(traj.state(i), traj.state(i + 1), &u, &policy.schedule)?;
    }
    Ok(total)
}

/// Fixed backward (bridge) trajectory log-likelihood; no parameters.
pub fn trajectory_log_pb(traj: &Trajectory, schedule: &Schedule) -> Result<f64> {
    if traj.steps() != schedule.steps() {
        return Err(Error::Config("trajectory does not match schedule".into()));
    }
    let mut total = 0.0;
    for i in (1..=traj.steps()).rev() {
        total += backward_step_logdensity(traj.state(i), traj.state(i - 1), schedule, i)?;
    }
    Ok(total)
}

/// All transitions of a trajectory batch flattened into matrices, trajectory
/// major: row b*T + i is the transition leaving state i of trajectory b.
pub struct TransitionBatch {
    pub inputs: Tensor,
    pub deltas: Tensor,
    /// Reward-gradient rows for the Langevin gate, when in use.
    pub reward_grads: Option<Tensor>,
    pub batch: usize,
    pub steps: usize,
    pub dim: usize,
    /// Gate evaluations whose reward gradient was non-finite and zeroed.
    pub gate_zeroed: usize,
}

impl TransitionBatch {
    pub fn build(trajs: &[Trajectory], policy: &Policy) -> Result<Self> {
        policy.validate()?;
        let b = trajs.len();
        if b == 0 {
            return Err(Error::Config("empty trajectory batch".into()));
        }
        let d = policy.drift.dim;
        let t_steps = policy.schedule.steps();
        let in_dim = policy.input_dim();
        let want_gate = policy.drift.gate.is_some();

        let mut inputs = Vec::with_capacity(b * t_steps * in_dim);
        let mut deltas = Vec::with_capacity(b * t_steps * d);
        let mut grads = Vec::with_capacity(if want_gate { b * t_steps * d } else { 0 });
        let mut gate_zeroed = 0;

        for traj in trajs {
            if traj.dim() != d || traj.steps() != t_steps {
                return Err(Error::Config("trajectory batch shape mismatch".into()));
            }
            for i in 0..t_steps {
                let x = traj.state(i);
                let t = policy.schedule.time(i);
                inputs.extend_from_slice(x);
                inputs.extend_from_slice(&time_embed(t));
                if let Some(c) = policy.conditioning {
                    inputs.extend_from_slice(c);
                }
                let xn = traj.state(i + 1);
                for j in 0..d {
                    deltas.push(xn[j] - x[j]);
                }
                if want_gate {
                    let reward = policy.reward.expect("validated");
                    let point: Vec<f64> = if policy.rescale_intermediate && t > 0.0 {
                        x.iter().map(|v| v / t).collect()
                    } else {
                        x.to_vec()
                    };
                    let g = reward.grad_log_r(&point);
                    if g.iter().all(|v| v.is_finite()) {
                        grads.extend_from_slice(&g);
                    } else {
                        gate_zeroed += 1;
                        grads.extend(std::iter::repeat(0.0).take(d));
                    }
                }
            }
        }
        Ok(TransitionBatch {
            inputs: Tensor::new(b * t_steps, in_dim, inputs)?,
            deltas: Tensor::new(b * t_steps, d, deltas)?,
            reward_grads: if want_gate { Some(Tensor::new(b * t_steps, d, grads)?) } else { None },
            batch: b,
            steps: t_steps,
            dim: d,
            gate_zeroed,
        })
    }
}

/// Per-trajectory log P_F for a prepared transition batch, without gradient
/// tracking. Must agree with the tape route on values.
pub fn log_pf_plain(drift: &DriftModel, tb: &TransitionBatch, schedule: &Schedule) -> Result<Vec<f64>> {
    let mut u = drift.net.forward(&tb.inputs)?;
    if let Some(gate_net) = &drift.gate {
        let raw = gate_net.forward(&tb.inputs)?;
        let grads = tb
            .reward_grads
            .as_ref()
            .ok_or_else(|| Error::Config("gate drift needs reward gradients".into()))?;
        for r in 0..u.rows() {
            let gate = GATE_BOUND * (raw.get(r, 0) / GATE_BOUND).tanh();
            for c in 0..u.cols() {
                let v = u.get(r, c) + gate * grads.get(r, c);
                u.set(r, c, v);
            }
        }
    }
    let s2 = schedule.sigma2_dt();
    let dt = schedule.dt();
    let d = tb.dim as f64;
    let base = -0.5 * d * (LN_2PI + s2.ln());
    let inv = -1.0 / (2.0 * s2);
    let mut out = vec![0.0; tb.batch];
    for r in 0..u.rows() {
        let mut q = 0.0;
        for c in 0..u.cols() {
            let dev = tb.deltas.get(r, c) - u.get(r, c) * dt;
            q += dev * dev;
        }
        out[r / tb.steps] += inv * q + base;
    }
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::numeric("log_pf_plain", "non-finite trajectory log-likelihood"))
    }
}

/// Per-trajectory log P_F recorded on the tape; differentiable in the drift
/// parameters. `step_mask` (B*T rows of 0/1) confines the gradient to
/// selected transitions without changing the value.
pub fn log_pf_tape(
    tape: &mut Tape,
    drift: &DriftModel,
    vars: &DriftVars,
    tb: &TransitionBatch,
    schedule: &Schedule,
    step_mask: Option<Tensor>,
) -> Result<VarId> {
    let inputs = tape.constant(tb.inputs.clone())?;
    let mut u = drift.net.forward_tape(tape, &vars.net, inputs)?;
    if let Some(gate_net) = &drift.gate {
        let gvars = vars.gate.as_ref().ok_or_else(|| Error::Config("missing gate vars".into()))?;
        let raw = gate_net.forward_tape(tape, gvars, inputs)?;
        let scaled = tape.affine(raw, 1.0 / GATE_BOUND, 0.0)?;
        let squashed = tape.tanh(scaled)?;
        let gate = tape.affine(squashed, GATE_BOUND, 0.0)?;
        let grads = tb
            .reward_grads
            .as_ref()
            .ok_or_else(|| Error::Config("gate drift needs reward gradients".into()))?;
        let extra = tape.scale_rows_const(gate, grads.clone())?;
        u = tape.add(u, extra)?;
    }
    let s2 = schedule.sigma2_dt();
    let dt = schedule.dt();
    let d = tb.dim as f64;
    let u_dt = tape.affine(u, dt, 0.0)?;
    let dev = tape.sub_from_const(tb.deltas.clone(), u_dt)?;
    let ss = tape.row_sum_sq(dev)?;
    let logd = tape.affine(ss, -1.0 / (2.0 * s2), -0.5 * d * (LN_2PI + s2.ln()))?;
    let logd = match step_mask {
        Some(mask) => tape.grad_mask(logd, mask)?,
        None => logd,
    };
    tape.sum_groups(logd, tb.steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn zero_policy(dim: usize, schedule: Schedule) -> (DriftModel, Schedule) {
        let net = FeedForwardNet::zeros(&[DriftModel::input_dim(dim, 0), 8, dim], Activation::Tanh);
        (DriftModel { dim, cond_dim: 0, net, gate: None }, schedule)
    }

    #[test]
    fn forward_logdensity_standard_normal_at_zero() {
        // σ²Δt = 1
        let s = Schedule::new(1, 1.0).unwrap();
        let v = forward_step_logdensity(&[0.0], &[0.0], &[0.0], &s).unwrap();
        assert!((v - (-0.918938533204672_f64)).abs() < 1e-12);
    }

    #[test]
    fn forward_logdensity_at_mean() {
        let s = Schedule::new(4, 0.7).unwrap();
        let u = [1.3];
        let x = [0.2];
        let next = [0.2 + 1.3 * s.dt()];
        let v = forward_step_logdensity(&x, &next, &u, &s).unwrap();
        assert!((v - (-0.5 * (LN_2PI + s.sigma2_dt().ln()))).abs() < 1e-12);
    }

    #[test]
    fn forward_logdensity_matches_quadratic_form_oracle() {
        let s = Schedule::new(8, 1.3).unwrap();
        let x = [0.4, -1.1];
        let next = [0.9, -0.6];
        let u = [2.0, -0.5];
        let v = forward_step_logdensity(&x, &next, &u, &s).unwrap();
        // directly coded quadratic form
        let var = s.sigma2_dt();
        let mut oracle = 0.0;
        for j in 0..2 {
            let dev: f64 = next[j] - (x[j] + u[j] * s.dt());
            oracle += -0.5 * (LN_2PI + var.ln()) - dev * dev / (2.0 * var);
        }
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn backward_kernel_direct_substitution() {
        // t = 1, Δt = 0.5, σ = 1: mean 0.5 x_1, variance 0.25
        let s = Schedule::new(2, 1.0).unwrap();
        let x1 = [1.6];
        let xprev = [0.3];
        let v = backward_step_logdensity(&x1, &xprev, &s, 2).unwrap();
        let mean = 0.5 * x1[0];
        let var: f64 = 0.25;
        let dev: f64 = xprev[0] - mean;
        let oracle = -0.5 * (LN_2PI + var.ln()) - dev * dev / (2.0 * var);
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn pinned_terminal_step_contributes_zero() {
        let s = Schedule::new(4, 1.0).unwrap();
        assert_eq!(backward_step_logdensity(&[0.9], &[0.0], &s, 1).unwrap(), 0.0);
        assert!(backward_step_logdensity(&[0.9], &[0.0], &s, 0).is_err());
    }

    #[test]
    fn backward_trajectory_pins_both_ends() {
        let s = Schedule::new(16, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x1 = [1.25, -0.75];
        let traj = sample_backward_trajectory(&x1, &s, &mut rng).unwrap();
        assert_eq!(traj.terminal(), &x1);
        assert_eq!(traj.state(0), &[0.0, 0.0]);
        // log_pb matches an independent per-step summation
        let lp = trajectory_log_pb(&traj, &s).unwrap();
        let mut oracle = 0.0;
        for i in (1..=16).rev() {
            oracle += backward_step_logdensity(traj.state(i), traj.state(i - 1), &s, i).unwrap();
        }
        assert!(lp.is_finite());
        assert_eq!(lp, oracle);
    }

    #[test]
    fn rollout_deterministic_given_seed() {
        let s = Schedule::new(8, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (drift, _) = zero_policy(2, s);
        let mut net_rng = ChaCha8Rng::seed_from_u64(9);
        let drift = DriftModel {
            net: FeedForwardNet::new(&[DriftModel::input_dim(2, 0), 8, 2], Activation::Tanh, &mut net_rng)
                .unwrap(),
            ..drift
        };
        let policy = Policy::unconditional(&drift, s);
        let a = sample_forward_trajectory(&policy, 42).unwrap();
        let b = sample_forward_trajectory(&policy, 42).unwrap();
        assert_eq!(a, b);
        let _ = rng.gen::<f64>();
    }

    #[test]
    fn single_step_rollout_is_one_gaussian_draw() {
        let s = Schedule::new(1, 1.0).unwrap();
        let (drift, _) = zero_policy(1, s);
        let policy = Policy::unconditional(&drift, s);
        let traj = sample_forward_trajectory(&policy, 1).unwrap();
        assert_eq!(traj.steps(), 1);
        // zero drift: terminal is exactly sd * z for the first normal draw
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: f64 = StandardNormal.sample(&mut rng);
        assert_eq!(traj.terminal()[0], z * s.sigma2_dt().sqrt());
    }

    #[test]
    fn t1_log_pf_is_single_step_density() {
        let s = Schedule::new(1, 1.0).unwrap();
        let (drift, _) = zero_policy(1, s);
        let policy = Policy::unconditional(&drift, s);
        let traj = Trajectory::from_states(1, 1, vec![0.0, 0.8]).unwrap();
        let lp = trajectory_log_pf(&policy, &traj).unwrap();
        let step = forward_step_logdensity(&[0.0], &[0.8], &[0.0], &s).unwrap();
        assert_eq!(lp, step);
    }

    #[test]
    fn plain_and_tape_log_pf_agree() {
        let s = Schedule::new(6, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let drift =
            DriftModel::new(2, 0, &[8], None, Activation::Tanh, &mut rng).unwrap();
        let policy = Policy::unconditional(&drift, s);
        let mut rrng = ChaCha8Rng::seed_from_u64(23);
        let batch = sample_forward_batch(&policy, 3, &mut rrng, 0.0).unwrap();
        let tb = TransitionBatch::build(&batch.trajectories, &policy).unwrap();
        let plain = log_pf_plain(&drift, &tb, &s).unwrap();

        let mut tape = Tape::new();
        let vars = DriftVars { net: drift.net.load_params(&mut tape).unwrap(), gate: None };
        let lp = log_pf_tape(&mut tape, &drift, &vars, &tb, &s, None).unwrap();
        for (a, b) in plain.iter().zip(tape.value(lp).data()) {
            assert_eq!(a, b);
        }
        // and both agree with the per-trajectory step-wise route
        for (traj, &v) in batch.trajectories.iter().zip(&plain) {
            let stepwise = trajectory_log_pf(&policy, traj).unwrap();
            assert!((stepwise - v).abs() < 1e-10);
        }
    }
}
