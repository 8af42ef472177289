// Scratch diagnostic: residual std of the analytically conditioned drift
// (prior net drift + sigma^2 grad log E[r | x_t]) to locate the floor of
// the fixed-variance policy family on the criterion-3 task.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rtb_lab::diffusion::{trajectory_log_pf, Policy, Trajectory};
use rtb_lab::gmm::log_sum_exp;
use rtb_lab::harness::read_prior_checkpoint;
use rtb_lab::metrics::Histogram2d;
use rtb_lab::reward::Reward;
use rtb_lab::tasks::TaskFamily;

const V: f64 = 0.3; // target mode variance
const MU: [[f64; 2]; 2] = [[2.0, 2.0], [-2.0, -2.0]];
const SY2: f64 = 0.01; // sigma_y^2
const Y0: f64 = 2.0;

fn log_h(x: &[f64], t: f64, sigma2: f64) -> f64 {
    let t = t.clamp(1e-9, 1.0 - 1e-12);
    let b = sigma2 * t * (1.0 - t) + t * t * V;
    let lam = 1.0 / V + t / (sigma2 * (1.0 - t));
    let s = 1.0 / lam;
    let mut lw = [0.0f64; 2];
    let mut lh = [0.0f64; 2];
    for k in 0..2 {
        let d0 = x[0] - t * MU[k][0];
        let d1 = x[1] - t * MU[k][1];
        lw[k] = -(d0 * d0 + d1 * d1) / (2.0 * b);
        let mean0 = s * (MU[k][0] / V + x[0] / (sigma2 * (1.0 - t)));
        let vv = SY2 + s;
        lh[k] = -(Y0 - mean0) * (Y0 - mean0) / (2.0 * vv) - 0.5 * vv.ln();
    }
    let num = log_sum_exp(&[lw[0] + lh[0], lw[1] + lh[1]]);
    let den = log_sum_exp(&lw);
    num - den
}

fn main() -> rtb_lab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let prior_path = args.get(1).map(String::as_str).unwrap_or("/tmp/prior_a_0.4_3000_[64, 64]_64.json");
    let n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4000);

    let prior = read_prior_checkpoint(Path::new(prior_path))?.to_model()?;
    let schedule = prior.schedule;
    let tsteps = schedule.steps();
    let dt = schedule.dt();
    let sigma2 = schedule.sigma() * schedule.sigma();
    let s2dt = schedule.sigma2_dt();
    let prior_policy = Policy::unconditional(&prior.drift, schedule);
    let reward = TaskFamily::mask(2, &[0], 0.1)?.reward_with(vec![Y0])?;

    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut resids = Vec::with_capacity(n);
    let mut terminals = Vec::with_capacity(n);
    let fd = 1e-5;
    for _ in 0..n {
        let mut x = vec![0.0f64; 2];
        let mut states = vec![0.0f64; 2];
        let mut log_q = 0.0;
        for k in 0..tsteps {
            let t = schedule.time(k);
            let mut u = prior_policy.drift_at(&x, t)?;
            for c in 0..2 {
                let mut xp = x.clone();
                xp[c] += fd;
                let mut xm = x.clone();
                xm[c] -= fd;
                u[c] += sigma2 * (log_h(&xp, t, sigma2) - log_h(&xm, t, sigma2)) / (2.0 * fd);
            }
            let mut xn = vec![0.0f64; 2];
            for c in 0..2 {
                let z: f64 = rng.sample(StandardNormal);
                let mean = x[c] + u[c] * dt;
                xn[c] = mean + s2dt.sqrt() * z;
                log_q += -(xn[c] - mean) * (xn[c] - mean) / (2.0 * s2dt);
            }
            // shared Gaussian normalizers cancel against the prior term
            x = xn;
            states.extend_from_slice(&x);
        }
        let traj = Trajectory::from_states(2, tsteps, states)?;
        let lp = trajectory_log_pf(&prior_policy, &traj)?;
        // drop the same normalizer from the prior side
        let norm = tsteps as f64 * 2.0 * 0.5 * (std::f64::consts::TAU * s2dt).ln();
        let r = (log_q - (lp + norm)) - reward.log_r(&x);
        resids.push(r);
        terminals.push(x);
    }
    let m = resids.iter().sum::<f64>() / n as f64;
    let sd =
        (resids.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / n as f64).sqrt();
    println!("hand-drift residual: mean {m:+.4} (= -log Z), std {sd:.4}");

    let h = Histogram2d::from_samples(&terminals, None, (0, 1), 64, -6.0, 6.0)?;
    let prior_samples = prior.sample_terminals(200_000, 21)?;
    let log_rs: Vec<f64> = prior_samples.iter().map(|x| reward.log_r(x)).collect();
    let w = rtb_lab::metrics::importance_weights(&log_rs)?;
    let oracle = Histogram2d::from_samples(&prior_samples, Some(&w), (0, 1), 64, -6.0, 6.0)?;
    println!("hand-drift TV vs IS oracle: {:.4}", h.tv(&oracle)?);
    Ok(())
}
