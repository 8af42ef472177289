// Scratch diagnostic: fully analytic floor scan for the RTB residual std of
// fixed-variance Gaussian policies. Uses the exact bridge drift of the GMM
// prior and the exact h-transform correction for a linear-Gaussian reward,
// so no training is involved; the printed std is the family floor.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rtb_lab::gmm::log_sum_exp;

const V: f64 = 0.3;
const MU: [[f64; 2]; 2] = [[2.0, 2.0], [-2.0, -2.0]];
const SY2: f64 = 0.01;

struct Task {
    a: [f64; 2],
    y: f64,
}

// posterior over x1 given x_t under the exact bridge process, per mode:
// weights and (isotropic) conditional mean/variance
fn mode_posterior(x: &[f64], t: f64, sigma2: f64) -> ([f64; 2], [[f64; 2]; 2], f64) {
    let t = t.clamp(1e-9, 1.0 - 1e-12);
    let b = sigma2 * t * (1.0 - t) + t * t * V;
    let lam = 1.0 / V + t / (sigma2 * (1.0 - t));
    let s = 1.0 / lam;
    let mut lw = [0.0f64; 2];
    let mut means = [[0.0f64; 2]; 2];
    for k in 0..2 {
        let d0 = x[0] - t * MU[k][0];
        let d1 = x[1] - t * MU[k][1];
        lw[k] = -(d0 * d0 + d1 * d1) / (2.0 * b);
        for c in 0..2 {
            means[k][c] = s * (MU[k][c] / V + x[c] / (sigma2 * (1.0 - t)));
        }
    }
    let lse = log_sum_exp(&lw);
    ([(lw[0] - lse).exp(), (lw[1] - lse).exp()], means, s)
}

fn prior_drift(x: &[f64], t: f64, sigma2: f64) -> [f64; 2] {
    let (w, means, _) = mode_posterior(x, t, sigma2);
    let om = 1.0 - t.clamp(1e-9, 1.0 - 1e-12);
    let mut u = [0.0f64; 2];
    for c in 0..2 {
        let ex = w[0] * means[0][c] + w[1] * means[1][c];
        u[c] = (ex - x[c]) / om;
    }
    u
}

fn log_h(x: &[f64], t: f64, sigma2: f64, task: &Task) -> f64 {
    let (w, means, s) = mode_posterior(x, t, sigma2);
    let a2 = task.a[0] * task.a[0] + task.a[1] * task.a[1];
    let vv = SY2 + s * a2;
    let mut terms = [0.0f64; 2];
    for k in 0..2 {
        let am = task.a[0] * means[k][0] + task.a[1] * means[k][1];
        terms[k] = w[k].max(1e-300).ln() - (task.y - am) * (task.y - am) / (2.0 * vv)
            - 0.5 * vv.ln();
    }
    log_sum_exp(&terms)
}

fn floor_std(tsteps: usize, sigma: f64, task: &Task, n: usize, seed: u64) -> (f64, f64) {
    let sigma2 = sigma * sigma;
    let dt = 1.0 / tsteps as f64;
    let s2dt = sigma2 * dt;
    let fd = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resids = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = vec![0.0f64; 2];
        let mut r_acc = 0.0;
        for k in 0..tsteps {
            let t = k as f64 * dt;
            let up = prior_drift(&x, t, sigma2);
            let mut u = up;
            for c in 0..2 {
                let mut xp = x.clone();
                xp[c] += fd;
                let mut xm = x.clone();
                xm[c] -= fd;
                u[c] +=
                    sigma2 * (log_h(&xp, t, sigma2, task) - log_h(&xm, t, sigma2, task)) / (2.0 * fd);
            }
            for c in 0..2 {
                let z: f64 = rng.sample(StandardNormal);
                let mq = x[c] + u[c] * dt;
                let mp = x[c] + up[c] * dt;
                let xn = mq + s2dt.sqrt() * z;
                r_acc += -(xn - mq) * (xn - mq) / (2.0 * s2dt) + (xn - mp) * (xn - mp) / (2.0 * s2dt);
                x[c] = xn;
            }
        }
        let ax = task.a[0] * x[0] + task.a[1] * x[1];
        let log_r = -(ax - task.y) * (ax - task.y) / (2.0 * SY2);
        resids.push(r_acc - log_r);
    }
    let m = resids.iter().sum::<f64>() / n as f64;
    let sd = (resids.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / n as f64).sqrt();
    (m, sd)
}

fn main() {
    let n = 4000;
    let mask = Task { a: [1.0, 0.0], y: 2.0 };
    let sym = Task { a: [1.0, -1.0], y: 0.0 };
    for (name, task) in [("mask y=2", &mask), ("sym  y=0", &sym)] {
        for tsteps in [32usize, 64, 128] {
            for sigma in [0.3f64, 0.4, 0.5, 0.75] {
                let (m, sd) = floor_std(tsteps, sigma, task, n, 7);
                println!("{name}  T={tsteps:3}  sigma={sigma:.2}  -logZ~{m:+.3}  resid std {sd:.4}");
            }
        }
    }
}
