//! Desk-scale inverse problems as reward objects: linear-Gaussian
//! (coordinate mask / dense "lensing-like" matrix), real-DFT magnitude
//! (phase retrieval), and a smooth tanh-of-banded-convolution nonlinearity
//! (deblur analogue); plus measurement simulation, conditional-task
//! generation, and the exact conjugate-posterior oracle.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{log_sum_exp, GaussianMixture};
use crate::reward::Reward;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mask,
    Dense,
    Phase,
    Blur,
}

/// Forward operator of a measurement model.
#[derive(Debug, Clone)]
pub enum Operator {
    /// y = A x; `mask` tags one-hot row structure.
    Linear { a: DMatrix<f64>, mask: bool },
    /// y = |real-DFT(x)|, magnitudes of frequencies 0..=d/2 (d even).
    Magnitude { d: usize },
    /// y = tanh(A x) with a banded convolution-style A.
    TanhLinear { a: DMatrix<f64> },
}

impl Operator {
    pub fn in_dim(&self) -> usize {
        match self {
            Operator::Linear { a, .. } | Operator::TanhLinear { a } => a.ncols(),
            Operator::Magnitude { d } => *d,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Operator::Linear { a, .. } | Operator::TanhLinear { a } => a.nrows(),
            Operator::Magnitude { d } => d / 2 + 1,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Operator::Linear { a, .. } => {
                let v = a * DVector::from_column_slice(x);
                v.as_slice().to_vec()
            }
            Operator::TanhLinear { a } => {
                let v = a * DVector::from_column_slice(x);
                v.iter().map(|z| z.tanh()).collect()
            }
            Operator::Magnitude { d } => real_dft_magnitudes(x, *d),
        }
    }
}

/// Real-DFT coefficient pair (cos, sin) for frequency k.
fn real_dft_pair(x: &[f64], d: usize, k: usize) -> (f64, f64) {
    use std::f64::consts::TAU;
    let mut c = 0.0;
    let mut s = 0.0;
    for (j, &v) in x.iter().enumerate() {
        let ang = TAU * (k * j) as f64 / d as f64;
        c += v * ang.cos();
        s += v * ang.sin();
    }
    (c, s)
}

fn real_dft_magnitudes(x: &[f64], d: usize) -> Vec<f64> {
    (0..=d / 2)
        .map(|k| {
            let (c, s) = real_dft_pair(x, d, k);
            (c * c + s * s).sqrt()
        })
        .collect()
}

/// Unnormalized likelihood log r(x) = -‖op(x) - y‖² / (2 σ_y²).
#[derive(Debug, Clone)]
pub struct TaskReward {
    pub op: Operator,
    pub y: Vec<f64>,
    pub sigma_y: f64,
}

impl TaskReward {
    pub fn new(op: Operator, y: Vec<f64>, sigma_y: f64) -> Result<Self> {
        if !(sigma_y > 0.0) {
            return Err(Error::Config("sigma_y must be positive".into()));
        }
        if y.len() != op.out_dim() {
            return Err(Error::Config(format!(
                "measurement length {} does not match operator output {}",
                y.len(),
                op.out_dim()
            )));
        }
        if matches!(op, Operator::Magnitude { .. }) && y.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("magnitude measurements must be nonnegative".into()));
        }
        Ok(TaskReward { op, y, sigma_y })
    }

    pub fn linear(&self) -> Option<(&DMatrix<f64>, bool)> {
        match &self.op {
            Operator::Linear { a, mask } => Some((a, *mask)),
            _ => None,
        }
    }
}

impl Reward for TaskReward {
    fn dim(&self) -> usize {
        self.op.in_dim()
    }

    fn log_r(&self, x: &[f64]) -> f64 {
        let o = self.op.apply(x);
        let q: f64 = o.iter().zip(&self.y).map(|(a, b)| (a - b) * (a - b)).sum();
        -q / (2.0 * self.sigma_y * self.sigma_y)
    }

    fn grad_log_r(&self, x: &[f64]) -> Vec<f64> {
        let s2 = self.sigma_y * self.sigma_y;
        match &self.op {
            Operator::Linear { a, .. } => {
                let xr = DVector::from_column_slice(x);
                let resid = a * xr - DVector::from_column_slice(&self.y);
                let g = -(a.transpose() * resid) / s2;
                g.as_slice().to_vec()
            }
            Operator::TanhLinear { a } => {
                let xr = DVector::from_column_slice(x);
                let z = a * xr;
                let o = z.map(|v| v.tanh());
                let w = DVector::from_iterator(
                    o.len(),
                    o.iter()
                        .zip(&self.y)
                        .map(|(oi, yi)| (oi - yi) * (1.0 - oi * oi)),
                );
                let g = -(a.transpose() * w) / s2;
                g.as_slice().to_vec()
            }
            Operator::Magnitude { d } => {
                use std::f64::consts::TAU;
                let mags = real_dft_magnitudes(x, *d);
                let mut grad = vec![0.0; *d];
                for k in 0..=d / 2 {
                    let m = mags[k];
                    if m == 0.0 {
                        // subgradient 0 at exact zeros
                        continue;
                    }
                    let (c, s) = real_dft_pair(x, *d, k);
                    let coef = -(m - self.y[k]) / (s2 * m);
                    for (j, g) in grad.iter_mut().enumerate() {
                        let ang = TAU * (k * j) as f64 / *d as f64;
                        *g += coef * (c * ang.cos() + s * ang.sin());
                    }
                }
                grad
            }
        }
    }
}

/// Everything about a measurement model except the measurement itself.
#[derive(Debug, Clone)]
pub struct TaskFamily {
    pub kind: TaskKind,
    pub op: Operator,
    pub sigma_y: f64,
}

impl TaskFamily {
    pub fn mask(d: usize, keep: &[usize], sigma_y: f64) -> Result<Self> {
        if keep.is_empty() || keep.iter().any(|&i| i >= d) {
            return Err(Error::Config("mask keep indices out of range".into()));
        }
        let mut a = DMatrix::zeros(keep.len(), d);
        for (r, &c) in keep.iter().enumerate() {
            a[(r, c)] = 1.0;
        }
        Ok(TaskFamily { kind: TaskKind::Mask, op: Operator::Linear { a, mask: true }, sigma_y })
    }

    /// Dense random matrix with condition number clamped to ≤ 20 by
    /// singular-value flooring (lensing analogue with a known matrix).
    /// Dense linear operator with an explicitly given matrix (row-major).
    pub fn dense(rows: Vec<Vec<f64>>, sigma_y: f64) -> Result<Self> {
        if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
            return Err(Error::Config("dense operator needs rectangular non-empty rows".into()));
        }
        let (m, d) = (rows.len(), rows[0].len());
        let a = DMatrix::from_fn(m, d, |i, j| rows[i][j]);
        Ok(TaskFamily { kind: TaskKind::Dense, op: Operator::Linear { a, mask: false }, sigma_y })
    }

    pub fn dense_random(d: usize, m: usize, sigma_y: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(m, d, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / (d as f64).sqrt()
        });
        let svd = raw.svd(true, true);
        let smax = svd.singular_values.max();
        let floor = smax / 20.0;
        let mut sv = svd.singular_values.clone();
        for v in sv.iter_mut() {
            if *v < floor {
                *v = floor;
            }
        }
        let u = svd.u.as_ref().ok_or_else(|| Error::Config("svd failed".into()))?;
        let vt = svd.v_t.as_ref().ok_or_else(|| Error::Config("svd failed".into()))?;
        let a = u * DMatrix::from_diagonal(&sv) * vt;
        Ok(TaskFamily { kind: TaskKind::Dense, op: Operator::Linear { a, mask: false }, sigma_y })
    }

    pub fn phase(d: usize, sigma_y: f64) -> Result<Self> {
        if d % 2 != 0 {
            return Err(Error::Config("phase retrieval requires even dimension".into()));
        }
        Ok(TaskFamily { kind: TaskKind::Phase, op: Operator::Magnitude { d }, sigma_y })
    }

    /// Banded convolution A from `band` centered on the diagonal, then tanh.
    pub fn blur(d: usize, band: &[f64], sigma_y: f64) -> Result<Self> {
        if band.is_empty() || band.len() % 2 == 0 {
            return Err(Error::Config("band must have odd length".into()));
        }
        let half = band.len() / 2;
        let mut a = DMatrix::zeros(d, d);
        for i in 0..d {
            for (o, &coef) in band.iter().enumerate() {
                let j = i as isize + o as isize - half as isize;
                if j >= 0 && (j as usize) < d {
                    a[(i, j as usize)] = coef;
                }
            }
        }
        Ok(TaskFamily { kind: TaskKind::Blur, op: Operator::TanhLinear { a }, sigma_y })
    }

    pub fn dim(&self) -> usize {
        self.op.in_dim()
    }

    pub fn measurement_dim(&self) -> usize {
        self.op.out_dim()
    }

    /// y = op(x*) + N(0, σ_y² I); deterministic given seed. σ_y = 0 would be
    /// rejected by `TaskReward::new`, so noiseless simulation is explicit.
    pub fn simulate_measurement(&self, x_star: &[f64], seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.simulate_with(x_star, &mut rng)
    }

    pub fn simulate_with(&self, x_star: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut y = self.op.apply(x_star);
        for v in &mut y {
            let z: f64 = StandardNormal.sample(rng);
            *v += self.sigma_y * z;
        }
        if matches!(self.op, Operator::Magnitude { .. }) {
            for v in &mut y {
                *v = v.max(0.0);
            }
        }
        y
    }

    pub fn reward_with(&self, y: Vec<f64>) -> Result<TaskReward> {
        TaskReward::new(self.op.clone(), y, self.sigma_y)
    }
}

/// A reward family plus simulated measurements split into train and
/// held-out sets (disjoint by construction).
pub struct ConditionalTask {
    pub family: TaskFamily,
    pub train: Vec<(Vec<f64>, Vec<f64>)>,
    pub heldout: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ConditionalTask {
    /// Draws x* from the target density, simulates y; identical seed gives
    /// identical (x*, y) pairs.
    pub fn generate(
        family: TaskFamily,
        target: &GaussianMixture,
        n_train: usize,
        n_heldout: usize,
        seed: u64,
    ) -> Result<Self> {
        if target.dim() != family.dim() {
            return Err(Error::Config("conditional task dimension mismatch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |n: usize, rng: &mut ChaCha8Rng| {
            (0..n)
                .map(|_| {
                    let x = target.sample(rng);
                    let y = family.simulate_with(&x, rng);
                    (x, y)
                })
                .collect::<Vec<_>>()
        };
        let train = draw(n_train, &mut rng);
        let heldout = draw(n_heldout, &mut rng);
        Ok(ConditionalTask { family, train, heldout })
    }
}

/// Exact posterior mixture under a linear-Gaussian reward; covariances are
/// dense even for a diagonal prior.
pub struct PosteriorMixture {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    chols: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl PosteriorMixture {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let d = x.len() as f64;
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|k| {
                let chol = &self.chols[k];
                let dev = &xv - &self.means[k];
                let sol = chol.solve(&dev);
                let quad = dev.dot(&sol);
                let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
                self.weights[k].ln() - 0.5 * (d * LN_2PI + logdet + quad)
            })
            .collect();
        log_sum_exp(&terms)
    }
}

/// Conjugate update of a diagonal GMM prior under y = A x + N(0, σ_y² I).
/// Returns the exact posterior mixture and log Z = ∫ r(x) ρ(x) dx in the
/// unnormalized reward convention of `TaskReward`, i.e. the Gaussian
/// evidence log Σ_k w_k N(y; Aμ_k, A Σ_k Aᵀ + σ_y² I) plus the dropped
/// likelihood constant (m/2)·ln(2π σ_y²). Non-linear rewards are
/// unsupported.
pub fn analytic_posterior(
    prior: &GaussianMixture,
    reward: &TaskReward,
) -> Result<(PosteriorMixture, f64)> {
    let Some((a, _)) = reward.linear() else {
        return Err(Error::Config("analytic_posterior supports linear-Gaussian rewards only".into()));
    };
    let d = prior.dim();
    let m = a.nrows();
    let s2 = reward.sigma_y * reward.sigma_y;
    let yv = DVector::from_column_slice(&reward.y);

    let mut log_weights = Vec::new();
    let mut means = Vec::new();
    let mut covs = Vec::new();
    let mut chols = Vec::new();

    for k in 0..prior.num_components() {
        let mu = DVector::from_column_slice(&prior.means()[k]);
        let var = &prior.variances()[k];
        let prior_prec = DMatrix::from_diagonal(&DVector::from_iterator(d, var.iter().map(|v| 1.0 / v)));
        let prior_cov = DMatrix::from_diagonal(&DVector::from_column_slice(var));

        // posterior moments
        let prec = &prior_prec + a.transpose() * a / s2;
        let chol_prec = prec
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numeric("analytic_posterior", "posterior precision not PD"))?;
        let cov = chol_prec.inverse();
        let mean = &cov * (&prior_prec * &mu + a.transpose() * &yv / s2);

        // marginal evidence N(y; A mu, A Sigma A^T + s2 I)
        let marg_cov = a * &prior_cov * a.transpose() + DMatrix::identity(m, m) * s2;
        let chol_m = marg_cov
            .cholesky()
            .ok_or_else(|| Error::numeric("analytic_posterior", "marginal covariance not PD"))?;
        let dev = &yv - a * &mu;
        let quad = dev.dot(&chol_m.solve(&dev));
        let logdet: f64 = chol_m.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let log_evidence = -0.5 * (m as f64 * LN_2PI + logdet + quad);

        log_weights.push(prior.weights()[k].ln() + log_evidence);
        let chol_cov = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numeric("analytic_posterior", "posterior covariance not PD"))?;
        means.push(mean);
        covs.push(cov);
        chols.push(chol_cov);
    }

    // r(x) = (2π σ_y²)^{m/2} N(y; Ax, σ_y² I), so Z carries that constant
    let log_evid = log_sum_exp(&log_weights);
    let log_z = log_evid + 0.5 * m as f64 * (LN_2PI + s2.ln());
    let weights: Vec<f64> = log_weights.iter().map(|lw| (lw - log_evid).exp()).collect();
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-10 {
        return Err(Error::numeric("analytic_posterior", "weights do not normalize"));
    }
    Ok((PosteriorMixture { weights, means, covs, chols }, log_z))
}

/// Brute-force check of `analytic_posterior`'s log Z by midpoint grid
/// integration of prior(x)·r(x) over [lo, hi]² (2-d only). Used to validate
/// the oracle before it validates anything else.
pub fn grid_log_z_2d(
    prior: &GaussianMixture,
    reward: &dyn Reward,
    lo: f64,
    hi: f64,
    bins: usize,
) -> Result<f64> {
    if prior.dim() != 2 {
        return Err(Error::Config("grid integration implemented for d = 2".into()));
    }
    let h = (hi - lo) / bins as f64;
    let mut terms = Vec::with_capacity(bins * bins);
    for i in 0..bins {
        let x0 = lo + (i as f64 + 0.5) * h;
        for j in 0..bins {
            let x1 = lo + (j as f64 + 0.5) * h;
            let p = [x0, x1];
            terms.push(prior.log_density(&p) + reward.log_r(&p));
        }
    }
    Ok(log_sum_exp(&terms) + (h * h).ln())
}

/// External task-spec file format (JSON).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub d: usize,
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_keep: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_rows: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<Vec<f64>>,
    pub y: Vec<f64>,
    pub sigma_y: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn family(&self) -> Result<TaskFamily> {
        let fam = match self.kind {
            TaskKind::Mask => {
                let keep = self
                    .mask_keep
                    .as_ref()
                    .ok_or_else(|| Error::Config("mask task needs mask_keep".into()))?;
                TaskFamily::mask(self.d, keep, self.sigma_y)?
            }
            TaskKind::Dense => {
                let rows = self
                    .a_rows
                    .as_ref()
                    .ok_or_else(|| Error::Config("dense task needs a_rows".into()))?;
                let m = rows.len();
                if m != self.m || rows.iter().any(|r| r.len() != self.d) {
                    return Err(Error::Config("a_rows shape mismatch".into()));
                }
                let a = DMatrix::from_fn(m, self.d, |i, j| rows[i][j]);
                TaskFamily {
                    kind: TaskKind::Dense,
                    op: Operator::Linear { a, mask: false },
                    sigma_y: self.sigma_y,
                }
            }
            TaskKind::Phase => TaskFamily::phase(self.d, self.sigma_y)?,
            TaskKind::Blur => {
                let band = self
                    .band
                    .as_ref()
                    .ok_or_else(|| Error::Config("blur task needs band".into()))?;
                TaskFamily::blur(self.d, band, self.sigma_y)?
            }
        };
        if fam.measurement_dim() != self.m {
            return Err(Error::Config(format!(
                "task spec m = {} does not match operator output {}",
                self.m,
                fam.measurement_dim()
            )));
        }
        Ok(fam)
    }

    pub fn reward(&self) -> Result<TaskReward> {
        self.family()?.reward_with(self.y.clone())
    }

    pub fn from_family(family: &TaskFamily, y: Vec<f64>, seed: u64) -> TaskSpec {
        let (mask_keep, a_rows, band) = match (&family.kind, &family.op) {
            (TaskKind::Mask, Operator::Linear { a, .. }) => {
                let keep = (0..a.nrows())
                    .map(|r| (0..a.ncols()).find(|&c| a[(r, c)] == 1.0).unwrap_or(0))
                    .collect();
                (Some(keep), None, None)
            }
            (TaskKind::Dense, Operator::Linear { a, .. }) => {
                let rows = (0..a.nrows())
                    .map(|r| (0..a.ncols()).map(|c| a[(r, c)]).collect())
                    .collect();
                (None, Some(rows), None)
            }
            (TaskKind::Blur, Operator::TanhLinear { a }) => {
                // recover the central band row
                let d = a.ncols();
                let mid = d / 2;
                let mut lo = mid;
                let mut hi = mid;
                while lo > 0 && a[(mid, lo - 1)] != 0.0 {
                    lo -= 1;
                }
                while hi + 1 < d && a[(mid, hi + 1)] != 0.0 {
                    hi += 1;
                }
                let band = (lo..=hi).map(|c| a[(mid, c)]).collect();
                (None, None, Some(band))
            }
            _ => (None, None, None),
        };
        TaskSpec {
            kind: family.kind,
            d: family.dim(),
            m: family.measurement_dim(),
            mask_keep,
            a_rows,
            band,
            y,
            sigma_y: family.sigma_y,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_linear_zero_residual() {
        let fam = TaskFamily::mask(1, &[0], 1.0).unwrap();
        let r = fam.reward_with(vec![0.0]).unwrap();
        assert_eq!(r.log_r(&[0.0]), 0.0);
    }

    #[test]
    fn magnitude_d2_exact_match() {
        // x = (1,1): DFT pairs are (2, 0) at k=0 and (0, 0) at k=1
        let fam = TaskFamily::phase(2, 1.0).unwrap();
        let mags = fam.op.apply(&[1.0, 1.0]);
        assert_eq!(mags.len(), 2);
        assert!((mags[0] - 2.0).abs() < 1e-12);
        assert!(mags[1].abs() < 1e-12);
        let r = fam.reward_with(vec![2.0, 0.0]).unwrap();
        assert!(r.log_r(&[1.0, 1.0]).abs() < 1e-20);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cases: Vec<(TaskFamily, Vec<f64>)> = vec![
            (
                TaskFamily::mask(4, &[0, 2], 0.3).unwrap(),
                vec![0.5, -0.2],
            ),
            (
                TaskFamily::dense_random(4, 2, 0.5, 7).unwrap(),
                vec![0.1, 0.9],
            ),
            (TaskFamily::phase(4, 0.4).unwrap(), vec![1.0, 0.5, 0.2]),
            (
                TaskFamily::blur(4, &[0.25, 0.5, 0.25], 0.3).unwrap(),
                vec![0.2, -0.3, 0.6, 0.1],
            ),
        ];
        let x = [0.7, -0.4, 1.2, 0.3];
        for (fam, y) in cases {
            let r = fam.reward_with(y).unwrap();
            let g = r.grad_log_r(&x);
            for j in 0..4 {
                let h = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let fd = (r.log_r(&xp) - r.log_r(&xm)) / (2.0 * h);
                let denom = fd.abs().max(1e-6);
                assert!(
                    (g[j] - fd).abs() / denom < 1e-5,
                    "{:?} coord {j}: {} vs {}",
                    fam.kind,
                    g[j],
                    fd
                );
            }
        }
    }

    #[test]
    fn masked_coordinates_do_not_change_log_r() {
        let fam = TaskFamily::mask(4, &[1, 3], 0.2).unwrap();
        let r = fam.reward_with(vec![0.4, -0.1]).unwrap();
        let a = r.log_r(&[9.0, 0.4, -7.0, -0.1]);
        let b = r.log_r(&[-3.0, 0.4, 42.0, -0.1]);
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_simulation_keeps_unmasked_coords() {
        let fam = TaskFamily::mask(3, &[0, 2], 0.1).unwrap();
        let x = [1.0, 2.0, 3.0];
        let y = fam.op.apply(&x);
        assert_eq!(y, vec![1.0, 3.0]);
    }

    #[test]
    fn conjugate_scalar_case() {
        // prior N(0,1), A = 1, sigma = 1, y = 2 -> posterior N(1, 0.5)
        let prior = GaussianMixture::std_normal(1);
        let fam = TaskFamily::mask(1, &[0], 1.0).unwrap();
        let r = fam.reward_with(vec![2.0]).unwrap();
        let (post, log_z) = analytic_posterior(&prior, &r).unwrap();
        assert!((post.means[0][0] - 1.0).abs() < 1e-12);
        assert!((post.covs[0][(0, 0)] - 0.5).abs() < 1e-12);
        // evidence N(2; 0, 2) plus the dropped likelihood constant sqrt(2 pi)
        let expect = -0.5 * (LN_2PI + 2.0f64.ln()) - 4.0 / (2.0 * 2.0) + 0.5 * LN_2PI;
        assert!((log_z - expect).abs() < 1e-12);
        // closed form against direct 1-d quadrature of r(x) N(x; 0, 1)
        let n = 400_000;
        let (lo, hi) = (-10.0, 10.0);
        let h = (hi - lo) / n as f64;
        let quad: f64 = (0..n)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * h;
                (r.log_r(&[x]) + prior.log_density(&[x])).exp() * h
            })
            .sum();
        assert!((log_z - quad.ln()).abs() < 1e-8, "{log_z} vs {}", quad.ln());
    }

    #[test]
    fn dense_random_condition_number_clamped() {
        let fam = TaskFamily::dense_random(8, 4, 0.1, 3).unwrap();
        let Operator::Linear { a, .. } = &fam.op else { panic!() };
        let svd = a.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        assert!(smax / smin <= 20.0 + 1e-9, "cond {}", smax / smin);
    }

    #[test]
    fn task_spec_roundtrip() {
        let fam = TaskFamily::blur(6, &[0.2, 0.6, 0.2], 0.3).unwrap();
        let y = fam.simulate_measurement(&[0.5; 6], 11);
        let spec = TaskSpec::from_family(&fam, y.clone(), 11);
        let json = serde_json::to_string(&spec).unwrap();
        let back: TaskSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
        let reward = back.reward().unwrap();
        let orig = fam.reward_with(y).unwrap();
        assert_eq!(reward.log_r(&[0.1; 6]), orig.log_r(&[0.1; 6]));
    }

    #[test]
    fn conditional_generation_deterministic() {
        let target = GaussianMixture::two_mode_2d();
        let fam = TaskFamily::mask(2, &[0], 0.1).unwrap();
        let a = ConditionalTask::generate(fam.clone(), &target, 4, 2, 5).unwrap();
        let b = ConditionalTask::generate(fam, &target, 4, 2, 5).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.heldout, b.heldout);
    }
}
