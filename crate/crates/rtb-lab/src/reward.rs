/// An unnormalized log-density over terminal points, with gradient. Both
/// inverse-problem likelihoods and analytic target densities implement this.
pub trait Reward: Send + Sync {
    fn dim(&self) -> usize;

    /// Unnormalized log r(x).
    fn log_r(&self, x: &[f64]) -> f64;

    /// ∇_x log r(x).
    fn grad_log_r(&self, x: &[f64]) -> Vec<f64>;
}

/// Constant reward r ≡ exp(c); useful as a degenerate case (posterior equals
/// prior, optimal log Z equals c).
pub struct ConstReward {
    pub dim: usize,
    pub log_value: f64,
}

impl Reward for ConstReward {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_r(&self, _x: &[f64]) -> f64 {
        self.log_value
    }

    fn grad_log_r(&self, x: &[f64]) -> Vec<f64> {
        vec![0.0; x.len()]
    }
}
