/// Adaptive-moment optimizer with bias correction and optional global-norm
/// gradient clipping. One instance per parameter group (groups may use
/// different learning rates).
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip gradients to this global L2 norm before the update, if set.
    pub clip_norm: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    /// Updates skipped because a gradient was non-finite.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            skipped: 0,
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// In-place parameter update. A non-finite gradient skips the whole
    /// update and bumps the `skipped` counter.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "param/grad length mismatch");
        assert_eq!(params.len(), self.m.len(), "optimizer state length mismatch");
        if !grads.iter().all(|g| g.is_finite()) {
            self.skipped += 1;
            return;
        }
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for i in 0..params.len() {
            let g = grads[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // g = 1 everywhere: bias-corrected first step is lr / (1 + eps)
        let mut adam = AdamState::new(3, 1e-3).with_clip(None);
        let mut params = vec![0.5, -0.5, 0.0];
        adam.step(&mut params, &[1.0, 1.0, 1.0]);
        for (p, p0) in params.iter().zip(&[0.5, -0.5, 0.0]) {
            let delta: f64 = p0 - p;
            assert!((delta - 1e-3).abs() < 1e-6, "delta {delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = AdamState::new(2, 1e-2);
        let mut params = vec![1.0, 2.0];
        adam.step(&mut params, &[0.0, 0.0]);
        assert_eq!(params, vec![1.0, 2.0]);
    }

    #[test]
    fn nonfinite_gradient_skips_update() {
        let mut adam = AdamState::new(2, 1e-2);
        let mut params = vec![1.0, 2.0];
        adam.step(&mut params, &[f64::NAN, 0.0]);
        assert_eq!(params, vec![1.0, 2.0]);
        assert_eq!(adam.skipped, 1);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn three_steps_match_scalar_recurrence_oracle() {
        // Quadratic loss 0.5*w^2, g = w; hand-rolled Adam recurrence.
        let (lr, b1, b2, eps): (f64, f64, f64, f64) = (0.1, 0.9, 0.999, 1e-8);
        let mut adam = AdamState::new(1, lr).with_clip(None);
        let mut params = vec![2.0];

        let mut w = 2.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=3u32 {
            let g = w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32));
            let vhat: f64 = v / (1.0 - b2.powi(t as i32));
            w -= lr * mhat / (vhat.sqrt() + eps);

            let g_impl = params[0];
            adam.step(&mut params, &[g_impl]);
        }
        assert!((params[0] - w).abs() < 1e-15, "{} vs {}", params[0], w);
    }

    #[test]
    fn clipping_rescales_to_global_norm() {
        let mut a = AdamState::new(2, 1e-3).with_clip(Some(1.0));
        let mut b = AdamState::new(2, 1e-3).with_clip(None);
        let mut pa = vec![0.0, 0.0];
        let mut pb = vec![0.0, 0.0];
        // norm 5 -> scaled to [0.6, 0.8]
        a.step(&mut pa, &[3.0, 4.0]);
        b.step(&mut pb, &[0.6, 0.8]);
        assert_eq!(pa, pb);
    }
}
