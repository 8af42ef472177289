//! Replay buffer over terminal samples with rank-based prioritized
//! sampling, plus backtracking: turning stored terminals back into full
//! trajectories through the backward bridge.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{sample_backward_trajectory, Schedule, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BufferEntry {
    pub x1: Vec<f64>,
    pub log_r: f64,
    /// Training step at which the sample was inserted.
    pub step: u64,
}

/// Fixed-capacity FIFO of terminal samples. Sampling is prioritized by
/// reward rank: P(i) ∝ exp(-rank_i / β_T) with rank 0 the highest reward;
/// ties get the average of their rank range so duplicates share priority.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    beta_t: f64,
    entries: Vec<BufferEntry>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, beta_t: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay buffer capacity must be positive".into()));
        }
        if !(beta_t > 0.0) {
            return Err(Error::Config("replay buffer beta_t must be positive".into()));
        }
        Ok(ReplayBuffer { capacity, beta_t, entries: Vec::new(), next: 0 })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    /// Insert, overwriting the oldest entry once at capacity. Non-finite
    /// rewards are rejected silently (they carry no usable signal).
    pub fn insert(&mut self, x1: Vec<f64>, log_r: f64, step: u64) {
        if !log_r.is_finite() || x1.iter().any(|v| !v.is_finite()) {
            return;
        }
        let entry = BufferEntry { x1, log_r, step };
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else {
            self.entries[self.next] = entry;
            self.next = (self.next + 1) % self.capacity;
        }
    }

    /// Rank-based sampling probabilities, index-aligned with `entries`.
    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.entries.len();
        // sort indices by reward descending; average ranks over tie runs
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            self.entries[b]
                .log_r
                .partial_cmp(&self.entries[a].log_r)
                .unwrap()
        });
        let mut rank = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n
                && self.entries[order[j + 1]].log_r == self.entries[order[i]].log_r
            {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &idx in &order[i..=j] {
                rank[idx] = avg;
            }
            i = j + 1;
        }
        let weights: Vec<f64> = rank.iter().map(|r| (-r / self.beta_t).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter().map(|w| w / total).collect()
    }

    /// Sample `n` entry indices with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let probs = self.probabilities();
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cdf.push(acc);
        }
        Ok((0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                cdf.partition_point(|&c| c < u).min(cdf.len() - 1)
            })
            .collect())
    }

    /// Sample `n` terminals and run the backward bridge from each, producing
    /// off-policy trajectories whose final state is the stored terminal.
    pub fn backtrack_batch(
        &self,
        n: usize,
        schedule: &Schedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Trajectory>> {
        let idx = self.sample_indices(n, rng)?;
        idx.into_iter()
            .map(|i| sample_backward_trajectory(&self.entries[i].x1, schedule, rng))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn fifo_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(2, 10.0).unwrap();
        buf.insert(vec![1.0], 0.0, 0);
        buf.insert(vec![2.0], 0.0, 1);
        buf.insert(vec![3.0], 0.0, 2);
        let xs: Vec<f64> = buf.entries().iter().map(|e| e.x1[0]).collect();
        assert_eq!(xs, vec![3.0, 2.0]);
    }

    #[test]
    fn nonfinite_rewards_rejected() {
        let mut buf = ReplayBuffer::new(4, 10.0).unwrap();
        buf.insert(vec![1.0], f64::NEG_INFINITY, 0);
        buf.insert(vec![f64::NAN], 0.0, 0);
        assert!(buf.is_empty());
    }

    #[test]
    fn empty_buffer_errors() {
        let buf = ReplayBuffer::new(4, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(buf.sample_indices(1, &mut rng), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn rank_probabilities_match_softmax_oracle() {
        // rewards 3 > 2 > 1 -> ranks 0, 1, 2 in insertion order 1,2,3
        let mut buf = ReplayBuffer::new(8, 2.0).unwrap();
        buf.insert(vec![0.0], 1.0, 0);
        buf.insert(vec![0.0], 2.0, 0);
        buf.insert(vec![0.0], 3.0, 0);
        let p = buf.probabilities();
        let w = [(-2.0f64 / 2.0).exp(), (-1.0f64 / 2.0).exp(), 1.0];
        let z: f64 = w.iter().sum();
        for (pi, wi) in p.iter().zip(&w) {
            assert!((pi - wi / z).abs() < 1e-14);
        }
    }

    #[test]
    fn tied_rewards_share_average_rank() {
        let mut buf = ReplayBuffer::new(8, 5.0).unwrap();
        buf.insert(vec![0.0], 1.0, 0);
        buf.insert(vec![0.0], 1.0, 0);
        buf.insert(vec![0.0], 0.0, 0);
        let p = buf.probabilities();
        assert!((p[0] - p[1]).abs() < 1e-15);
        // shared rank 0.5 for the tie, rank 2 for the last
        let w = [(-0.5f64 / 5.0).exp(), (-0.5f64 / 5.0).exp(), (-2.0f64 / 5.0).exp()];
        let z: f64 = w.iter().sum();
        assert!((p[2] - w[2] / z).abs() < 1e-14);
    }

    #[test]
    fn sampling_frequencies_track_probabilities() {
        let mut buf = ReplayBuffer::new(8, 1.0).unwrap();
        for (i, r) in [0.0, 1.0, 2.0, 3.0].iter().enumerate() {
            buf.insert(vec![i as f64], *r, 0);
        }
        let probs = buf.probabilities();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 200_000;
        let idx = buf.sample_indices(n, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        for i in idx {
            counts[i] += 1;
        }
        for k in 0..4 {
            let freq = counts[k] as f64 / n as f64;
            assert!((freq - probs[k]).abs() < 5e-3, "idx {k}: {freq} vs {}", probs[k]);
        }
    }

    #[test]
    fn backtracked_trajectories_end_at_stored_terminal() {
        let schedule = Schedule::new(8, 1.0).unwrap();
        let mut buf = ReplayBuffer::new(4, 10.0).unwrap();
        buf.insert(vec![1.5, -0.5], 3.0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trajs = buf.backtrack_batch(3, &schedule, &mut rng).unwrap();
        for t in trajs {
            assert_eq!(t.terminal(), &[1.5, -0.5]);
            assert_eq!(t.state(0), &[0.0, 0.0]);
        }
    }
}
