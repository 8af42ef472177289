//! Off-policy fine-tuning: keep a rank-prioritized replay buffer of
//! high-reward terminals and rebuild training trajectories from them through
//! the backward bridge kernel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rtb_lab::buffer::ReplayBuffer;
use rtb_lab::diffusion::Schedule;
use rtb_lab::gmm::GaussianMixture;
use rtb_lab::posterior::{train_posterior, RewardSource, RtbConfig};
use rtb_lab::prior::{train_prior_tb, PriorTrainConfig};
use rtb_lab::tasks::TaskFamily;

fn main() -> rtb_lab::Result<()> {
    // standalone buffer mechanics: high-reward entries dominate sampling
    let schedule = Schedule::new(16, 1.0)?;
    let mut buf = ReplayBuffer::new(64, 4.0)?;
    for i in 0..64 {
        buf.insert(vec![i as f64 / 8.0, 0.0], -((i as f64 - 56.0).powi(2)), i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trajs = buf.backtrack_batch(8, &schedule, &mut rng)?;
    println!("backtracked {} trajectories of {} steps each", trajs.len(), schedule.steps());
    println!("terminal of first: {:?}", trajs[0].terminal());

    // same machinery inside RTB training via offpolicy_frac
    let target = GaussianMixture::two_mode_2d();
    let pcfg = PriorTrainConfig { iters: 1200, batch: 128, ..PriorTrainConfig::default() };
    let (prior, _) = train_prior_tb(&target, Schedule::new(32, 1.5)?, &pcfg)?;
    let reward = TaskFamily::mask(2, &[0], 0.5)?.reward_with(vec![2.0])?;
    let rcfg = RtbConfig {
        iters: 800,
        batch: 64,
        offpolicy_frac: 0.25,
        buffer_capacity: 2000,
        buffer_beta: 8.0,
        ..RtbConfig::default()
    };
    let (_, log) = train_posterior(&prior, &RewardSource::Single(&reward), &rcfg)?;
    println!(
        "off-policy run: final loss {:.4}, buffer filled to {} entries",
        log.losses.last().unwrap(),
        log.buffer_len
    );
    Ok(())
}
