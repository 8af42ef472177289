//! Langevin inductive bias: add a learned, bounded gate on the reward score
//! to the drift. The gate output layer starts at zero, so step one of
//! fine-tuning is exactly the prior.

use rtb_lab::diffusion::Schedule;
use rtb_lab::gmm::GaussianMixture;
use rtb_lab::metrics::{mean_log_reward, rtb_residual_stats};
use rtb_lab::posterior::{train_posterior, RewardSource, RtbConfig};
use rtb_lab::prior::{train_prior_tb, PriorTrainConfig};
use rtb_lab::tasks::TaskFamily;

fn main() -> rtb_lab::Result<()> {
    let target = GaussianMixture::two_mode_2d();
    let pcfg = PriorTrainConfig { iters: 1500, batch: 128, ..PriorTrainConfig::default() };
    let (prior, _) = train_prior_tb(&target, Schedule::new(32, 1.5)?, &pcfg)?;
    let reward = TaskFamily::mask(2, &[0], 0.5)?.reward_with(vec![2.0])?;

    for langevin in [false, true] {
        let rcfg = RtbConfig {
            iters: 800,
            batch: 64,
            langevin,
            rescale_intermediate: langevin,
            ..RtbConfig::default()
        };
        let (model, log) = train_posterior(&prior, &RewardSource::Single(&reward), &rcfg)?;
        let r = if langevin { Some(&reward as &dyn rtb_lab::reward::Reward) } else { None };
        let samples = model.sample_terminals(r, None, 8000, 3)?;
        let (mlr, se) = mean_log_reward(&samples, &reward);
        let (_, resid_std) = rtb_residual_stats(&model, &reward, None, 2000, 5)?;
        println!(
            "langevin {}: final loss {:.4}, mean log r {mlr:.3} +- {se:.3}, residual std {resid_std:.3}",
            if langevin { "on " } else { "off" },
            log.losses.last().unwrap()
        );
    }
    Ok(())
}
