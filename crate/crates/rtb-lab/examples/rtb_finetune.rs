//! Fine-tune a diffusion prior into a posterior sampler with the relative
//! trajectory-balance objective on a masked linear-Gaussian measurement,
//! then compare the learned normalizer against the analytic evidence.

use rtb_lab::diffusion::Schedule;
use rtb_lab::gmm::GaussianMixture;
use rtb_lab::metrics::{mean_log_reward, Histogram2d};
use rtb_lab::posterior::{train_posterior, RewardSource, RtbConfig};
use rtb_lab::prior::{train_prior_tb, PriorTrainConfig};
use rtb_lab::tasks::{analytic_posterior, TaskFamily};

fn main() -> rtb_lab::Result<()> {
    let target = GaussianMixture::two_mode_2d();
    let schedule = Schedule::new(32, 1.5)?;
    let pcfg = PriorTrainConfig { iters: 1500, batch: 128, ..PriorTrainConfig::default() };
    let (prior, _) = train_prior_tb(&target, schedule, &pcfg)?;
    println!("prior trained, log Z = {:.3}", prior.log_z);

    // observe the first coordinate only
    let family = TaskFamily::mask(2, &[0], 0.5)?;
    let reward = family.reward_with(vec![2.0])?;

    let rcfg = RtbConfig { iters: 1200, batch: 64, ..RtbConfig::default() };
    let (model, log) = train_posterior(&prior, &RewardSource::Single(&reward), &rcfg)?;

    let (oracle_post, oracle_log_z) = analytic_posterior(&target, &reward)?;
    println!("analytic log Z: {oracle_log_z:.4}");
    println!("learned  log Z: {:.4}", model.log_z.value(None)?);
    println!("final RTB loss: {:.4}", log.losses.last().unwrap());

    let samples = model.sample_terminals(None, None, 20000, 7)?;
    let (mlr, se) = mean_log_reward(&samples, &reward);
    println!("mean log reward: {mlr:.3} +- {se:.3}");
    let h = Histogram2d::from_samples(&samples, None, (0, 1), 64, -6.0, 6.0)?;
    let oh =
        Histogram2d::from_log_density(|x, y| oracle_post.log_density(&[x, y]), 64, -6.0, 6.0)?;
    println!("TV distance to analytic posterior: {:.4}", h.tv(&oh)?);
    Ok(())
}
