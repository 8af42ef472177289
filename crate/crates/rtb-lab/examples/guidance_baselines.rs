//! Training-free guidance: steer a frozen prior toward a measurement with
//! reconstruction guidance (reward-gradient at the denoised point) or the
//! exact covariance-corrected likelihood score for linear-Gaussian tasks.

use rtb_lab::baselines::{Guidance, GuidedSampler};
use rtb_lab::diffusion::Schedule;
use rtb_lab::gmm::GaussianMixture;
use rtb_lab::metrics::mean_log_reward;
use rtb_lab::prior::{train_prior_tb, PriorTrainConfig};
use rtb_lab::tasks::TaskFamily;

fn main() -> rtb_lab::Result<()> {
    let target = GaussianMixture::two_mode_2d();
    let pcfg = PriorTrainConfig { iters: 1500, batch: 128, ..PriorTrainConfig::default() };
    let (prior, _) = train_prior_tb(&target, Schedule::new(32, 1.5)?, &pcfg)?;
    let reward = TaskFamily::mask(2, &[0], 0.5)?.reward_with(vec![2.0])?;

    let prior_samples = prior.sample_terminals(10000, 5)?;
    let (m, se) = mean_log_reward(&prior_samples, &reward);
    println!("unguided prior:   mean log r {m:.3} +- {se:.3}");

    for zeta in [0.5, 1.0, 2.0] {
        let sampler = GuidedSampler::new(&prior, Guidance::Dps { reward: &reward, zeta })?;
        let samples = sampler.sample_terminals(10000, 5)?;
        let (m, se) = mean_log_reward(&samples, &reward);
        println!("dps (zeta {zeta:.1}):   mean log r {m:.3} +- {se:.3}");
    }

    let sampler = GuidedSampler::new(&prior, Guidance::Cla { reward: &reward })?;
    let samples = sampler.sample_terminals(10000, 5)?;
    let (m, se) = mean_log_reward(&samples, &reward);
    println!("cov-corrected:    mean log r {m:.3} +- {se:.3}");
    Ok(())
}
