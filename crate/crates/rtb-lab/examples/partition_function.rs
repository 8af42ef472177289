//! Three routes to the log partition function of an unnormalized posterior:
//! importance sampling from the prior (upper-biased in the limit, consistent),
//! the ELBO of a trained sampler (a lower bound), and the exact conjugate
//! evidence. Jensen ordering elbo <= is <= exact should hold within noise.

use rtb_lab::diffusion::Schedule;
use rtb_lab::gmm::GaussianMixture;
use rtb_lab::metrics::{elbo_log_z_posterior, is_log_z};
use rtb_lab::posterior::{train_posterior, RewardSource, RtbConfig};
use rtb_lab::prior::{train_prior_tb, PriorTrainConfig};
use rtb_lab::tasks::{analytic_posterior, TaskFamily};

fn main() -> rtb_lab::Result<()> {
    let target = GaussianMixture::two_mode_2d();
    let pcfg = PriorTrainConfig { iters: 1500, batch: 128, ..PriorTrainConfig::default() };
    let (prior, _) = train_prior_tb(&target, Schedule::new(32, 1.5)?, &pcfg)?;
    let reward = TaskFamily::mask(2, &[0], 0.5)?.reward_with(vec![2.0])?;

    let (_, exact) = analytic_posterior(&target, &reward)?;
    println!("exact log Z (conjugate evidence): {exact:.4}");

    let (isz, is_se) = is_log_z(&prior, &reward, 200_000, 9)?;
    println!("importance sampling: {isz:.4} +- {is_se:.4} (bootstrap)");

    let rcfg = RtbConfig { iters: 1200, batch: 64, ..RtbConfig::default() };
    let (model, _) = train_posterior(&prior, &RewardSource::Single(&reward), &rcfg)?;
    let (elbo, elbo_se) = elbo_log_z_posterior(&model, &reward, None, 4000, 13)?;
    println!("posterior ELBO: {elbo:.4} +- {elbo_se:.4}");
    println!("learned log Z:  {:.4}", model.log_z.value(None)?);

    assert!(elbo <= isz + 3.0 * (is_se + elbo_se), "Jensen ordering violated");
    println!("ordering elbo <= is holds");
    Ok(())
}
