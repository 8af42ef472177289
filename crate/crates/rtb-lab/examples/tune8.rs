// Scratch tuning harness for the baseline-direction comparison (grid9 prior,
// mode-selective reward, RTB vs DPS vs CLA).

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rtb_lab::baselines::{Guidance, GuidedSampler};
use rtb_lab::config::ExperimentConfig;
use rtb_lab::diffusion::Schedule;
use rtb_lab::gmm::GaussianMixture;
use rtb_lab::harness::{read_prior_checkpoint, write_json, PriorCheckpoint};
use rtb_lab::metrics::{elbo_log_z, elbo_log_z_posterior, mean_log_reward, Histogram2d};
use rtb_lab::posterior::{train_posterior, RewardSource, RtbConfig};
use rtb_lab::prior::{PriorModel, PriorTrainConfig};
use rtb_lab::tasks::TaskFamily;

fn cached_prior(sigma: f64, iters: usize) -> rtb_lab::Result<PriorModel> {
    let path = format!("/tmp/prior_c_{sigma}_{iters}.json");
    if Path::new(&path).exists() {
        return read_prior_checkpoint(Path::new(&path))?.to_model();
    }
    let cfg = PriorTrainConfig { iters, batch: 128, seed: 3, ..PriorTrainConfig::default() };
    let t0 = Instant::now();
    let (prior, _) =
        rtb_lab::prior::train_prior_tb(&GaussianMixture::grid9_2d(), Schedule::new(32, sigma)?, &cfg)?;
    println!("prior: {:.1}s", t0.elapsed().as_secs_f64());
    let ecfg = ExperimentConfig::from_str_toml(&format!(
        "[target]\nkind = \"grid9\"\n[schedule]\nsteps = 32\nsigma = {sigma}"
    ))?;
    write_json(Path::new(&path), &PriorCheckpoint::from_model(&prior, &ecfg, "tb", 3)?)?;
    Ok(prior)
}

fn main() -> rtb_lab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let sigma: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.75);
    let prior_iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4000);
    let sigma_y: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let yv: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(4.0);
    let rtb_iters: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(3000);

    let prior = cached_prior(sigma, prior_iters)?;
    {
        let target = GaussianMixture::grid9_2d();
        let samples = prior.sample_terminals(50000, 1)?;
        let h = Histogram2d::from_samples(&samples, None, (0, 1), 64, -8.0, 8.0)?;
        let oracle =
            Histogram2d::from_log_density(|x, y| target.log_density(&[x, y]), 64, -8.0, 8.0)?;
        println!("prior TV {:.4}, log Z {:+.4}", h.tv(&oracle)?, prior.log_z);
    }

    let family = TaskFamily::mask(2, &[0, 1], sigma_y)?;
    let reward = family.reward_with(vec![yv, yv])?;

    let cfg = RtbConfig {
        iters: rtb_iters,
        batch: 64,
        lr: 1e-3,
        lr_final_mult: 0.05,
        tail_avg_frac: 0.25,
        seed: 8,
        ..RtbConfig::default()
    };
    let t0 = Instant::now();
    let (rtb, log) = train_posterior(&prior, &RewardSource::Single(&reward), &cfg)?;
    let rtb_samples = rtb.sample_terminals(None, None, 20_000, 81)?;
    let (rtb_mlr, _) = mean_log_reward(&rtb_samples, &reward);
    let (rtb_elbo, _) = elbo_log_z_posterior(&rtb, &reward, None, 4000, 82)?;
    println!(
        "rtb: {:.1}s aborted {} | mlr {rtb_mlr:.3} elbo {rtb_elbo:.3} logZ {:.3}",
        t0.elapsed().as_secs_f64(),
        log.aborted,
        rtb.log_z.value(None)?
    );

    for (name, guidance) in [
        ("dps", Guidance::Dps { reward: &reward, zeta: 1.0 }),
        ("cla", Guidance::Cla { reward: &reward }),
    ] {
        let sampler = GuidedSampler::new(&prior, guidance)?;
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let rollout = sampler.sample(4000, &mut rng)?;
        let log_q: Vec<f64> = rollout
            .trajectories
            .iter()
            .map(|t| sampler.trajectory_log_pf(t).unwrap())
            .collect();
        let (elbo, _) = elbo_log_z(&prior, &reward, &rollout.trajectories, &log_q)?;
        let terminals: Vec<Vec<f64>> =
            rollout.trajectories.iter().map(|t| t.terminal().to_vec()).collect();
        let (mlr, _) = mean_log_reward(&terminals, &reward);
        // where does the mass land: fraction within 2 of the rewarded corner
        let frac = terminals
            .iter()
            .filter(|x| (x[0] - yv).abs() < 2.0 && (x[1] - yv).abs() < 2.0)
            .count() as f64
            / terminals.len() as f64;
        println!("{name}: mlr {mlr:.3} elbo {elbo:.3} corner frac {frac:.3}");
    }
    Ok(())
}
