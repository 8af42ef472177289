use std::path::Path;
use std::time::Instant;

use rtb_lab::config::ExperimentConfig;
use rtb_lab::diffusion::{sample_forward_trajectory, Schedule};
use rtb_lab::gmm::GaussianMixture;
use rtb_lab::harness::{read_prior_checkpoint, write_json, PriorCheckpoint};
use rtb_lab::metrics::{importance_weights, is_log_z, rtb_residual_stats, Histogram2d};
use rtb_lab::posterior::{log_ratios, train_posterior, RewardSource, RtbConfig};
use rtb_lab::prior::{train_prior_tb, PriorModel, PriorTrainConfig};
use rtb_lab::reward::Reward;
use rtb_lab::tasks::{analytic_posterior, TaskFamily};

fn cached_prior(
    path: &str,
    target: &GaussianMixture,
    schedule: Schedule,
    prior_iters: usize,
    hidden: Vec<usize>,
) -> rtb_lab::Result<PriorModel> {
    if Path::new(path).exists() {
        return read_prior_checkpoint(Path::new(path))?.to_model();
    }
    let cfg = PriorTrainConfig {
        iters: prior_iters,
        batch: 128,
        seed: 0,
        hidden,
        ..PriorTrainConfig::default()
    };
    let t0 = Instant::now();
    let (prior, _) = train_prior_tb(target, schedule, &cfg)?;
    println!("prior: {:.1}s", t0.elapsed().as_secs_f64());
    let ecfg = ExperimentConfig::from_str_toml(&format!(
        "[target]\nkind = \"two_mode\"\n[schedule]\nsteps = {}\nsigma = {}",
        schedule.steps(),
        schedule.sigma()
    ))?;
    let ckpt = PriorCheckpoint::from_model(&prior, &ecfg, "tb", 0)?;
    write_json(Path::new(path), &ckpt)?;
    Ok(prior)
}

fn main() -> rtb_lab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let langevin: bool = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(true);
    let clip: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(5e-4);
    let sigma: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.4);
    let vargrad: bool = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(false);
    let prior_iters: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(3000);
    let hidden: Vec<usize> = args
        .get(8)
        .map(|s| s.split(',').map(|w| w.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![64, 64]);
    let batch: usize = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(64);
    let steps: usize = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(64);

    let target = GaussianMixture::two_mode_2d();
    let prior = cached_prior(
        &format!("/tmp/prior_a_{sigma}_{prior_iters}_{hidden:?}_{steps}.json"),
        &target,
        Schedule::new(steps, sigma)?,
        prior_iters,
        hidden,
    )?;
    {
        let samples = prior.sample_terminals(50000, 1)?;
        let h = Histogram2d::from_samples(&samples, None, (0, 1), 64, -6.0, 6.0)?;
        let oracle =
            Histogram2d::from_log_density(|x, y| target.log_density(&[x, y]), 64, -6.0, 6.0)?;
        println!("prior TV {:.4}, log Z {:+.4}", h.tv(&oracle)?, prior.log_z);
    }

    let reward = TaskFamily::dense(vec![vec![1.0, -1.0]], 0.1)?.reward_with(vec![0.0])?;
    let (_, analytic) = analytic_posterior(&target, &reward)?;
    let (isz, is_se) = is_log_z(&prior, &reward, 300_000, 99)?;
    println!("is_log_z: {isz:.4} +- {is_se:.4} (analytic {analytic:.4})");

    let rcfg = RtbConfig {
        iters,
        batch,
        lr,
        lr_final_mult: 0.05,
        tail_avg_frac: 0.25,
        langevin,
        rescale_intermediate: langevin,
        vargrad,
        clip_delta: if clip > 0.0 { Some(clip) } else { None },
        seed: 0,
        ..RtbConfig::default()
    };
    let t0 = Instant::now();
    let (model, log) = train_posterior(&prior, &RewardSource::Single(&reward), &rcfg)?;
    println!(
        "rtb: {:.1}s, aborted {}, final loss {:.4} (loss at 1/4: {:.4}, 1/2: {:.4})",
        t0.elapsed().as_secs_f64(),
        log.aborted,
        log.losses.last().unwrap(),
        log.losses[log.losses.len() / 4],
        log.losses[log.losses.len() / 2]
    );

    let lz = model.log_z.value(None)?;
    println!("log Z learned {lz:.4}, |lz-is| = {:.4}", (lz - isz).abs());

    let r: Option<&dyn Reward> = if langevin { Some(&reward) } else { None };
    let samples = model.sample_terminals(r, None, 50000, 7)?;
    let h = Histogram2d::from_samples(&samples, None, (0, 1), 64, -6.0, 6.0)?;
    let prior_samples = prior.sample_terminals(200_000, 21)?;
    let log_rs: Vec<f64> = prior_samples.iter().map(|x| reward.log_r(x)).collect();
    let w = importance_weights(&log_rs)?;
    let oracle = Histogram2d::from_samples(&prior_samples, Some(&w), (0, 1), 64, -6.0, 6.0)?;
    println!("TV vs IS oracle: {:.4}", h.tv(&oracle)?);
    let (rm, rs) = rtb_residual_stats(&model, &reward, None, 2000, 5)?;
    println!("residual mean {rm:+.4}, std {rs:.4}");

    // decomposition: how much of the reward fluctuation does the path
    // likelihood ratio cancel?
    let policy = model.policy(None, None);
    let trajs: Vec<_> = (0..4000)
        .map(|s| sample_forward_trajectory(&policy, 31_000 + s).unwrap())
        .collect();
    let lr_vals = log_ratios(&model, &reward, None, &trajs)?;
    let b: Vec<f64> = trajs.iter().map(|t| reward.log_r(t.terminal())).collect();
    let a: Vec<f64> = lr_vals.iter().zip(&b).map(|(l, b)| l + b).collect();
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
        (m, var.sqrt())
    };
    let (ma, sa) = stats(&a);
    let (mb, sb) = stats(&b);
    let cov = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / a.len() as f64;
    println!(
        "path term std {sa:.4}, log r std {sb:.4}, corr {:.4}, resid std check {:.4}",
        cov / (sa * sb),
        stats(&lr_vals).1
    );
    Ok(())
}
