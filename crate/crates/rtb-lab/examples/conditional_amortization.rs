//! Amortize over measurements: train one posterior sampler conditioned on y
//! and evaluate it on held-out measurements it never saw during training.

use rtb_lab::diffusion::Schedule;
use rtb_lab::gmm::GaussianMixture;
use rtb_lab::metrics::mean_log_reward;
use rtb_lab::posterior::{train_posterior, RewardSource, RtbConfig};
use rtb_lab::prior::{train_prior_tb, PriorTrainConfig};
use rtb_lab::tasks::{ConditionalTask, TaskFamily};

fn main() -> rtb_lab::Result<()> {
    let target = GaussianMixture::two_mode_2d();
    let schedule = Schedule::new(32, 1.5)?;
    let pcfg = PriorTrainConfig { iters: 1500, batch: 128, ..PriorTrainConfig::default() };
    let (prior, _) = train_prior_tb(&target, schedule, &pcfg)?;

    let family = TaskFamily::mask(2, &[0], 0.7)?;
    let task = ConditionalTask::generate(family, &target, 16, 4, 11)?;
    let ys: Vec<Vec<f64>> = task.train.iter().map(|(_, y)| y.clone()).collect();

    let rcfg = RtbConfig {
        iters: 1500,
        batch: 64,
        conditional: true,
        ..RtbConfig::default()
    };
    let source = RewardSource::Conditional { family: &task.family, ys: &ys };
    let (model, _) = train_posterior(&prior, &source, &rcfg)?;

    println!("held-out measurements (never trained on):");
    for (x_star, y) in &task.heldout {
        let reward = task.family.reward_with(y.clone())?;
        let samples = model.sample_terminals(None, Some(y), 4000, 3)?;
        let (mlr, se) = mean_log_reward(&samples, &reward);
        let lz = model.log_z.value(Some(y))?;
        println!(
            "  y = {y:?} (x* = [{:+.2}, {:+.2}]): mean log r {mlr:.3} +- {se:.3}, log Z(y) {lz:.3}",
            x_star[0], x_star[1]
        );
    }
    Ok(())
}
