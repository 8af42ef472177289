//! Train a diffusion prior by denoising regression on bridge marginals and
//! compare sample moments against the standard-normal target.

use rtb_lab::diffusion::Schedule;
use rtb_lab::gmm::GaussianMixture;
use rtb_lab::prior::{train_prior_dsm, PriorTrainConfig};

fn main() -> rtb_lab::Result<()> {
    let target = GaussianMixture::std_normal(2);
    let schedule = Schedule::new(32, 1.5)?;
    let cfg = PriorTrainConfig {
        method: "dsm".into(),
        iters: 1200,
        batch: 256,
        seed: 0,
        ..PriorTrainConfig::default()
    };

    let (model, log) = train_prior_dsm(&target, schedule, &cfg)?;
    let last = log.losses.last().copied().unwrap_or(f64::NAN);
    println!("final denoising loss: {last:.4}");

    let samples = model.sample_terminals(20000, 1)?;
    let n = samples.len() as f64;
    for j in 0..2 {
        let mean = samples.iter().map(|x| x[j]).sum::<f64>() / n;
        let var = samples.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
        println!("coord {j}: mean {mean:+.3} (expect 0), var {var:.3} (expect 1)");
    }
    Ok(())
}
