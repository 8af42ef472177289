//! The conjugate oracle: for linear-Gaussian measurements over a Gaussian
//! mixture the posterior is again a mixture in closed form. Validate the
//! closed form against brute-force grid integration.

use rtb_lab::gmm::GaussianMixture;
use rtb_lab::tasks::{analytic_posterior, grid_log_z_2d, TaskFamily};

fn main() -> rtb_lab::Result<()> {
    let target = GaussianMixture::grid9_2d();
    let family = TaskFamily::mask(2, &[0], 0.4)?;
    let reward = family.reward_with(vec![1.5])?;

    let (post, log_z) = analytic_posterior(&target, &reward)?;
    println!("closed-form log Z: {log_z:.6}");

    let grid = grid_log_z_2d(&target, &reward, -8.0, 8.0, 400)?;
    println!("grid-integrated log Z (400x400 midpoint): {grid:.6}");
    println!("difference: {:.2e}", (log_z - grid).abs());

    println!("posterior component weights (prior was uniform over 9 modes):");
    for (i, w) in post.weights.iter().enumerate() {
        if *w > 1e-4 {
            println!("  mode {i}: weight {w:.4}, mean {:?}", post.means[i].as_slice());
        }
    }
    Ok(())
}
