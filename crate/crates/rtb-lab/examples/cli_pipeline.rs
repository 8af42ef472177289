//! Drive the full file-based pipeline through the library entry points the
//! CLI binary wraps: write a config, train a prior and posterior, run a
//! baseline, sample, evaluate, and consolidate the metric tables.

use std::path::Path;

use rtb_lab::config::ExperimentConfig;
use rtb_lab::harness;

const CONFIG: &str = r#"
[target]
kind = "two_mode"

[schedule]
steps = 24
sigma = 1.5

[prior]
iters = 800
batch = 128

[task]
kind = "mask"
mask_keep = [0]
sigma_y = 0.5
y = [2.0]
seed = 1

[rtb]
iters = 600
batch = 64

[eval]
n_samples = 5000
is_samples = 50000
elbo_samples = 1000
"#;

fn main() -> rtb_lab::Result<()> {
    let dir = std::env::temp_dir().join("rtb-lab-pipeline");
    std::fs::create_dir_all(&dir)?;
    let cfg = ExperimentConfig::from_str_toml(CONFIG)?;
    println!("config hash: {}", cfg.hash()?);

    let prior = dir.join("prior.json");
    harness::cmd_train_prior(&cfg, None, &prior)?;
    println!("prior checkpoint: {}", prior.display());

    let post = dir.join("posterior.json");
    harness::cmd_train_posterior(&cfg, &prior, None, &post)?;
    println!("posterior checkpoint: {}", post.display());

    harness::cmd_baseline(&cfg, &prior, "dps", &dir.join("dps_samples.csv"))?;
    harness::cmd_sample(&post, 5000, 7, &dir.join("rtb_samples.csv"))?;

    let metrics_dir = dir.join("runs");
    std::fs::create_dir_all(&metrics_dir)?;
    harness::cmd_eval(&cfg, &post, &metrics_dir.join("rtb.csv"), Some(&dir.join("grid.csv")))?;
    harness::cmd_compare(&metrics_dir, &dir.join("compare.csv"))?;

    print_file(&dir.join("compare.csv"));
    Ok(())
}

fn print_file(path: &Path) {
    println!("--- {}", path.display());
    print!("{}", std::fs::read_to_string(path).unwrap());
}
