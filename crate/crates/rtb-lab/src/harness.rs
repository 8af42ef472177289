//! Orchestration and persistence: checkpoint JSON, provenance-stamped CSV
//! dumps, the six subcommands, and the eval/sample worker fan-out
//! (RTB_LAB_THREADS, per-worker seeds `seed ^ worker`, deterministic merge).

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{Guidance, GuidedSampler};
use crate::config::{ExperimentConfig, ScheduleConfig, FORMAT_VERSION};
use crate::diffusion::DriftModel;
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::metrics::{
    elbo_log_z_posterior, importance_weights, is_log_z_from_log_rs, mean_log_reward,
    rtb_residual_stats, Histogram2d,
};
use crate::numerics::{Activation, FeedForwardNet};
use crate::posterior::{train_posterior, LogZ, PosteriorModel, RewardSource, RtbConfig};
use crate::prior::{train_prior, PriorModel};
use crate::reward::Reward;
use crate::tasks::{analytic_posterior, TaskReward, TaskSpec};
use crate::util::{derive_seed, eval_threads};

pub fn build_id() -> String {
    format!("rtb-lab-{}", env!("CARGO_PKG_VERSION"))
}

// ---------------------------------------------------------------------------
// checkpoint formats

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetCheckpoint {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

impl NetCheckpoint {
    pub fn from_net(net: &FeedForwardNet) -> Self {
        NetCheckpoint {
            layer_widths: net.widths.clone(),
            activation: net.activation,
            params: net.flatten(),
        }
    }

    pub fn to_net(&self) -> Result<FeedForwardNet> {
        FeedForwardNet::from_flat(&self.layer_widths, self.activation, &self.params)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl TargetSpec {
    pub fn from_gmm(g: &GaussianMixture) -> Self {
        TargetSpec {
            weights: g.weights().to_vec(),
            means: g.means().to_vec(),
            variances: g.variances().to_vec(),
        }
    }

    pub fn build(&self) -> Result<GaussianMixture> {
        GaussianMixture::new(self.weights.clone(), self.means.clone(), self.variances.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorCheckpoint {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
    /// Hash of the (target, schedule) pair; posterior training refuses a
    /// prior trained under a different pair.
    pub compat_hash: String,
    pub seed: u64,
    pub build: String,
    pub schedule: ScheduleConfig,
    pub target: TargetSpec,
    pub objective: String,
    pub log_z: f64,
    pub drift: NetCheckpoint,
    pub checksum: u64,
}

impl PriorCheckpoint {
    pub fn from_model(
        model: &PriorModel,
        cfg: &ExperimentConfig,
        objective: &str,
        seed: u64,
    ) -> Result<Self> {
        Ok(PriorCheckpoint {
            format_version: FORMAT_VERSION,
            kind: "prior".into(),
            config_hash: cfg.hash()?,
            compat_hash: cfg.compat_hash()?,
            seed,
            build: build_id(),
            schedule: ScheduleConfig {
                steps: model.schedule.steps(),
                sigma: model.schedule.sigma(),
            },
            target: TargetSpec::from_gmm(&model.target),
            objective: objective.into(),
            log_z: model.log_z,
            drift: NetCheckpoint::from_net(&model.drift.net),
            checksum: model.drift.checksum(),
        })
    }

    pub fn to_model(&self) -> Result<PriorModel> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format version {} unsupported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let target = self.target.build()?;
        let net = self.drift.to_net()?;
        let drift = DriftModel { dim: target.dim(), cond_dim: 0, net, gate: None };
        if drift.checksum() != self.checksum {
            return Err(Error::OracleMismatch(
                "prior checkpoint checksum does not match its parameters".into(),
            ));
        }
        Ok(PriorModel {
            drift,
            log_z: self.log_z,
            schedule: self.schedule.build()?,
            target,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum LogZCheckpoint {
    Scalar(f64),
    Net(NetCheckpoint),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorCheckpoint {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub compat_hash: String,
    pub seed: u64,
    pub build: String,
    pub prior: PriorCheckpoint,
    pub drift: NetCheckpoint,
    pub cond_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<NetCheckpoint>,
    pub log_z: LogZCheckpoint,
    pub langevin: bool,
    pub rescale_intermediate: bool,
    pub task: TaskSpec,
    pub rtb: RtbConfig,
    pub checksum: u64,
}

impl PosteriorCheckpoint {
    pub fn from_model(
        model: &PosteriorModel,
        prior: &PriorCheckpoint,
        task: &TaskSpec,
        rtb: &RtbConfig,
        cfg: &ExperimentConfig,
        seed: u64,
    ) -> Result<Self> {
        Ok(PosteriorCheckpoint {
            format_version: FORMAT_VERSION,
            kind: "posterior".into(),
            config_hash: cfg.hash()?,
            compat_hash: cfg.compat_hash()?,
            seed,
            build: build_id(),
            prior: prior.clone(),
            drift: NetCheckpoint::from_net(&model.drift.net),
            cond_dim: model.drift.cond_dim,
            gate: model.drift.gate.as_ref().map(NetCheckpoint::from_net),
            log_z: match &model.log_z {
                LogZ::Scalar(v) => LogZCheckpoint::Scalar(*v),
                LogZ::Net(n) => LogZCheckpoint::Net(NetCheckpoint::from_net(n)),
            },
            langevin: model.drift.gate.is_some(),
            rescale_intermediate: model.rescale_intermediate,
            task: task.clone(),
            rtb: rtb.clone(),
            checksum: model.drift.checksum(),
        })
    }

    pub fn to_model(&self) -> Result<(PosteriorModel, PriorModel)> {
        let prior = self.prior.to_model()?;
        let net = self.drift.to_net()?;
        let gate = self.gate.as_ref().map(|g| g.to_net()).transpose()?;
        let drift = DriftModel { dim: prior.drift.dim, cond_dim: self.cond_dim, net, gate };
        if drift.checksum() != self.checksum {
            return Err(Error::OracleMismatch(
                "posterior checkpoint checksum does not match its parameters".into(),
            ));
        }
        let log_z = match &self.log_z {
            LogZCheckpoint::Scalar(v) => LogZ::Scalar(*v),
            LogZCheckpoint::Net(n) => LogZ::Net(n.to_net()?),
        };
        let model = PosteriorModel {
            drift,
            log_z,
            schedule: prior.schedule,
            prior_drift: prior.drift.clone(),
            prior_checksum: prior.drift.checksum(),
            rescale_intermediate: self.rescale_intermediate,
        };
        Ok((model, prior))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum AnyCheckpoint {
    Posterior(Box<PosteriorCheckpoint>),
    Prior(Box<PriorCheckpoint>),
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_prior_checkpoint(path: &Path) -> Result<PriorCheckpoint> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: PriorCheckpoint = serde_json::from_str(&text)?;
    if ckpt.kind != "prior" {
        return Err(Error::Config(format!("expected a prior checkpoint, found `{}`", ckpt.kind)));
    }
    Ok(ckpt)
}

pub fn read_posterior_checkpoint(path: &Path) -> Result<PosteriorCheckpoint> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: PosteriorCheckpoint = serde_json::from_str(&text)?;
    if ckpt.kind != "posterior" {
        return Err(Error::Config(format!(
            "expected a posterior checkpoint, found `{}`",
            ckpt.kind
        )));
    }
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// CSV output

#[derive(Debug, Clone)]
pub struct CsvMeta {
    pub config_hash: String,
    pub seed: u64,
}

/// Provenance header lines, then a column header, then rows. Floats use the
/// shortest round-trip decimal form.
pub fn write_csv(path: &Path, meta: &CsvMeta, header: &str, rows: &[String]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# format_version={FORMAT_VERSION}")?;
    writeln!(f, "# config_hash={}", meta.config_hash)?;
    writeln!(f, "# seed={}", meta.seed)?;
    writeln!(f, "# build={}", build_id())?;
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    f.flush()?;
    Ok(())
}

/// Data rows of a dumped CSV, metadata lines skipped.
pub fn read_csv_rows(path: &Path) -> Result<(String, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut header = String::new();
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if header.is_empty() {
            header = line.to_string();
        } else {
            rows.push(line.split(',').map(|s| s.to_string()).collect());
        }
    }
    if header.is_empty() {
        return Err(Error::Config(format!("no header in {}", path.display())));
    }
    Ok((header, rows))
}

fn sample_dump_header(dim: usize) -> String {
    let mut h = String::from("seed");
    for j in 0..dim {
        h.push_str(&format!(",x_{j}"));
    }
    h.push_str(",log_r");
    h
}

fn sample_dump_rows(samples: &[(u64, Vec<f64>)], log_r: impl Fn(&[f64]) -> f64) -> Vec<String> {
    samples
        .iter()
        .map(|(seed, x)| {
            let mut row = seed.to_string();
            for v in x {
                row.push_str(&format!(",{v}"));
            }
            row.push_str(&format!(",{}", log_r(x)));
            row
        })
        .collect()
}

/// Parse a sample dump back into points (x columns only).
pub fn read_sample_dump(path: &Path) -> Result<Vec<Vec<f64>>> {
    let (header, rows) = read_csv_rows(path)?;
    let cols: Vec<&str> = header.split(',').collect();
    let xs: Vec<usize> = cols
        .iter()
        .enumerate()
        .filter(|(_, c)| c.starts_with("x_"))
        .map(|(i, _)| i)
        .collect();
    if xs.is_empty() {
        return Err(Error::Config("sample dump has no x columns".into()));
    }
    rows.iter()
        .map(|r| {
            xs.iter()
                .map(|&i| {
                    r.get(i)
                        .ok_or_else(|| Error::Config("short row in sample dump".into()))?
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad float in sample dump: {e}")))
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// worker fan-out

/// Split `n` samples over up to RTB_LAB_THREADS workers; each worker `w`
/// runs `job(derive_seed(seed, w), count)` and results are concatenated in
/// worker order, so the merge is deterministic for a fixed thread count.
pub fn fan_out<T: Send>(
    n: usize,
    seed: u64,
    job: impl Fn(u64, usize) -> Result<Vec<T>> + Sync,
) -> Result<Vec<T>> {
    let workers = eval_threads().min(n.max(1));
    if workers <= 1 {
        return job(derive_seed(seed, 0), n);
    }
    let base = n / workers;
    let rem = n % workers;
    let counts: Vec<usize> = (0..workers).map(|w| base + usize::from(w < rem)).collect();
    let results: Vec<Result<Vec<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = counts
            .iter()
            .enumerate()
            .map(|(w, &count)| {
                let job = &job;
                scope.spawn(move || job(derive_seed(seed, w as u64), count))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// subcommands

fn check_compat(cfg: &ExperimentConfig, ckpt_compat: &str, what: &str) -> Result<()> {
    let expect = cfg.compat_hash()?;
    if ckpt_compat != expect {
        return Err(Error::Config(format!(
            "{what} was trained under target/schedule hash {ckpt_compat} but the config \
             hashes to {expect}; refusing to mix incompatible settings"
        )));
    }
    Ok(())
}

pub fn cmd_train_prior(
    cfg: &ExperimentConfig,
    seed_override: Option<u64>,
    out: &Path,
) -> Result<()> {
    let target = cfg.target.build()?;
    let schedule = cfg.schedule.build()?;
    let mut pcfg = cfg.prior.clone();
    if let Some(s) = seed_override {
        pcfg.seed = s;
    }
    let (model, log) = train_prior(&target, schedule, &pcfg)?;
    let ckpt = PriorCheckpoint::from_model(&model, cfg, &pcfg.method, pcfg.seed)?;
    write_json(out, &ckpt)?;

    let meta = CsvMeta { config_hash: cfg.hash()?, seed: pcfg.seed };
    let rows: Vec<String> = log
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i},{l}"))
        .collect();
    write_csv(&out.with_extension("loss.csv"), &meta, "iter,loss", &rows)?;
    Ok(())
}

pub fn cmd_train_posterior(
    cfg: &ExperimentConfig,
    prior_path: &Path,
    seed_override: Option<u64>,
    out: &Path,
) -> Result<()> {
    let prior_ckpt = read_prior_checkpoint(prior_path)?;
    check_compat(cfg, &prior_ckpt.compat_hash, "prior checkpoint")?;
    let prior = prior_ckpt.to_model()?;
    let task_cfg = cfg
        .task
        .as_ref()
        .ok_or_else(|| Error::Config("posterior training needs a [task] section".into()))?;
    let mut rcfg = cfg.rtb.clone();
    if let Some(s) = seed_override {
        rcfg.seed = s;
    }

    let (model, log, task_spec) = if rcfg.conditional {
        let cond = task_cfg.conditional(&prior.target)?;
        let ys: Vec<Vec<f64>> = cond.train.iter().map(|(_, y)| y.clone()).collect();
        let source = RewardSource::Conditional { family: &cond.family, ys: &ys };
        let (model, log) = train_posterior(&prior, &source, &rcfg)?;
        let spec = TaskSpec::from_family(&cond.family, ys[0].clone(), task_cfg.seed);
        (model, log, spec)
    } else {
        let spec = task_cfg.resolve(&prior.target)?;
        let reward = spec.reward()?;
        let (model, log) = train_posterior(&prior, &RewardSource::Single(&reward), &rcfg)?;
        (model, log, spec)
    };

    let ckpt = PosteriorCheckpoint::from_model(&model, &prior_ckpt, &task_spec, &rcfg, cfg, rcfg.seed)?;
    write_json(out, &ckpt)?;

    let meta = CsvMeta { config_hash: cfg.hash()?, seed: rcfg.seed };
    let rows: Vec<String> = log
        .losses
        .iter()
        .zip(&log.logz_track)
        .enumerate()
        .map(|(i, (l, z))| format!("{i},{l},{z}"))
        .collect();
    write_csv(&out.with_extension("loss.csv"), &meta, "iter,loss,log_z", &rows)?;
    Ok(())
}

/// Terminal samples via the worker fan-out; rows carry the worker seed.
fn fan_out_terminals(
    n: usize,
    seed: u64,
    sample: impl Fn(u64, usize) -> Result<Vec<Vec<f64>>> + Sync,
) -> Result<Vec<(u64, Vec<f64>)>> {
    fan_out(n, seed, |wseed, count| {
        let xs = sample(wseed, count)?;
        Ok(xs.into_iter().map(|x| (wseed, x)).collect())
    })
}

pub fn cmd_baseline(
    cfg: &ExperimentConfig,
    prior_path: &Path,
    algo: &str,
    out: &Path,
) -> Result<()> {
    let prior_ckpt = read_prior_checkpoint(prior_path)?;
    check_compat(cfg, &prior_ckpt.compat_hash, "prior checkpoint")?;
    let prior = prior_ckpt.to_model()?;
    let task_cfg = cfg
        .task
        .as_ref()
        .ok_or_else(|| Error::Config("baseline sampling needs a [task] section".into()))?;
    let spec = task_cfg.resolve(&prior.target)?;
    let reward = spec.reward()?;

    let guidance = match algo {
        "dps" => Guidance::Dps { reward: &reward, zeta: cfg.baseline.zeta },
        "cla" => Guidance::Cla { reward: &reward },
        other => return Err(Error::Config(format!("unknown baseline `{other}` (use dps or cla)"))),
    };
    let sampler = GuidedSampler::new(&prior, guidance)?;
    let samples = fan_out_terminals(cfg.eval.n_samples, cfg.eval.seed, |wseed, count| {
        sampler.sample_terminals(count, wseed)
    })?;

    let meta = CsvMeta { config_hash: cfg.hash()?, seed: cfg.eval.seed };
    let rows = sample_dump_rows(&samples, |x| reward.log_r(x));
    write_csv(out, &meta, &sample_dump_header(prior.drift.dim), &rows)?;
    Ok(())
}

pub fn cmd_sample(checkpoint: &Path, n: usize, seed: u64, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(checkpoint)?;
    let any: AnyCheckpoint = serde_json::from_str(&text)?;
    match any {
        AnyCheckpoint::Prior(ckpt) => {
            let model = ckpt.to_model()?;
            let samples = fan_out_terminals(n, seed, |wseed, count| {
                model.sample_terminals(count, wseed)
            })?;
            let meta = CsvMeta { config_hash: ckpt.config_hash.clone(), seed };
            // for a prior the natural "reward" is the target log-density
            let rows = sample_dump_rows(&samples, |x| model.target.log_density(x));
            write_csv(out, &meta, &sample_dump_header(model.drift.dim), &rows)
        }
        AnyCheckpoint::Posterior(ckpt) => {
            let (model, _prior) = ckpt.to_model()?;
            let reward = ckpt.task.reward()?;
            let cond: Option<Vec<f64>> = if model.drift.cond_dim > 0 {
                Some(ckpt.task.y.clone())
            } else {
                None
            };
            let samples = fan_out_terminals(n, seed, |wseed, count| {
                model.sample_terminals(
                    if model.drift.gate.is_some() { Some(&reward) } else { None },
                    cond.as_deref(),
                    count,
                    wseed,
                )
            })?;
            let meta = CsvMeta { config_hash: ckpt.config_hash.clone(), seed };
            let rows = sample_dump_rows(&samples, |x| reward.log_r(x));
            write_csv(out, &meta, &sample_dump_header(model.drift.dim), &rows)
        }
    }
}

struct MetricRow {
    task: String,
    algorithm: String,
    seed: u64,
    metric: String,
    value: f64,
    stderr: f64,
}

impl MetricRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.task, self.algorithm, self.seed, self.metric, self.value, self.stderr
        )
    }
}

const METRICS_HEADER: &str = "task,algorithm,seed,metric,value,stderr";

/// IS log Z over the prior with the worker fan-out, reward values merged in
/// worker order and summed through sorted log-sum-exp (see is_log_z).
fn parallel_is_log_z(
    prior: &PriorModel,
    reward: &dyn Reward,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let log_rs: Vec<f64> = fan_out(n, seed, |wseed, count| {
        let xs = prior.sample_terminals(count, wseed)?;
        Ok(xs.iter().map(|x| reward.log_r(x)).collect())
    })?;
    is_log_z_from_log_rs(&log_rs, seed ^ 0xb007)
}

/// Histogram of the model posterior against the reference: IS-weighted
/// prior samples, or the exact analytic posterior for 2-d linear-Gaussian
/// tasks.
fn posterior_tv_to_oracle(
    prior: &PriorModel,
    reward: &TaskReward,
    samples: &[Vec<f64>],
    cfg: &ExperimentConfig,
) -> Result<f64> {
    let e = &cfg.eval;
    let model_h =
        Histogram2d::from_samples(samples, None, (0, 1), e.grid_bins, e.grid_lo, e.grid_hi)?;
    if prior.target.dim() == 2 && reward.linear().is_some() {
        let (post, _) = analytic_posterior(&prior.target, reward)?;
        let oracle = Histogram2d::from_log_density(
            |x, y| post.log_density(&[x, y]),
            e.grid_bins,
            e.grid_lo,
            e.grid_hi,
        )?;
        return model_h.tv(&oracle);
    }
    // reference: reweighted prior samples
    let prior_samples: Vec<Vec<f64>> = fan_out(e.n_samples, e.seed ^ 0x15, |wseed, count| {
        prior.sample_terminals(count, wseed)
    })?;
    let log_rs: Vec<f64> = prior_samples.iter().map(|x| reward.log_r(x)).collect();
    let weights = importance_weights(&log_rs)?;
    let oracle = Histogram2d::from_samples(
        &prior_samples,
        Some(&weights),
        (0, 1),
        e.grid_bins,
        e.grid_lo,
        e.grid_hi,
    )?;
    model_h.tv(&oracle)
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
    grid_out: Option<&Path>,
) -> Result<()> {
    let text = std::fs::read_to_string(checkpoint)?;
    let any: AnyCheckpoint = serde_json::from_str(&text)?;
    let e = &cfg.eval;
    let meta = CsvMeta { config_hash: cfg.hash()?, seed: e.seed };
    let mut rows: Vec<MetricRow> = Vec::new();

    let samples = match &any {
        AnyCheckpoint::Prior(ckpt) => {
            check_compat(cfg, &ckpt.compat_hash, "prior checkpoint")?;
            let model = ckpt.to_model()?;
            let samples: Vec<Vec<f64>> = fan_out(e.n_samples, e.seed, |wseed, count| {
                model.sample_terminals(count, wseed)
            })?;
            let task = "prior".to_string();
            let algorithm = format!("prior-{}", ckpt.objective);
            let push = |rows: &mut Vec<MetricRow>, metric: &str, value: f64, stderr: f64| {
                rows.push(MetricRow {
                    task: task.clone(),
                    algorithm: algorithm.clone(),
                    seed: e.seed,
                    metric: metric.into(),
                    value,
                    stderr,
                });
            };
            let vals: Vec<f64> = samples.iter().map(|x| model.target.log_density(x)).collect();
            let (m, se) = crate::util::mean_stderr(&vals);
            push(&mut rows, "mean_target_log_density", m, se);
            push(&mut rows, "log_z_model", model.log_z, 0.0);
            if model.target.dim() == 2 {
                let h = Histogram2d::from_samples(
                    &samples, None, (0, 1), e.grid_bins, e.grid_lo, e.grid_hi,
                )?;
                let oracle = Histogram2d::from_log_density(
                    |x, y| model.target.log_density(&[x, y]),
                    e.grid_bins,
                    e.grid_lo,
                    e.grid_hi,
                )?;
                push(&mut rows, "tv_to_oracle", h.tv(&oracle)?, 0.0);
                push(&mut rows, "clipped_fraction", h.clipped_fraction, 0.0);
            }
            samples
        }
        AnyCheckpoint::Posterior(ckpt) => {
            check_compat(cfg, &ckpt.compat_hash, "posterior checkpoint")?;
            let (model, prior) = ckpt.to_model()?;
            let reward = ckpt.task.reward()?;
            let cond: Option<Vec<f64>> =
                if model.drift.cond_dim > 0 { Some(ckpt.task.y.clone()) } else { None };
            let cond_slice = cond.as_deref();
            let reward_opt: Option<&dyn Reward> =
                if model.drift.gate.is_some() { Some(&reward) } else { None };
            let samples: Vec<Vec<f64>> = fan_out(e.n_samples, e.seed, |wseed, count| {
                model.sample_terminals(reward_opt, cond_slice, count, wseed)
            })?;
            let task = format!("{:?}", ckpt.task.kind).to_lowercase();
            let push = |rows: &mut Vec<MetricRow>, metric: &str, value: f64, stderr: f64| {
                rows.push(MetricRow {
                    task: task.clone(),
                    algorithm: "rtb".into(),
                    seed: e.seed,
                    metric: metric.into(),
                    value,
                    stderr,
                });
            };
            let (m, se) = mean_log_reward(&samples, &reward);
            push(&mut rows, "mean_log_reward", m, se);
            push(&mut rows, "log_z_model", model.log_z.value(cond_slice)?, 0.0);
            let (isz, is_se) = parallel_is_log_z(&prior, &reward, e.is_samples, e.seed ^ 0x2a)?;
            push(&mut rows, "is_log_z", isz, is_se);
            let (elbo, elbo_se) =
                elbo_log_z_posterior(&model, &reward, cond_slice, e.elbo_samples, e.seed ^ 0x3b)?;
            push(&mut rows, "elbo_log_z", elbo, elbo_se);
            let (rm, rs) =
                rtb_residual_stats(&model, &reward, cond_slice, e.elbo_samples, e.seed ^ 0x4c)?;
            push(&mut rows, "residual_mean", rm, 0.0);
            push(&mut rows, "residual_std", rs, 0.0);
            if model.drift.dim >= 2 {
                let tv = posterior_tv_to_oracle(&prior, &reward, &samples, cfg)?;
                push(&mut rows, "tv_to_oracle", tv, 0.0);
            }
            samples
        }
    };

    let csv_rows: Vec<String> = rows.iter().map(|r| r.to_csv()).collect();
    write_csv(out, &meta, METRICS_HEADER, &csv_rows)?;

    if let Some(grid_path) = grid_out {
        if samples[0].len() >= 2 {
            let h = Histogram2d::from_samples(
                &samples, None, (0, 1), e.grid_bins, e.grid_lo, e.grid_hi,
            )?;
            let mut grid_rows = Vec::with_capacity(e.grid_bins * e.grid_bins);
            for i in 0..e.grid_bins {
                for j in 0..e.grid_bins {
                    grid_rows.push(format!("{i},{j},{}", h.mass[i * e.grid_bins + j]));
                }
            }
            write_csv(grid_path, &meta, "bin_x,bin_y,density", &grid_rows)?;
        }
    }
    Ok(())
}

/// Consolidate metric CSVs found under `runs` into one table with the
/// headline columns (mean log reward, log Z bound, TV to oracle).
pub fn cmd_compare(runs: &Path, out: &Path) -> Result<()> {
    let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(runs)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map_or(false, |x| x == "csv"))
        .collect();
    files.sort();
    let mut rows: Vec<String> = Vec::new();
    let mut config_hash = String::from("mixed");
    let mut first = true;
    for path in &files {
        let (header, data) = match read_csv_rows(path) {
            Ok(x) => x,
            Err(_) => continue,
        };
        if header != METRICS_HEADER {
            continue;
        }
        if first {
            if let Some(h) = extract_meta(path, "config_hash")? {
                config_hash = h;
            }
            first = false;
        }
        for r in data {
            if r.len() == 6
                && matches!(
                    r[3].as_str(),
                    "mean_log_reward" | "elbo_log_z" | "is_log_z" | "log_z_model" | "tv_to_oracle"
                )
            {
                rows.push(r.join(","));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "no metric CSVs found under {}",
            runs.display()
        )));
    }
    rows.sort();
    let meta = CsvMeta { config_hash, seed: 0 };
    write_csv(out, &meta, METRICS_HEADER, &rows)?;
    Ok(())
}

fn extract_meta(path: &Path, key: &str) -> Result<Option<String>> {
    let text = std::fs::read_to_string(path)?;
    let prefix = format!("# {key}=");
    Ok(text
        .lines()
        .find(|l| l.starts_with(&prefix))
        .map(|l| l[prefix.len()..].to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Schedule;
    use crate::prior::{train_prior_tb, PriorTrainConfig};
    use tempfile::tempdir;

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig::from_str_toml(
            r#"
            [target]
            kind = "std_normal"
            dim = 1

            [schedule]
            steps = 4
            sigma = 1.0

            [prior]
            hidden = [8]
            iters = 3
            batch = 8

            [task]
            kind = "mask"
            mask_keep = [0]
            sigma_y = 0.5
            seed = 1

            [rtb]
            iters = 3
            batch = 8

            [eval]
            n_samples = 64
            is_samples = 256
            elbo_samples = 32
            grid_bins = 8
            "#,
        )
        .unwrap()
    }

    #[test]
    fn prior_checkpoint_roundtrips_bit_exactly() {
        let cfg = tiny_cfg();
        let target = cfg.target.build().unwrap();
        let schedule = Schedule::new(4, 1.0).unwrap();
        let pcfg = PriorTrainConfig {
            hidden: vec![8],
            iters: 2,
            batch: 8,
            ..PriorTrainConfig::default()
        };
        let (model, _) = train_prior_tb(&target, schedule, &pcfg).unwrap();
        let ckpt = PriorCheckpoint::from_model(&model, &cfg, "tb", 0).unwrap();

        let dir = tempdir().unwrap();
        let path = dir.path().join("prior.json");
        write_json(&path, &ckpt).unwrap();
        let back = read_prior_checkpoint(&path).unwrap();
        let restored = back.to_model().unwrap();
        assert_eq!(restored.drift.flatten(), model.drift.flatten());
        assert_eq!(restored.log_z, model.log_z);
    }

    #[test]
    fn tampered_checkpoint_params_are_refused() {
        let cfg = tiny_cfg();
        let target = cfg.target.build().unwrap();
        let schedule = Schedule::new(4, 1.0).unwrap();
        let pcfg = PriorTrainConfig {
            hidden: vec![8],
            iters: 1,
            batch: 8,
            ..PriorTrainConfig::default()
        };
        let (model, _) = train_prior_tb(&target, schedule, &pcfg).unwrap();
        let mut ckpt = PriorCheckpoint::from_model(&model, &cfg, "tb", 0).unwrap();
        ckpt.drift.params[0] += 1.0;
        assert!(matches!(ckpt.to_model(), Err(Error::OracleMismatch(_))));
    }

    #[test]
    fn pipeline_train_sample_eval_deterministic() {
        let cfg = tiny_cfg();
        let dir = tempdir().unwrap();
        let prior_path = dir.path().join("prior.json");
        cmd_train_prior(&cfg, None, &prior_path).unwrap();

        let post_path = dir.path().join("post.json");
        cmd_train_posterior(&cfg, &prior_path, None, &post_path).unwrap();

        let s1 = dir.path().join("s1.csv");
        let s2 = dir.path().join("s2.csv");
        cmd_sample(&post_path, 32, 7, &s1).unwrap();
        cmd_sample(&post_path, 32, 7, &s2).unwrap();
        assert_eq!(std::fs::read(&s1).unwrap(), std::fs::read(&s2).unwrap());

        let m1 = dir.path().join("m1.csv");
        cmd_eval(&cfg, &post_path, &m1, None).unwrap();
        let (header, rows) = read_csv_rows(&m1).unwrap();
        assert_eq!(header, METRICS_HEADER);
        assert!(rows.iter().any(|r| r[3] == "mean_log_reward"));

        // compare consumes the metrics directory
        let cmp = dir.path().join("cmp.csv");
        cmd_compare(dir.path(), &cmp).unwrap();
        let (_, cmp_rows) = read_csv_rows(&cmp).unwrap();
        assert!(!cmp_rows.is_empty());
    }

    #[test]
    fn hash_mismatch_is_refused() {
        let cfg = tiny_cfg();
        let dir = tempdir().unwrap();
        let prior_path = dir.path().join("prior.json");
        cmd_train_prior(&cfg, None, &prior_path).unwrap();
        let mut other = tiny_cfg();
        other.schedule.steps = 8;
        let err = cmd_train_posterior(&other, &prior_path, None, &dir.path().join("p.json"))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("refusing"));
    }

    #[test]
    fn sample_dump_recomputes_log_r() {
        let cfg = tiny_cfg();
        let dir = tempdir().unwrap();
        let prior_path = dir.path().join("prior.json");
        cmd_train_prior(&cfg, None, &prior_path).unwrap();
        let dump = dir.path().join("samples.csv");
        cmd_sample(&prior_path, 16, 3, &dump).unwrap();

        let ckpt = read_prior_checkpoint(&prior_path).unwrap();
        let model = ckpt.to_model().unwrap();
        let (header, rows) = read_csv_rows(&dump).unwrap();
        assert_eq!(header, "seed,x_0,log_r");
        for r in rows {
            let x: f64 = r[1].parse().unwrap();
            let lr: f64 = r[2].parse().unwrap();
            assert!((model.target.log_density(&[x]) - lr).abs() < 1e-12);
        }
    }

    #[test]
    fn fan_out_merge_is_worker_ordered() {
        let out = fan_out(10, 5, |wseed, count| Ok(vec![wseed; count])).unwrap();
        assert_eq!(out.len(), 10);
        // single-thread default: every item from worker 0's derived seed
        assert!(out.iter().all(|&s| s == derive_seed(5, 0)));
    }
}
