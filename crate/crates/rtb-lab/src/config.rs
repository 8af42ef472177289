//! Experiment configuration: one TOML file describing the target density,
//! the time discretization, training, task, baseline and evaluation
//! settings. Unknown keys are rejected. The config hash (FNV-1a over the
//! canonical serialization) is embedded in every output for provenance.

use serde::{Deserialize, Serialize};

use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::posterior::RtbConfig;
use crate::prior::PriorTrainConfig;
use crate::tasks::{ConditionalTask, TaskFamily, TaskKind, TaskSpec};
use crate::util::fnv1a64_hex;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    /// "std_normal", "two_mode", "grid9", or "custom" with explicit mixture
    /// parameters.
    pub kind: String,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variances: Option<Vec<Vec<f64>>>,
}

impl TargetConfig {
    pub fn build(&self) -> Result<GaussianMixture> {
        match self.kind.as_str() {
            "std_normal" => {
                let d = self
                    .dim
                    .ok_or_else(|| Error::Config("std_normal target needs dim".into()))?;
                Ok(GaussianMixture::std_normal(d))
            }
            "two_mode" => Ok(GaussianMixture::two_mode_2d()),
            "grid9" => Ok(GaussianMixture::grid9_2d()),
            "custom" => {
                let (w, m, v) = match (&self.weights, &self.means, &self.variances) {
                    (Some(w), Some(m), Some(v)) => (w.clone(), m.clone(), v.clone()),
                    _ => {
                        return Err(Error::Config(
                            "custom target needs weights, means and variances".into(),
                        ))
                    }
                };
                GaussianMixture::normalized(w, m, v)
            }
            other => Err(Error::Config(format!("unknown target kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub sigma: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::new(self.steps, self.sigma)
    }
}

/// Task description: an external spec file wins; otherwise the operator is
/// built here and the measurement either given explicitly or simulated.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_file: Option<String>,
    #[serde(default)]
    pub kind: Option<TaskKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_keep: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<Vec<f64>>,
    #[serde(default)]
    pub sigma_y: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_star: Option<Vec<f64>>,
    /// Measurement counts for amortized training.
    #[serde(default)]
    pub n_train: Option<usize>,
    #[serde(default)]
    pub n_heldout: Option<usize>,
}

impl TaskConfig {
    pub fn family(&self, dim: usize) -> Result<TaskFamily> {
        if let Some(path) = &self.spec_file {
            let text = std::fs::read_to_string(path)?;
            let spec: TaskSpec = serde_json::from_str(&text)?;
            return spec.family();
        }
        let kind = self
            .kind
            .ok_or_else(|| Error::Config("task needs a kind or spec_file".into()))?;
        let sigma_y = self
            .sigma_y
            .ok_or_else(|| Error::Config("task needs sigma_y".into()))?;
        match kind {
            TaskKind::Mask => {
                let keep = self
                    .mask_keep
                    .clone()
                    .unwrap_or_else(|| (0..dim / 2).collect());
                TaskFamily::mask(dim, &keep, sigma_y)
            }
            TaskKind::Dense => {
                let m = self.m.unwrap_or(dim / 2);
                TaskFamily::dense_random(dim, m, sigma_y, self.seed)
            }
            TaskKind::Phase => TaskFamily::phase(dim, sigma_y),
            TaskKind::Blur => {
                let band = self
                    .band
                    .clone()
                    .unwrap_or_else(|| vec![0.25, 0.5, 0.25]);
                TaskFamily::blur(dim, &band, sigma_y)
            }
        }
    }

    /// Full task spec (operator plus measurement). The measurement comes
    /// from, in order of preference: the spec file, an explicit `y`, or a
    /// simulation from `x_star` (or a target draw when absent).
    pub fn resolve(&self, target: &GaussianMixture) -> Result<TaskSpec> {
        if let Some(path) = &self.spec_file {
            let text = std::fs::read_to_string(path)?;
            let spec: TaskSpec = serde_json::from_str(&text)?;
            spec.family()?; // validate
            return Ok(spec);
        }
        let family = self.family(target.dim())?;
        let y = match &self.y {
            Some(y) => y.clone(),
            None => {
                let x_star = match &self.x_star {
                    Some(x) => x.clone(),
                    None => {
                        use rand::SeedableRng;
                        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
                        target.sample(&mut rng)
                    }
                };
                if x_star.len() != family.dim() {
                    return Err(Error::Config("x_star dimension mismatch".into()));
                }
                family.simulate_measurement(&x_star, self.seed ^ 0x9e37)
            }
        };
        Ok(TaskSpec::from_family(&family, y, self.seed))
    }

    pub fn conditional(&self, target: &GaussianMixture) -> Result<ConditionalTask> {
        let family = self.family(target.dim())?;
        let n_train = self
            .n_train
            .ok_or_else(|| Error::Config("conditional task needs n_train".into()))?;
        let n_heldout = self.n_heldout.unwrap_or(0);
        ConditionalTask::generate(family, target, n_train, n_heldout, self.seed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// "dps" or "cla".
    pub method: String,
    pub zeta: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { method: "dps".into(), zeta: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub is_samples: usize,
    pub elbo_samples: usize,
    pub grid_bins: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 50_000,
            is_samples: 1_000_000,
            elbo_samples: 2_000,
            grid_bins: 64,
            grid_lo: -6.0,
            grid_hi: 6.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out_dir: String,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig { out_dir: "out".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub prior: PriorTrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskConfig>,
    #[serde(default)]
    pub rtb: RtbConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub io: IoConfig,
}

impl ExperimentConfig {
    pub fn from_str_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_toml(&text)
    }

    /// Canonical serialization used for hashing; field order is fixed by
    /// the struct definitions, so equal configs hash equally.
    pub fn canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(fnv1a64_hex(self.canonical()?.as_bytes()))
    }

    /// Hash of the (target, schedule) pair only; checkpoints trained under
    /// a different pair are refused at load time.
    pub fn compat_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Compat<'a> {
            target: &'a TargetConfig,
            schedule: &'a ScheduleConfig,
        }
        let text = toml::to_string(&Compat { target: &self.target, schedule: &self.schedule })
            .map_err(|e| Error::Serde(e.to_string()))?;
        Ok(fnv1a64_hex(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [target]
        kind = "two_mode"

        [schedule]
        steps = 32
        sigma = 2.0
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_str_toml(MINIMAL).unwrap();
        assert_eq!(cfg.target.build().unwrap().dim(), 2);
        assert_eq!(cfg.schedule.build().unwrap().steps(), 32);
        assert_eq!(cfg.prior.batch, PriorTrainConfig::default().batch);
        assert_eq!(cfg.eval.grid_bins, 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = format!("{MINIMAL}\n[prior]\nnot_a_key = 3\n");
        assert!(ExperimentConfig::from_str_toml(&bad).is_err());
        let bad_top = format!("{MINIMAL}\n[zzz]\nx = 1\n");
        assert!(ExperimentConfig::from_str_toml(&bad_top).is_err());
    }

    #[test]
    fn hash_is_stable_and_distinguishes_configs() {
        let a = ExperimentConfig::from_str_toml(MINIMAL).unwrap();
        let b = ExperimentConfig::from_str_toml(MINIMAL).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let mut c = ExperimentConfig::from_str_toml(MINIMAL).unwrap();
        c.schedule.steps = 64;
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
        // compat hash ignores training settings
        let mut d = ExperimentConfig::from_str_toml(MINIMAL).unwrap();
        d.prior.iters = 1;
        assert_eq!(a.compat_hash().unwrap(), d.compat_hash().unwrap());
        assert_ne!(a.compat_hash().unwrap(), c.compat_hash().unwrap());
    }

    #[test]
    fn task_resolution_simulates_measurement() {
        let text = format!(
            "{MINIMAL}\n[task]\nkind = \"mask\"\nmask_keep = [0]\nsigma_y = 0.1\nseed = 7\n"
        );
        let cfg = ExperimentConfig::from_str_toml(&text).unwrap();
        let target = cfg.target.build().unwrap();
        let spec = cfg.task.as_ref().unwrap().resolve(&target).unwrap();
        assert_eq!(spec.m, 1);
        assert_eq!(spec.y.len(), 1);
        // deterministic
        let spec2 = cfg.task.as_ref().unwrap().resolve(&target).unwrap();
        assert_eq!(spec, spec2);
    }

    #[test]
    fn custom_target_roundtrip() {
        let text = r#"
            [target]
            kind = "custom"
            weights = [0.5, 0.5]
            means = [[1.0], [-1.0]]
            variances = [[0.2], [0.2]]

            [schedule]
            steps = 8
            sigma = 1.0
        "#;
        let cfg = ExperimentConfig::from_str_toml(text).unwrap();
        let g = cfg.target.build().unwrap();
        assert_eq!(g.dim(), 1);
        assert_eq!(g.num_components(), 2);
    }
}
