use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::growth::DEFAULT_SCALING_FACTOR;
use crate::hessian::SpectrumOptions;
use crate::model::{ModelConfig, Role};
use crate::scheduler::{default_parameter_budget, event_epochs, ParamTarget, ScheduleConfig, Selection};

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub lr_schedule: LrScheduleConfig,
    pub dataset: DatasetConfig,
}

fn default_run_id() -> String {
    "run".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    /// Peak learning rate; defaults to `5e-4 · batch_size / 512`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_weight_decay() -> f64 {
    0.05
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            lr: None,
            weight_decay: default_weight_decay(),
            betas: default_betas(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn peak_lr(&self, batch_size: usize) -> f64 {
        self.lr.unwrap_or(5e-4 * batch_size as f64 / 512.0)
    }
}

/// Linear warmup followed by cosine decay, stepped per iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrScheduleConfig {
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "default_min_lr")]
    pub min_lr: f64,
}

fn default_warmup_epochs() -> usize {
    5
}

fn default_min_lr() -> f64 {
    1e-6
}

impl Default for LrScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: default_warmup_epochs(),
            min_lr: default_min_lr(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Procedural class-blob images.
    Synthetic,
    /// MNIST-style IDX files.
    Idx,
    /// CIFAR-10 binary batches.
    Cifar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Synthetic only: training images.
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    /// Synthetic only: evaluation images.
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    /// Synthetic only: generator seed; the run seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Random horizontal flips on training batches.
    #[serde(default)]
    pub hflip: bool,
}

fn default_train_size() -> usize {
    1024
}

fn default_eval_size() -> usize {
    512
}

impl DatasetConfig {
    pub fn synthetic(seed: Option<u64>) -> Self {
        Self {
            name: DatasetKind::Synthetic,
            path: None,
            train_size: default_train_size(),
            eval_size: default_eval_size(),
            seed,
            hflip: false,
        }
    }

    /// Parses `synthetic[:seed]`, `idx:DIR` or `cifar:DIR`.
    pub fn parse_shorthand(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').map_or((s, None), |(k, r)| (k, Some(r)));
        match (kind, rest) {
            ("synthetic", None) => Ok(Self::synthetic(None)),
            ("synthetic", Some(seed)) => seed
                .parse()
                .map(|s| Self::synthetic(Some(s)))
                .map_err(|_| Error::Config(format!("bad synthetic seed `{seed}`"))),
            ("idx" | "cifar", Some(dir)) if !dir.is_empty() => Ok(Self {
                name: if kind == "idx" { DatasetKind::Idx } else { DatasetKind::Cifar },
                path: Some(PathBuf::from(dir)),
                ..Self::synthetic(None)
            }),
            _ => Err(Error::Config(format!(
                "dataset `{s}` is not one of synthetic[:SEED], idx:DIR, cifar:DIR"
            ))),
        }
    }
}

/// Total-parameter target, absolute or relative to the base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_tolerance: Option<f64>,
}

impl TargetSpec {
    pub fn resolve(&self, base_params: usize) -> Result<ParamTarget> {
        let params = match (self.params, self.ratio) {
            (Some(p), None) => p,
            (None, Some(r)) if r > 0.0 && r.is_finite() => (base_params as f64 * r).round() as usize,
            _ => {
                return Err(Error::Config(
                    "schedule.target needs exactly one of `params` or a positive `ratio`".into(),
                ))
            }
        };
        let tolerance = match (self.tolerance, self.relative_tolerance) {
            (Some(t), None) => t,
            (None, Some(r)) if r >= 0.0 && r.is_finite() => (params as f64 * r).floor() as usize,
            (None, None) => 0,
            _ => {
                return Err(Error::Config(
                    "schedule.target takes at most one of `tolerance` or a non-negative `relative_tolerance`".into(),
                ))
            }
        };
        Ok(ParamTarget { params, tolerance })
    }
}

/// Growth schedule as written in a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    /// `false` trains the base model without growth.
    #[serde(default = "yes")]
    pub enabled: bool,
    pub initial_warmup: usize,
    pub scaling_interval: usize,
    /// Parameters per event; spread evenly toward the target when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter_budget: Option<usize>,
    pub layer_threshold: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetSpec>,
    #[serde(default = "default_scaling_factor")]
    pub scaling_factor: f32,
    #[serde(default)]
    pub selection: Selection,
    /// Layer roles whose neurons are analyzed and grown.
    #[serde(default = "default_roles")]
    pub analyzed_roles: Vec<Role>,
    #[serde(default)]
    pub spectrum: SpectrumOptions,
}

fn yes() -> bool {
    true
}

fn default_scaling_factor() -> f32 {
    DEFAULT_SCALING_FACTOR
}

fn default_roles() -> Vec<Role> {
    vec![Role::Fc1]
}

impl ScheduleSpec {
    /// Concrete schedule for a model with `base_params` trained for
    /// `epochs`, or `None` when growth is disabled.
    pub fn resolve(&self, base_params: usize, epochs: usize) -> Result<Option<ScheduleConfig>> {
        if !self.enabled {
            return Ok(None);
        }
        if let Some(bad) = self.analyzed_roles.iter().find(|r| !r.is_growth_eligible()) {
            return Err(Error::Config(format!("role `{}` cannot be grown", bad.as_str())));
        }
        let target = self.target.as_ref().map(|t| t.resolve(base_params)).transpose()?;
        let parameter_budget = match (self.parameter_budget, target) {
            (Some(b), _) => b,
            (None, Some(t)) => {
                let events = event_epochs(self.initial_warmup, self.scaling_interval, epochs).len();
                default_parameter_budget(base_params, t.params, events)
            }
            (None, None) => {
                return Err(Error::Config(
                    "schedule needs a parameter_budget or a target to derive one from".into(),
                ))
            }
        };
        let cfg = ScheduleConfig {
            initial_warmup: self.initial_warmup,
            scaling_interval: self.scaling_interval,
            parameter_budget,
            layer_threshold: self.layer_threshold,
            target,
            scaling_factor: self.scaling_factor,
            selection: self.selection,
        };
        cfg.validate()?;
        Ok(Some(cfg))
    }
}

impl RunConfig {
    /// Desk-scale experiment: growth from epoch 20 every 10 epochs toward
    /// twice the base parameter count.
    pub fn desk(seed: u64) -> Self {
        Self {
            run_id: format!("desk-{seed}"),
            seed,
            epochs: 60,
            batch_size: 64,
            output_dir: default_output_dir(),
            grad_clip: None,
            model: ModelConfig::desk(),
            schedule: ScheduleSpec {
                enabled: true,
                initial_warmup: 20,
                scaling_interval: 10,
                parameter_budget: None,
                layer_threshold: 8,
                target: Some(TargetSpec {
                    params: None,
                    ratio: Some(2.0),
                    tolerance: None,
                    relative_tolerance: Some(0.05),
                }),
                scaling_factor: DEFAULT_SCALING_FACTOR,
                selection: Selection::MostNegative,
                analyzed_roles: default_roles(),
                spectrum: SpectrumOptions::default(),
            },
            optimizer: OptimizerConfig {
                lr: Some(1e-3),
                ..OptimizerConfig::default()
            },
            lr_schedule: LrScheduleConfig::default(),
            dataset: DatasetConfig::synthetic(None),
        }
    }

    /// Gradient clipping at 1.0 and weight decay 1e-4.
    pub fn with_cifar_overrides(mut self) -> Self {
        self.grad_clip = Some(1.0);
        self.optimizer.weight_decay = 1e-4;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("run_id `{}` is not a plain name", self.run_id)));
        }
        if let Some(c) = self.grad_clip.filter(|c| !(*c > 0.0)) {
            return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
        }
        let [b1, b2] = self.optimizer.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || self.optimizer.peak_lr(self.batch_size) <= 0.0 {
            return Err(Error::Config("optimizer betas must lie in [0, 1) and lr must be positive".into()));
        }
        if matches!(self.dataset.name, DatasetKind::Idx | DatasetKind::Cifar) && self.dataset.path.is_none() {
            return Err(Error::Config("file-backed datasets need a path".into()));
        }
        if self.schedule.spectrum.max_batches == 0 {
            return Err(Error::Config("schedule.spectrum.max_batches must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::desk(4).with_cifar_overrides();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = RunConfig::desk(4).to_toml().unwrap();
        text = text.replacen("epochs = 60", "epochs = 60\nepoch_count = 3", 1);
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn desk_schedule_resolves_to_even_budget() {
        let cfg = RunConfig::desk(0);
        let s = cfg.schedule.resolve(100_000, 60).unwrap().unwrap();
        assert_eq!(s.target.unwrap().params, 200_000);
        assert_eq!(s.target.unwrap().tolerance, 10_000);
        assert_eq!(s.parameter_budget, 25_000);
    }

    #[test]
    fn dataset_shorthand() {
        assert_eq!(DatasetConfig::parse_shorthand("synthetic:7").unwrap().seed, Some(7));
        assert_eq!(DatasetConfig::parse_shorthand("idx:/d").unwrap().name, DatasetKind::Idx);
        assert!(DatasetConfig::parse_shorthand("cifar").is_err());
        assert!(DatasetConfig::parse_shorthand("imagenet:/x").is_err());
    }
}
