//! Flat TOML run configuration.
//!
//! Every key is optional; unset keys take the defaults below. Keys that do not
//! apply to the running command are rejected, as are unknown keys. Relative
//! paths are resolved against the directory of the config file.
//!
//! | key | commands | default |
//! |-----|----------|---------|
//! | `command` | all | the running command (must match if set) |
//! | `seed` | all | `7` |
//! | `out_dir` | all | `deferlab-out` |
//! | `fixtures` | verify-* | `[]` (point fixture files) |
//! | `random_points` | verify-* | `50` risks, `100` consistency |
//! | `k_list` | verify-* | `[2, 3, 5]` risks, `[3, 5]` consistency |
//! | `j_list` | all | `[1, 2, 3, 5, 8]` risks, `[2, 3, 5]` consistency, `[1, 4, 8, 16]` sweep |
//! | `specs` | verify-risks, sweep | all six risks, `["vanilla-ce", "picce-ce"]` sweep |
//! | `mc_samples` | verify-risks | `100000` |
//! | `theta_scale` | verify-risks | `2.0` |
//! | `z_bound` | verify-risks | `3.0` |
//! | `bases` | verify-consistency | `["ce", "ova"]` |
//! | `tolerance` | verify-consistency | `1e-3` |
//! | `max_iters`, `step_size`, `grad_tolerance`, `line_search` | verify-consistency | `20000`, `0.5`, `1e-8`, `true` |
//! | `num_classes`, `feature_dim`, `radius`, `sigma` | sweep | `20`, `2`, `3.0`, `0.45` |
//! | `pattern` | sweep | `"domain_expert"` (or `"overlapped_domain"`) |
//! | `in_domain`, `in_family`, `family_size` | sweep | `0.85`, `0.75`, `16` |
//! | `domain_size` / `overlap` | sweep | `1` / `1` |
//! | `trials`, `n_train`, `n_test` | sweep | `3`, `20000`, `5000` |
//! | `architecture`, `width` | sweep | `"mlp"`, `64` (`"linear"` takes no width) |
//! | `epochs`, `batch_size`, `learning_rate`, `momentum`, `weight_decay` | sweep | `50`, `128`, `0.15`, `0.9`, `5e-4` |
//! | `record_timing` | sweep | `false` |

use std::fs;
use std::path::{Path, PathBuf};

use deferral_core::experts::ExpertPattern;
use deferral_core::{BaseLoss, OptimizerConfig, SurrogateSpec};
use deferral_train::{Architecture, SweepConfig, SyntheticTask, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::Command;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub fixtures: Option<Vec<PathBuf>>,
    pub random_points: Option<usize>,
    pub k_list: Option<Vec<usize>>,
    pub j_list: Option<Vec<usize>>,
    pub specs: Option<Vec<String>>,
    pub mc_samples: Option<usize>,
    pub theta_scale: Option<f64>,
    pub z_bound: Option<f64>,
    pub bases: Option<Vec<String>>,
    pub tolerance: Option<f64>,
    pub max_iters: Option<usize>,
    pub step_size: Option<f64>,
    pub grad_tolerance: Option<f64>,
    pub line_search: Option<bool>,
    pub num_classes: Option<usize>,
    pub feature_dim: Option<usize>,
    pub radius: Option<f64>,
    pub sigma: Option<f64>,
    pub pattern: Option<String>,
    pub in_domain: Option<f64>,
    pub in_family: Option<f64>,
    pub family_size: Option<usize>,
    pub domain_size: Option<usize>,
    pub overlap: Option<usize>,
    pub trials: Option<usize>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub architecture: Option<String>,
    pub width: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub record_timing: Option<bool>,
}

const COMMON_KEYS: &[&str] = &["command", "seed", "out_dir"];
const VERIFY_KEYS: &[&str] = &["fixtures", "random_points", "k_list", "j_list"];
const RISK_KEYS: &[&str] = &["specs", "mc_samples", "theta_scale", "z_bound"];
const CONSISTENCY_KEYS: &[&str] = &["bases", "tolerance", "max_iters", "step_size", "grad_tolerance", "line_search"];
const SWEEP_KEYS: &[&str] = &[
    "j_list", "specs", "num_classes", "feature_dim", "radius", "sigma", "pattern", "in_domain", "in_family",
    "family_size", "domain_size", "overlap", "trials", "n_train", "n_test", "architecture", "width", "epochs",
    "batch_size", "learning_rate", "momentum", "weight_decay", "record_timing",
];

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::parse(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(fixtures) = &mut config.fixtures {
            for f in fixtures.iter_mut() {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
            }
        }
        if let Some(out) = &mut config.out_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    fn set_keys(&self) -> Vec<String> {
        match toml::Table::try_from(self) {
            Ok(table) => table.keys().cloned().collect(),
            Err(_) => Vec::new(),
        }
    }

    /// Fills every default that applies to `command` and checks the result.
    /// The returned config is what gets echoed next to the outputs.
    pub fn resolve(mut self, command: Command) -> Result<Self, CliError> {
        let name = command.name();
        if let Some(c) = &self.command {
            if c != name {
                return Err(config_err(format!("key `command` is \"{c}\" but the command run is {name}")));
            }
        }
        let allowed: Vec<&str> = match command {
            Command::VerifyRisks => [COMMON_KEYS, VERIFY_KEYS, RISK_KEYS].concat(),
            Command::VerifyConsistency => [COMMON_KEYS, VERIFY_KEYS, CONSISTENCY_KEYS].concat(),
            Command::Sweep => [COMMON_KEYS, SWEEP_KEYS].concat(),
        };
        if let Some(key) = self.set_keys().into_iter().find(|k| !allowed.contains(&k.as_str())) {
            return Err(config_err(format!("key `{key}` does not apply to {name}")));
        }

        self.command = Some(name.to_string());
        self.seed.get_or_insert(7);
        let out = self.out_dir.take().unwrap_or_else(|| PathBuf::from("deferlab-out"));
        self.out_dir = Some(std::path::absolute(&out).map_err(|e| config_err(format!("key `out_dir`: {e}")))?);

        match command {
            Command::VerifyRisks => {
                self.verify_defaults(50, vec![2, 3, 5], vec![1, 2, 3, 5, 8])?;
                self.specs.get_or_insert_with(|| SurrogateSpec::all().iter().map(|s| s.to_string()).collect());
                self.mc_samples.get_or_insert(100_000);
                self.theta_scale.get_or_insert(2.0);
                self.z_bound.get_or_insert(3.0);
            }
            Command::VerifyConsistency => {
                self.verify_defaults(100, vec![3, 5], vec![2, 3, 5])?;
                self.bases.get_or_insert_with(|| vec!["ce".into(), "ova".into()]);
                self.tolerance.get_or_insert(1e-3);
                let opt = OptimizerConfig::default();
                self.max_iters.get_or_insert(opt.max_iters);
                self.step_size.get_or_insert(opt.step_size);
                self.grad_tolerance.get_or_insert(opt.grad_tolerance);
                self.line_search.get_or_insert(opt.use_line_search);
            }
            Command::Sweep => self.sweep_defaults(),
        }
        Ok(self)
    }

    fn verify_defaults(&mut self, points: usize, k_list: Vec<usize>, j_list: Vec<usize>) -> Result<(), CliError> {
        let fixtures = self.fixtures.get_or_insert_with(Vec::new);
        for f in fixtures.iter_mut() {
            if !f.is_file() {
                return Err(config_err(format!("key `fixtures`: file not found: {}", f.display())));
            }
            *f = f.canonicalize().map_err(|e| config_err(format!("key `fixtures`: {}: {e}", f.display())))?;
        }
        self.random_points.get_or_insert(points);
        self.k_list.get_or_insert(k_list);
        self.j_list.get_or_insert(j_list);
        Ok(())
    }

    fn sweep_defaults(&mut self) {
        let d = SweepConfig::desk_default();
        self.j_list.get_or_insert(d.j_list.clone());
        self.specs.get_or_insert_with(|| d.specs.iter().map(|s| s.to_string()).collect());
        self.num_classes.get_or_insert(d.task.num_classes());
        self.feature_dim.get_or_insert(d.task.feature_dim());
        self.radius.get_or_insert(3.0);
        self.sigma.get_or_insert(d.task.sigma());
        let pattern = self.pattern.get_or_insert_with(|| "domain_expert".into()).clone();
        self.in_domain.get_or_insert(0.85);
        self.in_family.get_or_insert(0.75);
        self.family_size.get_or_insert(16);
        match pattern.as_str() {
            "overlapped_domain" => {
                self.overlap.get_or_insert(1);
            }
            _ => {
                self.domain_size.get_or_insert(1);
            }
        }
        self.trials.get_or_insert(d.trials);
        self.n_train.get_or_insert(d.n_train);
        self.n_test.get_or_insert(d.n_test);
        let arch = self.architecture.get_or_insert_with(|| "mlp".into()).clone();
        if arch == "mlp" {
            self.width.get_or_insert(64);
        }
        self.epochs.get_or_insert(d.train.epochs);
        self.batch_size.get_or_insert(d.train.batch_size);
        self.learning_rate.get_or_insert(d.train.learning_rate);
        self.momentum.get_or_insert(d.train.momentum);
        self.weight_decay.get_or_insert(d.train.weight_decay);
        self.record_timing.get_or_insert(false);
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(7)
    }

    pub fn out_dir(&self) -> &Path {
        self.out_dir.as_deref().unwrap_or(Path::new("deferlab-out"))
    }
}

fn required<T: Clone>(value: &Option<T>, key: &str) -> Result<T, CliError> {
    value.clone().ok_or_else(|| config_err(format!("key `{key}` is unset")))
}

fn nonempty(list: Vec<usize>, key: &str) -> Result<Vec<usize>, CliError> {
    if list.is_empty() || list.contains(&0) {
        return Err(config_err(format!("key `{key}` must be a nonempty list of positive integers")));
    }
    Ok(list)
}

fn parse_specs(names: &[String]) -> Result<Vec<SurrogateSpec>, CliError> {
    if names.is_empty() {
        return Err(config_err("key `specs` must not be empty"));
    }
    names
        .iter()
        .map(|s| s.parse().map_err(|e| config_err(format!("key `specs`: {e}"))))
        .collect()
}

pub fn parse_base(name: &str) -> Result<BaseLoss, CliError> {
    match name {
        "ce" => Ok(BaseLoss::CrossEntropy),
        "ova" => Ok(BaseLoss::OvaLog),
        other => Err(config_err(format!("key `bases`: unknown base loss `{other}` (expected ce or ova)"))),
    }
}

/// Random-point settings shared by both verification commands.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSettings {
    pub fixtures: Vec<PathBuf>,
    pub random_points: usize,
    pub k_list: Vec<usize>,
    pub j_list: Vec<usize>,
}

impl PointSettings {
    fn from_config(c: &RunConfig) -> Result<Self, CliError> {
        let k_list = nonempty(required(&c.k_list, "k_list")?, "k_list")?;
        if k_list.contains(&1) {
            return Err(config_err("key `k_list`: points need at least two classes"));
        }
        Ok(Self {
            fixtures: required(&c.fixtures, "fixtures")?,
            random_points: required(&c.random_points, "random_points")?,
            k_list,
            j_list: nonempty(required(&c.j_list, "j_list")?, "j_list")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskSettings {
    pub seed: u64,
    pub points: PointSettings,
    pub specs: Vec<SurrogateSpec>,
    pub mc_samples: usize,
    pub theta_scale: f64,
    pub z_bound: f64,
}

impl RiskSettings {
    pub fn from_config(c: &RunConfig) -> Result<Self, CliError> {
        let mc_samples = required(&c.mc_samples, "mc_samples")?;
        if mc_samples < 2 {
            return Err(config_err("key `mc_samples` must be at least 2"));
        }
        let theta_scale = required(&c.theta_scale, "theta_scale")?;
        let z_bound = required(&c.z_bound, "z_bound")?;
        if !(theta_scale.is_finite() && theta_scale >= 0.0) || !(z_bound.is_finite() && z_bound > 0.0) {
            return Err(config_err("keys `theta_scale` and `z_bound` must be finite, `z_bound` positive"));
        }
        Ok(Self {
            seed: c.seed(),
            points: PointSettings::from_config(c)?,
            specs: parse_specs(&required(&c.specs, "specs")?)?,
            mc_samples,
            theta_scale,
            z_bound,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencySettings {
    pub seed: u64,
    pub points: PointSettings,
    pub bases: Vec<BaseLoss>,
    pub tolerance: f64,
    pub optimizer: OptimizerConfig,
}

impl ConsistencySettings {
    pub fn from_config(c: &RunConfig) -> Result<Self, CliError> {
        let bases = required(&c.bases, "bases")?;
        if bases.is_empty() {
            return Err(config_err("key `bases` must not be empty"));
        }
        let tolerance = required(&c.tolerance, "tolerance")?;
        if !(tolerance.is_finite() && tolerance > 0.0) {
            return Err(config_err("key `tolerance` must be positive"));
        }
        let optimizer = OptimizerConfig {
            max_iters: required(&c.max_iters, "max_iters")?,
            step_size: required(&c.step_size, "step_size")?,
            grad_tolerance: required(&c.grad_tolerance, "grad_tolerance")?,
            use_line_search: required(&c.line_search, "line_search")?,
        };
        optimizer.validate().map_err(|e| config_err(format!("optimizer keys: {e}")))?;
        Ok(Self {
            seed: c.seed(),
            points: PointSettings::from_config(c)?,
            bases: bases.iter().map(|b| parse_base(b)).collect::<Result<_, _>>()?,
            tolerance,
            optimizer,
        })
    }
}

pub fn sweep_config(c: &RunConfig) -> Result<SweepConfig, CliError> {
    let k = required(&c.num_classes, "num_classes")?;
    let task = SyntheticTask::circle(
        k,
        required(&c.feature_dim, "feature_dim")?,
        required(&c.radius, "radius")?,
        required(&c.sigma, "sigma")?,
    )
    .map_err(|e| config_err(format!("task keys: {e}")))?;
    let in_domain = required(&c.in_domain, "in_domain")?;
    let in_family = required(&c.in_family, "in_family")?;
    let family_size = c.family_size;
    let pattern = match required(&c.pattern, "pattern")?.as_str() {
        "domain_expert" => {
            if c.overlap.is_some() {
                return Err(config_err("key `overlap` applies only to pattern \"overlapped_domain\""));
            }
            ExpertPattern::DomainExpert { in_domain, in_family, domain_size: required(&c.domain_size, "domain_size")?, family_size }
        }
        "overlapped_domain" => {
            if c.domain_size.is_some() {
                return Err(config_err("key `domain_size` applies only to pattern \"domain_expert\""));
            }
            ExpertPattern::OverlappedDomain { in_domain, in_family, overlap: required(&c.overlap, "overlap")?, family_size }
        }
        other => {
            return Err(config_err(format!(
                "key `pattern`: unknown pattern `{other}` (expected domain_expert or overlapped_domain)"
            )))
        }
    };
    let architecture = match required(&c.architecture, "architecture")?.as_str() {
        "mlp" => Architecture::OneHiddenLayer { width: required(&c.width, "width")? },
        "linear" => {
            if c.width.is_some() {
                return Err(config_err("key `width` applies only to architecture \"mlp\""));
            }
            Architecture::Linear
        }
        other => return Err(config_err(format!("key `architecture`: unknown architecture `{other}` (expected mlp or linear)"))),
    };
    let config = SweepConfig {
        task,
        pattern,
        j_list: nonempty(required(&c.j_list, "j_list")?, "j_list")?,
        specs: parse_specs(&required(&c.specs, "specs")?)?,
        trials: required(&c.trials, "trials")?,
        n_train: required(&c.n_train, "n_train")?,
        n_test: required(&c.n_test, "n_test")?,
        architecture,
        train: TrainConfig {
            epochs: required(&c.epochs, "epochs")?,
            batch_size: required(&c.batch_size, "batch_size")?,
            learning_rate: required(&c.learning_rate, "learning_rate")?,
            momentum: required(&c.momentum, "momentum")?,
            weight_decay: required(&c.weight_decay, "weight_decay")?,
        },
        seed: c.seed(),
        record_timing: required(&c.record_timing, "record_timing")?,
    };
    config.validate().map_err(|e| config_err(format!("sweep keys: {e}")))?;
    Ok(config)
}
