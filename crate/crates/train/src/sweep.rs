//! Expert-count sweeps: for every `(J, spec, trial)` cell build a population,
//! sample data, train and evaluate.

use std::time::Instant;

use deferral_core::experts::{build_expert_population, ExpertPattern};
use deferral_core::seed::derive_seed;
use deferral_core::{BaseLoss, Family, SurrogateSpec};
use rayon::prelude::*;

use crate::error::{Result, TrainError};
use crate::model::{Architecture, ScorerModel};
use crate::task::{sample_features, with_expert_predictions, SyntheticTask};
use crate::trainer::{evaluate, train, EvalMetrics, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub task: SyntheticTask,
    pub pattern: ExpertPattern,
    pub j_list: Vec<usize>,
    pub specs: Vec<SurrogateSpec>,
    pub trials: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub seed: u64,
    /// Wall-clock timing makes results irreproducible, so it is opt-in.
    pub record_timing: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub spec: SurrogateSpec,
    pub j: usize,
    pub trial: usize,
    pub metrics: EvalMetrics,
    pub train_seconds: Option<f64>,
    pub loss_curve: Vec<f64>,
}

/// Seeds of one cell. Features and labels come from the root seed alone and
/// are shared by every cell, like a fixed benchmark split. Expert draws
/// depend on `(J, trial)`; initialization and batch order on the trial only,
/// so cells that differ in `J` or surrogate are paired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellSeeds {
    pub train_features: u64,
    pub test_features: u64,
    pub population: u64,
    pub train_experts: u64,
    pub test_experts: u64,
    pub init: u64,
    pub shuffle: u64,
}

impl CellSeeds {
    pub fn derive(root: u64, j: usize, trial: usize) -> Self {
        let (j, t) = (j as u64, trial as u64);
        Self {
            train_features: derive_seed(root, "train_features", &[]),
            test_features: derive_seed(root, "test_features", &[]),
            population: derive_seed(root, "population", &[j, t]),
            train_experts: derive_seed(root, "train_experts", &[j, t]),
            test_experts: derive_seed(root, "test_experts", &[j, t]),
            init: derive_seed(root, "init", &[t]),
            shuffle: derive_seed(root, "shuffle", &[t]),
        }
    }
}

impl SweepConfig {
    /// Twenty classes on a circle; domain experts each strong on one class of
    /// a sixteen-class family. Vanilla and PiCCE cross-entropy over
    /// `J ∈ {1, 4, 8, 16}`, three trials.
    pub fn desk_default() -> Self {
        Self {
            task: SyntheticTask::circle(20, 2, 3.0, 0.45).expect("valid task"),
            pattern: ExpertPattern::DomainExpert {
                in_domain: 0.85,
                in_family: 0.75,
                domain_size: 1,
                family_size: Some(16),
            },
            j_list: vec![1, 4, 8, 16],
            specs: vec![
                SurrogateSpec::new(Family::Vanilla, BaseLoss::CrossEntropy),
                SurrogateSpec::new(Family::Picce, BaseLoss::CrossEntropy),
            ],
            trials: 3,
            n_train: 20_000,
            n_test: 5_000,
            architecture: Architecture::OneHiddenLayer { width: 64 },
            train: TrainConfig { learning_rate: 0.15, ..TrainConfig::default() },
            seed: 7,
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.j_list.is_empty() || self.specs.is_empty() || self.trials == 0 {
            return Err(TrainError::Config("j_list, specs and trials must be nonempty".into()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(TrainError::Config("n_train and n_test must be positive".into()));
        }
        self.train.validate()?;
        for &j in &self.j_list {
            build_expert_population(&self.pattern, j, self.task.num_classes(), 0)?;
        }
        Ok(())
    }

    /// Cells in output order: `J`, then surrogate, then trial.
    pub fn cells(&self) -> Vec<(usize, SurrogateSpec, usize)> {
        let mut cells = Vec::new();
        for &j in &self.j_list {
            for &spec in &self.specs {
                for trial in 0..self.trials {
                    cells.push((j, spec, trial));
                }
            }
        }
        cells
    }
}

/// Feature/label pairs shared by every cell: `(train, test)`.
pub type SharedSplit = (Vec<(Vec<f64>, usize)>, Vec<(Vec<f64>, usize)>);

pub fn shared_split(config: &SweepConfig) -> Result<SharedSplit> {
    let seeds = CellSeeds::derive(config.seed, 0, 0);
    Ok((
        sample_features(&config.task, config.n_train, seeds.train_features)?,
        sample_features(&config.task, config.n_test, seeds.test_features)?,
    ))
}

pub fn run_cell(config: &SweepConfig, split: &SharedSplit, j: usize, spec: SurrogateSpec, trial: usize) -> Result<SweepRow> {
    let k = config.task.num_classes();
    let seeds = CellSeeds::derive(config.seed, j, trial);
    let population = build_expert_population(&config.pattern, j, k, seeds.population)?;
    let train_set = with_expert_predictions(&split.0, &population, seeds.train_experts)?;
    let test_set = with_expert_predictions(&split.1, &population, seeds.test_experts)?;
    let model = ScorerModel::new(config.architecture, config.task.feature_dim(), k + j, seeds.init)?;
    let start = Instant::now();
    let outcome = train(&train_set, k, spec, model, &config.train, seeds.shuffle)?;
    let elapsed = start.elapsed().as_secs_f64();
    let metrics = evaluate(&outcome.model, &test_set, k)?;
    Ok(SweepRow {
        spec,
        j,
        trial,
        metrics,
        train_seconds: config.record_timing.then_some(elapsed),
        loss_curve: outcome.loss_curve,
    })
}

/// Runs every cell (in parallel) and returns rows in [`SweepConfig::cells`] order.
pub fn sweep_experts(config: &SweepConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let split = shared_split(config)?;
    config
        .cells()
        .into_par_iter()
        .map(|(j, spec, trial)| run_cell(config, &split, j, spec, trial))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub spec: SurrogateSpec,
    pub j: usize,
    pub trials: usize,
    pub mean: EvalMetrics,
    /// Sample standard deviation across trials (zero for one trial).
    pub std: EvalMetrics,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-`(J, spec)` means and standard deviations, in first-appearance order.
pub fn summarize(rows: &[SweepRow]) -> Vec<CellSummary> {
    let mut keys: Vec<(usize, SurrogateSpec)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.j, r.spec)) {
            keys.push((r.j, r.spec));
        }
    }
    keys.into_iter()
        .map(|(j, spec)| {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.j == j && r.spec == spec).collect();
            let pick = |f: fn(&EvalMetrics) -> f64| mean_std(&cell.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
            let (se_m, se_s) = pick(|m| m.system_error);
            let (cov_m, cov_s) = pick(|m| m.coverage);
            let (acc_m, acc_s) = pick(|m| m.classifier_accuracy);
            CellSummary {
                spec,
                j,
                trials: cell.len(),
                mean: EvalMetrics { system_error: se_m, coverage: cov_m, classifier_accuracy: acc_m },
                std: EvalMetrics { system_error: se_s, coverage: cov_s, classifier_accuracy: acc_s },
            }
        })
        .collect()
}
