//! Gaussian-mixture classification tasks with a closed-form class posterior.

use std::f64::consts::TAU;

use deferral_core::experts::ExpertPopulation;
use deferral_core::losses::softmax;
use deferral_core::seed::derive_seed;
use deferral_core::LabeledSample;
use rand::distr::{Distribution, weighted::WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TrainError};

/// One spherical Gaussian component per class, shared standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    means: Vec<Vec<f64>>,
    sigma: f64,
    priors: Vec<f64>,
}

impl SyntheticTask {
    pub fn new(means: Vec<Vec<f64>>, sigma: f64, priors: Vec<f64>) -> Result<Self> {
        let k = means.len();
        if k < 2 {
            return Err(TrainError::Config("a task needs at least two classes".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim || m.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::Config("class means must be finite and share one dimension".into()));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(TrainError::Config(format!("sigma = {sigma} must be positive")));
        }
        if priors.len() != k
            || priors.iter().any(|&p| !(0.0..=1.0).contains(&p))
            || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(TrainError::Config("priors must be a probability vector with one entry per class".into()));
        }
        Ok(Self { means, sigma, priors })
    }

    /// `k` equiprobable classes with means evenly spaced on a circle of
    /// `radius` in the first two coordinates.
    pub fn circle(k: usize, feature_dim: usize, radius: f64, sigma: f64) -> Result<Self> {
        if feature_dim < 2 {
            return Err(TrainError::Config("circle layout needs feature_dim >= 2".into()));
        }
        let means = (0..k)
            .map(|c| {
                let angle = TAU * c as f64 / k as f64;
                let mut m = vec![0.0; feature_dim];
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
                m
            })
            .collect();
        Self::new(means, sigma, vec![1.0 / k as f64; k])
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    /// η(x): softmax of log prior plus Gaussian log-likelihood.
    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let scale = 0.5 / (self.sigma * self.sigma);
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&self.priors)
            .map(|(m, &p)| {
                let d2: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                p.ln() - scale * d2
            })
            .collect();
        softmax(&logits)
    }
}

/// Draws `n` `(features, label)` pairs: label from the priors, features from
/// that class's component.
pub fn sample_features(task: &SyntheticTask, n: usize, seed: u64) -> Result<Vec<(Vec<f64>, usize)>> {
    if n == 0 {
        return Err(TrainError::Empty("requested sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = WeightedIndex::new(&task.priors).map_err(|e| TrainError::Config(e.to_string()))?;
    Ok((0..n)
        .map(|_| {
            let label = classes.sample(&mut rng);
            let features = task.means[label]
                .iter()
                .map(|&mu| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu + task.sigma * z
                })
                .collect();
            (features, label)
        })
        .collect())
}

/// Attaches one draw of every expert's prediction to each pair.
pub fn with_expert_predictions(
    pairs: &[(Vec<f64>, usize)],
    population: &ExpertPopulation,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    let k = population.num_classes();
    if let Some((_, y)) = pairs.iter().find(|(_, y)| *y >= k) {
        return Err(TrainError::Config(format!("label {y} outside a population of {k} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pairs
        .iter()
        .map(|(features, label)| LabeledSample {
            features: features.clone(),
            label: *label,
            expert_preds: population.sample_expert_labels(*label, &mut rng),
        })
        .collect())
}

/// Draws `n` samples from `task` with expert predictions from `population`.
///
/// Features and labels use one derived stream and expert predictions another,
/// so two populations sampled with the same seed see the same `(x, y)`.
pub fn sample_task(task: &SyntheticTask, n: usize, population: &ExpertPopulation, seed: u64) -> Result<Vec<LabeledSample>> {
    if population.num_classes() != task.num_classes() {
        return Err(TrainError::Config(format!(
            "population has {} classes, task has {}",
            population.num_classes(),
            task.num_classes()
        )));
    }
    let pairs = sample_features(task, n, derive_seed(seed, "features", &[]))?;
    with_expert_predictions(&pairs, population, derive_seed(seed, "expert_predictions", &[]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use deferral_core::experts::{build_expert_population, ExpertPattern};

    fn population(k: usize) -> ExpertPopulation {
        let pattern = ExpertPattern::DomainExpert {
            in_domain: 0.9,
            in_family: 0.7,
            domain_size: 1,
            family_size: None,
        };
        build_expert_population(&pattern, 2, k, 0).unwrap()
    }

    #[test]
    fn rejects_bad_tasks() {
        assert!(SyntheticTask::new(vec![vec![0.0]], 1.0, vec![1.0]).is_err());
        assert!(SyntheticTask::new(vec![vec![0.0], vec![1.0]], 0.0, vec![0.5, 0.5]).is_err());
        assert!(SyntheticTask::new(vec![vec![0.0], vec![1.0]], 1.0, vec![0.5, 0.6]).is_err());
        assert!(SyntheticTask::circle(4, 1, 1.0, 1.0).is_err());
        let task = SyntheticTask::circle(4, 2, 1.0, 1.0).unwrap();
        assert!(sample_task(&task, 0, &population(4), 0).is_err());
        assert!(sample_task(&task, 5, &population(5), 0).is_err());
    }

    #[test]
    fn posterior_is_normalized_and_symmetric() {
        let task = SyntheticTask::circle(6, 3, 2.0, 0.7).unwrap();
        let eta = task.posterior(&[0.3, -1.2, 0.5]);
        assert!((eta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let centre = task.posterior(&[0.0, 0.0, 0.0]);
        for p in centre {
            assert!((p - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn class_frequencies_match_priors() {
        let priors = vec![0.5, 0.3, 0.2];
        let task = SyntheticTask::new(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], 1.0, priors.clone()).unwrap();
        let n = 10_000;
        let data = sample_task(&task, n, &population(3), 9).unwrap();
        for (c, &p) in priors.iter().enumerate() {
            let freq = data.iter().filter(|s| s.label == c).count() as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() < 3.0 * se, "class {c}: {freq} vs {p}");
        }
    }

    #[test]
    fn sampling_is_seeded_and_pairs_features() {
        let task = SyntheticTask::circle(4, 2, 2.0, 1.0).unwrap();
        let a = sample_task(&task, 50, &population(4), 3).unwrap();
        assert_eq!(a, sample_task(&task, 50, &population(4), 3).unwrap());
        let other = build_expert_population(&ExpertPattern::Custom { accuracy: vec![vec![1.0; 4]] }, 1, 4, 0).unwrap();
        let b = sample_task(&task, 50, &other, 3).unwrap();
        for (s, t) in a.iter().zip(&b) {
            assert_eq!((&s.features, s.label), (&t.features, t.label));
            assert_eq!(t.expert_preds, vec![t.label]);
        }
    }
}
