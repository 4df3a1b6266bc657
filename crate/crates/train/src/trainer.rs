//! Minibatch SGD on a surrogate's empirical risk, and system-level metrics.

use std::f64::consts::PI;

use deferral_core::consistency::{bayes_optimal, prediction_link};
use deferral_core::experts::ExpertPopulation;
use deferral_core::losses::{argmax, target_loss_01};
use deferral_core::{LabeledSample, SurrogateSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TrainError};
use crate::model::{Activations, ScorerModel};
use crate::task::SyntheticTask;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial step size, annealed to zero by a cosine schedule.
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate = {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: ScorerModel,
    /// Mean surrogate loss over each epoch's minibatches, before their updates.
    pub loss_curve: Vec<f64>,
}

fn check_dataset(data: &[LabeledSample], model: &ScorerModel, k: usize) -> Result<usize> {
    if data.is_empty() {
        return Err(TrainError::Empty("dataset"));
    }
    let j = model
        .output_dim()
        .checked_sub(k)
        .filter(|&j| j > 0)
        .ok_or_else(|| TrainError::Config(format!("model output {} leaves no expert scores after K = {k}", model.output_dim())))?;
    for s in data {
        s.validate(k, j)?;
        if s.features.len() != model.input_dim() {
            return Err(TrainError::Config(format!(
                "sample has {} features, model expects {}",
                s.features.len(),
                model.input_dim()
            )));
        }
    }
    Ok(j)
}

/// Mean surrogate loss of `model` over `data`.
pub fn empirical_risk(model: &ScorerModel, data: &[LabeledSample], k: usize, spec: SurrogateSpec) -> Result<f64> {
    check_dataset(data, model, k)?;
    let mut act = Activations::default();
    let total: f64 = data
        .iter()
        .map(|s| {
            model.forward_into(&s.features, &mut act);
            spec.loss(&act.scores, k, s.label, &s.expert_preds)
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// Trains `model` on `spec` with momentum SGD, cosine-annealed step size and
/// L2 weight decay folded into the velocity. Minibatch order is drawn from `seed`.
pub fn train(
    data: &[LabeledSample],
    k: usize,
    spec: SurrogateSpec,
    mut model: ScorerModel,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(data, &model, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let n_params = model.num_params();
    let mut velocity = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut act = Activations::default();
    let mut scratch = Vec::new();
    let batches_per_epoch = data.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch) as f64;
    let mut step = 0usize;
    let mut loss_curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.fill(0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &data[i];
                model.forward_into(&s.features, &mut act);
                let (loss, dscores) = spec.loss_grad(&act.scores, k, s.label, &s.expert_preds);
                batch_loss += loss;
                model.backward(&s.features, &act, &dscores, &mut grad, &mut scratch);
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Divergence { epoch, loss: batch_loss });
            }
            epoch_loss += batch_loss;
            let lr = 0.5 * config.learning_rate * (1.0 + (PI * step as f64 / total_steps).cos());
            let inv = 1.0 / batch.len() as f64;
            for ((p, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grad) {
                *v = config.momentum * *v + g * inv + config.weight_decay * *p;
                *p -= lr * *v;
            }
            step += 1;
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(TrainError::Divergence { epoch, loss: mean });
        }
        loss_curve.push(mean);
    }
    Ok(TrainOutcome { model, loss_curve })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    /// Mean 0-1 loss of the deferral system.
    pub system_error: f64,
    /// Fraction of samples the system classifies itself.
    pub coverage: f64,
    /// Accuracy of the argmax over the label scores, deferred samples included.
    pub classifier_accuracy: f64,
}

/// Metrics of arbitrary score vectors, one per test sample.
pub fn evaluate_scores(scores: &[Vec<f64>], test: &[LabeledSample], k: usize) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(TrainError::Empty("test set"));
    }
    if scores.len() != test.len() {
        return Err(TrainError::Config(format!("{} score vectors for {} samples", scores.len(), test.len())));
    }
    let (mut errors, mut classified, mut correct) = (0usize, 0usize, 0usize);
    for (theta, s) in scores.iter().zip(test) {
        let decision = prediction_link(theta, k)?;
        errors += usize::from(target_loss_01(decision, s.label, &s.expert_preds)?);
        classified += usize::from(!decision.is_deferral());
        correct += usize::from(argmax(theta[..k].iter().copied()) == Some(s.label));
    }
    let n = test.len() as f64;
    Ok(EvalMetrics {
        system_error: errors as f64 / n,
        coverage: classified as f64 / n,
        classifier_accuracy: correct as f64 / n,
    })
}

pub fn evaluate(model: &ScorerModel, test: &[LabeledSample], k: usize) -> Result<EvalMetrics> {
    check_dataset(test, model, k)?;
    let scores: Vec<Vec<f64>> = test.iter().map(|s| model.forward(&s.features)).collect();
    evaluate_scores(&scores, test, k)
}

/// Test error of the Bayes-optimal deferral rule, which knows `η(x)` and the
/// expert accuracies exactly.
pub fn bayes_system_error(task: &SyntheticTask, population: &ExpertPopulation, test: &[LabeledSample]) -> Result<f64> {
    if test.is_empty() {
        return Err(TrainError::Empty("test set"));
    }
    let mut errors = 0usize;
    for s in test {
        let point = population.to_point(task.posterior(&s.features))?;
        errors += usize::from(target_loss_01(bayes_optimal(&point), s.label, &s.expert_preds)?);
    }
    Ok(errors as f64 / test.len() as f64)
}
