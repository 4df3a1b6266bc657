//! Random point generators shared by the randomized suites and the CLI.

use rand::Rng;

use crate::consistency::{bayes_optimal, best_expert, check_condition1};
use crate::domain::{ConditionalPoint, Decision, ExpertJointModel, ModelKind};
use crate::error::Result;

/// Uniform draw from the probability simplex (normalized exponentials).
pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..len).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-12).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

pub fn random_theta<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-scale..=scale)).collect()
}

pub fn random_expert_model<R: Rng + ?Sized>(rng: &mut R, k: usize, j: usize, kind: ModelKind) -> Result<ExpertJointModel> {
    match kind {
        ModelKind::ConditionallyIndependent => {
            let acc = (0..k).map(|_| (0..j).map(|_| rng.random::<f64>()).collect()).collect();
            ExpertJointModel::independent(acc)
        }
        ModelKind::FullJoint => {
            let table = (0..k).map(|_| random_simplex(rng, 1 << j)).collect();
            ExpertJointModel::full_joint(j, table)
        }
    }
}

pub fn random_point<R: Rng + ?Sized>(rng: &mut R, k: usize, j: usize, kind: ModelKind) -> Result<ConditionalPoint> {
    let posterior = random_simplex(rng, k);
    ConditionalPoint::new(posterior, random_expert_model(rng, k, j, kind)?)
}

/// Margins a point must clear to be used in the decision-level suites.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecisiveMargins {
    /// Gap between the two largest class probabilities.
    pub label: f64,
    /// Distance `|Acc_{j*} - max_y η_y|` from the defer/classify boundary.
    pub boundary: f64,
    /// Smallest union gap in the Condition 1 enumeration.
    pub condition1: f64,
}

impl Default for DecisiveMargins {
    fn default() -> Self {
        Self { label: 0.02, boundary: 0.02, condition1: 0.005 }
    }
}

fn top_two(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
        if v > a {
            (v, a)
        } else {
            (a, b.max(v))
        }
    })
}

/// Whether `point` satisfies Condition 1 and clears every margin.
pub fn is_decisive(point: &ConditionalPoint, margins: &DecisiveMargins) -> Result<bool> {
    let (first, second) = top_two(point.posterior());
    if first - second < margins.label {
        return Ok(false);
    }
    let acc_star = point.expert_accuracies()[best_expert(point)];
    if (acc_star - first).abs() < margins.boundary {
        return Ok(false);
    }
    let report = check_condition1(point)?;
    Ok(report.holds && report.min_gap >= margins.condition1)
}

/// Rejection-samples independent-expert points until one is decisive.
pub fn random_decisive_point<R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    j: usize,
    margins: &DecisiveMargins,
) -> Result<ConditionalPoint> {
    loop {
        let point = random_point(rng, k, j, ModelKind::ConditionallyIndependent)?;
        if is_decisive(&point, margins)? {
            return Ok(point);
        }
    }
}

/// Whether the Bayes rule at `point` defers.
pub fn defers(point: &ConditionalPoint) -> bool {
    matches!(bayes_optimal(point), Decision::Defer(_))
}
