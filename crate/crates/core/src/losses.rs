//! Target 0-1 loss, the two base multiclass losses over `K + J` outputs, and
//! the vanilla / PCE / PiCCE deferral surrogates built from them.
//!
//! Score layout: `theta[..k]` are label scores, `theta[k + j]` is the
//! deferral score of expert `j`. Argmax ties resolve to the lowest index.

use std::fmt;
use std::str::FromStr;

use crate::domain::Decision;
use crate::error::{check_index, Error, Result};

/// 0-1 loss of the combined system.
pub fn target_loss_01(decision: Decision, label: usize, expert_preds: &[usize]) -> Result<u8> {
    match decision {
        Decision::Classify(pred) => Ok(u8::from(pred != label)),
        Decision::Defer(j) => {
            check_index("expert", j, expert_preds.len())?;
            Ok(u8::from(expert_preds[j] != label))
        }
    }
}

/// `log(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(theta: &[f64]) -> f64 {
    let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + theta.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

pub fn softmax(theta: &[f64]) -> Vec<f64> {
    let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = theta.iter().map(|t| (t - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Lowest index of the maximum; `None` for an empty iterator.
pub fn argmax<I: IntoIterator<Item = f64>>(values: I) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// `-log softmax(theta)_index`.
pub fn phi_ce(theta: &[f64], index: usize) -> f64 {
    log_sum_exp(theta) - theta[index]
}

/// One-vs-all logistic base loss. Label indices (`< k`) pay
/// `-log s(θ_i) - Σ_{i'≠i} log(1 - s(θ_i'))` over all `K + J` coordinates;
/// deferral indices pay `-log s(θ_i) + log(1 - s(θ_i))`, which is negative
/// for positive scores.
pub fn phi_ova(theta: &[f64], k: usize, index: usize) -> f64 {
    let t = theta[index];
    if index >= k {
        softplus(-t) - softplus(t)
    } else {
        let rest: f64 = theta
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != index)
            .map(|(_, &s)| softplus(s))
            .sum();
        softplus(-t) + rest
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaseLoss {
    CrossEntropy,
    OvaLog,
}

impl BaseLoss {
    pub const ALL: [BaseLoss; 2] = [BaseLoss::CrossEntropy, BaseLoss::OvaLog];

    pub fn value(self, theta: &[f64], k: usize, index: usize) -> f64 {
        match self {
            BaseLoss::CrossEntropy => phi_ce(theta, index),
            BaseLoss::OvaLog => phi_ova(theta, k, index),
        }
    }

    /// `Σ_i w_i φ(θ, i)` and its gradient in θ, for nonnegative weights of
    /// length `K + J`.
    pub fn weighted_value_grad(self, theta: &[f64], k: usize, weights: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(theta.len(), weights.len(), "weights must match the score length");
        match self {
            BaseLoss::CrossEntropy => {
                let total: f64 = weights.iter().sum();
                let lse = log_sum_exp(theta);
                let value = weights
                    .iter()
                    .zip(theta)
                    .filter(|(&w, _)| w != 0.0)
                    .map(|(&w, &t)| w * (lse - t))
                    .sum();
                let grad = softmax(theta)
                    .into_iter()
                    .zip(weights)
                    .map(|(p, &w)| total * p - w)
                    .collect();
                (value, grad)
            }
            BaseLoss::OvaLog => {
                let label_total: f64 = weights[..k].iter().sum();
                let mut value = 0.0;
                let mut grad = vec![0.0; theta.len()];
                for (i, (&t, &w)) in theta.iter().zip(weights).enumerate() {
                    if i < k {
                        // own positive term plus the negative term from every other label index
                        value += w * softplus(-t) + (label_total - w) * softplus(t);
                        grad[i] = -w * sigmoid(-t) + (label_total - w) * sigmoid(t);
                    } else {
                        value += label_total * softplus(t);
                        grad[i] = label_total * sigmoid(t);
                        if w != 0.0 {
                            value += w * (softplus(-t) - softplus(t));
                            grad[i] -= w;
                        }
                    }
                }
                (value, grad)
            }
        }
    }
}

impl fmt::Display for BaseLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseLoss::CrossEntropy => "ce",
            BaseLoss::OvaLog => "ova",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    /// Every agreeing expert contributes a deferral term.
    Vanilla,
    /// Only the top-scoring expert, and only if it agrees with the label.
    Pce,
    /// The top-scoring expert among those agreeing with the label.
    Picce,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Vanilla, Family::Pce, Family::Picce];
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Vanilla => "vanilla",
            Family::Pce => "pce",
            Family::Picce => "picce",
        })
    }
}

/// A surrogate family paired with a base loss, e.g. `picce-ce`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SurrogateSpec {
    pub family: Family,
    pub base: BaseLoss,
}

impl SurrogateSpec {
    pub const fn new(family: Family, base: BaseLoss) -> Self {
        Self { family, base }
    }

    pub fn all() -> Vec<SurrogateSpec> {
        Family::ALL
            .iter()
            .flat_map(|&family| BaseLoss::ALL.iter().map(move |&base| Self { family, base }))
            .collect()
    }

    /// Deferral indices (0-based experts) whose base loss is added to the
    /// label term for this sample.
    pub fn selected_experts(&self, theta: &[f64], k: usize, label: usize, expert_preds: &[usize]) -> Vec<usize> {
        match self.family {
            Family::Vanilla => (0..expert_preds.len())
                .filter(|&j| expert_preds[j] == label)
                .collect(),
            Family::Pce => pce_choice(theta, k, label, expert_preds).into_iter().collect(),
            Family::Picce => picce_choice(theta, k, label, expert_preds).into_iter().collect(),
        }
    }

    pub fn loss(&self, theta: &[f64], k: usize, label: usize, expert_preds: &[usize]) -> f64 {
        check_shapes(theta, k, label, expert_preds);
        let mut total = self.base.value(theta, k, label);
        for j in self.selected_experts(theta, k, label, expert_preds) {
            total += self.base.value(theta, k, k + j);
        }
        total
    }

    /// Loss and gradient in θ. At argmax ties the lowest-index branch is
    /// differentiated.
    pub fn loss_grad(&self, theta: &[f64], k: usize, label: usize, expert_preds: &[usize]) -> (f64, Vec<f64>) {
        check_shapes(theta, k, label, expert_preds);
        let mut weights = vec![0.0; theta.len()];
        weights[label] = 1.0;
        for j in self.selected_experts(theta, k, label, expert_preds) {
            weights[k + j] += 1.0;
        }
        self.base.weighted_value_grad(theta, k, &weights)
    }
}

impl fmt::Display for SurrogateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.family, self.base)
    }
}

impl FromStr for SurrogateSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (fam, base) = s
            .split_once('-')
            .ok_or_else(|| Error::InvalidArgument(format!("surrogate `{s}` is not FAMILY-BASE")))?;
        let family = match fam.to_ascii_lowercase().as_str() {
            "vanilla" => Family::Vanilla,
            "pce" => Family::Pce,
            "picce" => Family::Picce,
            other => return Err(Error::InvalidArgument(format!("unknown surrogate family `{other}`"))),
        };
        let base = match base.to_ascii_lowercase().as_str() {
            "ce" => BaseLoss::CrossEntropy,
            "ova" => BaseLoss::OvaLog,
            other => return Err(Error::InvalidArgument(format!("unknown base loss `{other}`"))),
        };
        Ok(Self { family, base })
    }
}

fn check_shapes(theta: &[f64], k: usize, label: usize, expert_preds: &[usize]) {
    assert_eq!(theta.len(), k + expert_preds.len(), "score length must be K + J");
    assert!(label < k, "label {label} out of range for K = {k}");
}

/// Top-scoring expert over all experts, kept only if it agrees with `label`.
pub fn pce_choice(theta: &[f64], k: usize, label: usize, expert_preds: &[usize]) -> Option<usize> {
    let top = argmax(theta[k..].iter().copied())?;
    (expert_preds[top] == label).then_some(top)
}

/// Top-scoring expert among those agreeing with `label`.
pub fn picce_choice(theta: &[f64], k: usize, label: usize, expert_preds: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &m) in expert_preds.iter().enumerate() {
        if m != label {
            continue;
        }
        match best {
            Some(b) if theta[k + j] <= theta[k + b] => {}
            _ => best = Some(j),
        }
    }
    best
}

pub fn vanilla_surrogate(theta: &[f64], k: usize, label: usize, expert_preds: &[usize], base: BaseLoss) -> f64 {
    SurrogateSpec::new(Family::Vanilla, base).loss(theta, k, label, expert_preds)
}

pub fn pce_surrogate(theta: &[f64], k: usize, label: usize, expert_preds: &[usize], base: BaseLoss) -> f64 {
    SurrogateSpec::new(Family::Pce, base).loss(theta, k, label, expert_preds)
}

pub fn picce_surrogate(theta: &[f64], k: usize, label: usize, expert_preds: &[usize], base: BaseLoss) -> f64 {
    SurrogateSpec::new(Family::Picce, base).loss(theta, k, label, expert_preds)
}
