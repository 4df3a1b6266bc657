//! Bayes-optimal deferral, the score-to-decision link, the information
//! advantage condition on the best expert, and end-to-end recovery checks of
//! the PiCCE minimizer against those targets.

use rayon::prelude::*;

use crate::domain::{ConditionalPoint, Decision};
use crate::error::{Error, Result};
use crate::losses::{argmax, sigmoid, softmax, BaseLoss};
use crate::optim::{minimize_picce_global, OptimizerConfig};

/// Accuracy/posterior comparisons closer than this count as ties. Exact
/// decimal inputs such as `0.8 * 0.9 + 0.1 * 0.4 + 0.1 * 0.4` land a few
/// ulps away from `0.8`.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Expert with the highest pointwise accuracy (lowest index on ties).
pub fn best_expert(point: &ConditionalPoint) -> usize {
    argmax(point.expert_accuracies()).expect("at least one expert")
}

/// Defer to the most accurate expert when its accuracy reaches the top
/// posterior, otherwise predict the most probable label.
pub fn bayes_optimal(point: &ConditionalPoint) -> Decision {
    let acc = point.expert_accuracies();
    let j_star = argmax(acc.iter().copied()).expect("at least one expert");
    let y_star = argmax(point.posterior().iter().copied()).expect("at least two classes");
    if acc[j_star] >= point.posterior()[y_star] - TIE_TOLERANCE {
        Decision::Defer(j_star)
    } else {
        Decision::Classify(y_star)
    }
}

/// Global argmax of the scores; the first `k` coordinates are labels.
pub fn prediction_link(theta: &[f64], k: usize) -> Result<Decision> {
    if k == 0 || k > theta.len() {
        return Err(Error::Dimension {
            what: "label count",
            expected: theta.len(),
            got: k,
        });
    }
    let i = argmax(theta.iter().copied()).expect("nonempty scores");
    Ok(if i < k { Decision::Classify(i) } else { Decision::Defer(i - k) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Condition1Violation {
    pub expert: usize,
    pub subset: Vec<usize>,
    /// `Pr(C_{M' ∪ {j*}}) - Pr(C_{M' ∪ {j}})`, nonpositive for a violation.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Condition1Report {
    pub holds: bool,
    pub best_expert: usize,
    pub unique_best: bool,
    pub violations: Vec<Condition1Violation>,
    /// Smallest gap over every `(j, M')` pair; `+inf` for a single expert.
    pub min_gap: f64,
}

/// Largest `J` accepted by [`check_condition1`].
pub const MAX_CONDITION1_EXPERTS: usize = 20;

/// `Pr(some expert in M' ∪ {best} correct) - Pr(some expert in M' ∪ {other} correct)`.
pub fn union_gap(point: &ConditionalPoint, best: usize, other: usize, subset: &[usize]) -> Result<f64> {
    let mut with_best = subset.to_vec();
    with_best.push(best);
    let mut with_other = subset.to_vec();
    with_other.push(other);
    Ok(point.union_correct_prob(&with_best)? - point.union_correct_prob(&with_other)?)
}

/// Checks that the most accurate expert is unique and that adding it to any
/// set of other experts raises the chance that someone is right strictly
/// more than adding any other expert would.
pub fn check_condition1(point: &ConditionalPoint) -> Result<Condition1Report> {
    let j = point.num_experts();
    if j > MAX_CONDITION1_EXPERTS {
        return Err(Error::TooManyExperts {
            got: j,
            limit: MAX_CONDITION1_EXPERTS,
        });
    }
    let acc = point.expert_accuracies();
    let best = argmax(acc.iter().copied()).expect("at least one expert");
    let unique_best = acc
        .iter()
        .enumerate()
        .all(|(e, &a)| e == best || a < acc[best]);

    let mut violations = Vec::new();
    let mut min_gap = f64::INFINITY;
    let mut members = vec![false; j];
    for other in (0..j).filter(|&e| e != best) {
        let rest: Vec<usize> = (0..j).filter(|&e| e != best && e != other).collect();
        for mask in 0..1u64 << rest.len() {
            members.iter_mut().for_each(|m| *m = false);
            for (bit, &e) in rest.iter().enumerate() {
                members[e] = mask >> bit & 1 == 1;
            }
            members[best] = true;
            let with_best = point.union_of_members(&members);
            members[best] = false;
            members[other] = true;
            let with_other = point.union_of_members(&members);
            members[other] = false;
            let gap = with_best - with_other;
            min_gap = min_gap.min(gap);
            if gap <= 0.0 {
                violations.push(Condition1Violation {
                    expert: other,
                    subset: rest
                        .iter()
                        .enumerate()
                        .filter(|(bit, _)| mask >> bit & 1 == 1)
                        .map(|(_, &e)| e)
                        .collect(),
                    gap,
                });
            }
        }
    }
    Ok(Condition1Report {
        holds: unique_best && violations.is_empty(),
        best_expert: best,
        unique_best,
        violations,
        min_gap,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub base: BaseLoss,
    pub bayes_decision: Decision,
    pub learned_decision: Decision,
    pub decisions_match: bool,
    /// CE: `max_y |p_y / (1 - Σ_j u_j) - η_y|`; OvA: `max_y |s(θ_y) - η_y|`.
    pub label_part_recovery_error: f64,
    /// CE: `max_y |p_y - η_y (1 - V/(1+V))|`; OvA: same as the label error.
    pub label_mass_error: f64,
    /// CE: `|Σ_j u_j - V/(1+V)|`; OvA: not defined (`NaN`).
    pub deferral_mass_error: f64,
    /// CE: `|u_{j*} / (1 - Σ_j u_j) - Acc_{j*}|`; OvA: `|s(θ_{K+j*}) - Acc_{j*}|`.
    pub expert_accuracy_recovery_error: f64,
    pub argmax_expert_match: bool,
    pub label_argmax_match: bool,
    pub condition1_holds: bool,
    pub converged: bool,
    pub theta: Vec<f64>,
}

/// Minimizes the PiCCE risk at `point` and compares the minimizer with the
/// Bayes rule and with the class/expert probabilities it should encode.
pub fn verify_consistency(
    point: &ConditionalPoint,
    base: BaseLoss,
    config: &OptimizerConfig,
    seed: u64,
) -> Result<ConsistencyReport> {
    let k = point.num_classes();
    let eta = point.posterior();
    let condition = check_condition1(point)?;
    let j_star = condition.best_expert;
    let acc_star = point.expert_accuracies()[j_star];
    let v = point.any_correct_prob();
    let deferral_mass = v / (1.0 + v);

    let global = minimize_picce_global(point, base, config, seed)?;
    let converged = global.minimum.status.converged();
    let theta = global.minimum.theta;
    let learned = prediction_link(&theta, k)?;
    let bayes = bayes_optimal(point);

    let (label_err, mass_err, defer_err, acc_err) = match base {
        BaseLoss::CrossEntropy => {
            let p = softmax(&theta);
            let u_total: f64 = p[k..].iter().sum();
            let label_err = max_abs(p[..k].iter().zip(eta).map(|(q, e)| q / (1.0 - u_total) - e));
            let mass_err = max_abs(p[..k].iter().zip(eta).map(|(q, e)| q - e * (1.0 - deferral_mass)));
            let acc_err = (p[k + j_star] / (1.0 - u_total) - acc_star).abs();
            (label_err, mass_err, (u_total - deferral_mass).abs(), acc_err)
        }
        BaseLoss::OvaLog => {
            let label_err = max_abs(theta[..k].iter().zip(eta).map(|(&t, e)| sigmoid(t) - e));
            let acc_err = (sigmoid(theta[k + j_star]) - acc_star).abs();
            (label_err, label_err, f64::NAN, acc_err)
        }
    };
    let expert_argmax = argmax(theta[k..].iter().copied()).expect("at least one expert");
    let label_argmax = argmax(theta[..k].iter().copied()).expect("labels");
    let eta_argmax = argmax(eta.iter().copied()).expect("labels");

    Ok(ConsistencyReport {
        base,
        bayes_decision: bayes,
        learned_decision: learned,
        decisions_match: bayes == learned,
        label_part_recovery_error: label_err,
        label_mass_error: mass_err,
        deferral_mass_error: defer_err,
        expert_accuracy_recovery_error: acc_err,
        argmax_expert_match: expert_argmax == j_star,
        label_argmax_match: label_argmax == eta_argmax,
        condition1_holds: condition.holds,
        converged,
        theta,
    })
}

/// [`verify_consistency`] over a batch, seeded by `seed + index`, in input order.
pub fn verify_consistency_batch(
    points: &[ConditionalPoint],
    base: BaseLoss,
    config: &OptimizerConfig,
    seed: u64,
) -> Vec<Result<ConsistencyReport>> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| verify_consistency(p, base, config, seed.wrapping_add(i as u64)))
        .collect()
}

fn max_abs<I: Iterator<Item = f64>>(values: I) -> f64 {
    values.map(f64::abs).fold(0.0, f64::max)
}

/// Which closed form describes the CE minimizer's mass on the best expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopExpertMassForm {
    /// `Acc_{j*} · V/(1+V)`
    AccuracyTimesDeferralMass,
    /// `Acc_{j*} · (1 - V/(1+V)) = Acc_{j*} / (1 + V)`
    AccuracyTimesLabelMass,
}

impl std::fmt::Display for TopExpertMassForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TopExpertMassForm::AccuracyTimesDeferralMass => "acc_times_deferral_mass",
            TopExpertMassForm::AccuracyTimesLabelMass => "acc_times_label_mass",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopExpertMassResolution {
    /// `softmax(θ*)_{K+j*}` at the numeric PiCCE-CE minimizer.
    pub top_expert_mass: f64,
    pub deferral_mass_candidate: f64,
    pub label_mass_candidate: f64,
    /// Candidate within [`Self::MATCH_TOLERANCE`], if exactly one is.
    pub winner: Option<TopExpertMassForm>,
    /// Neither candidate within ten times the tolerance.
    pub inconsistent: bool,
}

impl TopExpertMassResolution {
    pub const MATCH_TOLERANCE: f64 = 1e-3;

    pub fn error_of(&self, form: TopExpertMassForm) -> f64 {
        let candidate = match form {
            TopExpertMassForm::AccuracyTimesDeferralMass => self.deferral_mass_candidate,
            TopExpertMassForm::AccuracyTimesLabelMass => self.label_mass_candidate,
        };
        (self.top_expert_mass - candidate).abs()
    }
}

/// Numerically settles which of the two candidate closed forms gives the
/// PiCCE-CE minimizer's softmax mass on the best expert.
pub fn resolve_top_expert_mass_form(
    point: &ConditionalPoint,
    config: &OptimizerConfig,
    seed: u64,
) -> Result<TopExpertMassResolution> {
    let k = point.num_classes();
    let j_star = best_expert(point);
    let acc = point.expert_accuracies()[j_star];
    let v = point.any_correct_prob();
    let deferral_mass = v / (1.0 + v);
    let global = minimize_picce_global(point, BaseLoss::CrossEntropy, config, seed)?;
    let mass = softmax(&global.minimum.theta)[k + j_star];
    let mut res = TopExpertMassResolution {
        top_expert_mass: mass,
        deferral_mass_candidate: acc * deferral_mass,
        label_mass_candidate: acc * (1.0 - deferral_mass),
        winner: None,
        inconsistent: false,
    };
    let tol = TopExpertMassResolution::MATCH_TOLERANCE;
    let a = res.error_of(TopExpertMassForm::AccuracyTimesDeferralMass);
    let b = res.error_of(TopExpertMassForm::AccuracyTimesLabelMass);
    res.winner = match (a <= tol, b <= tol) {
        (true, false) => Some(TopExpertMassForm::AccuracyTimesDeferralMass),
        (false, true) => Some(TopExpertMassForm::AccuracyTimesLabelMass),
        _ => None,
    };
    res.inconsistent = a > 10.0 * tol && b > 10.0 * tol;
    Ok(res)
}
