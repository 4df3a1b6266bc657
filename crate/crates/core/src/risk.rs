//! Closed-form conditional risks of the three surrogate families, their dummy
//! (augmented label) distributions, and a sampling oracle for the risks.
//!
//! Every conditional risk here has the shape `Σ_i w_i φ(θ, i)` over the
//! `K + J` outputs; the families differ only in the deferral weights:
//!
//! * vanilla: `Acc_j(x)` for every expert;
//! * PCE: `Acc_ĵ(x)` for the top-scoring expert `ĵ` only;
//! * PiCCE: `Pr(experts ranked above are wrong, this one is right)` along the
//!   descending score order, whose total is `Pr(some expert correct)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{ConditionalPoint, PROB_TOLERANCE};
use crate::error::{Error, Result};
use crate::losses::{argmax, BaseLoss, Family, SurrogateSpec};

/// Probability vector over the `K` labels followed by the `J` deferral options.
#[derive(Clone, Debug, PartialEq)]
pub struct DummyDistribution {
    probs: Vec<f64>,
    num_classes: usize,
}

impl DummyDistribution {
    pub fn new(probs: Vec<f64>, num_classes: usize) -> Result<Self> {
        if num_classes > probs.len() {
            return Err(Error::Dimension {
                what: "dummy label part",
                expected: probs.len(),
                got: num_classes,
            });
        }
        if probs.iter().any(|p| !(0.0..=1.0 + PROB_TOLERANCE).contains(p)) {
            return Err(Error::InvalidProbability("dummy entry outside [0, 1]".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(Error::InvalidProbability(format!("dummy distribution sums to {total}")));
        }
        Ok(Self { probs, num_classes })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn label_part(&self) -> &[f64] {
        &self.probs[..self.num_classes]
    }

    pub fn deferral_part(&self) -> &[f64] {
        &self.probs[self.num_classes..]
    }
}

/// Expert indices sorted by descending deferral score; stable, so ties keep
/// the lower index first.
pub fn expert_order(theta: &[f64], k: usize) -> Vec<usize> {
    let experts = &theta[k..];
    let mut order: Vec<usize> = (0..experts.len()).collect();
    order.sort_by(|&a, &b| experts[b].total_cmp(&experts[a]));
    order
}

fn check_theta(point: &ConditionalPoint, theta: &[f64]) -> Result<()> {
    if theta.len() != point.score_dim() {
        return Err(Error::Dimension {
            what: "score vector",
            expected: point.score_dim(),
            got: theta.len(),
        });
    }
    if let Some(i) = theta.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok(())
}

/// Deferral weights (length `J`, indexed by expert) of a family at `theta`.
pub fn deferral_weights(point: &ConditionalPoint, theta: &[f64], family: Family) -> Result<Vec<f64>> {
    check_theta(point, theta)?;
    let k = point.num_classes();
    Ok(match family {
        Family::Vanilla => point.expert_accuracies(),
        Family::Pce => {
            let top = argmax(theta[k..].iter().copied()).expect("at least one expert");
            let mut w = vec![0.0; point.num_experts()];
            w[top] = point.expert_accuracy(top)?;
            w
        }
        Family::Picce => picce_weights_for_order(point, &expert_order(theta, k)),
    })
}

/// PiCCE deferral weights when experts are ranked by `order`.
pub(crate) fn picce_weights_for_order(point: &ConditionalPoint, order: &[usize]) -> Vec<f64> {
    let by_position = point.prefix_weights_unchecked(order);
    let mut w = vec![0.0; order.len()];
    for (&j, a) in order.iter().zip(by_position) {
        w[j] = a;
    }
    w
}

/// Full `K + J` weight vector: posterior on the labels, family weights on
/// the deferral options.
pub fn risk_weights(point: &ConditionalPoint, theta: &[f64], family: Family) -> Result<Vec<f64>> {
    let mut w = point.posterior().to_vec();
    w.extend(deferral_weights(point, theta, family)?);
    Ok(w)
}

pub fn conditional_risk(point: &ConditionalPoint, theta: &[f64], spec: SurrogateSpec) -> Result<f64> {
    let w = risk_weights(point, theta, spec.family)?;
    Ok(spec.base.weighted_value_grad(theta, point.num_classes(), &w).0)
}

pub fn conditional_risk_vanilla(point: &ConditionalPoint, theta: &[f64], base: BaseLoss) -> Result<f64> {
    conditional_risk(point, theta, SurrogateSpec::new(Family::Vanilla, base))
}

pub fn conditional_risk_pce(point: &ConditionalPoint, theta: &[f64], base: BaseLoss) -> Result<f64> {
    conditional_risk(point, theta, SurrogateSpec::new(Family::Pce, base))
}

pub fn conditional_risk_picce(point: &ConditionalPoint, theta: &[f64], base: BaseLoss) -> Result<f64> {
    conditional_risk(point, theta, SurrogateSpec::new(Family::Picce, base))
}

/// Normalizes `[posterior, expert_weights]` by `1 + Σ expert_weights`.
/// Accepts an empty expert block.
pub fn dummy_from_weights(posterior: &[f64], expert_weights: &[f64]) -> Result<DummyDistribution> {
    let norm = 1.0 + expert_weights.iter().sum::<f64>();
    let probs = posterior
        .iter()
        .chain(expert_weights)
        .map(|w| w / norm)
        .collect();
    DummyDistribution::new(probs, posterior.len())
}

pub fn dummy_vanilla(point: &ConditionalPoint) -> DummyDistribution {
    dummy_from_weights(point.posterior(), &point.expert_accuracies())
        .expect("accuracies of a validated point normalize")
}

/// The PCE dummy exactly as defined (normalizer `1 + Acc_ĵ`, every expert
/// keeps its own accuracy, so it does not sum to one in general) plus its
/// normalized companion.
#[derive(Clone, Debug, PartialEq)]
pub struct PceDummy {
    pub unnormalized: Vec<f64>,
    pub normalized: DummyDistribution,
}

pub fn dummy_pce(point: &ConditionalPoint, theta: &[f64]) -> Result<PceDummy> {
    check_theta(point, theta)?;
    let k = point.num_classes();
    let acc = point.expert_accuracies();
    let top = argmax(theta[k..].iter().copied()).expect("at least one expert");
    let norm = 1.0 + acc[top];
    let unnormalized: Vec<f64> = point
        .posterior()
        .iter()
        .chain(&acc)
        .map(|w| w / norm)
        .collect();
    let total: f64 = unnormalized.iter().sum();
    let normalized = DummyDistribution::new(unnormalized.iter().map(|p| p / total).collect(), k)?;
    Ok(PceDummy {
        unnormalized,
        normalized,
    })
}

pub fn dummy_picce(point: &ConditionalPoint, theta: &[f64]) -> Result<DummyDistribution> {
    let w = deferral_weights(point, theta, Family::Picce)?;
    dummy_from_weights(point.posterior(), &w)
}

/// Top-1 minus top-2 mass over the label part.
pub fn flattening_margin(dummy: &DummyDistribution, k: usize) -> Result<f64> {
    if k < 2 || k > dummy.probs().len() {
        return Err(Error::IndexOutOfRange {
            what: "label count",
            index: k,
            limit: dummy.probs().len(),
        });
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in &dummy.probs()[..k] {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    Ok(first - second)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub samples: usize,
}

impl MonteCarloEstimate {
    /// Whether `value` lies within `z` standard errors of the estimate, with
    /// a small absolute floor for rounding when the standard error is zero.
    pub fn covers(&self, value: f64, z: f64) -> bool {
        (value - self.estimate).abs() <= z * self.standard_error + 1e-12 * value.abs().max(1.0)
    }
}

/// Averages the surrogate over `(y, m)` drawn from the point's model.
pub fn monte_carlo_risk(
    point: &ConditionalPoint,
    theta: &[f64],
    spec: SurrogateSpec,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    check_theta(point, theta)?;
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one Monte-Carlo sample".into()));
    }
    let k = point.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for n in 1..=samples {
        let (y, m) = point.sample(&mut rng);
        let loss = spec.loss(theta, k, y, &m);
        let delta = loss - mean;
        mean += delta / n as f64;
        m2 += delta * (loss - mean);
    }
    let variance = if samples > 1 { m2 / (samples - 1) as f64 } else { 0.0 };
    Ok(MonteCarloEstimate {
        estimate: mean,
        standard_error: (variance / samples as f64).sqrt(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ExpertJointModel;
    use crate::losses::phi_ce;

    const CE: BaseLoss = BaseLoss::CrossEntropy;

    fn example2() -> ConditionalPoint {
        let acc = vec![
            vec![0.9, 0.6, 0.6],
            vec![0.4, 0.9, 0.9],
            vec![0.4, 0.9, 0.9],
        ];
        ConditionalPoint::new(vec![0.8, 0.1, 0.1], ExpertJointModel::independent(acc).unwrap()).unwrap()
    }

    fn two_experts() -> ConditionalPoint {
        let acc = vec![vec![0.8, 0.6], vec![0.8, 0.6]];
        ConditionalPoint::new(vec![0.5, 0.5], ExpertJointModel::independent(acc).unwrap()).unwrap()
    }

    fn identical_experts(j: usize, a: f64) -> ConditionalPoint {
        let acc = vec![vec![a; j]; 3];
        ConditionalPoint::new(vec![0.6, 0.3, 0.1], ExpertJointModel::independent(acc).unwrap()).unwrap()
    }

    #[test]
    fn vanilla_risk_cases() {
        let acc = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]];
        let p = ConditionalPoint::new(vec![0.0, 1.0, 0.0], ExpertJointModel::independent(acc).unwrap()).unwrap();
        let theta = [0.3, -1.0, 0.2, 0.5, -0.5];
        let r = conditional_risk_vanilla(&p, &theta, CE).unwrap();
        assert!((r - phi_ce(&theta, 1)).abs() < 1e-14);

        let r = conditional_risk_vanilla(&example2(), &[0.0; 6], CE).unwrap();
        assert!((r - (1.0 + 0.80 + 0.66 + 0.66) * 6f64.ln()).abs() < 1e-12);
        assert!(conditional_risk_vanilla(&example2(), &[0.0; 5], CE).is_err());
    }

    #[test]
    fn picce_weights_follow_score_order() {
        let p = two_experts();
        let w = deferral_weights(&p, &[0.0, 0.0, 1.0, 0.0], Family::Picce).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15 && (w[1] - 0.12).abs() < 1e-12);
        let w = deferral_weights(&p, &[0.0, 0.0, 0.0, 1.0], Family::Picce).unwrap();
        assert!((w[1] - 0.6).abs() < 1e-15 && (w[0] - 0.32).abs() < 1e-12);
    }

    #[test]
    fn pce_tie_uses_lowest_index() {
        let p = two_experts();
        let w = deferral_weights(&p, &[0.0, 0.0, 0.5, 0.5], Family::Pce).unwrap();
        assert_eq!(w, vec![0.8, 0.0]);
    }

    #[test]
    fn single_expert_risks_coincide() {
        let acc = vec![vec![0.7], vec![0.4], vec![0.9]];
        let p = ConditionalPoint::new(vec![0.2, 0.5, 0.3], ExpertJointModel::independent(acc).unwrap()).unwrap();
        let theta = [0.1, -0.4, 0.3, 0.8];
        for base in BaseLoss::ALL {
            let v = conditional_risk_vanilla(&p, &theta, base).unwrap();
            assert_eq!(v, conditional_risk_pce(&p, &theta, base).unwrap());
            assert_eq!(v, conditional_risk_picce(&p, &theta, base).unwrap());
        }
        assert_eq!(dummy_vanilla(&p), dummy_picce(&p, &theta).unwrap());
        assert_eq!(dummy_vanilla(&p), dummy_pce(&p, &theta).unwrap().normalized);
    }

    #[test]
    fn dummy_values() {
        let p = example2();
        let theta = [0.0, 0.0, 0.0, 1.0, 0.5, 0.2];
        let v = dummy_vanilla(&p);
        assert!((v.label_part()[0] - 0.8 / 3.12).abs() < 1e-12);
        let pce = dummy_pce(&p, &theta).unwrap();
        assert!((pce.unnormalized[0] - 0.8 / 1.8).abs() < 1e-12);
        let pi = dummy_picce(&p, &theta).unwrap();
        assert!((pi.label_part()[0] - 0.8 / 1.986).abs() < 1e-12);
        let other = dummy_picce(&p, &[0.0, 0.0, 0.0, -1.0, 0.5, 2.0]).unwrap();
        assert!((other.label_part()[0] - pi.label_part()[0]).abs() < 1e-14);

        let no_experts = dummy_from_weights(&[0.7, 0.3], &[]).unwrap();
        assert_eq!(no_experts.probs(), &[0.7, 0.3]);
    }

    #[test]
    fn pce_label_part_ignores_non_top_experts() {
        let two = two_experts();
        let acc = vec![vec![0.8, 0.6, 0.3], vec![0.8, 0.6, 0.3]];
        let three =
            ConditionalPoint::new(vec![0.5, 0.5], ExpertJointModel::independent(acc).unwrap()).unwrap();
        let a = dummy_pce(&two, &[0.0, 0.0, 1.0, 0.0]).unwrap();
        let b = dummy_pce(&three, &[0.0, 0.0, 1.0, 0.0, -1.0]).unwrap();
        assert_eq!(a.unnormalized[..2], b.unnormalized[..2]);
    }

    #[test]
    fn flattening_with_identical_experts() {
        let eta = [0.6, 0.3, 0.1];
        let a = 0.7;
        let mut prev = f64::INFINITY;
        let mut picce_margin = None;
        for j in 1..=10 {
            let p = identical_experts(j, a);
            let theta = vec![0.0; 3 + j];
            let v = dummy_vanilla(&p);
            let top = v.label_part()[0];
            assert!((top - eta[0] / (1.0 + j as f64 * a)).abs() < 1e-12);
            assert!(top < prev);
            prev = top;

            let vm = flattening_margin(&v, 3).unwrap();
            assert!((vm - 0.3 / (1.0 + j as f64 * a)).abs() < 1e-12);
            let pm = flattening_margin(&dummy_picce(&p, &theta).unwrap(), 3).unwrap();
            assert!(vm <= pm + 1e-15);
            let union = 1.0 - (1.0 - a).powi(j as i32);
            assert!((pm - 0.3 / (1.0 + union)).abs() < 1e-12);
            // bounded below by the all-correct limit
            assert!(pm >= 0.3 / 2.0);
            if j == 1 {
                picce_margin = Some(pm);
            }
        }
        assert!(picce_margin.unwrap() > 0.15);
        let uniform = DummyDistribution::new(vec![0.25; 4], 4).unwrap();
        assert_eq!(flattening_margin(&uniform, 4).unwrap(), 0.0);
        assert!(flattening_margin(&uniform, 5).is_err());
    }

    #[test]
    fn monte_carlo_degenerate_point_is_exact() {
        let acc = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]];
        let p = ConditionalPoint::new(vec![0.0, 0.0, 1.0], ExpertJointModel::independent(acc).unwrap()).unwrap();
        let theta = [0.2, -0.3, 0.4, 0.9, 0.1];
        for spec in SurrogateSpec::all() {
            let mc = monte_carlo_risk(&p, &theta, spec, 1000, 3).unwrap();
            assert_eq!(mc.standard_error, 0.0);
            let exact = conditional_risk(&p, &theta, spec).unwrap();
            assert!(mc.covers(exact, 0.0), "{spec}: {} vs {exact}", mc.estimate);
        }
    }

    #[test]
    fn monte_carlo_is_seeded() {
        let p = example2();
        let theta = [0.1, 0.2, -0.3, 0.4, 0.0, -0.1];
        let spec = SurrogateSpec::new(Family::Picce, CE);
        let a = monte_carlo_risk(&p, &theta, spec, 2000, 11).unwrap();
        let b = monte_carlo_risk(&p, &theta, spec, 2000, 11).unwrap();
        assert_eq!(a, b);
        assert!(monte_carlo_risk(&p, &theta, spec, 0, 11).is_err());
    }

    #[test]
    fn monte_carlo_matches_two_expert_picce() {
        let p = two_experts();
        let theta = [0.2, -0.1, 0.7, 0.3];
        for spec in SurrogateSpec::all() {
            let mc = monte_carlo_risk(&p, &theta, spec, 100_000, 5).unwrap();
            let exact = conditional_risk(&p, &theta, spec).unwrap();
            assert!(mc.covers(exact, 3.0), "{spec}: {exact} vs {:?}", mc);
        }
    }
}
