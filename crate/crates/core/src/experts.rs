//! Synthetic expert populations: class-conditional accuracy tables built from
//! domain-specialist patterns, and sampling of expert predictions.
//!
//! A *family* is the block of classes `0..family_size` the experts know
//! something about; classes outside it are guessed uniformly (accuracy `1/K`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{ConditionalPoint, ExpertJointModel, WrongLabelProfile};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum ExpertPattern {
    /// Disjoint domains of `domain_size` classes laid out from class 0.
    DomainExpert {
        in_domain: f64,
        in_family: f64,
        domain_size: usize,
        family_size: Option<usize>,
    },
    /// Consecutive domains overlapping by exactly `overlap` classes whose
    /// union is the whole family; domain size follows from `J`.
    OverlappedDomain {
        in_domain: f64,
        in_family: f64,
        overlap: usize,
        family_size: Option<usize>,
    },
    /// Disjoint domains with in-domain accuracy rising linearly from
    /// `in_domain_low` (first expert) to `in_domain_high` (last expert).
    VaryingAccuracy {
        in_domain_low: f64,
        in_domain_high: f64,
        in_family: f64,
        domain_size: usize,
        family_size: Option<usize>,
    },
    /// Expert 0 is at least as accurate as every other expert on every
    /// class, strictly so on each class; accuracies drawn from the seed.
    Dominant { accuracy_low: f64, accuracy_high: f64 },
    /// Seeded dominant-expert instance with conditionally independent peers.
    AppendixExample1,
    /// The fixed three-class, three-expert table where expert 0 dominates
    /// only on the majority class.
    AppendixExample2,
    /// Arbitrary `[expert][class]` accuracies.
    Custom { accuracy: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPopulation {
    /// `[expert][class]` = Pr(M_j = Y | Y = class).
    pub accuracy: Vec<Vec<f64>>,
    /// Classes each expert specializes in (empty when not applicable).
    pub domains: Vec<Vec<usize>>,
    pub wrong_labels: WrongLabelProfile,
}

fn check_accuracy(what: &str, a: f64) -> Result<()> {
    if (0.0..=1.0).contains(&a) {
        Ok(())
    } else {
        Err(Error::InfeasiblePattern(format!("{what} = {a} not in [0, 1]")))
    }
}

fn family(k: usize, family_size: Option<usize>) -> Result<usize> {
    let f = family_size.unwrap_or(k);
    if f == 0 || f > k {
        return Err(Error::InfeasiblePattern(format!("family size {f} not in 1..={k}")));
    }
    Ok(f)
}

fn disjoint_domains(j: usize, domain_size: usize, family_size: usize) -> Result<Vec<Vec<usize>>> {
    if domain_size == 0 || j * domain_size > family_size {
        return Err(Error::InfeasiblePattern(format!(
            "{j} disjoint domains of {domain_size} classes do not fit in a family of {family_size}"
        )));
    }
    Ok((0..j)
        .map(|e| (e * domain_size..(e + 1) * domain_size).collect())
        .collect())
}

fn overlapped_domains(j: usize, overlap: usize, family_size: usize) -> Result<Vec<Vec<usize>>> {
    if j == 1 {
        return Ok(vec![(0..family_size).collect()]);
    }
    // (J - 1) (d - L) + d = F  =>  d - L = (F - L) / J
    if overlap >= family_size || !(family_size - overlap).is_multiple_of(j) {
        return Err(Error::InfeasiblePattern(format!(
            "{j} domains overlapping by {overlap} cannot exactly tile a family of {family_size}"
        )));
    }
    let stride = (family_size - overlap) / j;
    let size = stride + overlap;
    Ok((0..j).map(|e| (e * stride..e * stride + size).collect()).collect())
}

fn domain_rows(
    k: usize,
    family_size: usize,
    domains: &[Vec<usize>],
    in_domain: &[f64],
    in_family: f64,
) -> Vec<Vec<f64>> {
    domains
        .iter()
        .zip(in_domain)
        .map(|(dom, &a_in)| {
            (0..k)
                .map(|c| {
                    if dom.contains(&c) {
                        a_in
                    } else if c < family_size {
                        in_family
                    } else {
                        1.0 / k as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// Builds the accuracy table of `j` experts over `k` classes.
pub fn build_expert_population(pattern: &ExpertPattern, j: usize, k: usize, seed: u64) -> Result<ExpertPopulation> {
    if j == 0 || k < 2 {
        return Err(Error::InfeasiblePattern(format!("need J >= 1 and K >= 2, got J = {j}, K = {k}")));
    }
    let (accuracy, domains) = match pattern {
        ExpertPattern::DomainExpert {
            in_domain,
            in_family,
            domain_size,
            family_size,
        } => {
            check_accuracy("in-domain accuracy", *in_domain)?;
            check_accuracy("in-family accuracy", *in_family)?;
            let f = family(k, *family_size)?;
            let domains = disjoint_domains(j, *domain_size, f)?;
            (domain_rows(k, f, &domains, &vec![*in_domain; j], *in_family), domains)
        }
        ExpertPattern::OverlappedDomain {
            in_domain,
            in_family,
            overlap,
            family_size,
        } => {
            check_accuracy("in-domain accuracy", *in_domain)?;
            check_accuracy("in-family accuracy", *in_family)?;
            let f = family(k, *family_size)?;
            let domains = overlapped_domains(j, *overlap, f)?;
            (domain_rows(k, f, &domains, &vec![*in_domain; j], *in_family), domains)
        }
        ExpertPattern::VaryingAccuracy {
            in_domain_low,
            in_domain_high,
            in_family,
            domain_size,
            family_size,
        } => {
            check_accuracy("in-domain accuracy", *in_domain_low)?;
            check_accuracy("in-domain accuracy", *in_domain_high)?;
            check_accuracy("in-family accuracy", *in_family)?;
            let f = family(k, *family_size)?;
            let domains = disjoint_domains(j, *domain_size, f)?;
            let in_domain: Vec<f64> = (0..j)
                .map(|e| {
                    if j == 1 {
                        *in_domain_high
                    } else {
                        in_domain_low + (in_domain_high - in_domain_low) * e as f64 / (j - 1) as f64
                    }
                })
                .collect();
            (domain_rows(k, f, &domains, &in_domain, *in_family), domains)
        }
        ExpertPattern::Dominant {
            accuracy_low,
            accuracy_high,
        } => {
            check_accuracy("accuracy bound", *accuracy_low)?;
            check_accuracy("accuracy bound", *accuracy_high)?;
            if accuracy_low >= accuracy_high {
                return Err(Error::InfeasiblePattern("dominant pattern needs low < high".into()));
            }
            (dominant_rows(j, k, *accuracy_low, *accuracy_high, seed), vec![Vec::new(); j])
        }
        ExpertPattern::AppendixExample1 => (dominant_rows(j, k, 0.05, 0.95, seed), vec![Vec::new(); j]),
        ExpertPattern::AppendixExample2 => {
            if j != 3 || k != 3 {
                return Err(Error::InfeasiblePattern(format!(
                    "the fixed example table has J = 3, K = 3 (got J = {j}, K = {k})"
                )));
            }
            let accuracy = vec![vec![0.9, 0.4, 0.4], vec![0.6, 0.9, 0.9], vec![0.6, 0.9, 0.9]];
            (accuracy, vec![vec![0], vec![1, 2], vec![1, 2]])
        }
        ExpertPattern::Custom { accuracy } => {
            if accuracy.len() != j || accuracy.iter().any(|r| r.len() != k) {
                return Err(Error::InfeasiblePattern(format!("custom table must be {j} x {k}")));
            }
            for &a in accuracy.iter().flatten() {
                check_accuracy("custom accuracy", a)?;
            }
            (accuracy.clone(), vec![Vec::new(); j])
        }
    };
    Ok(ExpertPopulation {
        accuracy,
        domains,
        wrong_labels: WrongLabelProfile::uniform(),
    })
}

fn dominant_rows(j: usize, k: usize, low: f64, high: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top: Vec<f64> = (0..k).map(|_| rng.random_range(low..high)).collect();
    let mut rows = vec![top.clone()];
    for _ in 1..j {
        // strictly below the dominant expert on every class
        rows.push(top.iter().map(|&t| low + (t - low) * rng.random_range(0.0..1.0)).collect());
    }
    rows
}

impl ExpertPopulation {
    pub fn num_experts(&self) -> usize {
        self.accuracy.len()
    }

    pub fn num_classes(&self) -> usize {
        self.accuracy.first().map_or(0, Vec::len)
    }

    /// Conditionally independent expert model (`[class][expert]` layout).
    pub fn to_expert_model(&self) -> Result<ExpertJointModel> {
        let k = self.num_classes();
        let transposed: Vec<Vec<f64>> = (0..k)
            .map(|c| self.accuracy.iter().map(|row| row[c]).collect())
            .collect();
        ExpertJointModel::independent(transposed)?.with_wrong_labels(self.wrong_labels.clone())
    }

    pub fn to_point(&self, posterior: Vec<f64>) -> Result<ConditionalPoint> {
        ConditionalPoint::new(posterior, self.to_expert_model()?)
    }

    /// Pr(M_j = Y | X = x) for every expert given the posterior at `x`.
    pub fn accuracies_at(&self, posterior: &[f64]) -> Vec<f64> {
        self.accuracy
            .iter()
            .map(|row| row.iter().zip(posterior).map(|(a, e)| a * e).sum())
            .collect()
    }

    /// Each expert independently predicts `label` with its accuracy on that
    /// class, otherwise a wrong label from its wrong-label profile.
    pub fn sample_expert_labels<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> Vec<usize> {
        let k = self.num_classes();
        self.accuracy
            .iter()
            .enumerate()
            .map(|(j, row)| {
                if rng.random::<f64>() < row[label] {
                    label
                } else {
                    self.wrong_labels.sample(j, label, k, rng)
                }
            })
            .collect()
    }
}

/// Best pointwise accuracy within expert subsets `inner ⊆ outer`, per point.
pub fn aggregate_best_in_set(
    points: &[ConditionalPoint],
    inner: &[usize],
    outer: &[usize],
) -> Result<Vec<(f64, f64)>> {
    if let Some(&e) = inner.iter().find(|e| !outer.contains(e)) {
        return Err(Error::InvalidArgument(format!("expert {e} is in the inner set but not the outer")));
    }
    points
        .iter()
        .map(|p| {
            let best = |set: &[usize]| -> Result<f64> {
                set.iter()
                    .map(|&j| p.expert_accuracy(j))
                    .try_fold(f64::NEG_INFINITY, |acc, a| Ok(acc.max(a?)))
            };
            let (b1, b2) = (best(inner)?, best(outer)?);
            debug_assert!(b2 >= b1);
            Ok((b1, b2))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain(a_in: f64, a_mid: f64, d: usize, f: Option<usize>) -> ExpertPattern {
        ExpertPattern::DomainExpert {
            in_domain: a_in,
            in_family: a_mid,
            domain_size: d,
            family_size: f,
        }
    }

    #[test]
    fn example2_table() {
        let pop = build_expert_population(&ExpertPattern::AppendixExample2, 3, 3, 0).unwrap();
        assert_eq!(pop.accuracy[0], vec![0.9, 0.4, 0.4]);
        assert_eq!(pop.accuracy[1], vec![0.6, 0.9, 0.9]);
        let p = pop.to_point(vec![0.8, 0.1, 0.1]).unwrap();
        assert!((p.expert_accuracy(0).unwrap() - 0.8).abs() < 1e-15);
        assert!(build_expert_population(&ExpertPattern::AppendixExample2, 2, 3, 0).is_err());
    }

    #[test]
    fn dog_expert_rows() {
        let k = 200;
        let j = 4;
        let pop = build_expert_population(&domain(0.85, 0.75, 5, Some(120)), j, k, 0).unwrap();
        for (e, row) in pop.accuracy.iter().enumerate() {
            assert_eq!(row.iter().filter(|&&a| a == 0.85).count(), 5);
            assert_eq!(row.iter().filter(|&&a| a == 0.75).count(), 115);
            assert_eq!(row.iter().filter(|&&a| a == 1.0 / k as f64).count(), 80);
            assert_eq!(pop.domains[e], (5 * e..5 * e + 5).collect::<Vec<_>>());
        }
        // domains partition
        let mut seen = vec![false; k];
        for d in &pop.domains {
            for &c in d {
                assert!(!seen[c]);
                seen[c] = true;
            }
        }
        assert!(build_expert_population(&domain(0.85, 0.75, 5, Some(120)), 25, k, 0).is_err());
        assert!(build_expert_population(&domain(1.5, 0.75, 5, None), 2, k, 0).is_err());
    }

    #[test]
    fn varying_accuracy_interpolates() {
        let pattern = ExpertPattern::VaryingAccuracy {
            in_domain_low: 0.88,
            in_domain_high: 0.94,
            in_family: 0.75,
            domain_size: 2,
            family_size: None,
        };
        let pop = build_expert_population(&pattern, 4, 10, 0).unwrap();
        let got: Vec<f64> = (0..4).map(|e| pop.accuracy[e][2 * e]).collect();
        for (g, want) in got.iter().zip([0.88, 0.90, 0.92, 0.94]) {
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn overlapped_domains_tile_family() {
        let pattern = ExpertPattern::OverlappedDomain {
            in_domain: 0.94,
            in_family: 0.75,
            overlap: 5,
            family_size: Some(50),
        };
        for j in [1, 5, 9, 15] {
            let pop = build_expert_population(&pattern, j, 60, 0).unwrap();
            let mut covered = vec![0; 60];
            for d in &pop.domains {
                for &c in d {
                    covered[c] += 1;
                }
            }
            assert!(covered[..50].iter().all(|&c| c >= 1));
            assert!(covered[50..].iter().all(|&c| c == 0));
            for w in pop.domains.windows(2) {
                let shared = w[0].iter().filter(|c| w[1].contains(c)).count();
                assert_eq!(shared, 5);
            }
        }
        assert!(build_expert_population(&pattern, 4, 60, 0).is_err());
    }

    #[test]
    fn dominant_pattern_satisfies_dominance() {
        let pattern = ExpertPattern::Dominant {
            accuracy_low: 0.1,
            accuracy_high: 0.9,
        };
        let pop = build_expert_population(&pattern, 4, 5, 7).unwrap();
        for row in &pop.accuracy[1..] {
            for (a, t) in row.iter().zip(&pop.accuracy[0]) {
                assert!(a < t);
            }
        }
        assert_eq!(pop, build_expert_population(&pattern, 4, 5, 7).unwrap());
    }

    #[test]
    fn sampling_extremes_and_rates() {
        let pop = build_expert_population(
            &ExpertPattern::Custom {
                accuracy: vec![vec![1.0, 1.0], vec![0.0, 0.0], vec![0.3, 0.8]],
            },
            3,
            2,
            0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut hits = 0usize;
        for i in 0..n {
            let y = i % 2;
            let m = pop.sample_expert_labels(y, &mut rng);
            assert_eq!(m[0], y);
            assert_eq!(m[1], 1 - y);
            if y == 1 && m[2] == 1 {
                hits += 1;
            }
        }
        let rate = hits as f64 / (n / 2) as f64;
        let se = (0.8 * 0.2 / (n / 2) as f64).sqrt();
        assert!((rate - 0.8).abs() < 3.0 * se, "{rate}");
    }

    #[test]
    fn best_in_set_monotone() {
        let pop = build_expert_population(&domain(0.85, 0.75, 1, None), 4, 6, 0).unwrap();
        let points: Vec<_> = [
            vec![0.5, 0.1, 0.1, 0.1, 0.1, 0.1],
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        ]
        .into_iter()
        .map(|eta| pop.to_point(eta).unwrap())
        .collect();
        let same = aggregate_best_in_set(&points, &[0, 1], &[0, 1]).unwrap();
        assert!(same.iter().all(|(a, b)| a == b));
        let nested = aggregate_best_in_set(&points, &[0, 1], &[0, 1, 2, 3]).unwrap();
        assert!(nested.iter().all(|(a, b)| b >= a));
        assert!(nested[1].1 > nested[1].0);
        assert!(aggregate_best_in_set(&points, &[0, 2], &[0, 1]).is_err());

        let with_zero = build_expert_population(
            &ExpertPattern::Custom {
                accuracy: vec![vec![0.6, 0.7], vec![0.0, 0.0]],
            },
            2,
            2,
            0,
        )
        .unwrap();
        let pts = vec![with_zero.to_point(vec![0.4, 0.6]).unwrap()];
        let r = aggregate_best_in_set(&pts, &[0], &[0, 1]).unwrap();
        assert_eq!(r[0].0, r[0].1);
    }
}
