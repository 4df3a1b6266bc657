//! Pointwise probabilistic model of one input: the class posterior and the
//! joint behaviour of the experts given the true label.
//!
//! Everything here is conditional on a fixed input `x`; labels and experts
//! are 0-based indices. A correctness pattern is a bitmask whose bit `j` is
//! set when expert `j` predicts the true label.

use std::fmt;
use std::ops::Deref;

use rand::Rng;

use crate::error::{check_index, Error, Result};

/// Construction-time tolerance for probability vectors and pattern tables.
pub const PROB_TOLERANCE: f64 = 1e-9;

/// Largest expert count for which a full pattern table (2^J entries per
/// label) may be materialized.
pub const MAX_PATTERN_EXPERTS: usize = 20;

fn check_prob(what: &str, p: f64) -> Result<()> {
    if p.is_finite() && (-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidProbability(format!("{what} = {p} not in [0, 1]")))
    }
}

fn check_distribution(what: &str, probs: &[f64]) -> Result<()> {
    for &p in probs {
        check_prob(what, p)?;
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::InvalidProbability(format!(
            "{what} sums to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Outcome of the deferral system for one input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Decision {
    /// Predict this label (0-based).
    Classify(usize),
    /// Hand the input to this expert (0-based).
    Defer(usize),
}

impl Decision {
    pub fn is_deferral(&self) -> bool {
        matches!(self, Decision::Defer(_))
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Classify(y) => write!(f, "classify:{y}"),
            Decision::Defer(j) => write!(f, "defer:{j}"),
        }
    }
}

impl std::str::FromStr for Decision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("decision `{s}` is not classify:N or defer:N"));
        let (kind, idx) = s.split_once(':').ok_or_else(bad)?;
        let idx: usize = idx.parse().map_err(|_| bad())?;
        match kind {
            "classify" => Ok(Decision::Classify(idx)),
            "defer" => Ok(Decision::Defer(idx)),
            _ => Err(bad()),
        }
    }
}

/// Scores for the `K` labels followed by the `J` deferral options.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self(scores))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ScoreVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// One draw `(x, y, m)` from the data distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
    pub expert_preds: Vec<usize>,
}

impl LabeledSample {
    pub fn validate(&self, num_classes: usize, num_experts: usize) -> Result<()> {
        check_index("label", self.label, num_classes)?;
        if self.expert_preds.len() != num_experts {
            return Err(Error::Dimension {
                what: "expert predictions",
                expected: num_experts,
                got: self.expert_preds.len(),
            });
        }
        for &m in &self.expert_preds {
            check_index("expert prediction", m, num_classes)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    ConditionallyIndependent,
    FullJoint,
}

/// Distribution of an expert's output when it errs.
///
/// `None` means uniform over the `K - 1` wrong labels.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct WrongLabelProfile {
    // [expert][true label][predicted label], zero on the true label
    tables: Option<Vec<Vec<Vec<f64>>>>,
}

impl WrongLabelProfile {
    pub fn uniform() -> Self {
        Self { tables: None }
    }

    pub fn custom(tables: Vec<Vec<Vec<f64>>>, num_classes: usize, num_experts: usize) -> Result<Self> {
        if tables.len() != num_experts {
            return Err(Error::Dimension {
                what: "wrong-label profile experts",
                expected: num_experts,
                got: tables.len(),
            });
        }
        for table in &tables {
            if table.len() != num_classes {
                return Err(Error::Dimension {
                    what: "wrong-label profile rows",
                    expected: num_classes,
                    got: table.len(),
                });
            }
            for (y, row) in table.iter().enumerate() {
                if row.len() != num_classes {
                    return Err(Error::Dimension {
                        what: "wrong-label profile columns",
                        expected: num_classes,
                        got: row.len(),
                    });
                }
                if row[y].abs() > PROB_TOLERANCE {
                    return Err(Error::InvalidProbability(format!(
                        "wrong-label profile puts mass {} on the true label {y}",
                        row[y]
                    )));
                }
                check_distribution("wrong-label profile row", row)?;
            }
        }
        Ok(Self { tables: Some(tables) })
    }

    pub fn is_uniform(&self) -> bool {
        self.tables.is_none()
    }

    pub fn tables(&self) -> Option<&[Vec<Vec<f64>>]> {
        self.tables.as_deref()
    }

    /// Probability that `expert` outputs `label` given it is wrong about `truth`.
    pub fn prob(&self, expert: usize, truth: usize, label: usize, num_classes: usize) -> f64 {
        match &self.tables {
            Some(t) => t[expert][truth][label],
            None if label == truth => 0.0,
            None => 1.0 / (num_classes - 1) as f64,
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        expert: usize,
        truth: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> usize {
        match &self.tables {
            None => {
                let r = rng.random_range(0..num_classes - 1);
                if r >= truth {
                    r + 1
                } else {
                    r
                }
            }
            Some(t) => sample_categorical(&t[expert][truth], rng),
        }
    }
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

#[derive(Clone, Debug, PartialEq)]
enum Correctness {
    /// `[label][expert]` = Pr(M_j = Y | Y = label).
    Independent(Vec<Vec<f64>>),
    /// `[label][mask]` = Pr(correctness pattern = mask | Y = label).
    FullJoint(Vec<Vec<f64>>),
}

/// Conditional law of the experts' correctness given the true label.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertJointModel {
    num_classes: usize,
    num_experts: usize,
    correctness: Correctness,
    wrong_labels: WrongLabelProfile,
}

impl ExpertJointModel {
    /// Experts independent given the label; `accuracy[y][j]` is expert `j`'s
    /// accuracy on class `y`.
    pub fn independent(accuracy: Vec<Vec<f64>>) -> Result<Self> {
        let num_classes = accuracy.len();
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let num_experts = accuracy[0].len();
        if num_experts == 0 {
            return Err(Error::InvalidArgument("need at least one expert".into()));
        }
        for row in &accuracy {
            if row.len() != num_experts {
                return Err(Error::Dimension {
                    what: "accuracy row",
                    expected: num_experts,
                    got: row.len(),
                });
            }
            for &a in row {
                check_prob("conditional accuracy", a)?;
            }
        }
        Ok(Self {
            num_classes,
            num_experts,
            correctness: Correctness::Independent(accuracy),
            wrong_labels: WrongLabelProfile::uniform(),
        })
    }

    /// Arbitrary joint correctness; `patterns[y][mask]` must sum to 1 per label.
    pub fn full_joint(num_experts: usize, patterns: Vec<Vec<f64>>) -> Result<Self> {
        let num_classes = patterns.len();
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if num_experts == 0 {
            return Err(Error::InvalidArgument("need at least one expert".into()));
        }
        if num_experts > MAX_PATTERN_EXPERTS {
            return Err(Error::TooManyExperts {
                got: num_experts,
                limit: MAX_PATTERN_EXPERTS,
            });
        }
        for row in &patterns {
            if row.len() != 1 << num_experts {
                return Err(Error::Dimension {
                    what: "pattern table row",
                    expected: 1 << num_experts,
                    got: row.len(),
                });
            }
            check_distribution("pattern mass", row)?;
        }
        Ok(Self {
            num_classes,
            num_experts,
            correctness: Correctness::FullJoint(patterns),
            wrong_labels: WrongLabelProfile::uniform(),
        })
    }

    pub fn with_wrong_labels(mut self, profile: WrongLabelProfile) -> Result<Self> {
        if let Some(tables) = profile.tables() {
            WrongLabelProfile::custom(tables.to_vec(), self.num_classes, self.num_experts)?;
        }
        self.wrong_labels = profile;
        Ok(self)
    }

    pub fn kind(&self) -> ModelKind {
        match self.correctness {
            Correctness::Independent(_) => ModelKind::ConditionallyIndependent,
            Correctness::FullJoint(_) => ModelKind::FullJoint,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn wrong_labels(&self) -> &WrongLabelProfile {
        &self.wrong_labels
    }

    /// `Some(table)` with `[label][expert]` accuracies for the independent model.
    pub fn independent_accuracy(&self) -> Option<&[Vec<f64>]> {
        match &self.correctness {
            Correctness::Independent(a) => Some(a),
            Correctness::FullJoint(_) => None,
        }
    }

    /// `Some(table)` with `[label][mask]` pattern masses for the full-joint model.
    pub fn pattern_table(&self) -> Option<&[Vec<f64>]> {
        match &self.correctness {
            Correctness::Independent(_) => None,
            Correctness::FullJoint(p) => Some(p),
        }
    }

    /// Pr(M_j = Y | Y = label).
    pub fn cond_accuracy(&self, label: usize, expert: usize) -> f64 {
        match &self.correctness {
            Correctness::Independent(a) => a[label][expert],
            Correctness::FullJoint(p) => p[label]
                .iter()
                .enumerate()
                .filter(|(mask, _)| mask >> expert & 1 == 1)
                .map(|(_, &q)| q)
                .sum(),
        }
    }

    /// Pr(some expert in `members` is correct | Y = label).
    pub(crate) fn union_given_label(&self, label: usize, members: &[bool]) -> f64 {
        match &self.correctness {
            Correctness::Independent(a) => {
                let all_wrong: f64 = members
                    .iter()
                    .zip(&a[label])
                    .filter(|(&m, _)| m)
                    .map(|(_, &acc)| 1.0 - acc)
                    .product();
                1.0 - all_wrong
            }
            Correctness::FullJoint(p) => {
                let subset = mask_of(members);
                p[label]
                    .iter()
                    .enumerate()
                    .filter(|(mask, _)| mask & subset != 0)
                    .map(|(_, &q)| q)
                    .sum()
            }
        }
    }

    /// For each position `i` of `order`: Pr(experts at positions `< i` all
    /// wrong and expert `order[i]` correct | Y = label). `order` must hold
    /// distinct valid expert indices (a full permutation or a prefix of one).
    pub(crate) fn prefix_weights_given_label(&self, label: usize, order: &[usize]) -> Vec<f64> {
        match &self.correctness {
            Correctness::Independent(a) => {
                let mut all_wrong = 1.0;
                order
                    .iter()
                    .map(|&j| {
                        let w = all_wrong * a[label][j];
                        all_wrong *= 1.0 - a[label][j];
                        w
                    })
                    .collect()
            }
            Correctness::FullJoint(p) => {
                let mut out = vec![0.0; order.len()];
                for (mask, &q) in p[label].iter().enumerate() {
                    if q == 0.0 {
                        continue;
                    }
                    if let Some(pos) = order.iter().position(|&j| mask >> j & 1 == 1) {
                        out[pos] += q;
                    }
                }
                out
            }
        }
    }

    /// Re-expresses the model as an explicit pattern table.
    pub fn to_full_joint(&self) -> Result<Self> {
        match &self.correctness {
            Correctness::FullJoint(_) => Ok(self.clone()),
            Correctness::Independent(a) => {
                if self.num_experts > MAX_PATTERN_EXPERTS {
                    return Err(Error::TooManyExperts {
                        got: self.num_experts,
                        limit: MAX_PATTERN_EXPERTS,
                    });
                }
                let patterns = a
                    .iter()
                    .map(|row| {
                        (0..1usize << self.num_experts)
                            .map(|mask| {
                                row.iter()
                                    .enumerate()
                                    .map(|(j, &acc)| if mask >> j & 1 == 1 { acc } else { 1.0 - acc })
                                    .product()
                            })
                            .collect()
                    })
                    .collect();
                Ok(Self {
                    num_classes: self.num_classes,
                    num_experts: self.num_experts,
                    correctness: Correctness::FullJoint(patterns),
                    wrong_labels: self.wrong_labels.clone(),
                })
            }
        }
    }

    /// Draws which experts are correct when the true label is `label`.
    pub fn sample_correctness<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> Vec<bool> {
        match &self.correctness {
            Correctness::Independent(a) => a[label]
                .iter()
                .map(|&acc| rng.random::<f64>() < acc)
                .collect(),
            Correctness::FullJoint(p) => {
                let mask = sample_categorical(&p[label], rng);
                (0..self.num_experts).map(|j| mask >> j & 1 == 1).collect()
            }
        }
    }

    /// Draws the experts' predicted labels when the true label is `label`.
    pub fn sample_predictions<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> Vec<usize> {
        self.sample_correctness(label, rng)
            .into_iter()
            .enumerate()
            .map(|(j, correct)| {
                if correct {
                    label
                } else {
                    self.wrong_labels.sample(j, label, self.num_classes, rng)
                }
            })
            .collect()
    }
}

fn mask_of(members: &[bool]) -> usize {
    members
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .fold(0, |acc, (j, _)| acc | 1 << j)
}

/// Class posterior and expert model at one input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalPoint {
    posterior: Vec<f64>,
    experts: ExpertJointModel,
}

impl ConditionalPoint {
    pub fn new(posterior: Vec<f64>, experts: ExpertJointModel) -> Result<Self> {
        if posterior.len() != experts.num_classes() {
            return Err(Error::Dimension {
                what: "class posterior",
                expected: experts.num_classes(),
                got: posterior.len(),
            });
        }
        check_distribution("class posterior", &posterior)?;
        Ok(Self { posterior, experts })
    }

    pub fn posterior(&self) -> &[f64] {
        &self.posterior
    }

    pub fn experts(&self) -> &ExpertJointModel {
        &self.experts
    }

    pub fn num_classes(&self) -> usize {
        self.posterior.len()
    }

    pub fn num_experts(&self) -> usize {
        self.experts.num_experts()
    }

    /// Length of a score vector for this point: `K + J`.
    pub fn score_dim(&self) -> usize {
        self.num_classes() + self.num_experts()
    }

    /// Acc_j(x) = Σ_y η_y Pr(M_j = Y | Y = y).
    pub fn expert_accuracy(&self, expert: usize) -> Result<f64> {
        check_index("expert", expert, self.num_experts())?;
        Ok(self.accuracy_unchecked(expert))
    }

    fn accuracy_unchecked(&self, expert: usize) -> f64 {
        self.posterior
            .iter()
            .enumerate()
            .map(|(y, &eta)| eta * self.experts.cond_accuracy(y, expert))
            .sum()
    }

    pub fn expert_accuracies(&self) -> Vec<f64> {
        (0..self.num_experts())
            .map(|j| self.accuracy_unchecked(j))
            .collect()
    }

    /// Pr(∃ j ∈ subset : M_j = Y | X = x). Duplicates are ignored.
    pub fn union_correct_prob(&self, subset: &[usize]) -> Result<f64> {
        let mut members = vec![false; self.num_experts()];
        for &j in subset {
            check_index("expert", j, self.num_experts())?;
            members[j] = true;
        }
        Ok(self.union_of_members(&members))
    }

    pub(crate) fn union_of_members(&self, members: &[bool]) -> f64 {
        if !members.iter().any(|&m| m) {
            return 0.0;
        }
        self.posterior
            .iter()
            .enumerate()
            .map(|(y, &eta)| eta * self.experts.union_given_label(y, members))
            .sum()
    }

    /// Pr(some expert correct | X = x) over all experts.
    pub fn any_correct_prob(&self) -> f64 {
        self.union_of_members(&vec![true; self.num_experts()])
    }

    /// Pr(experts `order[..position]` all wrong, `order[position]` correct | X = x).
    pub fn prefix_exclusive_correct(&self, order: &[usize], position: usize) -> Result<f64> {
        self.check_permutation(order)?;
        check_index("position", position, order.len())?;
        Ok(self.prefix_weights_unchecked(order)[position])
    }

    /// All prefix-exclusive probabilities along `order`, by position.
    pub fn prefix_weights(&self, order: &[usize]) -> Result<Vec<f64>> {
        self.check_permutation(order)?;
        Ok(self.prefix_weights_unchecked(order))
    }

    pub(crate) fn prefix_weights_unchecked(&self, order: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; order.len()];
        for (y, &eta) in self.posterior.iter().enumerate() {
            if eta == 0.0 {
                continue;
            }
            for (o, w) in out
                .iter_mut()
                .zip(self.experts.prefix_weights_given_label(y, order))
            {
                *o += eta * w;
            }
        }
        out
    }

    fn check_permutation(&self, order: &[usize]) -> Result<()> {
        let j = self.num_experts();
        let mut seen = vec![false; j];
        if order.len() != j {
            return Err(Error::InvalidPermutation(j));
        }
        for &e in order {
            if e >= j || seen[e] {
                return Err(Error::InvalidPermutation(j));
            }
            seen[e] = true;
        }
        Ok(())
    }

    pub fn to_full_joint(&self) -> Result<Self> {
        Ok(Self {
            posterior: self.posterior.clone(),
            experts: self.experts.to_full_joint()?,
        })
    }

    /// Draws a label and the experts' predictions.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<usize>) {
        let y = sample_categorical(&self.posterior, rng);
        let m = self.experts.sample_predictions(y, rng);
        (y, m)
    }
}
