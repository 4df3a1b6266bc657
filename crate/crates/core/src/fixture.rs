//! TOML fixture format for conditional points and expert blocks.
//!
//! ```toml
//! K = 3
//! J = 3
//! posterior = [0.8, 0.1, 0.1]          # omitted for a bare expert block
//! kind = "independent"                 # or "full_joint"
//! # independent: one row per class, one column per expert
//! cond_accuracy = [[0.9, 0.6, 0.6], [0.4, 0.9, 0.9], [0.4, 0.9, 0.9]]
//! # full_joint: listed patterns carry mass, the rest are zero
//! # patterns = [{ label = 0, correct = [0, 2], prob = 0.5 }, ...]
//! # optional [expert][true label][predicted label] error distributions
//! # wrong_labels = [...]
//! ```
//!
//! All indices are 0-based. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{ConditionalPoint, ExpertJointModel, ModelKind, WrongLabelProfile, MAX_PATTERN_EXPERTS};
use crate::error::{Error, Result};
use crate::experts::ExpertPopulation;
use crate::losses::BaseLoss;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    Independent,
    FullJoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternEntry {
    pub label: usize,
    pub correct: Vec<usize>,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointFixture {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior: Option<Vec<f64>>,
    pub kind: FixtureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cond_accuracy: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patterns: Option<Vec<PatternEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrong_labels: Option<Vec<Vec<Vec<f64>>>>,
}

impl PointFixture {
    pub fn expert_model(&self) -> Result<ExpertJointModel> {
        let model = match self.kind {
            FixtureKind::Independent => {
                let acc = self
                    .cond_accuracy
                    .clone()
                    .ok_or_else(|| Error::Fixture("kind = \"independent\" requires cond_accuracy".into()))?;
                if acc.len() != self.k || acc.iter().any(|r| r.len() != self.j) {
                    return Err(Error::Fixture(format!(
                        "cond_accuracy must be {} rows of {} entries",
                        self.k, self.j
                    )));
                }
                ExpertJointModel::independent(acc)?
            }
            FixtureKind::FullJoint => {
                let entries = self
                    .patterns
                    .as_ref()
                    .ok_or_else(|| Error::Fixture("kind = \"full_joint\" requires patterns".into()))?;
                if self.j == 0 || self.j > MAX_PATTERN_EXPERTS {
                    return Err(Error::Fixture(format!("J = {} outside 1..={MAX_PATTERN_EXPERTS}", self.j)));
                }
                let mut table = vec![vec![0.0; 1 << self.j]; self.k];
                for e in entries {
                    if e.label >= self.k {
                        return Err(Error::Fixture(format!("pattern label {} >= K", e.label)));
                    }
                    let mut mask = 0usize;
                    for &c in &e.correct {
                        if c >= self.j {
                            return Err(Error::Fixture(format!("pattern expert {c} >= J")));
                        }
                        mask |= 1 << c;
                    }
                    table[e.label][mask] += e.prob;
                }
                ExpertJointModel::full_joint(self.j, table)?
            }
        };
        match &self.wrong_labels {
            Some(t) => model.with_wrong_labels(WrongLabelProfile::custom(t.clone(), self.k, self.j)?),
            None => Ok(model),
        }
    }

    pub fn point(&self) -> Result<ConditionalPoint> {
        let posterior = self
            .posterior
            .clone()
            .ok_or_else(|| Error::Fixture("missing posterior".into()))?;
        ConditionalPoint::new(posterior, self.expert_model()?)
    }

    pub fn from_model(model: &ExpertJointModel, posterior: Option<Vec<f64>>) -> Self {
        let (cond_accuracy, patterns) = match model.kind() {
            ModelKind::ConditionallyIndependent => (model.independent_accuracy().map(<[_]>::to_vec), None),
            ModelKind::FullJoint => {
                let table = model.pattern_table().expect("full joint");
                let entries = table
                    .iter()
                    .enumerate()
                    .flat_map(|(label, row)| {
                        row.iter().enumerate().filter(|(_, &p)| p != 0.0).map(move |(mask, &prob)| PatternEntry {
                            label,
                            correct: (0..model.num_experts()).filter(|j| mask >> j & 1 == 1).collect(),
                            prob,
                        })
                    })
                    .collect();
                (None, Some(entries))
            }
        };
        Self {
            k: model.num_classes(),
            j: model.num_experts(),
            posterior,
            kind: match model.kind() {
                ModelKind::ConditionallyIndependent => FixtureKind::Independent,
                ModelKind::FullJoint => FixtureKind::FullJoint,
            },
            cond_accuracy,
            patterns,
            wrong_labels: model.wrong_labels().tables().map(<[_]>::to_vec),
        }
    }
}

/// A straight score path `start → end` for one sample `(label, expert_preds)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathFixture {
    #[serde(rename = "K")]
    pub k: usize,
    pub label: usize,
    pub expert_preds: Vec<usize>,
    pub base: String,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl PathFixture {
    pub fn parse(text: &str) -> Result<Self> {
        let path: Self = toml::from_str(text).map_err(|e| Error::Fixture(e.to_string()))?;
        let dim = path.k + path.expert_preds.len();
        if path.label >= path.k || path.expert_preds.iter().any(|&m| m >= path.k) {
            return Err(Error::Fixture("label or expert prediction >= K".into()));
        }
        if path.start.len() != dim || path.end.len() != dim {
            return Err(Error::Fixture(format!("path endpoints must have {dim} entries")));
        }
        path.base_loss()?;
        Ok(path)
    }

    pub fn base_loss(&self) -> Result<BaseLoss> {
        match self.base.as_str() {
            "ce" => Ok(BaseLoss::CrossEntropy),
            "ova" => Ok(BaseLoss::OvaLog),
            other => Err(Error::Fixture(format!("unknown base loss `{other}`"))),
        }
    }
}

pub fn parse_fixture(text: &str) -> Result<PointFixture> {
    toml::from_str(text).map_err(|e| Error::Fixture(e.to_string()))
}

pub fn point_from_toml(text: &str) -> Result<ConditionalPoint> {
    parse_fixture(text)?.point()
}

pub fn point_to_toml(point: &ConditionalPoint) -> String {
    let fixture = PointFixture::from_model(point.experts(), Some(point.posterior().to_vec()));
    toml::to_string(&fixture).expect("fixture serializes")
}

pub fn population_to_toml(population: &ExpertPopulation) -> Result<String> {
    let fixture = PointFixture::from_model(&population.to_expert_model()?, None);
    Ok(toml::to_string(&fixture).expect("fixture serializes"))
}

pub fn load_point(path: &Path) -> Result<ConditionalPoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Fixture(format!("{}: {e}", path.display())))?;
    point_from_toml(&text).map_err(|e| Error::Fixture(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{build_expert_population, ExpertPattern};

    const EXAMPLE2: &str = r#"
K = 3
J = 3
posterior = [0.8, 0.1, 0.1]
kind = "independent"
cond_accuracy = [[0.9, 0.6, 0.6], [0.4, 0.9, 0.9], [0.4, 0.9, 0.9]]
"#;

    #[test]
    fn parses_independent_fixture() {
        let p = point_from_toml(EXAMPLE2).unwrap();
        assert!((p.expert_accuracy(1).unwrap() - 0.66).abs() < 1e-15);
        let again = point_from_toml(&point_to_toml(&p)).unwrap();
        assert_eq!(again, p);
    }

    #[test]
    fn parses_full_joint_fixture() {
        let text = r#"
K = 2
J = 2
posterior = [0.5, 0.5]
kind = "full_joint"
patterns = [
  { label = 0, correct = [0, 1], prob = 0.6 },
  { label = 0, correct = [], prob = 0.4 },
  { label = 1, correct = [1], prob = 1.0 },
]
"#;
        let p = point_from_toml(text).unwrap();
        assert!((p.expert_accuracy(0).unwrap() - 0.3).abs() < 1e-15);
        assert!((p.union_correct_prob(&[0, 1]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(point_from_toml(&point_to_toml(&p)).unwrap(), p);
    }

    #[test]
    fn rejects_bad_fixtures() {
        let not_normalized = EXAMPLE2.replace("[0.8, 0.1, 0.1]", "[0.8, 0.1, 0.2]");
        assert!(point_from_toml(&not_normalized).is_err());
        let unknown = format!("{EXAMPLE2}\ncolour = 1\n");
        assert!(point_from_toml(&unknown).is_err());
        let short = EXAMPLE2.replace("[0.4, 0.9, 0.9]]", "[0.4, 0.9]]");
        assert!(point_from_toml(&short).is_err());
        assert!(point_from_toml("K = 2").is_err());
    }

    #[test]
    fn path_fixture_checks_dimensions() {
        let text = "K = 2\nlabel = 0\nexpert_preds = [0, 1]\nbase = \"ce\"\nstart = [0, 0, 1, 0]\nend = [0, 0, 0, 1]\n";
        let path = PathFixture::parse(text).unwrap();
        assert_eq!(path.base_loss().unwrap(), BaseLoss::CrossEntropy);
        assert!(PathFixture::parse(&text.replace("end = [0, 0, 0, 1]", "end = [0, 1]")).is_err());
        assert!(PathFixture::parse(&text.replace("\"ce\"", "\"hinge\"")).is_err());
    }

    #[test]
    fn population_block_round_trips() {
        let pop = build_expert_population(&ExpertPattern::AppendixExample2, 3, 3, 0).unwrap();
        let text = population_to_toml(&pop).unwrap();
        let fixture = parse_fixture(&text).unwrap();
        assert!(fixture.posterior.is_none());
        assert_eq!(fixture.expert_model().unwrap(), pop.to_expert_model().unwrap());
    }
}
