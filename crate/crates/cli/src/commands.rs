//! The three commands. Each builds its rows in parallel, then writes them in a
//! fixed order so repeated runs produce identical files.

use deferral_core::consistency::{
    check_condition1, resolve_top_expert_mass_form, verify_consistency, ConsistencyReport, TopExpertMassForm,
    TopExpertMassResolution,
};
use deferral_core::fixture::load_point;
use deferral_core::optim::MAX_GLOBAL_EXPERTS;
use deferral_core::risk::{conditional_risk, deferral_weights, monte_carlo_risk, MonteCarloEstimate};
use deferral_core::seed::derive_seed;
use deferral_core::testbed::{is_decisive, random_decisive_point, random_point, random_theta, DecisiveMargins};
use deferral_core::{BaseLoss, ConditionalPoint, Family, ModelKind, SurrogateSpec};
use deferral_train::{summarize, sweep_experts, SweepRow, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{sweep_config, ConsistencySettings, PointSettings, RiskSettings, RunConfig};
use crate::error::CliError;
use crate::output::OutputDir;
use crate::{Command, Outcome};

/// Largest allowed `|Σ_j A^j - Pr(some expert correct)|`.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

pub fn run(command: Command, config: &RunConfig) -> Result<Outcome, CliError> {
    match command {
        Command::VerifyRisks => {
            let settings = RiskSettings::from_config(config)?;
            let out = prepare(config)?;
            verify_risks(&settings, &out)
        }
        Command::VerifyConsistency => {
            let settings = ConsistencySettings::from_config(config)?;
            let out = prepare(config)?;
            verify_consistency_suite(&settings, &out)
        }
        Command::Sweep => {
            let sweep = sweep_config(config)?;
            let out = prepare(config)?;
            run_sweep(&sweep, &out)
        }
    }
}

fn prepare(config: &RunConfig) -> Result<OutputDir, CliError> {
    let out = OutputDir::create(config.out_dir())?;
    out.write_text("config.toml", &config.to_toml())?;
    Ok(out)
}

fn core_failure(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Failed(format!("{context}: {e}"))
}

#[derive(Clone, Debug)]
pub struct NamedPoint {
    pub name: String,
    pub point: ConditionalPoint,
}

/// Fixture points (named by file stem) followed by `random_points` generated
/// points. Point `i` uses `K = k_list[i mod |k_list|]` and
/// `J = j_list[(i / |k_list|) mod |j_list|]`.
pub fn collect_points(
    settings: &PointSettings,
    seed: u64,
    stream: &str,
    make: impl Fn(&mut ChaCha8Rng, usize, usize, usize) -> deferral_core::Result<ConditionalPoint> + Sync,
) -> Result<Vec<NamedPoint>, CliError> {
    let mut points = Vec::new();
    for path in &settings.fixtures {
        let point = load_point(path).map_err(|e| CliError::Config(format!("key `fixtures`: {e}")))?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        points.push(NamedPoint { name, point });
    }
    let (nk, nj) = (settings.k_list.len(), settings.j_list.len());
    let random: Vec<NamedPoint> = (0..settings.random_points)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, &[i as u64]));
            let (k, j) = (settings.k_list[i % nk], settings.j_list[(i / nk) % nj]);
            make(&mut rng, k, j, i)
                .map(|point| NamedPoint { name: format!("random-{i}"), point })
                .map_err(|e| core_failure("random point", e))
        })
        .collect::<Result<_, _>>()?;
    points.extend(random);
    Ok(points)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskRow {
    pub point: String,
    pub spec: SurrogateSpec,
    pub j: usize,
    pub risk: f64,
    pub mc: MonteCarloEstimate,
    pub z: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityRow {
    pub point: String,
    pub kind: ModelKind,
    pub j: usize,
    pub weight_sum: f64,
    pub union_prob: f64,
    pub pass: bool,
}

/// Mixed independent and full-joint points with random score vectors.
pub fn risk_points(settings: &RiskSettings) -> Result<Vec<(NamedPoint, Vec<f64>)>, CliError> {
    let points = collect_points(&settings.points, settings.seed, "risk_points", |rng, k, j, i| {
        let kind = if i % 2 == 0 { ModelKind::ConditionallyIndependent } else { ModelKind::FullJoint };
        random_point(rng, k, j, kind)
    })?;
    Ok(points
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, "risk_theta", &[i as u64]));
            let theta = random_theta(&mut rng, p.point.score_dim(), settings.theta_scale);
            (p, theta)
        })
        .collect())
}

pub fn risk_checks(settings: &RiskSettings) -> Result<(Vec<RiskRow>, Vec<IdentityRow>), CliError> {
    let cases = risk_points(settings)?;
    let results: Vec<(Vec<RiskRow>, IdentityRow)> = cases
        .par_iter()
        .enumerate()
        .map(|(i, (p, theta))| {
            let mut rows = Vec::with_capacity(settings.specs.len());
            for (s, &spec) in settings.specs.iter().enumerate() {
                let risk = conditional_risk(&p.point, theta, spec).map_err(|e| core_failure(&p.name, e))?;
                let mc_seed = derive_seed(settings.seed, "monte_carlo", &[i as u64, s as u64]);
                let mc = monte_carlo_risk(&p.point, theta, spec, settings.mc_samples, mc_seed)
                    .map_err(|e| core_failure(&p.name, e))?;
                let z = if mc.standard_error > 0.0 { (risk - mc.estimate) / mc.standard_error } else { 0.0 };
                rows.push(RiskRow {
                    point: p.name.clone(),
                    spec,
                    j: p.point.num_experts(),
                    risk,
                    mc,
                    z,
                    pass: mc.covers(risk, settings.z_bound),
                });
            }
            let weights = deferral_weights(&p.point, theta, Family::Picce).map_err(|e| core_failure(&p.name, e))?;
            let weight_sum: f64 = weights.iter().sum();
            let union_prob = p.point.any_correct_prob();
            let identity = IdentityRow {
                point: p.name.clone(),
                kind: p.point.experts().kind(),
                j: p.point.num_experts(),
                weight_sum,
                union_prob,
                pass: (weight_sum - union_prob).abs() <= IDENTITY_TOLERANCE,
            };
            Ok((rows, identity))
        })
        .collect::<Result<_, CliError>>()?;
    let mut risks = Vec::new();
    let mut identities = Vec::new();
    for (rows, identity) in results {
        risks.extend(rows);
        identities.push(identity);
    }
    Ok((risks, identities))
}

fn kind_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::ConditionallyIndependent => "independent",
        ModelKind::FullJoint => "full_joint",
    }
}

fn verify_risks(settings: &RiskSettings, out: &OutputDir) -> Result<Outcome, CliError> {
    let (risks, identities) = risk_checks(settings)?;
    let rows: Vec<Vec<String>> = risks
        .iter()
        .map(|r| {
            vec![
                r.spec.family.to_string(),
                r.spec.base.to_string(),
                r.j.to_string(),
                num(r.risk),
                num(r.mc.estimate),
                num(r.mc.standard_error),
                r.point.clone(),
                num(r.z),
                r.pass.to_string(),
            ]
        })
        .collect();
    out.write_csv(
        "risks.csv",
        &["family", "base", "J", "risk", "mc_estimate", "mc_se", "point", "z", "pass"],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = identities
        .iter()
        .map(|r| {
            vec![
                r.point.clone(),
                kind_name(r.kind).to_string(),
                r.j.to_string(),
                num(r.weight_sum),
                num(r.union_prob),
                num((r.weight_sum - r.union_prob).abs()),
                r.pass.to_string(),
            ]
        })
        .collect();
    out.write_csv(
        "weight_identity.csv",
        &["point", "kind", "J", "weight_sum", "union_prob", "abs_error", "pass"],
        &rows,
    )?;
    let risk_failures = risks.iter().filter(|r| !r.pass).count();
    let identity_failures = identities.iter().filter(|r| !r.pass).count();
    Ok(Outcome {
        passed: risk_failures == 0 && identity_failures == 0,
        summary: format!(
            "{} risk checks ({risk_failures} outside {}·SE), {} weight identities ({identity_failures} failed)",
            risks.len(),
            settings.z_bound,
            identities.len()
        ),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowStatus {
    /// Decisive point: decisions and recovery checked and correct.
    Pass,
    /// Near a decision boundary: only recovery errors are checked.
    Boundary,
    /// Condition 1 fails, so no recovery (and possibly no attained
    /// minimum) is expected; reported, not failed.
    Condition1Violated,
    Fail,
    NotConverged,
}

impl RowStatus {
    pub fn is_failure(&self) -> bool {
        matches!(self, RowStatus::Fail | RowStatus::NotConverged)
    }

    pub fn name(&self) -> &'static str {
        match self {
            RowStatus::Pass => "pass",
            RowStatus::Boundary => "boundary",
            RowStatus::Condition1Violated => "condition1_violated",
            RowStatus::Fail => "fail",
            RowStatus::NotConverged => "not_converged",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyRow {
    pub point: String,
    pub k: usize,
    pub j: usize,
    pub decisive: bool,
    pub report: ConsistencyReport,
    pub status: RowStatus,
}

/// Whether the recovered quantities are all within `tol`.
pub fn recovery_ok(report: &ConsistencyReport, tol: f64) -> bool {
    let mut errors = vec![report.label_part_recovery_error, report.expert_accuracy_recovery_error];
    if report.base == BaseLoss::CrossEntropy {
        errors.extend([report.label_mass_error, report.deferral_mass_error]);
    }
    errors.iter().all(|e| *e < tol)
}

pub fn grade(report: &ConsistencyReport, decisive: bool, tol: f64) -> RowStatus {
    if !report.condition1_holds {
        RowStatus::Condition1Violated
    } else if !report.converged {
        RowStatus::NotConverged
    } else if !recovery_ok(report, tol) {
        RowStatus::Fail
    } else if !decisive {
        RowStatus::Boundary
    } else if report.decisions_match && report.argmax_expert_match {
        RowStatus::Pass
    } else {
        RowStatus::Fail
    }
}

/// Fixture points followed by random decisive independent-expert points.
pub fn consistency_points(settings: &ConsistencySettings) -> Result<Vec<NamedPoint>, CliError> {
    if let Some(&j) = settings.points.j_list.iter().find(|&&j| j > MAX_GLOBAL_EXPERTS) {
        return Err(CliError::Config(format!("key `j_list`: J = {j} exceeds {MAX_GLOBAL_EXPERTS}")));
    }
    let margins = DecisiveMargins::default();
    let points = collect_points(&settings.points, settings.seed, "consistency_points", |rng, k, j, _| {
        random_decisive_point(rng, k, j, &margins)
    })?;
    if let Some(p) = points.iter().find(|p| p.point.num_experts() > MAX_GLOBAL_EXPERTS) {
        return Err(CliError::Config(format!("key `fixtures`: {} has more than {MAX_GLOBAL_EXPERTS} experts", p.name)));
    }
    Ok(points)
}

pub fn consistency_checks(settings: &ConsistencySettings, points: &[NamedPoint]) -> Result<Vec<ConsistencyRow>, CliError> {
    let margins = DecisiveMargins::default();
    let jobs: Vec<(usize, BaseLoss)> =
        (0..points.len()).flat_map(|i| settings.bases.iter().map(move |&b| (i, b))).collect();
    jobs.par_iter()
        .map(|&(i, base)| {
            let p = &points[i];
            let seed = derive_seed(settings.seed, "optimizer_init", &[i as u64]);
            let report = verify_consistency(&p.point, base, &settings.optimizer, seed).map_err(|e| core_failure(&p.name, e))?;
            let decisive = is_decisive(&p.point, &margins).map_err(|e| core_failure(&p.name, e))?;
            let status = grade(&report, decisive, settings.tolerance);
            Ok(ConsistencyRow {
                point: p.name.clone(),
                k: p.point.num_classes(),
                j: p.point.num_experts(),
                decisive,
                report,
                status,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MassFormRow {
    pub point: String,
    /// `Ṽ = V / (1 + V)`.
    pub deferral_mass: f64,
    pub resolution: TopExpertMassResolution,
}

/// Points far enough from `Ṽ = 1/2` for the two candidate forms to differ.
pub const MASS_FORM_SEPARATION: f64 = 0.05;

/// Resolves the top-expert mass form on every decisive point whose
/// deferral mass is at least [`MASS_FORM_SEPARATION`] away from one half.
pub fn mass_form_checks(settings: &ConsistencySettings, points: &[NamedPoint]) -> Result<Vec<MassFormRow>, CliError> {
    let margins = DecisiveMargins::default();
    let eligible: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let v = p.point.any_correct_prob();
            let mass = v / (1.0 + v);
            let decisive = is_decisive(&p.point, &margins).unwrap_or(false);
            (decisive && (mass - 0.5).abs() > MASS_FORM_SEPARATION).then_some((i, mass))
        })
        .collect();
    eligible
        .par_iter()
        .map(|&(i, deferral_mass)| {
            let p = &points[i];
            let seed = derive_seed(settings.seed, "optimizer_init", &[i as u64]);
            let resolution =
                resolve_top_expert_mass_form(&p.point, &settings.optimizer, seed).map_err(|e| core_failure(&p.name, e))?;
            Ok(MassFormRow { point: p.name.clone(), deferral_mass, resolution })
        })
        .collect()
}

/// The winner shared by every row, if there is one.
pub fn unanimous_winner(rows: &[MassFormRow]) -> Option<TopExpertMassForm> {
    let first = rows.first()?.resolution.winner?;
    rows.iter().all(|r| r.resolution.winner == Some(first)).then_some(first)
}

/// Shortest round-trip form, switching to exponent notation for very small
/// or large magnitudes.
pub fn num(value: f64) -> String {
    format!("{value:?}")
}

fn num_or_empty(value: f64) -> String {
    if value.is_nan() {
        String::new()
    } else {
        num(value)
    }
}

fn verify_consistency_suite(settings: &ConsistencySettings, out: &OutputDir) -> Result<Outcome, CliError> {
    let points = consistency_points(settings)?;

    let mut condition_rows = Vec::new();
    for p in &points {
        let report = check_condition1(&p.point).map_err(|e| core_failure(&p.name, e))?;
        let first = report
            .violations
            .first()
            .map(|v| format!("expert {} vs {:?} gap {}", v.expert, v.subset, v.gap))
            .unwrap_or_default();
        condition_rows.push(vec![
            p.name.clone(),
            report.best_expert.to_string(),
            report.unique_best.to_string(),
            report.holds.to_string(),
            num(report.min_gap),
            report.violations.len().to_string(),
            first,
        ]);
    }
    out.write_csv(
        "condition1.csv",
        &["point", "best_expert", "unique_best", "holds", "min_gap", "violations", "first_violation"],
        &condition_rows,
    )?;

    let rows = consistency_checks(settings, &points)?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let rep = &r.report;
            vec![
                r.point.clone(),
                r.k.to_string(),
                r.j.to_string(),
                rep.base.to_string(),
                rep.bayes_decision.to_string(),
                rep.learned_decision.to_string(),
                rep.decisions_match.to_string(),
                num(rep.label_part_recovery_error),
                num(rep.label_mass_error),
                num_or_empty(rep.deferral_mass_error),
                num(rep.expert_accuracy_recovery_error),
                rep.argmax_expert_match.to_string(),
                rep.label_argmax_match.to_string(),
                rep.condition1_holds.to_string(),
                rep.converged.to_string(),
                r.decisive.to_string(),
                r.status.name().to_string(),
            ]
        })
        .collect();
    out.write_csv(
        "consistency.csv",
        &[
            "point",
            "K",
            "J",
            "base",
            "bayes_decision",
            "learned_decision",
            "decisions_match",
            "label_part_recovery_error",
            "label_mass_error",
            "deferral_mass_error",
            "expert_accuracy_recovery_error",
            "argmax_expert_match",
            "label_argmax_match",
            "condition1_holds",
            "converged",
            "decisive",
            "status",
        ],
        &csv_rows,
    )?;

    let mut mass_rows = Vec::new();
    let mut winner = None;
    if settings.bases.contains(&BaseLoss::CrossEntropy) {
        mass_rows = mass_form_checks(settings, &points)?;
        let csv_rows: Vec<Vec<String>> = mass_rows
            .iter()
            .map(|m| {
                let r = &m.resolution;
                vec![
                    m.point.clone(),
                    num(m.deferral_mass),
                    num(r.top_expert_mass),
                    num(r.deferral_mass_candidate),
                    num(r.label_mass_candidate),
                    num(r.error_of(TopExpertMassForm::AccuracyTimesDeferralMass)),
                    num(r.error_of(TopExpertMassForm::AccuracyTimesLabelMass)),
                    r.winner.map(|w| w.to_string()).unwrap_or_else(|| "none".into()),
                ]
            })
            .collect();
        out.write_csv(
            "mass_form.csv",
            &[
                "point",
                "deferral_mass",
                "top_expert_mass",
                "acc_times_deferral_mass",
                "acc_times_label_mass",
                "deferral_form_error",
                "label_form_error",
                "winner",
            ],
            &csv_rows,
        )?;
        winner = unanimous_winner(&mass_rows);
        let record = format!(
            "winner = \"{}\"\npoints = {}\nagreeing = {}\n",
            winner.map(|w| w.to_string()).unwrap_or_else(|| "unresolved".into()),
            mass_rows.len(),
            mass_rows.iter().filter(|m| m.resolution.winner.is_some() && m.resolution.winner == winner).count(),
        );
        out.write_text("mass_form.toml", &record)?;
    }

    let failures = rows.iter().filter(|r| r.status.is_failure()).count();
    let flagged = rows.iter().filter(|r| r.status == RowStatus::Condition1Violated).count();
    let mass_ok = mass_rows.is_empty() || winner.is_some();
    Ok(Outcome {
        passed: failures == 0 && mass_ok,
        summary: format!(
            "{} rows ({failures} failed, {flagged} violate Condition 1); top-expert mass form: {} over {} points",
            rows.len(),
            winner.map(|w| w.to_string()).unwrap_or_else(|| "unresolved".into()),
            mass_rows.len()
        ),
    })
}

pub const RESULTS_HEADER: [&str; 8] =
    ["family", "base", "J", "trial", "system_error", "coverage", "classifier_accuracy", "train_seconds"];

pub fn results_rows(rows: &[SweepRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.spec.family.to_string(),
                r.spec.base.to_string(),
                r.j.to_string(),
                r.trial.to_string(),
                num(r.metrics.system_error),
                num(r.metrics.coverage),
                num(r.metrics.classifier_accuracy),
                r.train_seconds.map(num).unwrap_or_default(),
            ]
        })
        .collect()
}

fn run_sweep(config: &deferral_train::SweepConfig, out: &OutputDir) -> Result<Outcome, CliError> {
    let rows = sweep_experts(config).map_err(|e| match e {
        TrainError::Divergence { .. } => CliError::Failed(format!("training diverged: {e}")),
        other => CliError::Failed(other.to_string()),
    })?;
    out.write_csv("results.csv", &RESULTS_HEADER, &results_rows(&rows))?;
    let mut curves = Vec::new();
    for r in &rows {
        for (epoch, loss) in r.loss_curve.iter().enumerate() {
            curves.push(vec![
                r.spec.family.to_string(),
                r.spec.base.to_string(),
                r.j.to_string(),
                r.trial.to_string(),
                (epoch + 1).to_string(),
                num(*loss),
            ]);
        }
    }
    out.write_csv("loss_curves.csv", &["family", "base", "J", "trial", "epoch", "loss"], &curves)?;
    let summary: Vec<Vec<String>> = summarize(&rows)
        .iter()
        .map(|s| {
            vec![
                s.spec.family.to_string(),
                s.spec.base.to_string(),
                s.j.to_string(),
                s.trials.to_string(),
                num(s.mean.system_error),
                num(s.std.system_error),
                num(s.mean.coverage),
                num(s.std.coverage),
                num(s.mean.classifier_accuracy),
                num(s.std.classifier_accuracy),
            ]
        })
        .collect();
    out.write_csv(
        "summary.csv",
        &[
            "family",
            "base",
            "J",
            "trials",
            "system_error_mean",
            "system_error_std",
            "coverage_mean",
            "coverage_std",
            "classifier_accuracy_mean",
            "classifier_accuracy_std",
        ],
        &summary,
    )?;
    Ok(Outcome { passed: true, summary: format!("{} runs written", rows.len()) })
}
