//! Per-point minimization of conditional risks by projected gradient descent,
//! plus the continuity probe contrasting PCE with PiCCE.
//!
//! The PiCCE risk is the pointwise minimum, over expert rankings `σ`, of the
//! smooth convex risks `R_σ` that weight deferral option `σ_i` by
//! `Pr(σ_1..σ_{i-1} wrong, σ_i right)`. Plain descent on it can settle in the
//! basin of a non-optimal ranking, so [`minimize_picce_global`] minimizes
//! every `R_σ` and keeps the best.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::domain::ConditionalPoint;
use crate::error::{Error, Result};
use crate::losses::{BaseLoss, Family, SurrogateSpec};
use crate::risk::{picce_weights_for_order, risk_weights};

/// Scores are kept in `[-SCORE_CLAMP, SCORE_CLAMP]` during descent.
pub const SCORE_CLAMP: f64 = 30.0;
const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MIN_STEP: f64 = 1e-20;
/// With line search, each iteration's trial step is the Barzilai-Borwein
/// step `sᵀy / yᵀy` of the previous move, kept within this factor of the
/// configured step size.
const STEP_RANGE: f64 = 1024.0;
/// Rankings enumerated by [`minimize_picce_global`] grow as `J!`.
pub const MAX_GLOBAL_EXPERTS: usize = 8;
const INIT_JITTER: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub step_size: f64,
    pub grad_tolerance: f64,
    pub use_line_search: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            step_size: 0.5,
            grad_tolerance: 1e-8,
            use_line_search: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be positive".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("step_size {} must be positive", self.step_size)));
        }
        if !(self.grad_tolerance > 0.0 && self.grad_tolerance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grad_tolerance {} must be positive",
                self.grad_tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub risk: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Status {
    Converged,
    /// Iteration budget exhausted or line search stalled.
    NonConvergence { grad_norm: f64 },
}

impl Status {
    pub fn converged(&self) -> bool {
        matches!(self, Status::Converged)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub theta: Vec<f64>,
    pub risk: f64,
    pub trace: Vec<TraceRow>,
    pub status: Status,
}

/// Writes `iter,risk,grad_norm` rows.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], mut out: W) -> io::Result<()> {
    writeln!(out, "iter,risk,grad_norm")?;
    for row in trace {
        writeln!(out, "{},{},{}", row.iter, row.risk, row.grad_norm)?;
    }
    Ok(())
}

/// Zero scores with uniform jitter of magnitude `1e-3` so that no two
/// expert scores tie at the start.
pub fn jittered_init(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim)
        .map(|_| rng.random_range(-INIT_JITTER..INIT_JITTER))
        .collect()
}

/// Gradient of the conditional risk at `theta`. For PCE/PiCCE the gradient
/// of the branch selected by the canonical (stable, descending) ranking is
/// returned.
pub fn risk_gradient(point: &ConditionalPoint, theta: &[f64], spec: SurrogateSpec) -> Result<Vec<f64>> {
    let w = risk_weights(point, theta, spec.family)?;
    Ok(spec.base.weighted_value_grad(theta, point.num_classes(), &w).1)
}

fn gauge_coordinate(base: BaseLoss) -> Option<usize> {
    match base {
        // softmax is invariant to a common shift; pin the first label score
        BaseLoss::CrossEntropy => Some(0),
        BaseLoss::OvaLog => None,
    }
}

/// Projected gradient: zero on the pinned coordinate and on coordinates
/// pressed against the clamp.
fn project(theta: &[f64], grad: &[f64], pinned: Option<usize>) -> Vec<f64> {
    grad.iter()
        .zip(theta)
        .enumerate()
        .map(|(i, (&g, &t))| {
            if Some(i) == pinned
                || (t >= SCORE_CLAMP && g < 0.0)
                || (t <= -SCORE_CLAMP && g > 0.0)
            {
                0.0
            } else {
                g
            }
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Projected gradient descent with optional Armijo backtracking.
pub fn descend<F>(objective: F, init: &[f64], pinned: Option<usize>, config: &OptimizerConfig) -> Result<Minimum>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    config.validate()?;
    let mut theta: Vec<f64> = init.iter().map(|t| t.clamp(-SCORE_CLAMP, SCORE_CLAMP)).collect();
    let (mut value, grad) = objective(&theta);
    let mut g = project(&theta, &grad, pinned);
    let mut g_norm = norm(&g);
    let mut trace = vec![TraceRow { iter: 0, risk: value, grad_norm: g_norm }];
    let mut status = Status::NonConvergence { grad_norm: g_norm };
    let mut trial = config.step_size;

    for iter in 1..=config.max_iters {
        if g_norm < config.grad_tolerance {
            status = Status::Converged;
            break;
        }
        let mut step = trial;
        let accepted = loop {
            let cand: Vec<f64> = theta
                .iter()
                .zip(&g)
                .map(|(t, gi)| (t - step * gi).clamp(-SCORE_CLAMP, SCORE_CLAMP))
                .collect();
            let (cand_value, cand_grad) = objective(&cand);
            if !config.use_line_search {
                break Some((cand, cand_value, cand_grad));
            }
            let moved: f64 = theta.iter().zip(&cand).zip(&g).map(|((t, c), gi)| gi * (t - c)).sum();
            // rounding slack: decreases below ~1e-16 |f| are not observable
            let slack = 4.0 * f64::EPSILON * value.abs().max(1.0);
            if cand_value <= value - ARMIJO_C * moved + slack && cand_value <= value + slack {
                break Some((cand, cand_value, cand_grad));
            }
            step *= BACKTRACK;
            if step < MIN_STEP {
                break None;
            }
        };
        let Some((cand, cand_value, cand_grad)) = accepted else {
            status = Status::NonConvergence { grad_norm: g_norm };
            break;
        };
        let new_g = project(&cand, &cand_grad, pinned);
        if config.use_line_search {
            let (mut sy, mut yy) = (0.0, 0.0);
            for i in 0..theta.len() {
                let (si, yi) = (cand[i] - theta[i], new_g[i] - g[i]);
                sy += si * yi;
                yy += yi * yi;
            }
            trial = if sy > 0.0 && yy > 0.0 {
                (sy / yy).clamp(config.step_size / STEP_RANGE, config.step_size * STEP_RANGE)
            } else {
                config.step_size
            };
        }
        theta = cand;
        value = cand_value;
        g = new_g;
        g_norm = norm(&g);
        trace.push(TraceRow { iter, risk: value, grad_norm: g_norm });
        if !value.is_finite() {
            status = Status::NonConvergence { grad_norm: f64::NAN };
            break;
        }
        status = if g_norm < config.grad_tolerance {
            Status::Converged
        } else {
            Status::NonConvergence { grad_norm: g_norm }
        };
    }
    Ok(Minimum { theta, risk: value, trace, status })
}

/// Gradient descent on the conditional risk of `spec` itself. For PiCCE
/// this finds a local minimum; see [`minimize_picce_global`].
pub fn minimize_conditional_risk(
    point: &ConditionalPoint,
    spec: SurrogateSpec,
    config: &OptimizerConfig,
    theta_init: &[f64],
) -> Result<Minimum> {
    if theta_init.len() != point.score_dim() {
        return Err(Error::Dimension {
            what: "initial scores",
            expected: point.score_dim(),
            got: theta_init.len(),
        });
    }
    let k = point.num_classes();
    let objective = |theta: &[f64]| {
        let w = risk_weights(point, theta, spec.family).expect("validated dimensions");
        spec.base.weighted_value_grad(theta, k, &w)
    };
    descend(objective, theta_init, gauge_coordinate(spec.base), config)
}

/// Independent minimizations over a batch of points, each from
/// [`jittered_init`] seeded by `seed + index`. Results keep input order.
pub fn minimize_batch(
    points: &[ConditionalPoint],
    spec: SurrogateSpec,
    config: &OptimizerConfig,
    seed: u64,
) -> Vec<Result<Minimum>> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let init = jittered_init(p.score_dim(), seed.wrapping_add(i as u64));
            minimize_conditional_risk(p, spec, config, &init)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalMinimum {
    /// Best minimizer; `risk` is the PiCCE risk evaluated at `theta`.
    pub minimum: Minimum,
    /// Ranking whose smooth risk produced the minimizer.
    pub ranking: Vec<usize>,
    pub rankings_tried: usize,
    /// Whether every per-ranking descent converged.
    pub all_converged: bool,
}

/// Minimizes the PiCCE risk by descending each per-ranking risk `R_σ` from
/// the same jittered start and keeping the lowest.
pub fn minimize_picce_global(
    point: &ConditionalPoint,
    base: BaseLoss,
    config: &OptimizerConfig,
    seed: u64,
) -> Result<GlobalMinimum> {
    config.validate()?;
    let j = point.num_experts();
    if j > MAX_GLOBAL_EXPERTS {
        return Err(Error::TooManyExperts { got: j, limit: MAX_GLOBAL_EXPERTS });
    }
    let k = point.num_classes();
    let init = jittered_init(point.score_dim(), seed);
    let mut best: Option<(Minimum, Vec<usize>)> = None;
    let mut tried = 0;
    let mut all_converged = true;
    for ranking in permutations(j) {
        let mut weights = point.posterior().to_vec();
        weights.extend(picce_weights_for_order(point, &ranking));
        let objective = |theta: &[f64]| base.weighted_value_grad(theta, k, &weights);
        let m = descend(objective, &init, gauge_coordinate(base), config)?;
        tried += 1;
        all_converged &= m.status.converged();
        if best.as_ref().is_none_or(|(b, _)| m.risk < b.risk) {
            best = Some((m, ranking));
        }
    }
    let (mut minimum, ranking) = best.expect("at least one ranking");
    minimum.risk = crate::risk::conditional_risk(point, &minimum.theta, SurrogateSpec::new(Family::Picce, base))?;
    Ok(GlobalMinimum {
        minimum,
        ranking,
        rankings_tried: tried,
        all_converged,
    })
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = vec![current.clone()];
    loop {
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            return out;
        };
        let pivot = i - 1;
        let swap = (i..n).rev().find(|&s| current[s] > current[pivot]).expect("successor exists");
        current.swap(pivot, swap);
        current[i..].reverse();
        out.push(current.clone());
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinuityReport {
    pub n_steps: usize,
    /// Parameter step `Δt = 1 / n_steps`.
    pub step: f64,
    pub pce_max_jump: f64,
    pub picce_max_jump: f64,
}

impl ContinuityReport {
    pub fn pce_ratio(&self) -> f64 {
        self.pce_max_jump / self.step
    }

    pub fn picce_ratio(&self) -> f64 {
        self.picce_max_jump / self.step
    }
}

/// Evaluates PCE and PiCCE along `θ(t) = start + t (end - start)` at
/// `t = i / n_steps` and reports the largest change between neighbours.
pub fn continuity_probe(
    label: usize,
    expert_preds: &[usize],
    k: usize,
    base: BaseLoss,
    start: &[f64],
    end: &[f64],
    n_steps: usize,
) -> Result<ContinuityReport> {
    if start.len() != k + expert_preds.len() || end.len() != start.len() {
        return Err(Error::Dimension {
            what: "path endpoints",
            expected: k + expert_preds.len(),
            got: start.len().min(end.len()),
        });
    }
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be positive".into()));
    }
    if start == end {
        return Err(Error::InvalidArgument("degenerate (constant) path".into()));
    }
    let pce = SurrogateSpec::new(Family::Pce, base);
    let picce = SurrogateSpec::new(Family::Picce, base);
    let at = |i: usize| -> Vec<f64> {
        let t = i as f64 / n_steps as f64;
        start.iter().zip(end).map(|(a, b)| a + t * (b - a)).collect()
    };
    let mut prev = at(0);
    let mut prev_vals = (pce.loss(&prev, k, label, expert_preds), picce.loss(&prev, k, label, expert_preds));
    let (mut pce_max, mut picce_max) = (0.0f64, 0.0f64);
    for i in 1..=n_steps {
        let theta = at(i);
        let vals = (pce.loss(&theta, k, label, expert_preds), picce.loss(&theta, k, label, expert_preds));
        pce_max = pce_max.max((vals.0 - prev_vals.0).abs());
        picce_max = picce_max.max((vals.1 - prev_vals.1).abs());
        prev = theta;
        prev_vals = vals;
    }
    let _ = prev;
    Ok(ContinuityReport {
        n_steps,
        step: 1.0 / n_steps as f64,
        pce_max_jump: pce_max,
        picce_max_jump: picce_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ExpertJointModel;
    use crate::losses::softmax;
    use crate::risk::{conditional_risk, dummy_vanilla};

    const CE: BaseLoss = BaseLoss::CrossEntropy;
    const OVA: BaseLoss = BaseLoss::OvaLog;

    fn point(eta: Vec<f64>, acc: Vec<Vec<f64>>) -> ConditionalPoint {
        ConditionalPoint::new(eta, ExpertJointModel::independent(acc).unwrap()).unwrap()
    }

    /// Central differences of the closed-form risk.
    fn fd_gradient(p: &ConditionalPoint, theta: &[f64], spec: SurrogateSpec, h: f64) -> Vec<f64> {
        (0..theta.len())
            .map(|i| {
                let mut up = theta.to_vec();
                let mut down = theta.to_vec();
                up[i] += h;
                down[i] -= h;
                (conditional_risk(p, &up, spec).unwrap() - conditional_risk(p, &down, spec).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn permutations_enumerates_all() {
        assert_eq!(permutations(1), vec![vec![0]]);
        let p3 = permutations(3);
        assert_eq!(p3.len(), 6);
        assert_eq!(p3[1], vec![0, 2, 1]);
        assert_eq!(permutations(5).len(), 120);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = point(
            vec![0.5, 0.3, 0.2],
            vec![vec![0.8, 0.4, 0.6], vec![0.3, 0.7, 0.5], vec![0.5, 0.5, 0.9]],
        );
        let theta = [0.3, -0.2, 0.1, 0.7, -0.4, 0.2];
        for spec in SurrogateSpec::all() {
            let g = risk_gradient(&p, &theta, spec).unwrap();
            let fd = fd_gradient(&p, &theta, spec, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{spec}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ova_expert_branch_has_no_cross_terms() {
        let theta = [0.3, -0.2, 0.1, 0.7, -0.4];
        let k = 3;
        let h = 1e-3;
        let f = |t: &[f64]| crate::losses::phi_ova(t, k, 3);
        for other in [0, 1, 2, 4] {
            let mut pp = theta.to_vec();
            pp[3] += h;
            pp[other] += h;
            let mut pm = theta.to_vec();
            pm[3] += h;
            pm[other] -= h;
            let mut mp = theta.to_vec();
            mp[3] -= h;
            mp[other] += h;
            let mut mm = theta.to_vec();
            mm[3] -= h;
            mm[other] -= h;
            let mixed = (f(&pp) - f(&pm) - f(&mp) + f(&mm)) / (4.0 * h * h);
            assert!(mixed.abs() < 1e-6);
        }
    }

    #[test]
    fn vanilla_ce_recovers_dummy_distribution() {
        let p = point(
            vec![0.5, 0.3, 0.2],
            vec![vec![0.8, 0.4], vec![0.3, 0.7], vec![0.5, 0.5]],
        );
        let spec = SurrogateSpec::new(Family::Vanilla, CE);
        let m = minimize_conditional_risk(&p, spec, &OptimizerConfig::default(), &jittered_init(5, 1)).unwrap();
        assert!(m.status.converged());
        let sm = softmax(&m.theta);
        for (a, b) in sm.iter().zip(dummy_vanilla(&p).probs()) {
            assert!((a - b).abs() < 1e-3);
        }
        let g = risk_gradient(&p, &m.theta, spec).unwrap();
        assert!(project(&m.theta, &g, Some(0)).iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-8);
        // trace is nonincreasing
        for w in m.trace.windows(2) {
            assert!(w[1].risk <= w[0].risk + 1e-12);
        }
    }

    #[test]
    fn descent_is_deterministic() {
        let p = point(vec![0.6, 0.4], vec![vec![0.7, 0.2], vec![0.4, 0.9]]);
        let spec = SurrogateSpec::new(Family::Picce, OVA);
        let init = jittered_init(4, 9);
        let a = minimize_conditional_risk(&p, spec, &OptimizerConfig::default(), &init).unwrap();
        let b = minimize_conditional_risk(&p, spec, &OptimizerConfig::default(), &init).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_iteration_budget_reports_nonconvergence() {
        let p = point(vec![0.6, 0.4], vec![vec![0.7], vec![0.4]]);
        let cfg = OptimizerConfig { max_iters: 1, ..Default::default() };
        let m = minimize_conditional_risk(&p, SurrogateSpec::new(Family::Vanilla, CE), &cfg, &[0.0; 3]).unwrap();
        assert!(!m.status.converged());
        assert!(OptimizerConfig { step_size: 0.0, ..Default::default() }.validate().is_err());
    }

    /// Two independent experts (0.8 and 0.6): the ranking (1, 0) has an
    /// interior minimum of its own smooth risk, a strict local minimum of the
    /// PiCCE risk that is worse than the global one.
    #[test]
    fn local_descent_can_miss_global_picce_minimum() {
        let p = point(vec![0.5, 0.5], vec![vec![0.8, 0.6], vec![0.8, 0.6]]);
        let cfg = OptimizerConfig::default();
        let spec = SurrogateSpec::new(Family::Picce, CE);
        let wrong_start = [0.0, 0.0, -0.5, 0.5];
        let local = minimize_conditional_risk(&p, spec, &cfg, &wrong_start).unwrap();
        let global = minimize_picce_global(&p, CE, &cfg, 0).unwrap();
        assert!(local.status.converged());
        assert!(local.theta[3] > local.theta[2]);
        assert!(local.risk > global.minimum.risk + 0.1);
        assert_eq!(global.ranking, vec![0, 1]);
        assert_eq!(global.rankings_tried, 2);
    }

    #[test]
    fn global_minimum_is_restart_stable() {
        let p = point(
            vec![0.5, 0.3, 0.2],
            vec![vec![0.8, 0.4, 0.6], vec![0.3, 0.7, 0.5], vec![0.5, 0.5, 0.9]],
        );
        for base in BaseLoss::ALL {
            let risks: Vec<f64> = (0..5)
                .map(|s| minimize_picce_global(&p, base, &OptimizerConfig::default(), s).unwrap().minimum.risk)
                .collect();
            for r in &risks {
                assert!((r - risks[0]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn continuity_probe_contrast() {
        // expert 0 agrees with the label, expert 1 does not; scores swap order at t = 1/2
        let start = [0.0, 0.0, 1.0, 0.0];
        let end = [0.0, 0.0, 0.0, 1.0];
        let mut prev_pce: Option<f64> = None;
        for n in [100, 1000, 10_000] {
            let r = continuity_probe(0, &[0, 1], 2, CE, &start, &end, n).unwrap();
            assert!(r.pce_max_jump > 0.1);
            assert!(r.picce_max_jump <= 10.0 * r.step);
            if let Some(p) = prev_pce {
                assert!((r.pce_max_jump - p).abs() < 0.05);
            }
            prev_pce = Some(r.pce_max_jump);
        }
        // both experts correct: both losses continuous
        let r = continuity_probe(0, &[0, 0], 2, CE, &start, &end, 10_000).unwrap();
        assert!(r.pce_max_jump <= 10.0 * r.step && r.picce_max_jump <= 10.0 * r.step);
        assert!(continuity_probe(0, &[0, 0], 2, CE, &start, &start, 10).is_err());
    }
}
