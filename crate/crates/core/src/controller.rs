//! Per-agent control law and the per-step descent audit.
//!
//! Each round agent `i` blends its gradient estimate `Lambda` with the
//! formation gradient `grad_i phi`:
//!
//! ```text
//! lambda = lambda0 * min(1, |grad_i phi| / |Lambda - grad_i phi| * sigma(Phi_i) / sigma(phi_i))
//! p      = lambda * Lambda + (1 - lambda) * grad_i phi
//! alpha in (0, min(1/L_phi, 1/L, 2c / |Lambda - grad_i phi|^2)]
//! x'     = x - alpha * p
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::formation::{broadcast, FormationSpec};
use crate::graph::TopologyGraph;
use crate::scenario::Point;

/// Absolute slack on the analytically exact per-step inequalities.
pub const AUDIT_TOLERANCE: f64 = 1e-9;

/// Class-K function used to soften the weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sigma {
    /// `z -> z^2`
    Square,
    /// `z -> z`
    Identity,
    /// `z -> z^p`, `p > 0`
    Power(f64),
}

impl Sigma {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Sigma::Square => z * z,
            Sigma::Identity => z,
            Sigma::Power(p) => z.powf(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AlphaPolicy {
    /// Fraction of the admissible interval's upper end.
    MaxFraction { fraction: f64 },
    /// Fixed step; rejected whenever it leaves the admissible interval.
    Fixed { alpha: f64 },
}

impl Default for AlphaPolicy {
    fn default() -> Self {
        AlphaPolicy::MaxFraction { fraction: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlParams {
    pub lambda_nominal: f64,
    /// `Phi_i` per agent.
    pub phi_caps: Vec<f64>,
    /// `c`
    pub slack: f64,
    pub sigma: Sigma,
    pub lipschitz_l: f64,
    pub lipschitz_phi: f64,
    pub alpha_policy: AlphaPolicy,
}

impl ControlParams {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.lambda_nominal) {
            problems.push(format!("lambda_nominal {} outside [0, 1]", self.lambda_nominal));
        }
        if let Some(bad) = self.phi_caps.iter().find(|c| !(**c > 0.0)) {
            problems.push(format!("phi cap {bad} must be positive"));
        }
        if !(self.slack > 0.0) {
            problems.push(format!("slack c = {} must be positive", self.slack));
        }
        if !(self.lipschitz_l > 0.0) || !(self.lipschitz_phi > 0.0) {
            problems.push("Lipschitz constants must be positive".into());
        }
        if let Sigma::Power(p) = self.sigma {
            if !(p > 0.0) {
                problems.push(format!("sigma power {p} must be positive"));
            }
        }
        match self.alpha_policy {
            AlphaPolicy::MaxFraction { fraction } if !(fraction > 0.0 && fraction <= 1.0) => {
                problems.push(format!("alpha fraction {fraction} outside (0, 1]"))
            }
            AlphaPolicy::Fixed { alpha } if !(alpha > 0.0) => {
                problems.push(format!("fixed alpha {alpha} must be positive"))
            }
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidControl(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ModeFlags {
    /// Gradient estimate unavailable this round.
    pub estimation_failed: bool,
    /// The ratio term of the weighting was below 1.
    pub lambda_capped: bool,
    /// Agent held its position this round.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub direction: Point,
    pub lambda: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    /// `-alpha * direction`
    pub input: Point,
    pub flags: ModeFlags,
}

impl StepPlan {
    pub fn hold(dimension: usize, flags: ModeFlags) -> Self {
        Self {
            direction: Point::zeros(dimension),
            lambda: 0.0,
            alpha: 0.0,
            alpha_bar: f64::INFINITY,
            input: Point::zeros(dimension),
            flags: ModeFlags { skipped: true, ..flags },
        }
    }

    pub fn new(direction: Point, lambda: f64, alpha: f64, alpha_bar: f64, flags: ModeFlags) -> Self {
        let input = &direction * -alpha;
        Self { direction, lambda, alpha, alpha_bar, input, flags }
    }
}

/// Weighting between estimate and formation gradient. Returns the weight
/// and whether the ratio term was binding.
pub fn compute_lambda(
    grad_phi: &Point,
    estimate: &Point,
    phi_i: f64,
    phi_cap: f64,
    params: &ControlParams,
) -> (f64, bool) {
    let gap = (estimate - grad_phi).norm();
    let sigma_phi = params.sigma.apply(phi_i);
    if gap == 0.0 || sigma_phi == 0.0 {
        return (params.lambda_nominal.min(1.0), false);
    }
    let ratio = grad_phi.norm() / gap * params.sigma.apply(phi_cap) / sigma_phi;
    let capped = ratio < 1.0;
    (params.lambda_nominal * ratio.min(1.0), capped)
}

/// Step size and `alpha_bar = 2c / |Lambda - grad_i phi|^2`.
pub fn compute_alpha(estimate: &Point, grad_phi: &Point, params: &ControlParams) -> Result<(f64, f64)> {
    let gap_sq = (estimate - grad_phi).norm_squared();
    let alpha_bar = if gap_sq == 0.0 { f64::INFINITY } else { 2.0 * params.slack / gap_sq };
    let upper = (1.0 / params.lipschitz_phi).min(1.0 / params.lipschitz_l).min(alpha_bar);
    match params.alpha_policy {
        AlphaPolicy::MaxFraction { fraction } => Ok((fraction * upper, alpha_bar)),
        AlphaPolicy::Fixed { alpha } if alpha > 0.0 && alpha <= upper => Ok((alpha, alpha_bar)),
        AlphaPolicy::Fixed { alpha } => {
            Err(Error::Precondition(format!("fixed alpha {alpha} outside admissible interval (0, {upper}]")))
        }
    }
}

pub fn step_direction(lambda: f64, estimate: &Point, grad_phi: &Point) -> Point {
    estimate * lambda + grad_phi * (1.0 - lambda)
}

/// Formation-mode plan. A missing estimate falls back to pure formation
/// control (`lambda = 0`), with `Lambda` taken as zero inside `alpha_bar`.
pub fn plan_formation(
    estimate: Option<&Point>,
    grad_phi: &Point,
    phi_i: f64,
    phi_cap: f64,
    params: &ControlParams,
) -> Result<StepPlan> {
    let zero = Point::zeros(grad_phi.len());
    let (estimate, failed) = match estimate {
        Some(e) => (e, false),
        None => (&zero, true),
    };
    let (lambda, capped) =
        if failed { (0.0, false) } else { compute_lambda(grad_phi, estimate, phi_i, phi_cap, params) };
    let (alpha, alpha_bar) = compute_alpha(estimate, grad_phi, params)?;
    let direction = step_direction(lambda, estimate, grad_phi);
    Ok(StepPlan::new(
        direction,
        lambda,
        alpha,
        alpha_bar,
        ModeFlags { estimation_failed: failed, lambda_capped: capped, skipped: false },
    ))
}

/// Synchronous update of every agent from the same snapshot.
pub fn apply_step(positions: &[Point], plans: &[StepPlan]) -> Result<Vec<Point>> {
    if positions.len() != plans.len() {
        return Err(Error::Precondition(format!("{} plans for {} agents", plans.len(), positions.len())));
    }
    Ok(positions.iter().zip(plans).map(|(x, p)| x + &p.input).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditCase {
    /// `phi_i >= Phi_i`: the agent's move must not raise the potential.
    AboveCap,
    /// `phi_i < Phi_i`: the rise is bounded by the slack `c`.
    BelowCap,
}

/// Per-agent descent audit for one round.
///
/// The inequalities bound the change of the network potential caused by
/// agent `i`'s own move (`unilateral_change`), which is what the
/// Lipschitz step on `grad_i phi` controls. The literal change of `phi_i`
/// after all agents moved is recorded alongside for reference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRecord {
    pub case: AuditCase,
    pub phi_before: f64,
    pub phi_after: f64,
    pub unilateral_change: f64,
    /// `-alpha grad_i phi . p + (L_phi / 2) alpha^2 |p|^2`
    pub lipschitz_term: f64,
    /// `(alpha/2) lambda^2 |Lambda - grad_i phi|^2 - (alpha/2) |grad_i phi|^2`
    pub quadratic_bound: f64,
    /// Case (a) or (b) inequality on the unilateral change.
    pub case_ok: bool,
    /// Unilateral change below the quadratic-form bound.
    pub quadratic_ok: bool,
    /// Case inequality applied to the literal change of `phi_i`.
    pub literal_ok: bool,
}

impl AuditRecord {
    pub fn violated(&self) -> bool {
        !(self.case_ok && self.quadratic_ok)
    }
}

/// Network-level descent check for one round:
/// `phi(x_{k+1}) - phi(x_k) <= sum_i lipschitz_term_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundAudit {
    pub global_change: f64,
    pub lipschitz_sum: f64,
    pub ok: bool,
}

/// Inputs the audit needs about one agent's round-k decision.
#[derive(Debug, Clone, Copy)]
pub struct AuditInput<'a> {
    pub phi_i: f64,
    pub grad_phi: &'a Point,
    /// Estimate used by the plan (zero if estimation failed).
    pub estimate: &'a Point,
    pub plan: &'a StepPlan,
}

fn local_sum(positions: &[Point], agents: &[usize], spec: &FormationSpec, graph: &TopologyGraph) -> f64 {
    agents
        .iter()
        .map(|&m| {
            let neighbors: Vec<(usize, &Point)> = graph.neighbors_of(m).iter().map(|&j| (j, &positions[j])).collect();
            let b = broadcast(m, &positions[m], &neighbors, spec);
            b.numerator * (-b.beta).exp()
        })
        .sum()
}

/// Evaluates the per-step inequalities for every agent after a round.
#[allow(clippy::too_many_arguments)]
pub fn descent_audit(
    before: &[Point],
    after: &[Point],
    phi_after: &[f64],
    inputs: &[AuditInput<'_>],
    params: &ControlParams,
    spec: &FormationSpec,
    graph: &TopologyGraph,
    exec: Execution,
) -> (Vec<AuditRecord>, RoundAudit) {
    let records: Vec<AuditRecord> = exec.map_indexed(before.len(), |i| {
        let input = &inputs[i];
        let plan = input.plan;
        let mut affected = vec![i];
        affected.extend_from_slice(graph.neighbors_of(i));
        let base = local_sum(before, &affected, spec, graph);
        let mut moved = before.to_vec();
        moved[i] = after[i].clone();
        let unilateral_change = local_sum(&moved, &affected, spec, graph) - base;

        let alpha = plan.alpha;
        let lipschitz_term = -alpha * input.grad_phi.dot(&plan.direction)
            + 0.5 * params.lipschitz_phi * alpha * alpha * plan.direction.norm_squared();
        let gap_sq = (input.estimate - input.grad_phi).norm_squared();
        let quadratic_bound =
            0.5 * alpha * plan.lambda * plan.lambda * gap_sq - 0.5 * alpha * input.grad_phi.norm_squared();
        let cap = params.phi_caps[i];
        let case = if input.phi_i >= cap { AuditCase::AboveCap } else { AuditCase::BelowCap };
        let allowed = match case {
            AuditCase::AboveCap => 0.0,
            AuditCase::BelowCap => params.slack,
        };
        AuditRecord {
            case,
            phi_before: input.phi_i,
            phi_after: phi_after[i],
            unilateral_change,
            lipschitz_term,
            quadratic_bound,
            case_ok: unilateral_change <= allowed + AUDIT_TOLERANCE,
            quadratic_ok: unilateral_change <= quadratic_bound + AUDIT_TOLERANCE,
            literal_ok: phi_after[i] - input.phi_i <= allowed + AUDIT_TOLERANCE,
        }
    });
    let global_change = phi_after.iter().sum::<f64>() - inputs.iter().map(|x| x.phi_i).sum::<f64>();
    let lipschitz_sum = records.iter().map(|r| r.lipschitz_term).sum();
    let round = RoundAudit { global_change, lipschitz_sum, ok: global_change <= lipschitz_sum + AUDIT_TOLERANCE };
    (records, round)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formation::{global_potential, hexagon_template};
    use proptest::prelude::*;

    fn p(v: &[f64]) -> Point {
        Point::from_column_slice(v)
    }

    fn params() -> ControlParams {
        ControlParams {
            lambda_nominal: 1.0,
            phi_caps: vec![1.0; 6],
            slack: 0.5,
            sigma: Sigma::Square,
            lipschitz_l: 1.0,
            lipschitz_phi: 1.0,
            alpha_policy: AlphaPolicy::default(),
        }
    }

    #[test]
    fn lambda_examples() {
        let pr = params();
        // |grad phi| = 1, |Lambda - grad phi| = 2, phi = 4: 0.5 / 16
        let (l, capped) = compute_lambda(&p(&[1.0, 0.0]), &p(&[3.0, 0.0]), 4.0, 1.0, &pr);
        assert!((l - 1.0 / 32.0).abs() < 1e-15);
        assert!(capped);
        // phi <= Phi and |grad phi| >= |Lambda - grad phi|
        let (l, _) = compute_lambda(&p(&[2.0, 0.0]), &p(&[3.0, 0.0]), 0.5, 1.0, &pr);
        assert_eq!(l, 1.0);
        // Lambda == grad phi
        let (l, _) = compute_lambda(&p(&[2.0, 1.0]), &p(&[2.0, 1.0]), 7.0, 1.0, &pr);
        assert_eq!(l, 1.0);
        // perfect formation
        let (l, _) = compute_lambda(&p(&[0.0, 0.0]), &p(&[2.0, 1.0]), 0.0, 1.0, &pr);
        assert_eq!(l, 1.0);
        // nominal weight scales the result
        let half = ControlParams { lambda_nominal: 0.5, ..pr };
        let (l, _) = compute_lambda(&p(&[1.0, 0.0]), &p(&[3.0, 0.0]), 4.0, 1.0, &half);
        assert!((l - 1.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_examples() {
        let pr = ControlParams { slack: 0.5, ..params() };
        let (_, bar) = compute_alpha(&p(&[2.0, 0.0]), &p(&[0.0, 0.0]), &pr).unwrap();
        assert_eq!(bar, 0.25);
        let (alpha, bar) = compute_alpha(&p(&[1.0, 1.0]), &p(&[1.0, 1.0]), &pr).unwrap();
        assert!(bar.is_infinite());
        assert!(alpha <= 1.0);
        let fixed = ControlParams { alpha_policy: AlphaPolicy::Fixed { alpha: 0.2 }, ..pr.clone() };
        assert_eq!(compute_alpha(&p(&[2.0, 0.0]), &p(&[0.0, 0.0]), &fixed).unwrap().0, 0.2);
        let too_big = ControlParams { alpha_policy: AlphaPolicy::Fixed { alpha: 0.3 }, ..pr };
        assert!(compute_alpha(&p(&[2.0, 0.0]), &p(&[0.0, 0.0]), &too_big).is_err());
    }

    #[test]
    fn direction_examples() {
        let (e, g) = (p(&[2.0, 0.0]), p(&[0.0, 2.0]));
        assert_eq!(step_direction(1.0, &e, &g), e);
        assert_eq!(step_direction(0.0, &e, &g), g);
        assert_eq!(step_direction(0.5, &e, &g), p(&[1.0, 1.0]));
    }

    #[test]
    fn apply_step_examples() {
        let xs = vec![p(&[0.0, 0.0]), p(&[1.0, 1.0])];
        let hold: Vec<_> = xs.iter().map(|_| StepPlan::hold(2, ModeFlags::default())).collect();
        assert_eq!(apply_step(&xs, &hold).unwrap(), xs);
        let one = StepPlan::new(p(&[1.0, 0.0]), 1.0, 0.1, 1.0, ModeFlags::default());
        assert_eq!(apply_step(&xs[..1], &[one]).unwrap(), vec![p(&[-0.1, 0.0])]);
        assert!(apply_step(&xs, &[]).is_err());
    }

    #[test]
    fn estimation_failure_falls_back_to_formation() {
        let pr = params();
        let g = p(&[0.3, -0.4]);
        let plan = plan_formation(None, &g, 2.0, 1.0, &pr).unwrap();
        assert_eq!(plan.lambda, 0.0);
        assert_eq!(plan.direction, g);
        assert!(plan.flags.estimation_failed);
        assert_eq!(plan.input, &g * -plan.alpha);
    }

    fn audit_setup(lipschitz_phi: f64, slack: f64) -> (Vec<AuditRecord>, RoundAudit) {
        let jitter = 0.3;
        let (graph, spec) = FormationSpec::hexagon(4.0, 1.0, 1.0).unwrap();
        let positions: Vec<Point> = hexagon_template(4.0)
            .iter()
            .enumerate()
            .map(|(i, x)| x * 1.4 + p(&[jitter * (i as f64).sin(), jitter * (i as f64).cos()]))
            .collect();
        let pr = ControlParams { lipschitz_phi, slack, ..params() };
        let pot = global_potential(&positions, &spec, &graph, Execution::Sequential).unwrap();
        let estimates: Vec<Point> = positions.iter().map(|x| x * 2.0).collect();
        let plans: Vec<StepPlan> = (0..6)
            .map(|i| {
                let v = &pot.per_agent[i];
                plan_formation(Some(&estimates[i]), &v.grad_phi_i, v.phi_i, 1.0, &pr).unwrap()
            })
            .collect();
        let after = apply_step(&positions, &plans).unwrap();
        let pot_after = global_potential(&after, &spec, &graph, Execution::Sequential).unwrap();
        let phi_after: Vec<f64> = pot_after.per_agent.iter().map(|v| v.phi_i).collect();
        let inputs: Vec<AuditInput<'_>> = (0..6)
            .map(|i| AuditInput {
                phi_i: pot.per_agent[i].phi_i,
                grad_phi: &pot.per_agent[i].grad_phi_i,
                estimate: &estimates[i],
                plan: &plans[i],
            })
            .collect();
        descent_audit(&positions, &after, &phi_after, &inputs, &pr, &spec, &graph, Execution::Sequential)
    }

    #[test]
    fn audit_passes_with_valid_lipschitz_constant() {
        // beta == 1 here; the exact constant is 16/e
        let (records, round) = audit_setup(16.0 * (-1f64).exp(), 0.1);
        assert!(records.iter().all(|r| !r.violated()), "{records:#?}");
        assert!(records.iter().any(|r| r.case == AuditCase::AboveCap));
        assert!(round.ok);
    }

    #[test]
    fn audit_detects_undersized_lipschitz_constant() {
        let (records, round) = audit_setup(0.05, 1e3);
        assert!(records.iter().any(|r| r.violated()));
        assert!(!round.ok);
    }

    proptest! {
        #[test]
        fn lambda_and_alpha_stay_admissible(
            g in proptest::collection::vec(-50.0f64..50.0, 2),
            e in proptest::collection::vec(-50.0f64..50.0, 2),
            phi in 0.0f64..100.0,
            cap in 0.01f64..10.0,
            nominal in 0.0f64..=1.0,
        ) {
            let pr = ControlParams { lambda_nominal: nominal, lipschitz_l: 3.0, lipschitz_phi: 5.0, ..params() };
            let (g, e) = (Point::from_vec(g), Point::from_vec(e));
            let plan = plan_formation(Some(&e), &g, phi, cap, &pr).unwrap();
            prop_assert!((0.0..=1.0).contains(&plan.lambda));
            let upper = (1.0f64 / 5.0).min(1.0 / 3.0).min(plan.alpha_bar);
            prop_assert!(plan.alpha > 0.0 && plan.alpha <= upper);
            prop_assert_eq!(plan.input.clone(), &plan.direction * -plan.alpha);
        }
    }
}
