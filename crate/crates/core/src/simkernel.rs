//! Synchronous round loop.
//!
//! Each round runs in phases over a frozen snapshot of positions:
//! measure, share potential broadcasts, plan every agent from its
//! [`LocalView`], then apply all steps at once and audit the transition.
//! Planning is the only per-agent phase and may run in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{
    analytic_bound, delta_bar, detect_burn_in, distance_bound, estimate_rho_gamma, neighborhood_m, recursive_bound,
    BoundParams,
};
use crate::config::{Mode, Setup};
use crate::controller::{
    compute_alpha, descent_audit, plan_formation, AuditInput, AuditRecord, ModeFlags, RoundAudit, StepPlan,
};
use crate::error::{Error, Result};
use crate::estimator::{estimate, EstimationFailure, GradientEstimate, NeighborReading};
use crate::formation::{
    broadcasts, phi_i, potential_from_broadcasts, NeighborState, PotentialBroadcast, PotentialValue,
};
use crate::graph::TopologyGraph;
use crate::scenario::Point;

/// Seed offset for the perturbation stream in delta-oracle mode.
const PERTURBATION_SEED_SALT: u64 = 0x5045_5254;

/// Everything agent `i` may read in one round: its own position and
/// measurement, and its neighbours' positions, measurements and potential
/// broadcasts. Nothing about other agents is reachable from here.
#[derive(Debug)]
pub struct LocalView<'a> {
    pub agent: usize,
    pub position: &'a Point,
    pub measurement: f64,
    pub readings: Vec<NeighborReading<'a>>,
    pub potential: Vec<NeighborState<'a>>,
}

impl<'a> LocalView<'a> {
    fn gather(
        i: usize,
        graph: &TopologyGraph,
        positions: &'a [Point],
        measurements: &[f64],
        shared: &[PotentialBroadcast],
    ) -> Self {
        let neighbors = graph.neighbors_of(i);
        LocalView {
            agent: i,
            position: &positions[i],
            measurement: measurements[i],
            readings: neighbors
                .iter()
                .map(|&j| NeighborReading { index: j, position: &positions[j], measurement: measurements[j] })
                .collect(),
            potential: neighbors
                .iter()
                .map(|&j| NeighborState {
                    index: j,
                    position: &positions[j],
                    numerator: shared[j].numerator,
                    beta: shared[j].beta,
                    cofactor: shared[j].cofactors.iter().find(|c| c.0 == i).map(|c| c.1).expect("neighbour broadcast"),
                })
                .collect(),
        }
    }
}

/// One agent's round.
#[derive(Debug, Clone)]
pub struct AgentRound {
    pub estimate: std::result::Result<GradientEstimate, EstimationFailure>,
    pub potential: PotentialValue,
    pub plan: StepPlan,
    /// Injected perturbation in delta-oracle mode.
    pub perturbation: Option<Point>,
}

/// Ground truth for one round. Never shown to agents.
#[derive(Debug, Clone)]
pub struct OracleRound {
    pub minimizer: Point,
    pub min_value: f64,
    pub gaps: Vec<f64>,
    pub distances_sq: Vec<f64>,
    pub true_gradients: Vec<Point>,
}

#[derive(Debug, Clone)]
pub struct RoundSnapshot {
    pub k: usize,
    pub positions: Vec<Point>,
    pub measurements: Vec<f64>,
    pub out_of_region: Vec<usize>,
    pub agents: Vec<AgentRound>,
    pub potential_total: f64,
    /// Audit of the step from this round to the next. Absent in the last
    /// round and outside network mode.
    pub audit: Option<(Vec<AuditRecord>, RoundAudit)>,
    pub oracle: OracleRound,
}

/// Per-round bound columns for one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundColumns {
    pub recursive: f64,
    pub analytic: f64,
    pub distance: f64,
    /// `2 * analytic / s`, the squared-distance bound that quadratic growth
    /// actually supports.
    pub distance_growth: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AuditCounts {
    pub checked: usize,
    pub agent_violations: usize,
    pub round_violations: usize,
    /// Case inequality applied to the literal change of `phi_i`; reported
    /// for reference only.
    pub literal_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentMetrics {
    pub agent: usize,
    pub burn_in: Option<usize>,
    pub alpha: f64,
    pub delta_k: f64,
    pub gamma: f64,
    pub rho: f64,
    pub delta_bar: f64,
    #[serde(rename = "M")]
    pub neighborhood: Option<f64>,
    pub mean_gap_after_burn_in: Option<f64>,
    pub gap_bound_violations: usize,
    pub distance_bound_violations: usize,
    pub growth_bound_violations: usize,
    /// Rounds in the last quarter with squared distance above `M + 1e-9`.
    pub asymptotic_violations: usize,
    pub estimation_failures: usize,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub mode: Mode,
    pub rounds: usize,
    pub seed: u64,
    pub lipschitz: f64,
    pub polyak: f64,
    pub drift_eta0: f64,
    pub drift_eta_star: f64,
    pub lipschitz_phi: f64,
    pub lipschitz_phi_sampled: bool,
    /// `sum_i Phi_i + c`
    pub potential_threshold: f64,
    pub burn_in: Option<usize>,
    pub potential_bound_holds: bool,
    pub max_potential_after_burn_in: Option<f64>,
    pub mean_gap_after_burn_in: Option<f64>,
    pub audit: AuditCounts,
    pub out_of_region_events: usize,
    pub agents: Vec<AgentMetrics>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub snapshots: Vec<RoundSnapshot>,
    /// `bounds[k][i]`, `None` before the agent's bounds start.
    pub bounds: Vec<Vec<Option<BoundColumns>>>,
    pub metrics: RunMetrics,
}

/// Initial positions drawn uniformly from the init box, agent by agent.
pub fn initial_positions(setup: &Setup) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.config.seed);
    let r = &setup.init_region;
    let d = r.dimension();
    (0..setup.graph.agent_count())
        .map(|_| Point::from_iterator(d, (0..d).map(|m| rng.random_range(r.lo[m]..=r.hi[m]))))
        .collect()
}

/// Runs the configured mode.
pub fn run(setup: &Setup) -> Result<RunOutcome> {
    run_from(setup, initial_positions(setup))
}

/// Runs the ablation: identical loop with every formation term removed.
pub fn run_no_formation(setup: &Setup) -> Result<RunOutcome> {
    run_as(setup, Mode::NoFormation)
}

/// Runs agents on the true gradient plus a perturbation of norm `delta_bar`.
pub fn run_delta_oracle(setup: &Setup, delta_bar: f64) -> Result<RunOutcome> {
    let mut s = setup.clone();
    s.config.oracle.delta_bar = delta_bar;
    run_as(&s, Mode::DeltaOracle)
}

fn run_as(setup: &Setup, mode: Mode) -> Result<RunOutcome> {
    let mut s = setup.clone();
    s.config.mode = mode;
    run(&s)
}

/// Runs the configured mode from the given positions.
pub fn run_from(setup: &Setup, initial: Vec<Point>) -> Result<RunOutcome> {
    let graph = &setup.graph;
    let n = graph.agent_count();
    if initial.len() != n || initial.iter().any(|x| x.len() != graph.dimension()) {
        return Err(Error::Precondition("initial positions do not match the graph".into()));
    }
    let mode = setup.config.mode;
    let exec = setup.config.execution;
    let rounds = setup.config.rounds;
    let mut snapshots = Vec::with_capacity(rounds + 1);
    let mut positions = initial;
    for k in 0..=rounds {
        let measured = setup.scenario.measure(&positions, k);
        let shared = broadcasts(&positions, &setup.formation, graph, exec);
        let plans: Vec<Result<AgentRound>> = exec.map_indexed(n, |i| {
            let view = LocalView::gather(i, graph, &positions, &measured.values, &shared);
            match mode {
                Mode::Network => plan_network(&view, setup),
                Mode::NoFormation => plan_no_formation(&view, setup),
                Mode::DeltaOracle => plan_delta_oracle(&view, setup, k),
            }
        });
        let agents = plans.into_iter().collect::<Result<Vec<_>>>()?;
        let potential_total = agents.iter().map(|a| a.potential.phi_i).sum();
        let oracle = oracle_round(setup, &positions, k);
        let snapshot = RoundSnapshot {
            k,
            positions,
            measurements: measured.values,
            out_of_region: measured.out_of_region,
            agents,
            potential_total,
            audit: None,
            oracle,
        };
        let last = k == rounds;
        let next = if last {
            None
        } else {
            let step_plans: Vec<StepPlan> = snapshot.agents.iter().map(|a| a.plan.clone()).collect();
            Some(crate::controller::apply_step(&snapshot.positions, &step_plans)?)
        };
        snapshots.push(snapshot);
        if let Some(next) = next {
            if mode == Mode::Network {
                audit_transition(setup, snapshots.last_mut().expect("pushed"), &next);
            }
            positions = next;
        } else {
            break;
        }
    }
    let (bounds, metrics) = summarize(setup, &snapshots)?;
    Ok(RunOutcome { snapshots, bounds, metrics })
}

fn plan_network(view: &LocalView<'_>, setup: &Setup) -> Result<AgentRound> {
    let params = &setup.control;
    let estimate = estimate(view.position, view.measurement, &view.readings, params.lipschitz_l, setup.formation.scale);
    let potential = phi_i(view.agent, view.position, &view.potential, &setup.formation);
    let plan = plan_formation(
        estimate.as_ref().ok().map(|e| &e.gradient),
        &potential.grad_phi_i,
        potential.phi_i,
        params.phi_caps[view.agent],
        params,
    )?;
    Ok(AgentRound { estimate, potential, plan, perturbation: None })
}

fn plan_no_formation(view: &LocalView<'_>, setup: &Setup) -> Result<AgentRound> {
    let d = view.position.len();
    let params = &setup.control;
    let estimate = estimate(view.position, view.measurement, &view.readings, params.lipschitz_l, setup.formation.scale);
    let potential = phi_i(view.agent, view.position, &view.potential, &setup.formation);
    let plan = match &estimate {
        Ok(e) => {
            let (alpha, alpha_bar) = compute_alpha(&e.gradient, &Point::zeros(d), params)?;
            StepPlan::new(e.gradient.clone(), 1.0, alpha, alpha_bar, ModeFlags::default())
        }
        Err(_) => StepPlan::hold(d, ModeFlags { estimation_failed: true, lambda_capped: false, skipped: true }),
    };
    Ok(AgentRound { estimate, potential, plan, perturbation: None })
}

/// Perturbation of norm `delta_bar` opposing the true gradient, or in a
/// seeded random direction where the gradient vanishes.
fn perturbation(gradient: &Point, delta_bar: f64, seed: u64, stream: u64) -> Point {
    let norm = gradient.norm();
    if norm > 0.0 {
        return gradient * (-delta_bar / norm);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PERTURBATION_SEED_SALT);
    rng.set_stream(stream);
    let d = gradient.len();
    loop {
        let v = Point::from_iterator(d, (0..d).map(|_| rng.random_range(-1.0..1.0)));
        let vn = v.norm();
        if vn > 1e-3 && vn <= 1.0 {
            return v * (delta_bar / vn);
        }
    }
}

fn plan_delta_oracle(view: &LocalView<'_>, setup: &Setup, k: usize) -> Result<AgentRound> {
    let delta = setup.config.oracle.delta_bar;
    let truth = setup.scenario.true_gradient(view.position, k);
    let n = setup.graph.agent_count() as u64;
    let e = perturbation(&truth, delta, setup.config.seed, k as u64 * n + view.agent as u64);
    let gradient = &truth + &e;
    let potential = phi_i(view.agent, view.position, &view.potential, &setup.formation);
    let plan = StepPlan::new(gradient.clone(), 1.0, setup.oracle_alpha, f64::INFINITY, ModeFlags::default());
    let estimate =
        Ok(GradientEstimate { gradient, error_bound: delta, best_pair: None, gram_condition: 1.0, contained: None });
    Ok(AgentRound { estimate, potential, plan, perturbation: Some(e) })
}

fn oracle_round(setup: &Setup, positions: &[Point], k: usize) -> OracleRound {
    let (minimizer, min_value) = setup.scenario.minimizer(k).expect("quadratic scenarios have a minimiser");
    let field = setup.scenario.field();
    OracleRound {
        gaps: positions.iter().map(|x| field.evaluate(x, k) - min_value).collect(),
        distances_sq: positions.iter().map(|x| (x - &minimizer).norm_squared()).collect(),
        true_gradients: positions.iter().map(|x| field.true_gradient(x, k)).collect(),
        minimizer,
        min_value,
    }
}

fn audit_transition(setup: &Setup, snapshot: &mut RoundSnapshot, next: &[Point]) {
    let exec = setup.config.execution;
    let graph = &setup.graph;
    let shared = broadcasts(next, &setup.formation, graph, exec);
    let after = potential_from_broadcasts(next, &shared, &setup.formation, graph, exec);
    let phi_after: Vec<f64> = after.per_agent.iter().map(|p| p.phi_i).collect();
    let zero = Point::zeros(graph.dimension());
    let inputs: Vec<AuditInput<'_>> = snapshot
        .agents
        .iter()
        .map(|a| AuditInput {
            phi_i: a.potential.phi_i,
            grad_phi: &a.potential.grad_phi_i,
            estimate: a.estimate.as_ref().map(|e| &e.gradient).unwrap_or(&zero),
            plan: &a.plan,
        })
        .collect();
    let audit =
        descent_audit(&snapshot.positions, next, &phi_after, &inputs, &setup.control, &setup.formation, graph, exec);
    snapshot.audit = Some(audit);
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

#[allow(clippy::needless_range_loop)]
fn summarize(setup: &Setup, snapshots: &[RoundSnapshot]) -> Result<(Vec<Vec<Option<BoundColumns>>>, RunMetrics)> {
    let cfg = &setup.config;
    let mode = cfg.mode;
    let n = setup.graph.agent_count();
    let constants = setup.scenario.constants();
    let params = &setup.control;
    let threshold = params.phi_caps.iter().sum::<f64>() + params.slack;
    let potentials: Vec<f64> = snapshots.iter().map(|s| s.potential_total).collect();

    let burn_in = match mode {
        Mode::Network => detect_burn_in(&potentials, threshold),
        Mode::NoFormation | Mode::DeltaOracle => Some(0),
    };
    let after = |k0: usize| snapshots.iter().skip(k0);
    let potential_bound_holds = burn_in.is_some_and(|k0| after(k0).all(|s| s.potential_total <= threshold));
    let max_potential_after_burn_in =
        burn_in.map(|k0| after(k0).map(|s| s.potential_total).fold(f64::NEG_INFINITY, f64::max));

    let mut audit = AuditCounts::default();
    for (records, round) in snapshots.iter().filter_map(|s| s.audit.as_ref()) {
        audit.checked += records.len();
        audit.agent_violations += records.iter().filter(|r| r.violated()).count();
        audit.literal_violations += records.iter().filter(|r| !r.literal_ok).count();
        audit.round_violations += usize::from(!round.ok);
    }

    let positions: Vec<Vec<Point>> = snapshots.iter().map(|s| s.positions.clone()).collect();
    let estimates: Vec<Vec<Option<Point>>> = snapshots
        .iter()
        .map(|s| s.agents.iter().map(|a| a.estimate.as_ref().ok().map(|e| e.gradient.clone())).collect())
        .collect();
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| setup.graph.neighbors_of(i).to_vec()).collect();
    let rho_gamma = burn_in.map(|k0| estimate_rho_gamma(&positions, &estimates, &neighbors, k0));

    let mut bounds = vec![vec![None; n]; snapshots.len()];
    let mut agents = Vec::with_capacity(n);
    for i in 0..n {
        let failures = snapshots.iter().filter(|s| s.agents[i].estimate.is_err()).count();
        let skipped = snapshots.iter().filter(|s| s.agents[i].plan.flags.skipped).count();
        let mut m = AgentMetrics {
            agent: i,
            burn_in,
            alpha: f64::NAN,
            delta_k: f64::NAN,
            gamma: f64::NAN,
            rho: f64::NAN,
            delta_bar: f64::NAN,
            neighborhood: None,
            mean_gap_after_burn_in: None,
            gap_bound_violations: 0,
            distance_bound_violations: 0,
            growth_bound_violations: 0,
            asymptotic_violations: 0,
            estimation_failures: failures,
            skipped_steps: skipped,
        };
        if let Some(k0) = burn_in {
            m.mean_gap_after_burn_in = mean(after(k0).map(|s| s.oracle.gaps[i]));
            // The last round's plan is never applied.
            let applied = &snapshots[k0..snapshots.len().saturating_sub(1)];
            let (alpha, db) = match mode {
                Mode::DeltaOracle => {
                    m.delta_k = cfg.oracle.delta_bar;
                    m.gamma = 0.0;
                    m.rho = 0.0;
                    (setup.oracle_alpha, cfg.oracle.delta_bar)
                }
                Mode::Network | Mode::NoFormation => {
                    let (rho, gamma) = rho_gamma.as_ref().expect("burn-in known")[i];
                    m.rho = cfg.analysis.rho.unwrap_or(rho);
                    m.gamma = cfg.analysis.gamma.unwrap_or(gamma);
                    m.delta_k = applied
                        .iter()
                        .filter_map(|s| s.agents[i].estimate.as_ref().ok().map(|e| e.error_bound))
                        .fold(0.0, f64::max);
                    let alpha = applied
                        .iter()
                        .map(|s| s.agents[i].plan.alpha)
                        .filter(|a| *a > 0.0)
                        .fold(f64::INFINITY, f64::min);
                    let lphi = if mode == Mode::Network { params.lipschitz_phi } else { 0.0 };
                    let gamma = if mode == Mode::Network { m.gamma } else { 0.0 };
                    (alpha, delta_bar(m.delta_k, gamma, m.rho, lphi).unwrap_or(f64::NAN))
                }
            };
            m.alpha = alpha;
            m.delta_bar = db;
            let bp = BoundParams {
                eta0: constants.drift_eta0,
                eta_star: constants.drift_eta_star,
                alpha,
                polyak: constants.polyak,
                delta_bar: db,
            };
            if let Ok(nb) = neighborhood_m(&bp) {
                m.neighborhood = Some(nb.m);
                let g0 = snapshots[k0].oracle.gaps[i];
                let d0 = snapshots[k0].oracle.distances_sq[i];
                let mut rec = g0;
                let tail_start = k0 + (snapshots.len() - k0) * 3 / 4;
                for (offset, s) in snapshots[k0..].iter().enumerate() {
                    let k = k0 + offset;
                    let col = if offset == 0 {
                        BoundColumns { recursive: g0, analytic: g0, distance: d0, distance_growth: d0 }
                    } else {
                        rec = recursive_bound(rec, &bp);
                        let analytic = analytic_bound(g0, offset - 1, &bp);
                        BoundColumns {
                            recursive: rec,
                            analytic,
                            distance: distance_bound(d0, offset - 1, &bp),
                            distance_growth: 2.0 * analytic / bp.polyak,
                        }
                    };
                    let tol = 1e-9 * col.analytic.abs().max(1.0);
                    m.gap_bound_violations += usize::from(s.oracle.gaps[i] > col.analytic + tol);
                    let dtol = 1e-9 * col.distance.abs().max(1.0);
                    m.distance_bound_violations += usize::from(s.oracle.distances_sq[i] > col.distance + dtol);
                    let gtol = 1e-9 * col.distance_growth.abs().max(1.0);
                    m.growth_bound_violations +=
                        usize::from(offset > 0 && s.oracle.distances_sq[i] > col.distance_growth + gtol);
                    if k >= tail_start {
                        m.asymptotic_violations += usize::from(s.oracle.distances_sq[i] > nb.m + 1e-9);
                    }
                    bounds[k][i] = Some(col);
                }
            }
        }
        agents.push(m);
    }

    let metrics = RunMetrics {
        mode,
        rounds: cfg.rounds,
        seed: cfg.seed,
        lipschitz: constants.lipschitz,
        polyak: constants.polyak,
        drift_eta0: constants.drift_eta0,
        drift_eta_star: constants.drift_eta_star,
        lipschitz_phi: params.lipschitz_phi,
        lipschitz_phi_sampled: setup.lipschitz_phi_sampled,
        potential_threshold: threshold,
        burn_in,
        potential_bound_holds,
        max_potential_after_burn_in,
        mean_gap_after_burn_in: burn_in.and_then(|k0| mean(after(k0).flat_map(|s| s.oracle.gaps.iter().copied()))),
        audit,
        out_of_region_events: snapshots.iter().map(|s| s.out_of_region.len()).sum(),
        agents,
    };
    Ok((bounds, metrics))
}

/// Mean gap of `run` over rounds `from..`, across all agents.
pub fn mean_gap_from(outcome: &RunOutcome, from: usize) -> Option<f64> {
    mean(outcome.snapshots.iter().skip(from).flat_map(|s| s.oracle.gaps.iter().copied()))
}
