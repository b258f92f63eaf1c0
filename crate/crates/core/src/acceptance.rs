//! Acceptance suite: one pass/fail verdict per headline property, with the
//! tolerances fixed below. Shared by the `acceptance` test target and the
//! `acceptance` subcommand.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{analytic_bound, recursive_bound, BoundParams};
use crate::config::{Mode, RunConfig};
use crate::error::Result;
use crate::estimator::{directional_samples, error_bound, estimate, NeighborReading};
use crate::exec::Execution;
use crate::formation::{global_potential, hexagon_template, total_potential, FormationSpec};
use crate::graph::TopologyGraph;
use crate::output::trajectory_bytes;
use crate::scenario::Point;
use crate::simkernel::{mean_gap_from, run, run_no_formation, RunOutcome};

pub const LINEAR_TRIALS: usize = 1000;
pub const LINEAR_TOLERANCE: f64 = 1e-9;
pub const SOUNDNESS_TRIALS: usize = 10_000;
pub const HEXAGON_SIDES: [f64; 3] = [1.0, 4.0, 10.0];
pub const HEXAGON_LIPSCHITZ_DRAWS: usize = 10;
pub const HEXAGON_TOLERANCE: f64 = 1e-9;
pub const POTENTIAL_TRIALS: usize = 1000;
pub const POTENTIAL_TOLERANCE: f64 = 1e-6;
pub const RECURSION_DRAWS: usize = 1000;
pub const RECURSION_STEPS: usize = 200;
pub const RECURSION_TOLERANCE: f64 = 1e-9;
pub const ABLATION_MIN_RATIO: f64 = 3.0;
pub const ABLATION_MIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag}  {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone)]
pub struct Options {
    /// Reference scenario; its seed is replaced by `0..seeds`.
    pub scenario: RunConfig,
    pub seeds: u64,
    /// Rounds for the delta-oracle runs.
    pub oracle_rounds: usize,
    /// Rounds for the determinism check.
    pub determinism_rounds: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self { scenario: RunConfig::default(), seeds: 20, oracle_rounds: 2000, determinism_rounds: 2000 }
    }
}

fn point(rng: &mut ChaCha8Rng, d: usize, half_width: f64) -> Point {
    Point::from_iterator(d, (0..d).map(|_| rng.random_range(-half_width..half_width)))
}

fn planar_sine(a: &Point, b: &Point) -> f64 {
    (a[0] * b[1] - a[1] * b[0]) / (a.norm() * b.norm())
}

/// Random linear fields `f(x) = g.x + b` seen from random full-rank
/// neighbour sets in 2 to 4 dimensions.
pub fn linear_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x11);
    let mut worst = 0.0_f64;
    let mut trials = 0;
    while trials < LINEAR_TRIALS {
        let d = rng.random_range(2..=4);
        let m = rng.random_range(d..=d + 3);
        let g = point(&mut rng, d, 10.0);
        let b = rng.random_range(-10.0..10.0);
        let f = |x: &Point| g.dot(x) + b;
        let x = point(&mut rng, d, 10.0);
        let others: Vec<Point> = (0..m).map(|_| &x + point(&mut rng, d, 5.0)).collect();
        let readings: Vec<NeighborReading<'_>> = others
            .iter()
            .enumerate()
            .map(|(j, p)| NeighborReading { index: j + 1, position: p, measurement: f(p) })
            .collect();
        let Ok(e) = estimate(&x, f(&x), &readings, 1.0, 1.0) else { continue };
        trials += 1;
        worst = worst.max((&e.gradient - &g).norm());
    }
    Verdict {
        name: "linear-field exactness",
        passed: worst <= LINEAR_TOLERANCE,
        detail: format!("max |Lambda - g| = {worst:.3e} over {trials} fields (tolerance {LINEAR_TOLERANCE:e})"),
    }
}

/// Random quadratics with known `L` and random non-collinear neighbour
/// pairs: the two-neighbour estimate lies within the pair bound of the
/// true gradient and inside the bound's parallelogram.
pub fn gradient_bound_soundness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x22);
    let (mut violations, mut uncontained, mut worst_ratio) = (0usize, 0usize, 0.0_f64);
    let mut trials = 0;
    while trials < SOUNDNESS_TRIALS {
        let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-5.0..5.0));
        let h = &a + a.transpose();
        let lipschitz = h.clone().symmetric_eigen().eigenvalues.amax();
        let c = point(&mut rng, 2, 3.0);
        let f = |x: &Point| 0.5 * x.dot(&(&h * x)) + c.dot(x);
        let x = point(&mut rng, 2, 10.0);
        let scale = 10f64.powf(rng.random_range(-2.0..1.0));
        let xj = &x + point(&mut rng, 2, scale);
        let xl = &x + point(&mut rng, 2, scale);
        if planar_sine(&(&xj - &x), &(&xl - &x)).abs() < 1e-3 || lipschitz < 1e-9 {
            continue;
        }
        trials += 1;
        let readings = [
            NeighborReading { index: 1, position: &xj, measurement: f(&xj) },
            NeighborReading { index: 2, position: &xl, measurement: f(&xl) },
        ];
        let e = estimate(&x, f(&x), &readings, lipschitz, 1.0).expect("non-collinear pair");
        let truth = &h * &x + &c;
        let err = (&e.gradient - truth).norm();
        worst_ratio = worst_ratio.max(err / e.error_bound);
        violations += usize::from(err > e.error_bound * (1.0 + 1e-12) + 1e-12);
        uncontained += usize::from(e.contained != Some(true));
    }
    Verdict {
        name: "gradient bound soundness",
        passed: violations == 0 && uncontained == 0,
        detail: format!(
            "{violations} bound violations, {uncontained} containment failures in {trials} trials \
             (max error/bound {worst_ratio:.4})"
        ),
    }
}

/// A perfect hexagon of side `s` has bound `2 s L` at every vertex.
pub fn hexagon_bound() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x33);
    let mut worst = 0.0_f64;
    let mut checks = 0;
    for side in HEXAGON_SIDES {
        let verts = hexagon_template(side);
        for _ in 0..HEXAGON_LIPSCHITZ_DRAWS {
            let lipschitz = 10f64.powf(rng.random_range(-2.0..2.0));
            for i in 0..6 {
                let (j, l) = ((i + 1) % 6, (i + 5) % 6);
                // Measurements are irrelevant to the geometric bound.
                let readings = [
                    NeighborReading { index: j, position: &verts[j], measurement: 0.0 },
                    NeighborReading { index: l, position: &verts[l], measurement: 0.0 },
                ];
                let samples = directional_samples(&verts[i], 0.0, &readings, lipschitz, 1e-12).expect("samples");
                let delta = error_bound(&samples, lipschitz).expect("planar").delta;
                let expected = 2.0 * side * lipschitz;
                worst = worst.max((delta - expected).abs() / expected);
                checks += 1;
            }
        }
    }
    Verdict {
        name: "hexagon bound constant",
        passed: worst <= HEXAGON_TOLERANCE,
        detail: format!("max relative deviation from 2sL = {worst:.3e} over {checks} vertices"),
    }
}

fn fd_gradient(positions: &[Point], spec: &FormationSpec, graph: &TopologyGraph, i: usize) -> Point {
    let h = 1e-6;
    Point::from_iterator(
        positions[i].len(),
        (0..positions[i].len()).map(|m| {
            let mut plus = positions.to_vec();
            let mut minus = positions.to_vec();
            plus[i][m] += h;
            minus[i][m] -= h;
            (total_potential(&plus, spec, graph) - total_potential(&minus, spec, graph)) / (2.0 * h)
        }),
    )
}

/// Analytic `grad_i phi` against central differences of the network
/// potential. Half the configurations put one pair inside the collision
/// ramp.
pub fn potential_gradient() -> Verdict {
    let (graph, spec) = FormationSpec::hexagon(4.0, 0.5, 1.0).expect("hexagon");
    let template = hexagon_template(4.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0x44);
    let (mut worst, mut on_ramp, mut trials) = (0.0_f64, 0usize, 0usize);
    while trials < POTENTIAL_TRIALS {
        let mut x: Vec<Point> = template.iter().map(|t| t + point(&mut rng, 2, 3.0)).collect();
        if trials % 2 == 1 {
            let i = rng.random_range(0..6);
            let j = (i + 1) % 6;
            let dist = rng.random_range(spec.safety_distance + 0.01..spec.safety_distance + spec.collision_ramp);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            x[j] = &x[i] + Point::from_column_slice(&[dist * angle.cos(), dist * angle.sin()]);
        }
        let min_dist = graph.edges().map(|(i, j)| (&x[i] - &x[j]).norm()).fold(f64::INFINITY, f64::min);
        if min_dist <= spec.safety_distance + 1e-3 {
            continue;
        }
        trials += 1;
        on_ramp += usize::from(min_dist < spec.safety_distance + spec.collision_ramp);
        let g = global_potential(&x, &spec, &graph, Execution::Sequential).expect("sized");
        for i in 0..6 {
            let analytic = &g.per_agent[i].grad_phi_i;
            let fd = fd_gradient(&x, &spec, &graph, i);
            worst = worst.max((analytic - fd).norm() / analytic.norm().max(1.0));
        }
    }
    Verdict {
        name: "formation gradient vs finite differences",
        passed: worst <= POTENTIAL_TOLERANCE,
        detail: format!(
            "max relative error {worst:.3e} over {trials} configurations ({on_ramp} with a pair on the collision ramp)"
        ),
    }
}

/// Unrolled one-step recursion against its closed form.
pub fn recursion_consistency() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x55);
    let mut worst = 0.0_f64;
    for _ in 0..RECURSION_DRAWS {
        let s = 10f64.powf(rng.random_range(-2.0..2.0));
        let p = BoundParams {
            eta0: rng.random_range(0.0..5.0),
            eta_star: rng.random_range(0.0..5.0),
            alpha: rng.random_range(0.001..0.999) / s,
            polyak: s,
            delta_bar: rng.random_range(0.0..10.0),
        };
        let g0 = rng.random_range(0.0..1e3);
        let mut rec = g0;
        for k in 0..RECURSION_STEPS {
            rec = recursive_bound(rec, &p);
            let closed = analytic_bound(g0, k, &p);
            worst = worst.max((rec - closed).abs() / closed.abs().max(f64::MIN_POSITIVE));
        }
    }
    Verdict {
        name: "recursive vs analytic bound",
        passed: worst <= RECURSION_TOLERANCE,
        detail: format!("max relative difference {worst:.3e} over {RECURSION_DRAWS} draws x {RECURSION_STEPS} steps"),
    }
}

fn seeded(cfg: &RunConfig, seed: u64, mode: Mode) -> RunConfig {
    RunConfig { seed, mode, ..cfg.clone() }
}

/// Matched formation and no-formation runs per seed.
pub struct ScenarioRuns {
    pub formation: Vec<RunOutcome>,
    pub ablation: Vec<RunOutcome>,
}

pub fn scenario_runs(options: &Options) -> Result<ScenarioRuns> {
    let mut formation = Vec::new();
    let mut ablation = Vec::new();
    for seed in 0..options.seeds {
        let setup = seeded(&options.scenario, seed, Mode::Network).build()?;
        formation.push(run(&setup)?);
        ablation.push(run_no_formation(&setup)?);
    }
    Ok(ScenarioRuns { formation, ablation })
}

/// Formation potential settles under `sum Phi_i + c` after an observed
/// burn-in and stays there, with clean per-step audits, in every seed.
pub fn potential_bound(runs: &ScenarioRuns) -> Verdict {
    let mut no_burn_in = Vec::new();
    let mut exceeded = Vec::new();
    let (mut agent_v, mut round_v) = (0usize, 0usize);
    for (seed, r) in runs.formation.iter().enumerate() {
        let m = &r.metrics;
        agent_v += m.audit.agent_violations;
        round_v += m.audit.round_violations;
        match m.burn_in {
            None => no_burn_in.push(seed),
            Some(_) if !m.potential_bound_holds => exceeded.push(seed),
            Some(_) => {}
        }
    }
    let seeds = runs.formation.len();
    let ok = seeds - no_burn_in.len() - exceeded.len();
    let rounds = runs.formation.first().map_or(0, |r| r.metrics.rounds);
    Verdict {
        name: "formation potential bound",
        passed: no_burn_in.is_empty() && exceeded.is_empty() && agent_v == 0 && round_v == 0,
        detail: format!(
            "{ok}/{seeds} seeds reach and keep phi <= sum Phi + c within {rounds} rounds; \
             no burn-in in seeds {no_burn_in:?}; bound exceeded after burn-in in seeds {exceeded:?}; \
             audit violations: {agent_v} agent, {round_v} round"
        ),
    }
}

/// Per-seed ratio of mean post-burn-in gaps (no formation over formation),
/// using the formation run's burn-in for both. `None` when the formation
/// run never burns in.
pub fn ablation_ratios(runs: &ScenarioRuns) -> Vec<Option<f64>> {
    runs.formation
        .iter()
        .zip(&runs.ablation)
        .map(|(f, a)| {
            let k0 = f.metrics.burn_in?;
            Some(mean_gap_from(a, k0)? / mean_gap_from(f, k0)?)
        })
        .collect()
}

pub fn ablation_separation(runs: &ScenarioRuns) -> Verdict {
    let ratios = ablation_ratios(runs);
    let seeds = ratios.len();
    let passing = ratios.iter().filter(|r| r.is_some_and(|r| r >= ABLATION_MIN_RATIO)).count();
    let mut known: Vec<f64> = ratios.iter().flatten().copied().collect();
    known.sort_by(f64::total_cmp);
    let median = known.get(known.len() / 2).copied().unwrap_or(f64::NAN);
    let shown: Vec<String> = ratios.iter().map(|r| r.map_or("-".into(), |r| format!("{r:.2}"))).collect();
    Verdict {
        name: "ablation separation",
        passed: passing as f64 >= ABLATION_MIN_FRACTION * seeds as f64,
        detail: format!(
            "{passing}/{seeds} seeds with ratio >= {ABLATION_MIN_RATIO} (need {:.0}%); median of {} measurable {median:.2}; ratios [{}]",
            ABLATION_MIN_FRACTION * 100.0,
            known.len(),
            shown.join(", ")
        ),
    }
}

/// Delta-oracle runs on the moving quadratic: squared distance under the
/// distance bound in every round and under `M + 1e-9` over the last
/// quarter of the run.
pub fn oracle_neighborhood(options: &Options) -> Result<Verdict> {
    let (mut bound_v, mut tail_v, mut worst_tail) = (0usize, 0usize, 0.0_f64);
    let mut failing = Vec::new();
    let mut m_value = f64::NAN;
    for seed in 0..options.seeds {
        let mut cfg = seeded(&options.scenario, seed, Mode::DeltaOracle);
        cfg.rounds = options.oracle_rounds;
        let setup = cfg.build()?;
        let outcome = run(&setup)?;
        let tail_start = outcome.snapshots.len() * 3 / 4;
        let mut seed_bad = false;
        for a in &outcome.metrics.agents {
            bound_v += a.distance_bound_violations;
            tail_v += a.asymptotic_violations;
            seed_bad |= a.distance_bound_violations + a.asymptotic_violations > 0;
            if let Some(m) = a.neighborhood {
                m_value = m;
                for s in &outcome.snapshots[tail_start..] {
                    worst_tail = worst_tail.max(s.oracle.distances_sq[a.agent] / m);
                }
            }
        }
        if seed_bad {
            failing.push(seed);
        }
    }
    Ok(Verdict {
        name: "delta-oracle neighbourhood",
        passed: bound_v == 0 && tail_v == 0,
        detail: format!(
            "{bound_v} distance-bound violations, {tail_v} tail rounds above M + 1e-9 (M = {m_value:.4e}, \
             worst tail distance^2 / M = {worst_tail:.3}); failing seeds {failing:?}"
        ),
    })
}

/// Two runs of the same configuration, and a sequential run, give
/// byte-identical trajectories.
pub fn determinism(options: &Options) -> Result<Verdict> {
    let mut cfg = options.scenario.clone();
    cfg.rounds = options.determinism_rounds;
    let bytes = |c: &RunConfig| -> Result<Vec<u8>> {
        let setup = c.build()?;
        trajectory_bytes(&run(&setup)?, setup.graph.dimension())
    };
    let first = bytes(&cfg)?;
    let second = bytes(&cfg)?;
    let sequential = bytes(&RunConfig { execution: Execution::Sequential, ..cfg.clone() })?;
    Ok(Verdict {
        name: "determinism",
        passed: first == second && first == sequential,
        detail: format!(
            "{} bytes; repeat identical: {}; sequential identical: {}",
            first.len(),
            first == second,
            first == sequential
        ),
    })
}

/// Runs every criterion in order.
pub fn run_all(options: &Options) -> Result<Vec<Verdict>> {
    let mut out = vec![linear_exactness(), gradient_bound_soundness(), hexagon_bound(), potential_gradient()];
    let runs = scenario_runs(options)?;
    out.push(potential_bound(&runs));
    out.push(recursion_consistency());
    out.push(oracle_neighborhood(options)?);
    out.push(ablation_separation(&runs));
    out.push(determinism(options)?);
    Ok(out)
}
