//! Run configuration, read from and written to TOML.
//!
//! Every section has defaults reproducing the reference hexagon scenario, so
//! an empty file is a valid configuration. Matrices are row-major lists.
//! The full grammar is documented in `docs/config.md`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::controller::{AlphaPolicy, ControlParams, Sigma};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::formation::{estimate_lipschitz_phi, hexagon_template, FormationSpec};
use crate::graph::TopologyGraph;
use crate::scenario::{MinimizerPath, ObjectiveScenario, Point, QuadraticSource, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Gradient estimation with formation control.
    #[default]
    Network,
    /// Gradient estimation only, `lambda = 1`, no formation terms.
    NoFormation,
    /// True gradient plus a perturbation of fixed norm.
    DeltaOracle,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Network => "network",
            Mode::NoFormation => "no-formation",
            Mode::DeltaOracle => "delta-oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rounds: usize,
    pub seed: u64,
    pub mode: Mode,
    pub execution: Execution,
    pub graph: GraphConfig,
    pub scenario: ScenarioConfig,
    pub formation: FormationConfig,
    pub control: ControlConfig,
    pub init: InitConfig,
    pub oracle: OracleConfig,
    pub analysis: AnalysisConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rounds: 20000,
            seed: 7,
            mode: Mode::Network,
            execution: Execution::default(),
            graph: GraphConfig::default(),
            scenario: ScenarioConfig::default(),
            formation: FormationConfig::default(),
            control: ControlConfig::default(),
            init: InitConfig::default(),
            oracle: OracleConfig::default(),
            analysis: AnalysisConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GraphConfig {
    Cycle { agents: usize, dimension: usize },
    Complete { agents: usize, dimension: usize },
    Edges { agents: usize, dimension: usize, edges: Vec<[usize; 2]> },
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig::Cycle { agents: 6, dimension: 2 }
    }
}

impl GraphConfig {
    pub fn build(&self) -> Result<TopologyGraph> {
        match self {
            GraphConfig::Cycle { agents, dimension } => TopologyGraph::cycle(*agents, *dimension),
            GraphConfig::Complete { agents, dimension } => TopologyGraph::complete(*agents, *dimension),
            GraphConfig::Edges { agents, dimension, edges } => {
                TopologyGraph::new(*agents, *dimension, edges.iter().map(|e| (e[0], e[1])))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// `Q`, row-major.
    pub q: Vec<f64>,
    pub path: PathConfig,
    pub region: BoxConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { q: vec![3.89, 0.45, 0.45, 5.86], path: PathConfig::default(), region: BoxConfig::symmetric(2, 40.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PathConfig {
    Static { at: Vec<f64> },
    Line { start: Vec<f64>, velocity: Vec<f64> },
    Circle { center: Vec<f64>, radius: f64, speed: f64, phase: f64 },
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig::Circle { center: vec![0.0, 0.0], radius: 10.0, speed: 1e-4, phase: 0.0 }
    }
}

impl PathConfig {
    fn build(&self) -> MinimizerPath {
        let p = |v: &[f64]| Point::from_column_slice(v);
        match self {
            PathConfig::Static { at } => MinimizerPath::Static { at: p(at) },
            PathConfig::Line { start, velocity } => MinimizerPath::Line { start: p(start), velocity: p(velocity) },
            PathConfig::Circle { center, radius, speed, phase } => {
                MinimizerPath::Circle { center: p(center), radius: *radius, speed: *speed, phase: *phase }
            }
        }
    }

    fn dimensions(&self) -> Vec<usize> {
        match self {
            PathConfig::Static { at } => vec![at.len()],
            PathConfig::Line { start, velocity } => vec![start.len(), velocity.len()],
            PathConfig::Circle { center, .. } => vec![center.len()],
        }
    }
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxConfig {
    pub fn symmetric(dimension: usize, half_width: f64) -> Self {
        Self { lo: vec![-half_width; dimension], hi: vec![half_width; dimension] }
    }

    fn region(&self) -> Result<Region> {
        Region::new(Point::from_column_slice(&self.lo), Point::from_column_slice(&self.hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ShapeConfig {
    /// Regular hexagon, agent `m` at angle `m * 60` degrees.
    Hexagon { side: f64 },
    /// Desired offsets `x_i - x_j` per edge.
    Offsets { offsets: Vec<OffsetEntry> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetEntry {
    pub from: usize,
    pub to: usize,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormationConfig {
    pub shape: ShapeConfig,
    pub safety_distance: f64,
    pub collision_ramp: f64,
    pub floor_epsilon: f64,
    /// Overrides the sampled Lipschitz constant of `grad phi`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz_phi: Option<f64>,
    pub lipschitz_samples: usize,
    /// Sampling box for the Lipschitz estimate; defaults to the init box.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz_region: Option<BoxConfig>,
}

impl Default for FormationConfig {
    fn default() -> Self {
        Self {
            shape: ShapeConfig::Hexagon { side: 4.0 },
            safety_distance: 0.5,
            collision_ramp: 1.0,
            floor_epsilon: crate::formation::DEFAULT_FLOOR_EPSILON,
            lipschitz_phi: None,
            lipschitz_samples: 4000,
            lipschitz_region: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub lambda_nominal: f64,
    /// `Phi_i`, shared by every agent unless `phi_caps` is given.
    pub phi_cap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_caps: Option<Vec<f64>>,
    /// `c`
    pub slack: f64,
    pub sigma: Sigma,
    pub alpha: AlphaPolicy,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            lambda_nominal: 1.0,
            phi_cap: 1.0,
            phi_caps: None,
            slack: 0.1,
            sigma: Sigma::Square,
            alpha: AlphaPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Initial positions are drawn uniformly from this box.
    pub region: BoxConfig,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { region: BoxConfig { lo: vec![2.0, -6.0], hi: vec![14.0, 6.0] } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Perturbation norm in delta-oracle mode.
    pub delta_bar: f64,
    /// Step size in delta-oracle mode; defaults to `0.99 / L`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { delta_bar: 1.0, alpha: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: std::path::PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

/// Everything a run needs, built from a validated configuration.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: RunConfig,
    pub graph: TopologyGraph,
    pub scenario: ObjectiveScenario,
    pub formation: FormationSpec,
    pub control: ControlParams,
    /// Whether `control.lipschitz_phi` came from sampling.
    pub lipschitz_phi_sampled: bool,
    pub init_region: Region,
    pub oracle_alpha: f64,
}

/// Seed offset for the Lipschitz sampler, so it never shares a stream with
/// the initial positions.
const LIPSCHITZ_SEED_SALT: u64 = 0x4C50_4849;

fn finite(problems: &mut Vec<String>, name: &str, values: &[f64]) {
    if values.iter().any(|v| !v.is_finite()) {
        problems.push(format!("{name} must be finite"));
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn dimension(&self) -> usize {
        match &self.graph {
            GraphConfig::Cycle { dimension, .. }
            | GraphConfig::Complete { dimension, .. }
            | GraphConfig::Edges { dimension, .. } => *dimension,
        }
    }

    /// Checks the configuration and builds the run setup, collecting every
    /// problem found rather than stopping at the first.
    pub fn build(&self) -> Result<Setup> {
        let mut problems = Vec::new();
        let d = self.dimension();

        let graph = match self.graph.build() {
            Ok(g) => {
                let report = g.validate();
                problems.extend(report.violations.iter().map(|v| format!("graph: {v}")));
                Some(g)
            }
            Err(e) => {
                problems.push(format!("graph: {e}"));
                None
            }
        };

        let s = &self.scenario;
        finite(&mut problems, "scenario.q", &s.q);
        if s.q.len() != d * d {
            problems.push(format!("scenario.q has {} entries, expected {}", s.q.len(), d * d));
        }
        if s.path.dimensions().iter().any(|&n| n != d) {
            problems.push(format!("scenario.path vectors must have {d} entries"));
        }
        if let PathConfig::Circle { radius, speed, .. } = &s.path {
            if !(*radius >= 0.0) || !speed.is_finite() {
                problems.push("scenario.path radius must be nonnegative and speed finite".into());
            }
            if d < 2 {
                problems.push("circular path needs dimension at least 2".into());
            }
        }
        let check_box = |problems: &mut Vec<String>, name: &str, b: &BoxConfig| -> Option<Region> {
            if b.lo.len() != d || b.hi.len() != d {
                problems.push(format!("{name} bounds must have {d} entries"));
                return None;
            }
            match b.region() {
                Ok(r) => Some(r),
                Err(e) => {
                    problems.push(format!("{name}: {e}"));
                    None
                }
            }
        };
        let region = check_box(&mut problems, "scenario.region", &s.region);
        let init_region = check_box(&mut problems, "init.region", &self.init.region);
        let lipschitz_region = match &self.formation.lipschitz_region {
            Some(b) => check_box(&mut problems, "formation.lipschitz_region", b),
            None => init_region.clone(),
        };

        let scenario = match (&region, problems.is_empty()) {
            (Some(region), true) => {
                let q = DMatrix::from_row_slice(d, d, &s.q);
                QuadraticSource::new(q, s.path.build())
                    .and_then(|src| ObjectiveScenario::from_quadratic(src, region.clone(), self.rounds.max(1)))
                    .map_err(|e| problems.push(format!("scenario: {e}")))
                    .ok()
            }
            _ => None,
        };

        let f = &self.formation;
        finite(&mut problems, "formation", &[f.safety_distance, f.collision_ramp, f.floor_epsilon]);
        if !(f.floor_epsilon > 0.0 && f.floor_epsilon < 1.0) {
            problems.push(format!("formation.floor_epsilon {} outside (0, 1)", f.floor_epsilon));
        }
        if let Some(l) = f.lipschitz_phi {
            if !(l > 0.0) || !l.is_finite() {
                problems.push(format!("formation.lipschitz_phi {l} must be positive"));
            }
        } else if f.lipschitz_samples < 2 {
            problems.push("formation.lipschitz_samples must be at least 2".into());
        }
        let formation = graph.as_ref().and_then(|g| {
            let built = match &f.shape {
                ShapeConfig::Hexagon { side } => {
                    if g.agent_count() != 6 || d != 2 {
                        Err(Error::InvalidFormation("hexagon shape needs 6 agents in 2 dimensions".into()))
                    } else {
                        FormationSpec::from_template(&hexagon_template(*side), g, f.safety_distance, f.collision_ramp)
                    }
                }
                ShapeConfig::Offsets { offsets } => FormationSpec::from_offsets(
                    offsets.iter().map(|o| ((o.from, o.to), Point::from_column_slice(&o.offset))),
                    g,
                    f.safety_distance,
                    f.collision_ramp,
                ),
            };
            built
                .map(|mut spec| {
                    spec.floor_epsilon = f.floor_epsilon;
                    spec
                })
                .map_err(|e| problems.push(format!("formation: {e}")))
                .ok()
        });

        let c = &self.control;
        let n = graph.as_ref().map_or(0, |g| g.agent_count());
        let phi_caps = c.phi_caps.clone().unwrap_or_else(|| vec![c.phi_cap; n]);
        if phi_caps.len() != n {
            problems.push(format!("control.phi_caps has {} entries for {n} agents", phi_caps.len()));
        }
        if let Some(v) = self.oracle.alpha {
            if !(v > 0.0) {
                problems.push(format!("oracle.alpha {v} must be positive"));
            }
        }
        if !(self.oracle.delta_bar >= 0.0) || !self.oracle.delta_bar.is_finite() {
            problems.push(format!("oracle.delta_bar {} must be nonnegative", self.oracle.delta_bar));
        }
        for (name, v) in [("analysis.rho", self.analysis.rho), ("analysis.gamma", self.analysis.gamma)] {
            if let Some(v) = v {
                if !(v >= 0.0) {
                    problems.push(format!("{name} {v} must be nonnegative"));
                }
            }
        }

        let control = scenario.as_ref().map(|sc| ControlParams {
            lambda_nominal: c.lambda_nominal,
            phi_caps,
            slack: c.slack,
            sigma: c.sigma,
            lipschitz_l: sc.constants().lipschitz,
            lipschitz_phi: f.lipschitz_phi.unwrap_or(1.0),
            alpha_policy: c.alpha,
        });
        if let Some(Err(e)) = control.as_ref().map(ControlParams::validate) {
            problems.push(format!("control: {e}"));
        }

        match (graph, scenario, formation, control, init_region, lipschitz_region) {
            (Some(graph), Some(scenario), Some(formation), Some(mut control), Some(init_region), Some(lr))
                if problems.is_empty() =>
            {
                let lipschitz_phi_sampled = f.lipschitz_phi.is_none();
                if lipschitz_phi_sampled {
                    control.lipschitz_phi = estimate_lipschitz_phi(
                        &formation,
                        &graph,
                        &lr,
                        f.lipschitz_samples,
                        self.seed ^ LIPSCHITZ_SEED_SALT,
                        self.execution,
                    );
                }
                let oracle_alpha = self.oracle.alpha.unwrap_or(0.99 / control.lipschitz_l);
                Ok(Setup {
                    config: self.clone(),
                    graph,
                    scenario,
                    formation,
                    control,
                    lipschitz_phi_sampled,
                    init_region,
                    oracle_alpha,
                })
            }
            _ => Err(Error::Config(problems)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_is_reference_scenario() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let setup = RunConfig { formation: FormationConfig { lipschitz_phi: Some(3.0), ..Default::default() }, ..cfg }
            .build()
            .unwrap();
        assert_eq!(setup.graph.agent_count(), 6);
        assert!((setup.control.lipschitz_l - 11.915848563496534).abs() < 1e-12);
        assert_eq!(setup.control.lipschitz_phi, 3.0);
        assert!(!setup.lipschitz_phi_sampled);
    }

    #[test]
    fn path_graph_fails_with_listing() {
        let text = r#"
            [graph]
            kind = "edges"
            agents = 3
            dimension = 2
            edges = [[0, 1], [1, 2]]
        "#;
        let err = RunConfig::from_toml(text).unwrap().build().unwrap_err();
        let Error::Config(problems) = err else { panic!("expected config error") };
        assert!(problems.iter().any(|p| p.contains("graph") && p.contains("agent 0")));
        assert!(problems.iter().any(|p| p.contains("hexagon")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("roundz = 3").is_err());
        assert!(RunConfig::from_toml("[control]\nlambda = 1.0").is_err());
    }

    #[test]
    fn several_problems_reported_together() {
        let text = "[control]\nslack = -1.0\nlambda_nominal = 2.0\n[oracle]\ndelta_bar = -1.0";
        let Err(Error::Config(problems)) = RunConfig::from_toml(text).unwrap().build() else {
            panic!("expected config error")
        };
        assert!(problems.len() >= 2, "{problems:?}");
    }

    #[test]
    fn override_lipschitz_respected_verbatim() {
        let text = "[formation]\nlipschitz_phi = 0.123456789";
        let setup = RunConfig::from_toml(text).unwrap().build().unwrap();
        assert_eq!(setup.control.lipschitz_phi, 0.123456789);
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            0usize..5000,
            any::<u64>(),
            prop_oneof![Just(Mode::Network), Just(Mode::NoFormation), Just(Mode::DeltaOracle)],
            -1e3f64..1e3,
            prop::option::of(1e-6f64..1e6),
            prop::option::of(prop::collection::vec(0.01f64..10.0, 6)),
            prop_oneof![Just(Sigma::Square), Just(Sigma::Identity), (0.1f64..5.0).prop_map(Sigma::Power)],
            prop_oneof![
                (0.01f64..1.0).prop_map(|fraction| AlphaPolicy::MaxFraction { fraction }),
                (1e-6f64..1.0).prop_map(|alpha| AlphaPolicy::Fixed { alpha })
            ],
        )
            .prop_map(|(rounds, seed, mode, v, lphi, caps, sigma, alpha)| {
                let mut cfg = RunConfig { rounds, seed, mode, ..Default::default() };
                cfg.scenario.path = PathConfig::Line { start: vec![v, -v / 3.0], velocity: vec![v * 1e-7, 0.1] };
                cfg.formation.lipschitz_phi = lphi;
                cfg.control.phi_caps = caps;
                cfg.control.sigma = sigma;
                cfg.control.alpha = alpha;
                cfg.analysis.rho = lphi.map(|l| l / 7.0);
                cfg.graph = if seed % 2 == 0 {
                    GraphConfig::Cycle { agents: 6, dimension: 2 }
                } else {
                    GraphConfig::Edges { agents: 4, dimension: 2, edges: vec![[0, 1], [1, 2], [2, 3], [3, 0]] }
                };
                cfg
            })
    }

    proptest! {
        #[test]
        fn toml_round_trip(cfg in arb_config()) {
            let text = cfg.to_toml().unwrap();
            let back = RunConfig::from_toml(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_toml().unwrap(), text);
        }
    }
}
