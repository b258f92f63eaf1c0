//! Navigation-potential formation control.
//!
//! Agent `i` owns the potential
//!
//! ```text
//! phi_i(x) = sum_{j in N(i)} |x_i - x_j - c_ij|^2 / exp(beta_i(x))
//! ```
//!
//! where `beta_i` is the product over `i`'s incident pairs of a C1 cubic
//! ramp in pair distance: 1 beyond `safety + ramp`, falling to
//! `floor_epsilon` at the safety distance. The network potential is
//! `phi = sum_i phi_i`.
//!
//! `grad_i phi` needs, besides neighbour positions, each neighbour's
//! numerator and collision factor (they enter through `phi_j`). Agents
//! exchange those two scalars as a [`PotentialBroadcast`], so every
//! per-agent computation stays one hop.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::graph::TopologyGraph;
use crate::scenario::{Point, Region};

pub const DEFAULT_FLOOR_EPSILON: f64 = 1e-3;
/// Safety factor applied to the sampled Lipschitz ratio.
pub const LIPSCHITZ_INFLATION: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FormationSpec {
    /// `c_ij` keyed by `(i, j)` with `i < j`; `c_ji = -c_ij`.
    offsets: BTreeMap<(usize, usize), Point>,
    pub safety_distance: f64,
    pub collision_ramp: f64,
    pub floor_epsilon: f64,
    /// Characteristic side length of the desired formation.
    pub scale: f64,
}

impl FormationSpec {
    /// Offsets from a template of desired positions: `c_ij = p_i - p_j` for
    /// every edge.
    pub fn from_template(
        template: &[Point],
        graph: &TopologyGraph,
        safety_distance: f64,
        collision_ramp: f64,
    ) -> Result<Self> {
        if template.len() != graph.agent_count() {
            return Err(Error::InvalidFormation(format!(
                "template has {} positions for {} agents",
                template.len(),
                graph.agent_count()
            )));
        }
        let offsets: Vec<_> = graph.edges().map(|(i, j)| ((i, j), &template[i] - &template[j])).collect();
        Self::from_offsets(offsets, graph, safety_distance, collision_ramp)
    }

    /// Explicit offsets. Keys may come in either orientation; a pair given
    /// both ways must be antisymmetric.
    pub fn from_offsets(
        raw: impl IntoIterator<Item = ((usize, usize), Point)>,
        graph: &TopologyGraph,
        safety_distance: f64,
        collision_ramp: f64,
    ) -> Result<Self> {
        let mut offsets: BTreeMap<(usize, usize), Point> = BTreeMap::new();
        for ((i, j), c) in raw {
            if c.len() != graph.dimension() {
                return Err(Error::InvalidFormation(format!("offset ({i},{j}) has wrong dimension")));
            }
            let (key, value) = if i < j { ((i, j), c) } else { ((j, i), -c) };
            if let Some(prev) = offsets.get(&key) {
                if (prev - &value).amax() > 1e-12 * prev.amax().max(1.0) {
                    return Err(Error::InvalidFormation(format!(
                        "offsets for ({}, {}) are not antisymmetric",
                        key.0, key.1
                    )));
                }
            }
            offsets.insert(key, value);
        }
        for (i, j) in graph.edges() {
            if !offsets.contains_key(&(i, j)) {
                return Err(Error::InvalidFormation(format!("no desired offset for edge ({i}, {j})")));
            }
        }
        if let Some((i, j)) = offsets.keys().find(|(i, j)| !graph.has_edge(*i, *j)) {
            return Err(Error::InvalidFormation(format!("offset given for non-edge ({i}, {j})")));
        }
        if !(safety_distance > 0.0) || !(collision_ramp > 0.0) {
            return Err(Error::InvalidFormation("safety_distance and collision_ramp must be positive".into()));
        }
        let min_len = offsets.values().map(|c| c.norm()).fold(f64::INFINITY, f64::min);
        if !(safety_distance < min_len) {
            return Err(Error::InvalidFormation(format!(
                "safety distance {safety_distance} is not below the shortest desired offset {min_len}"
            )));
        }
        let scale = if min_len.is_finite() { min_len } else { 1.0 };
        Ok(Self { offsets, safety_distance, collision_ramp, floor_epsilon: DEFAULT_FLOOR_EPSILON, scale })
    }

    /// Regular hexagon of the given side on the 6-cycle; agent `m` sits at
    /// angle `m * 60` degrees.
    pub fn hexagon(side: f64, safety_distance: f64, collision_ramp: f64) -> Result<(TopologyGraph, Self)> {
        let graph = TopologyGraph::cycle(6, 2)?;
        let spec = Self::from_template(&hexagon_template(side), &graph, safety_distance, collision_ramp)?;
        Ok((graph, spec))
    }

    /// `c_ij` for an edge.
    pub fn offset(&self, i: usize, j: usize) -> Option<Point> {
        if i < j {
            self.offsets.get(&(i, j)).cloned()
        } else {
            self.offsets.get(&(j, i)).map(|c| -c)
        }
    }

    pub fn offsets(&self) -> impl Iterator<Item = ((usize, usize), &Point)> {
        self.offsets.iter().map(|(k, v)| (*k, v))
    }

    /// Desired positions consistent with the offsets, anchored with agent
    /// 0 (or the first agent of each component) at the origin.
    pub fn template(&self, graph: &TopologyGraph) -> Vec<Point> {
        let n = graph.agent_count();
        let mut out: Vec<Option<Point>> = vec![None; n];
        for root in 0..n {
            if out[root].is_some() {
                continue;
            }
            out[root] = Some(Point::zeros(graph.dimension()));
            let mut queue = VecDeque::from([root]);
            while let Some(i) = queue.pop_front() {
                for &j in graph.neighbors_of(i) {
                    if out[j].is_none() {
                        let c = self.offset(i, j).expect("validated edge offset");
                        out[j] = Some(out[i].as_ref().unwrap() - c);
                        queue.push_back(j);
                    }
                }
            }
        }
        out.into_iter().map(Option::unwrap).collect()
    }

    /// Cubic smoothstep of one pair distance over the collision ramp, and
    /// its derivative in the distance. 0 at or inside the safety distance,
    /// 1 beyond `safety + ramp`.
    pub fn pair_ramp(&self, distance: f64) -> (f64, f64) {
        let lo = self.safety_distance;
        if distance >= lo + self.collision_ramp {
            (1.0, 0.0)
        } else if distance <= lo {
            (0.0, 0.0)
        } else {
            let u = (distance - lo) / self.collision_ramp;
            (u * u * (3.0 - 2.0 * u), 6.0 * u * (1.0 - u) / self.collision_ramp)
        }
    }

    /// Collision factor from the product of pair ramps, mapped onto
    /// `[floor_epsilon, 1]`.
    pub fn collision_factor(&self, ramp_product: f64) -> f64 {
        self.floor_epsilon + (1.0 - self.floor_epsilon) * ramp_product
    }

    fn check(&self, graph: &TopologyGraph, positions: &[Point]) -> Result<()> {
        if positions.len() != graph.agent_count() {
            return Err(Error::Precondition(format!(
                "{} positions for {} agents",
                positions.len(),
                graph.agent_count()
            )));
        }
        Ok(())
    }
}

pub fn hexagon_template(side: f64) -> Vec<Point> {
    (0..6)
        .map(|m| {
            let t = m as f64 * std::f64::consts::FRAC_PI_3;
            Point::from_column_slice(&[side * t.cos(), side * t.sin()])
        })
        .collect()
}

/// What an agent shares with its neighbours each round.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialBroadcast {
    /// `sum_j |x_i - x_j - c_ij|^2`
    pub numerator: f64,
    /// Collision factor over incident pairs.
    pub beta: f64,
    /// For each neighbour `j` (in neighbour order), the product of the
    /// other pairs' ramps. Sent to `j` only.
    pub cofactors: Vec<(usize, f64)>,
}

impl PotentialBroadcast {
    fn cofactor_for(&self, neighbor: usize) -> f64 {
        self.cofactors.iter().find(|(j, _)| *j == neighbor).map(|c| c.1).expect("broadcast from a neighbour")
    }
}

/// An agent's own potential and the network-potential gradient in its
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialValue {
    pub phi_i: f64,
    /// `grad_i phi`, gradient of the network potential in `x_i`.
    pub grad_phi_i: Point,
    pub beta_value: f64,
    /// Some incident pair sits at or inside the safety distance.
    pub near_collision: bool,
}

/// Neighbour data visible to one agent when evaluating its potential.
#[derive(Debug, Clone, Copy)]
pub struct NeighborState<'a> {
    pub index: usize,
    pub position: &'a Point,
    pub numerator: f64,
    pub beta: f64,
    /// Product of the neighbour's ramps over its pairs other than the one
    /// with this agent.
    pub cofactor: f64,
}

fn ramps(own: &Point, neighbors: &[(usize, &Point)], spec: &FormationSpec) -> Vec<f64> {
    neighbors.iter().map(|(_, x)| spec.pair_ramp((own - *x).norm()).0).collect()
}

fn product_except(values: &[f64], skip: usize) -> f64 {
    values.iter().enumerate().filter(|(m, _)| *m != skip).map(|(_, v)| v).product()
}

/// `beta_i` from agent `i`'s own and neighbours' positions.
pub fn beta(own: &Point, neighbors: &[(usize, &Point)], spec: &FormationSpec) -> f64 {
    spec.collision_factor(ramps(own, neighbors, spec).iter().product())
}

/// Numerator, collision factor and per-neighbour cofactors of `phi_i`.
pub fn broadcast(i: usize, own: &Point, neighbors: &[(usize, &Point)], spec: &FormationSpec) -> PotentialBroadcast {
    let numerator = neighbors
        .iter()
        .map(|(j, x)| {
            let c = spec.offset(i, *j).expect("edge offset");
            (own - *x - c).norm_squared()
        })
        .sum();
    let r = ramps(own, neighbors, spec);
    let cofactors = neighbors.iter().enumerate().map(|(k, (j, _))| (*j, product_except(&r, k))).collect();
    PotentialBroadcast { numerator, beta: spec.collision_factor(r.iter().product()), cofactors }
}

/// Agent `i`'s potential value and `grad_i phi` from one-hop information.
pub fn phi_i(i: usize, own: &Point, neighbors: &[NeighborState<'_>], spec: &FormationSpec) -> PotentialValue {
    let d = own.len();
    let span = 1.0 - spec.floor_epsilon;
    let mut numerator = 0.0;
    let mut grad_numerator = Point::zeros(d);
    let mut pairs = Vec::with_capacity(neighbors.len());
    let mut near_collision = false;
    for n in neighbors {
        let c = spec.offset(i, n.index).expect("edge offset");
        let diff = own - n.position;
        let err = &diff - c;
        numerator += err.norm_squared();
        grad_numerator += &err * 2.0;
        let dist = diff.norm();
        near_collision |= dist <= spec.safety_distance;
        let (r, dr) = spec.pair_ramp(dist);
        let unit = if dist > 0.0 { diff / dist } else { Point::zeros(d) };
        pairs.push((r, dr, unit, err));
    }
    let r: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let beta_i = spec.collision_factor(r.iter().product());
    let mut grad_beta = Point::zeros(d);
    for (k, (_, dr, unit, _)) in pairs.iter().enumerate() {
        if *dr != 0.0 {
            grad_beta += unit * (span * product_except(&r, k) * dr);
        }
    }
    let damp = (-beta_i).exp();
    let phi = numerator * damp;
    // own term
    let mut grad = (grad_numerator - grad_beta * numerator) * damp;
    // neighbour terms: d/dx_i of phi_j
    for (n, (_, dr, unit, err)) in neighbors.iter().zip(&pairs) {
        let mut term = err * 2.0;
        if *dr != 0.0 {
            term -= unit * (n.numerator * span * n.cofactor * dr);
        }
        grad += term * (-n.beta).exp();
    }
    PotentialValue { phi_i: phi, grad_phi_i: grad, beta_value: beta_i, near_collision }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPotential {
    pub total: f64,
    pub per_agent: Vec<PotentialValue>,
}

fn neighbor_positions<'a>(graph: &TopologyGraph, positions: &'a [Point], i: usize) -> Vec<(usize, &'a Point)> {
    graph.neighbors_of(i).iter().map(|&j| (j, &positions[j])).collect()
}

/// Broadcasts for every agent.
pub fn broadcasts(
    positions: &[Point],
    spec: &FormationSpec,
    graph: &TopologyGraph,
    exec: Execution,
) -> Vec<PotentialBroadcast> {
    exec.map_indexed(positions.len(), |i| broadcast(i, &positions[i], &neighbor_positions(graph, positions, i), spec))
}

/// Evaluates every agent's potential through the same one-hop path the
/// agents use.
pub fn potential_from_broadcasts(
    positions: &[Point],
    shared: &[PotentialBroadcast],
    spec: &FormationSpec,
    graph: &TopologyGraph,
    exec: Execution,
) -> GlobalPotential {
    let per_agent: Vec<PotentialValue> = exec.map_indexed(positions.len(), |i| {
        let neighbors: Vec<NeighborState<'_>> = graph
            .neighbors_of(i)
            .iter()
            .map(|&j| NeighborState {
                index: j,
                position: &positions[j],
                numerator: shared[j].numerator,
                beta: shared[j].beta,
                cofactor: shared[j].cofactor_for(i),
            })
            .collect();
        phi_i(i, &positions[i], &neighbors, spec)
    });
    let total = per_agent.iter().map(|p| p.phi_i).sum();
    GlobalPotential { total, per_agent }
}

/// `phi = sum_i phi_i` together with each agent's `grad_i phi`.
pub fn global_potential(
    positions: &[Point],
    spec: &FormationSpec,
    graph: &TopologyGraph,
    exec: Execution,
) -> Result<GlobalPotential> {
    spec.check(graph, positions)?;
    let shared = broadcasts(positions, spec, graph, exec);
    Ok(potential_from_broadcasts(positions, &shared, spec, graph, exec))
}

/// Network potential only, summed from the broadcast numerators.
pub fn total_potential(positions: &[Point], spec: &FormationSpec, graph: &TopologyGraph) -> f64 {
    (0..positions.len())
        .map(|i| {
            let b = broadcast(i, &positions[i], &neighbor_positions(graph, positions, i), spec);
            b.numerator * (-b.beta).exp()
        })
        .sum()
}

/// Stacked `grad phi` over all agents.
fn full_gradient(positions: &[Point], spec: &FormationSpec, graph: &TopologyGraph) -> Vec<Point> {
    global_potential(positions, spec, graph, Execution::Sequential)
        .expect("sized positions")
        .per_agent
        .into_iter()
        .map(|p| p.grad_phi_i)
        .collect()
}

/// `|grad phi(x) - grad phi(y)| / |x - y|` over stacked coordinates.
pub fn lipschitz_ratio(x: &[Point], y: &[Point], spec: &FormationSpec, graph: &TopologyGraph) -> f64 {
    let gx = full_gradient(x, spec, graph);
    let gy = full_gradient(y, spec, graph);
    let num: f64 = gx.iter().zip(&gy).map(|(a, b)| (a - b).norm_squared()).sum();
    let den: f64 = x.iter().zip(y).map(|(a, b)| (a - b).norm_squared()).sum();
    (num / den).sqrt()
}

fn min_pair_distance(positions: &[Point], graph: &TopologyGraph) -> f64 {
    graph.edges().map(|(i, j)| (&positions[i] - &positions[j]).norm()).fold(f64::INFINITY, f64::min)
}

/// Empirical Lipschitz constant of `grad phi`.
///
/// Samples half the configurations uniformly over `region` and half as the
/// desired formation (translated to a random point of the region) perturbed
/// by up to one formation scale per coordinate. Each configuration is paired
/// with a nearby one; configurations with a pair inside the safety distance
/// are skipped. Returns the largest observed ratio times
/// [`LIPSCHITZ_INFLATION`].
pub fn estimate_lipschitz_phi(
    spec: &FormationSpec,
    graph: &TopologyGraph,
    region: &Region,
    samples: usize,
    seed: u64,
    exec: Execution,
) -> f64 {
    let template = spec.template(graph);
    let centroid = template.iter().fold(Point::zeros(graph.dimension()), |acc, p| acc + p) / template.len() as f64;
    let n = graph.agent_count();
    let d = graph.dimension();
    let ratios = exec.map_indexed(samples, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let uniform = |rng: &mut ChaCha8Rng| {
            Point::from_iterator(d, (0..d).map(|m| rng.random_range(region.lo[m]..region.hi[m])))
        };
        let x: Vec<Point> = if s % 2 == 0 {
            (0..n).map(|_| uniform(&mut rng)).collect()
        } else {
            let shift = uniform(&mut rng) - &centroid;
            template
                .iter()
                .map(|p| {
                    p + &shift + Point::from_iterator(d, (0..d).map(|_| rng.random_range(-spec.scale..spec.scale)))
                })
                .collect()
        };
        let step = 0.05 * spec.scale;
        let y: Vec<Point> =
            x.iter().map(|p| p + Point::from_iterator(d, (0..d).map(|_| rng.random_range(-step..step)))).collect();
        if min_pair_distance(&x, graph) <= spec.safety_distance || min_pair_distance(&y, graph) <= spec.safety_distance
        {
            return 0.0;
        }
        lipschitz_ratio(&x, &y, spec, graph)
    });
    LIPSCHITZ_INFLATION * ratios.into_iter().fold(0.0, f64::max)
}
