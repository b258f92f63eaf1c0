//! Time-varying objective fields, the measurement channel agents consume,
//! and the analytic ground truth used only for validation and bounds.

use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Point = DVector<f64>;

/// A scalar field `f_k(x)` indexed by round.
///
/// `evaluate` is the only method agents may see (through
/// [`ObjectiveScenario::measure`]); the rest are oracle channels for
/// validation and bound computation.
pub trait Field: Send + Sync + std::fmt::Debug {
    fn dimension(&self) -> usize;
    fn evaluate(&self, x: &Point, k: usize) -> f64;
    fn true_gradient(&self, x: &Point, k: usize) -> Point;
    /// Minimiser and optimal value at round `k`, when known.
    fn minimizer(&self, k: usize) -> Option<(Point, f64)>;
}

/// Axis-aligned box on which the assumption constants are claimed to hold.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub lo: Point,
    pub hi: Point,
}

impl Region {
    pub fn new(lo: Point, hi: Point) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::InvalidScenario("region bounds differ in dimension".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidScenario("region requires lo < hi in every axis".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn symmetric(dimension: usize, half_width: f64) -> Self {
        Self { lo: Point::from_element(dimension, -half_width), hi: Point::from_element(dimension, half_width) }
    }

    pub fn dimension(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &Point) -> bool {
        x.iter().zip(self.lo.iter().zip(self.hi.iter())).all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    /// `max |a . x|` over the box; attained at a corner.
    pub fn max_abs_dot(&self, a: &Point) -> f64 {
        a.iter().zip(self.lo.iter().zip(self.hi.iter())).map(|(ai, (l, h))| ai.abs() * l.abs().max(h.abs())).sum()
    }

    pub fn center(&self) -> Point {
        (&self.lo + &self.hi) * 0.5
    }
}

/// Path of the minimiser of a translating quadratic. Both kinds move at a
/// constant speed (distance per round).
#[derive(Debug, Clone, PartialEq)]
pub enum MinimizerPath {
    Static {
        at: Point,
    },
    Line {
        start: Point,
        velocity: Point,
    },
    /// Circle in the plane spanned by the first two axes.
    Circle {
        center: Point,
        radius: f64,
        speed: f64,
        phase: f64,
    },
}

impl MinimizerPath {
    pub fn position(&self, k: usize) -> Point {
        let t = k as f64;
        match self {
            MinimizerPath::Static { at } => at.clone(),
            MinimizerPath::Line { start, velocity } => start + velocity * t,
            MinimizerPath::Circle { center, radius, speed, phase } => {
                let mut p = center.clone();
                let angle = phase + if *radius > 0.0 { speed * t / radius } else { 0.0 };
                p[0] += radius * angle.cos();
                p[1] += radius * angle.sin();
                p
            }
        }
    }

    fn dimension(&self) -> usize {
        match self {
            MinimizerPath::Static { at } => at.len(),
            MinimizerPath::Line { start, .. } => start.len(),
            MinimizerPath::Circle { center, .. } => center.len(),
        }
    }

    /// Rounds per revolution for circular paths.
    pub fn period(&self) -> Option<f64> {
        match self {
            MinimizerPath::Circle { radius, speed, .. } if *speed > 0.0 => Some(TAU * radius / speed),
            _ => None,
        }
    }
}

/// `f_k(x) = x^T Q x + zeta(k)^T x` with `zeta(k) = -(Q + Q^T) x*(k)`, so the
/// bowl is translated rigidly along `path`.
#[derive(Debug, Clone)]
pub struct QuadraticSource {
    q: DMatrix<f64>,
    hessian: DMatrix<f64>,
    hessian_inv: DMatrix<f64>,
    path: MinimizerPath,
}

impl QuadraticSource {
    pub fn new(q: DMatrix<f64>, path: MinimizerPath) -> Result<Self> {
        let d = q.nrows();
        if q.ncols() != d || d == 0 {
            return Err(Error::InvalidScenario("Q must be square and non-empty".into()));
        }
        if path.dimension() != d {
            return Err(Error::InvalidScenario(format!(
                "path dimension {} does not match Q ({d}x{d})",
                path.dimension()
            )));
        }
        if matches!(path, MinimizerPath::Circle { .. }) && d < 2 {
            return Err(Error::InvalidScenario("circular path needs dimension >= 2".into()));
        }
        let asym = (&q - q.transpose()).amax();
        if asym > 1e-12 * q.amax().max(1.0) {
            return Err(Error::InvalidScenario("Q must be symmetric".into()));
        }
        let hessian = &q + q.transpose();
        let eig = hessian.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.min();
        if min_eig < -1e-12 {
            return Err(Error::InvalidScenario("Q must be positive semidefinite".into()));
        }
        if min_eig <= 1e-12 * eig.eigenvalues.amax().max(1.0) {
            return Err(Error::InvalidScenario("Q + Q^T is singular: minimiser and PL constant undefined".into()));
        }
        let hessian_inv = hessian
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidScenario("Q + Q^T not positive definite".into()))?
            .inverse();
        Ok(Self { q, hessian, hessian_inv, path })
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// `Q + Q^T`, the constant Hessian.
    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn path(&self) -> &MinimizerPath {
        &self.path
    }

    pub fn linear_term(&self, k: usize) -> Point {
        -(&self.hessian * self.path.position(k))
    }

    /// Minimiser as the solution of `(Q + Q^T) x = -zeta(k)`.
    pub fn solve_minimizer(&self, k: usize) -> Point {
        -(&self.hessian_inv * self.linear_term(k))
    }
}

impl Field for QuadraticSource {
    fn dimension(&self) -> usize {
        self.q.nrows()
    }

    fn evaluate(&self, x: &Point, k: usize) -> f64 {
        x.dot(&(&self.q * x)) + self.linear_term(k).dot(x)
    }

    fn true_gradient(&self, x: &Point, k: usize) -> Point {
        &self.hessian * x + self.linear_term(k)
    }

    fn minimizer(&self, k: usize) -> Option<(Point, f64)> {
        let x = self.solve_minimizer(k);
        let value = self.evaluate(&x, k);
        Some((x, value))
    }
}

/// `f(x) = g^T x + b`, constant in time. Used to check exactness of the
/// gradient estimator.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub slope: Point,
    pub offset: f64,
}

impl Field for LinearField {
    fn dimension(&self) -> usize {
        self.slope.len()
    }

    fn evaluate(&self, x: &Point, _k: usize) -> f64 {
        self.slope.dot(x) + self.offset
    }

    fn true_gradient(&self, _x: &Point, _k: usize) -> Point {
        self.slope.clone()
    }

    fn minimizer(&self, _k: usize) -> Option<(Point, f64)> {
        None
    }
}

/// Constants of the Lipschitz, Polyak-Lojasiewicz and drift assumptions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AssumptionConstants {
    pub lipschitz: f64,
    pub polyak: f64,
    pub drift_eta0: f64,
    pub drift_eta_star: f64,
}

/// Analytic constants of a translating quadratic over `region` and the first
/// `horizon` rounds. `L` is the spectral norm of `Q + Q^T` and `s` its
/// smallest eigenvalue; the drift constants are maxima over the rounds
/// simulated, with `eta0` restricted to the region (it is unbounded on all
/// of R^d whenever the bowl moves).
pub fn analytic_constants(quadratic: &QuadraticSource, region: &Region, horizon: usize) -> Result<AssumptionConstants> {
    if region.dimension() != quadratic.dimension() {
        return Err(Error::InvalidScenario("region dimension mismatch".into()));
    }
    let eig = quadratic.hessian.clone().symmetric_eigen();
    let lipschitz = eig.eigenvalues.amax();
    let polyak = eig.eigenvalues.min();
    if polyak <= 0.0 {
        return Err(Error::InvalidScenario("PL constant undefined for singular Q + Q^T".into()));
    }
    let mut eta0 = 0.0_f64;
    let mut eta_star = 0.0_f64;
    if horizon > 0 {
        let mut zeta = quadratic.linear_term(0);
        let mut fstar = quadratic.minimizer(0).map(|m| m.1).unwrap_or(0.0);
        for k in 0..horizon {
            let zeta_next = quadratic.linear_term(k + 1);
            eta0 = eta0.max(region.max_abs_dot(&(&zeta_next - &zeta)));
            let fstar_next = quadratic.minimizer(k + 1).map(|m| m.1).unwrap_or(0.0);
            eta_star = eta_star.max((fstar_next - fstar).abs());
            zeta = zeta_next;
            fstar = fstar_next;
        }
    }
    Ok(AssumptionConstants { lipschitz, polyak, drift_eta0: eta0, drift_eta_star: eta_star })
}

/// Per-agent measurements for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub values: Vec<f64>,
    /// Agents measured outside the operating region this round.
    pub out_of_region: Vec<usize>,
}

/// A field together with its assumption constants and operating region.
#[derive(Debug, Clone)]
pub struct ObjectiveScenario {
    field: Arc<dyn Field>,
    constants: AssumptionConstants,
    region: Region,
}

impl ObjectiveScenario {
    pub fn new(field: Arc<dyn Field>, constants: AssumptionConstants, region: Region) -> Result<Self> {
        if region.dimension() != field.dimension() {
            return Err(Error::InvalidScenario("region dimension mismatch".into()));
        }
        if !(constants.lipschitz > 0.0) || !(constants.polyak > 0.0) {
            return Err(Error::InvalidScenario("L and s must be positive".into()));
        }
        if constants.drift_eta0 < 0.0 || constants.drift_eta_star < 0.0 {
            return Err(Error::InvalidScenario("drift constants must be nonnegative".into()));
        }
        Ok(Self { field, constants, region })
    }

    /// Quadratic scenario with constants derived analytically over `horizon`.
    pub fn from_quadratic(quadratic: QuadraticSource, region: Region, horizon: usize) -> Result<Self> {
        let constants = analytic_constants(&quadratic, &region, horizon)?;
        Self::new(Arc::new(quadratic), constants, region)
    }

    pub fn field(&self) -> &dyn Field {
        self.field.as_ref()
    }

    pub fn constants(&self) -> AssumptionConstants {
        self.constants
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn dimension(&self) -> usize {
        self.field.dimension()
    }

    /// Exact function values at every agent position. This is the only
    /// scenario channel agents consume.
    pub fn measure(&self, positions: &[Point], k: usize) -> Measurements {
        let values = positions.iter().map(|x| self.field.evaluate(x, k)).collect();
        let out_of_region =
            positions.iter().enumerate().filter(|(_, x)| !self.region.contains(x)).map(|(i, _)| i).collect();
        Measurements { values, out_of_region }
    }

    pub fn true_gradient(&self, x: &Point, k: usize) -> Point {
        self.field.true_gradient(x, k)
    }

    pub fn minimizer(&self, k: usize) -> Option<(Point, f64)> {
        self.field.minimizer(k)
    }
}

/// The randomly generated quadratic used in the reference hexagon scenario.
pub fn reference_q() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[3.89, 0.45, 0.45, 5.86])
}
