//! Output bundle: `trajectory.csv`, `metrics.json` and `manifest.json`.
//!
//! The trajectory has one row per agent per round. Floats carry 17
//! significant digits; missing values are empty fields. Columns prefixed
//! `oracle_` are ground truth that no agent ever sees.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Setup;
use crate::error::Result;
use crate::simkernel::{RunMetrics, RunOutcome};

/// Bumped whenever the trajectory columns or JSON layouts change.
pub const SCHEMA_VERSION: u32 = 1;

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Notes carried in every metrics file.
pub const METRICS_LEGEND: &[&str] = &[
    "gap columns are f_k(x_k^i) - f_k^*; bounds start at the agent's burn-in round",
    "bound_distance and M divide the gap bound by 2s; bounding a distance by a gap needs \
     quadratic growth (gap >= (s/2)|x - x_bar|^2), which allows four times more, so measured \
     distances can legitimately exceed these two values; bound_distance_growth is 2 * bound_analytic / s \
     and growth_bound_violations counts rounds above it",
    "audit counts compare each agent's unilateral change of the network potential with the \
     step inequalities; literal_violations applies the same case test to the change of phi_i \
     after all agents moved and is informational",
];

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.16e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}

fn flag(b: bool) -> String {
    if b {
        "1".into()
    } else {
        "0".into()
    }
}

fn indexed(prefix: &str, d: usize) -> impl Iterator<Item = String> + '_ {
    (0..d).map(move |m| format!("{prefix}_{m}"))
}

/// Column names for a `d`-dimensional run.
pub fn trajectory_header(d: usize) -> Vec<String> {
    let mut h: Vec<String> = vec!["k".into(), "agent".into()];
    h.extend(indexed("x", d));
    h.push("y".into());
    h.extend(indexed("estimate", d));
    h.extend(
        ["delta", "best_pair_j", "best_pair_l", "gram_condition", "contained", "estimation_failure"].map(String::from),
    );
    h.extend(["phi_i", "beta"].map(String::from));
    h.extend(indexed("grad_phi", d));
    h.extend(
        [
            "phi_total",
            "lambda",
            "alpha",
            "alpha_bar",
            "direction_norm",
            "lambda_capped",
            "skipped",
            "audit_case",
            "audit_unilateral_change",
            "audit_lipschitz_term",
            "audit_quadratic_bound",
            "audit_ok",
            "audit_literal_ok",
            "round_audit_ok",
            "bound_recursive",
            "bound_analytic",
            "bound_distance",
            "bound_distance_growth",
            "oracle_gap",
            "oracle_distance_sq",
        ]
        .map(String::from),
    );
    h.extend(indexed("oracle_minimizer", d));
    h.push("oracle_min_value".into());
    h.extend(indexed("oracle_gradient", d));
    h.extend(indexed("oracle_perturbation", d));
    h
}

/// Writes the trajectory CSV to any writer.
pub fn write_trajectory<W: Write>(outcome: &RunOutcome, dimension: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_header(dimension))?;
    let empty = || std::iter::repeat_n(String::new(), dimension);
    for (s, bounds) in outcome.snapshots.iter().zip(&outcome.bounds) {
        for (i, a) in s.agents.iter().enumerate() {
            let mut row: Vec<String> = vec![s.k.to_string(), i.to_string()];
            row.extend(s.positions[i].iter().map(|v| num(*v)));
            row.push(num(s.measurements[i]));
            match &a.estimate {
                Ok(e) => {
                    row.extend(e.gradient.iter().map(|v| num(*v)));
                    row.push(num(e.error_bound));
                    row.push(e.best_pair.map_or_else(String::new, |p| p.0.to_string()));
                    row.push(e.best_pair.map_or_else(String::new, |p| p.1.to_string()));
                    row.push(num(e.gram_condition));
                    row.push(e.contained.map_or_else(String::new, flag));
                    row.push(String::new());
                }
                Err(f) => {
                    row.extend(empty());
                    row.extend(std::iter::repeat_n(String::new(), 5));
                    row.push(f.to_string());
                }
            }
            row.push(num(a.potential.phi_i));
            row.push(num(a.potential.beta_value));
            row.extend(a.potential.grad_phi_i.iter().map(|v| num(*v)));
            row.push(num(s.potential_total));
            let p = &a.plan;
            row.extend([num(p.lambda), num(p.alpha), num(p.alpha_bar), num(p.direction.norm())]);
            row.extend([flag(p.flags.lambda_capped), flag(p.flags.skipped)]);
            match &s.audit {
                Some((records, round)) => {
                    let r = &records[i];
                    let case = serde_json::to_value(r.case)?;
                    row.push(case.as_str().unwrap_or_default().to_string());
                    row.extend([num(r.unilateral_change), num(r.lipschitz_term), num(r.quadratic_bound)]);
                    row.extend([flag(!r.violated()), flag(r.literal_ok), flag(round.ok)]);
                }
                None => row.extend(std::iter::repeat_n(String::new(), 7)),
            }
            let b = bounds[i];
            row.extend([
                opt(b.map(|b| b.recursive)),
                opt(b.map(|b| b.analytic)),
                opt(b.map(|b| b.distance)),
                opt(b.map(|b| b.distance_growth)),
            ]);
            row.push(num(s.oracle.gaps[i]));
            row.push(num(s.oracle.distances_sq[i]));
            row.extend(s.oracle.minimizer.iter().map(|v| num(*v)));
            row.push(num(s.oracle.min_value));
            row.extend(s.oracle.true_gradients[i].iter().map(|v| num(*v)));
            match &a.perturbation {
                Some(e) => row.extend(e.iter().map(|v| num(*v))),
                None => row.extend(empty()),
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Trajectory CSV as bytes.
pub fn trajectory_bytes(outcome: &RunOutcome, dimension: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_trajectory(outcome, dimension, &mut buf)?;
    Ok(buf)
}

#[derive(Debug, Serialize)]
struct MetricsFile<'a> {
    schema_version: u32,
    legend: &'a [&'a str],
    #[serde(flatten)]
    metrics: &'a RunMetrics,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub package: &'static str,
    pub version: &'static str,
    pub mode: &'static str,
    pub seed: u64,
    pub rounds: usize,
    pub parallel_feature: bool,
    /// Complete configuration; rerunning it reproduces the bundle.
    pub config: String,
    pub files: Vec<&'static str>,
}

pub fn manifest(setup: &Setup) -> Result<Manifest> {
    Ok(Manifest {
        schema_version: SCHEMA_VERSION,
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        mode: setup.config.mode.name(),
        seed: setup.config.seed,
        rounds: setup.config.rounds,
        parallel_feature: cfg!(feature = "parallel"),
        config: setup.config.to_toml()?,
        files: vec![TRAJECTORY_FILE, METRICS_FILE, MANIFEST_FILE],
    })
}

/// Paths of a written bundle.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub dir: PathBuf,
    pub trajectory: PathBuf,
    pub metrics: PathBuf,
    pub manifest: PathBuf,
}

fn tmp_name(path: &Path) -> PathBuf {
    let mut name = path.file_name().expect("file path").to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes the three files into `dir`. Everything is staged under temporary
/// names first; on any error the staged files are removed and nothing
/// under the final names is touched.
pub fn write_bundle(outcome: &RunOutcome, setup: &Setup, dir: &Path) -> Result<Bundle> {
    fs::create_dir_all(dir)?;
    let bundle = Bundle {
        dir: dir.to_path_buf(),
        trajectory: dir.join(TRAJECTORY_FILE),
        metrics: dir.join(METRICS_FILE),
        manifest: dir.join(MANIFEST_FILE),
    };
    let staged = [&bundle.trajectory, &bundle.metrics, &bundle.manifest].map(|p| tmp_name(p));
    let result = (|| -> Result<()> {
        let file = fs::File::create(&staged[0])?;
        write_trajectory(outcome, setup.graph.dimension(), std::io::BufWriter::new(file))?;
        let metrics = MetricsFile { schema_version: SCHEMA_VERSION, legend: METRICS_LEGEND, metrics: &outcome.metrics };
        fs::write(&staged[1], serde_json::to_string_pretty(&metrics)? + "\n")?;
        fs::write(&staged[2], serde_json::to_string_pretty(&manifest(setup)?)? + "\n")?;
        Ok(())
    })();
    if let Err(e) = result {
        for p in &staged {
            let _ = fs::remove_file(p);
        }
        return Err(e);
    }
    for (tmp, fin) in staged.iter().zip([&bundle.trajectory, &bundle.metrics, &bundle.manifest]) {
        fs::rename(tmp, fin)?;
    }
    Ok(bundle)
}
