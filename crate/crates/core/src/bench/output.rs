//! CSV and JSON artifacts. Floats in CSV carry 17 significant digits so
//! they parse back to the same `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha1::{Digest, Sha1};

use crate::bench::config::RunConfig;
use crate::bench::rng::RNG_NAME;
use crate::bench::rollout::RolloutReport;
use crate::bench::runner::BenchTable;
use crate::error::Result;
use crate::gaussian::Gaussian;

pub const PERCENTILE_METHOD: &str = "nearest-rank: ceil(p*N)-th smallest cost";

/// Scientific notation with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Git blob hash (`sha1("blob <len>\0" + bytes)`) of a text.
pub fn content_hash(text: &str) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    format!("{:x}", h.finalize())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    create_parent(path)?;
    Ok(csv::Writer::from_path(path)?)
}

/// One row per successful rollout: index, cost and terminal state, followed
/// by one row per failure with an empty cost.
pub fn write_report_csv(report: &RolloutReport, dx: usize, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["rollout".to_string(), "cost".to_string()];
    header.extend((0..dx).map(|i| format!("x_T_{i}")));
    header.push("failure".into());
    w.write_record(&header)?;
    for r in &report.records {
        let mut row = vec![r.index.to_string(), fmt_f64(r.cost)];
        row.extend(r.terminal.iter().map(|v| fmt_f64(*v)));
        row.push(String::new());
        w.write_record(&row)?;
    }
    for f in &report.failures {
        let mut row = vec![f.index.to_string(), String::new()];
        row.extend((0..dx).map(|_| String::new()));
        row.push(format!("stage {}: {}", f.stage, f.reason));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table_csv(table: &BenchTable, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "env",
        "variant",
        "p10",
        "p90",
        "mean",
        "std",
        "rollouts",
        "failed_rollouts",
        "iterations",
        "converged",
        "error",
    ])?;
    for c in &table.cells {
        w.write_record([
            c.env.clone(),
            c.variant.clone(),
            fmt_f64(c.p10),
            fmt_f64(c.p90),
            fmt_f64(c.mean),
            fmt_f64(c.std),
            c.rollouts.to_string(),
            c.failed_rollouts.to_string(),
            c.iterations.to_string(),
            c.converged.to_string(),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Metadata<'a> {
    percentile_method: &'a str,
    rng: &'a str,
    cost_scale: f64,
    version: &'a str,
}

#[derive(Debug, Serialize)]
struct RunDocument<'a, T: Serialize> {
    config: &'a RunConfig,
    config_hash: String,
    metadata: Metadata<'a>,
    results: &'a T,
}

/// One JSON document: config echo, hash of its canonical TOML, metadata and
/// results.
pub fn write_run_json<T: Serialize>(cfg: &RunConfig, results: &T, path: &Path) -> Result<()> {
    let doc = RunDocument {
        config: cfg,
        config_hash: content_hash(&cfg.to_toml()?),
        metadata: Metadata {
            percentile_method: PERCENTILE_METHOD,
            rng: RNG_NAME,
            cost_scale: cfg.cost_scale,
            version: env!("CARGO_PKG_VERSION"),
        },
        results,
    };
    create_parent(path)?;
    let text = serde_json::to_string_pretty(&doc).map_err(|e| crate::Error::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| crate::Error::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Paths written by [`emit_trajectories`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFiles {
    pub plan: PathBuf,
    pub rollouts: PathBuf,
}

fn plan_header(dx: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..dx).map(|i| format!("mu_{i}")));
    for i in 0..dx {
        h.push(format!("var_{i}"));
        h.extend((i + 1..dx).map(|j| format!("cov_{i}_{j}")));
    }
    h
}

/// Writes `plan.csv` and `rollouts.csv` into `dir`.
///
/// `plan.csv` has one row per stage: `t`, the mean `mu_i`, then the upper
/// triangle of the covariance row by row (`var_i` on the diagonal,
/// `cov_i_j` off it). `rollouts.csv` has one row per rollout and stage:
/// `rollout`, `t`, states `x_i` and inputs `u_j` (blank at `t = T`). A report
/// without stored trajectories gives a header-only `rollouts.csv`.
pub fn emit_trajectories(
    report: Option<&RolloutReport>,
    plan: &[Gaussian],
    dx: usize,
    du: usize,
    dir: &Path,
) -> Result<TrajectoryFiles> {
    fs::create_dir_all(dir)?;
    let files = TrajectoryFiles {
        plan: dir.join("plan.csv"),
        rollouts: dir.join("rollouts.csv"),
    };

    let mut w = writer(&files.plan)?;
    w.write_record(plan_header(dx))?;
    for (t, g) in plan.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(g.mean.iter().map(|v| fmt_f64(*v)));
        for i in 0..dx {
            row.extend((i..dx).map(|j| fmt_f64(g.cov[(i, j)])));
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = writer(&files.rollouts)?;
    let mut header = vec!["rollout".to_string(), "t".to_string()];
    header.extend((0..dx).map(|i| format!("x_{i}")));
    header.extend((0..du).map(|j| format!("u_{j}")));
    w.write_record(&header)?;
    if let Some(report) = report {
        for (rec, traj) in report
            .records
            .iter()
            .zip(report.trajectories.iter().flatten())
        {
            for (t, x) in traj.states.iter().enumerate() {
                let mut row = vec![rec.index.to_string(), t.to_string()];
                row.extend(x.iter().map(|v| fmt_f64(*v)));
                match traj.inputs.get(t) {
                    Some(u) => row.extend(u.iter().map(|v| fmt_f64(*v))),
                    None => row.extend((0..du).map(|_| String::new())),
                }
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(files)
}
