//! Output directory layout:
//!
//! ```text
//! scenario.toml  manifest.json  sets.json
//! run_<i>/trajectory.csv  jumps.csv  solves.csv  report.json
//!         warmup_trajectory.csv  warmup_jumps.csv  oracle.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use izmpc::impulsive::{HybridTrajectory, Jump};
use izmpc::mpc::SolveRecord;

use crate::error::{CliError, Result};
use crate::pipeline::{RunResult, Sets};
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dir: String,
    pub x0: Vec<f64>,
    pub impulses: usize,
    pub converged_solves: usize,
    pub status_counts: BTreeMap<String, usize>,
    pub violations: usize,
    pub final_dist_to_set: Option<f64>,
    pub verdicts: BTreeMap<String, bool>,
    pub seconds: f64,
    pub succeeded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: String,
    pub version: String,
    pub target_pairs: usize,
    pub c_phi: f64,
    pub sets_seconds: f64,
    pub wall_seconds: f64,
    pub runs: Vec<RunSummary>,
    pub succeeded: bool,
}

pub fn run_dir(out: &Path, i: usize) -> PathBuf {
    out.join(format!("run_{i}"))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| CliError::io(p, e))
}

pub fn write_json<T: Serialize>(p: &Path, value: &T) -> Result<()> {
    write_text(p, &serde_json::to_string_pretty(value)?)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T> {
    let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn csv_writer(p: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(p).map_err(|e| CliError::io(p, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn names(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}{i}"))
}

fn push_vec(row: &mut Vec<String>, v: &DVector<f64>) {
    row.extend(v.iter().map(|x| x.to_string()));
}

/// One row per hybrid sample: `t, x1..xn`.
pub fn write_trajectory_csv(p: &Path, traj: &HybridTrajectory, n: usize) -> Result<()> {
    let mut w = csv_writer(p)?;
    let mut header = vec!["t".to_string()];
    header.extend(names("x", n));
    w.write_record(&header)?;
    for (t, x) in traj.samples() {
        let mut row = vec![t.to_string()];
        push_vec(&mut row, x);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(p, e))
}

/// One row per impulse: `k, t, u1..um, x_pre1..n, x_post1..n`.
pub fn write_jumps_csv(p: &Path, traj: &HybridTrajectory, n: usize, m: usize) -> Result<()> {
    let mut w = csv_writer(p)?;
    let mut header = vec!["k".to_string(), "t".to_string()];
    header.extend(names("u", m));
    header.extend(names("x_pre", n));
    header.extend(names("x_post", n));
    w.write_record(&header)?;
    for j in &traj.jumps {
        let mut row = vec![j.k.to_string(), j.t.to_string()];
        push_vec(&mut row, &j.u);
        push_vec(&mut row, &j.x_pre);
        push_vec(&mut row, &j.x_post);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(p, e))
}

pub fn write_solves_csv(p: &Path, solves: &[SolveRecord]) -> Result<()> {
    let mut w = csv_writer(p)?;
    w.write_record(["k", "status", "cost", "iterations", "used_warm_candidate"])?;
    for (k, s) in solves.iter().enumerate() {
        let status = serde_json::to_value(s.status)?;
        w.write_record([
            k.to_string(),
            status.as_str().unwrap_or_default().to_string(),
            s.cost.to_string(),
            s.iterations.to_string(),
            s.used_warm_candidate.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(p, e))
}

fn read_rows(p: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let f = fs::File::open(p).map_err(|e| CliError::io(p, e))?;
    let mut r = csv::Reader::from_reader(f);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| CliError::Run(format!("{}: bad number {s:?}: {e}", p.display()))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Reads `trajectory.csv` back as `(t, x)` samples.
pub fn read_trajectory_csv(p: &Path) -> Result<Vec<(f64, DVector<f64>)>> {
    let (_, rows) = read_rows(p)?;
    Ok(rows
        .into_iter()
        .map(|r| (r[0], DVector::from_column_slice(&r[1..])))
        .collect())
}

pub fn read_jumps_csv(p: &Path) -> Result<Vec<Jump>> {
    let (header, rows) = read_rows(p)?;
    let m = header.iter().filter(|h| h.starts_with('u')).count();
    let n = header.iter().filter(|h| h.starts_with("x_pre")).count();
    Ok(rows
        .into_iter()
        .map(|r| Jump {
            k: r[0] as usize,
            t: r[1],
            u: DVector::from_column_slice(&r[2..2 + m]),
            x_pre: DVector::from_column_slice(&r[2 + m..2 + m + n]),
            x_post: DVector::from_column_slice(&r[2 + m + n..2 + m + 2 * n]),
        })
        .collect())
}

pub fn write_sets(out: &Path, scenario: &Scenario, sets: &Sets) -> Result<()> {
    create_dir(out)?;
    write_text(&out.join("scenario.toml"), &scenario.to_toml()?)?;
    write_json(&out.join("sets.json"), sets)
}

pub fn summarize(dir: &str, run: &RunResult) -> Result<RunSummary> {
    let mut status_counts = BTreeMap::new();
    for s in &run.solves {
        let key = serde_json::to_value(s.status)?.as_str().unwrap_or_default().to_string();
        *status_counts.entry(key).or_insert(0) += 1;
    }
    Ok(RunSummary {
        dir: dir.to_string(),
        x0: run.x0.as_slice().to_vec(),
        impulses: run.hybrid.jumps.len(),
        converged_solves: run.solves.iter().filter(|s| s.status == izmpc::mpc::SolveStatus::Converged).count(),
        status_counts,
        violations: run.hybrid.violations.len(),
        final_dist_to_set: run.report.dist_to_set.last().copied(),
        verdicts: run.report.verdicts.clone(),
        seconds: run.seconds,
        succeeded: run.succeeded(),
    })
}

pub fn write_run(dir: &Path, run: &RunResult, n: usize, m: usize) -> Result<()> {
    create_dir(dir)?;
    write_trajectory_csv(&dir.join("trajectory.csv"), &run.hybrid, n)?;
    write_jumps_csv(&dir.join("jumps.csv"), &run.hybrid, n, m)?;
    write_solves_csv(&dir.join("solves.csv"), &run.solves)?;
    write_json(&dir.join("report.json"), &run.report)?;
    if let Some((h, _)) = &run.warmup {
        write_trajectory_csv(&dir.join("warmup_trajectory.csv"), h, n)?;
        write_jumps_csv(&dir.join("warmup_jumps.csv"), h, n, m)?;
    }
    if let Some(o) = &run.oracle {
        write_json(&dir.join("oracle.json"), o)?;
    }
    Ok(())
}

/// Writes everything `run` produces and returns the manifest.
pub fn write_all(out: &Path, scenario: &Scenario, sets: &Sets, runs: &[RunResult], wall_seconds: f64) -> Result<Manifest> {
    write_sets(out, scenario, sets)?;
    let (n, m) = scenario.model.dims();
    let mut summaries = Vec::with_capacity(runs.len());
    for (i, run) in runs.iter().enumerate() {
        let dir = run_dir(out, i);
        write_run(&dir, run, n, m)?;
        summaries.push(summarize(&format!("run_{i}"), run)?);
    }
    let manifest = Manifest {
        scenario: scenario.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        target_pairs: sets.target.len(),
        c_phi: sets.c_phi(),
        sets_seconds: sets.seconds,
        wall_seconds,
        succeeded: summaries.iter().all(|s| s.succeeded),
        runs: summaries,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
