use std::fs;
use std::path::Path;
use std::process::Command;

use izmpc_cli::output::{read_json, read_jumps_csv, read_trajectory_csv, Manifest};
use izmpc_cli::pipeline::Sets;
use izmpc_cli::scenario::Scenario;
use izmpc_cli::{load_scenario, run_scenario};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_izmpc"))
}

fn scenarios_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios"))
}

fn toy(impulses: usize) -> Scenario {
    Scenario::from_toml(&format!("builtin = \"toy1d\"\n[sim]\nimpulses = {impulses}\nsamples_per_period = 7\n")).unwrap()
}

#[test]
fn csv_row_counts_match_impulses() {
    let dir = tempfile::tempdir().unwrap();
    let sc = toy(9);
    let manifest = run_scenario(&sc, dir.path()).unwrap();
    assert!(manifest.succeeded);
    assert_eq!(manifest.runs.len(), sc.x0.len());
    for i in 0..sc.x0.len() {
        let run = dir.path().join(format!("run_{i}"));
        let samples = read_trajectory_csv(&run.join("trajectory.csv")).unwrap();
        let jumps = read_jumps_csv(&run.join("jumps.csv")).unwrap();
        assert_eq!(samples.len(), 9 * 7 + 1);
        assert_eq!(jumps.len(), 9);
        let solves = fs::read_to_string(run.join("solves.csv")).unwrap();
        assert_eq!(solves.lines().count(), 9 + 1);
        // stored state is the post-jump one
        for j in &jumps {
            let (t, x) = samples.iter().find(|(t, _)| (*t - j.t).abs() < 1e-12).unwrap();
            assert!((x - &j.x_post).amax() < 1e-12, "t = {t}");
            assert!((&j.x_post - &j.x_pre - &j.u).amax() < 1e-12);
        }
        assert!(run.join("oracle.json").exists());
    }
}

#[test]
fn outputs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sc = toy(4);
    run_scenario(&sc, dir.path()).unwrap();
    let back = load_scenario(&dir.path().join("scenario.toml")).unwrap();
    assert_eq!(back, sc);
    let sets: Sets = read_json(&dir.path().join("sets.json")).unwrap();
    assert_eq!(sets.target.len(), 1);
    assert!(sets.target.pairs[0].x_s.norm() < 1e-12);
    let manifest: Manifest = read_json(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.scenario, "toy1d");
    assert_eq!(manifest.runs[0].impulses, 4);
}

#[test]
fn warmup_is_written_separately() {
    let dir = tempfile::tempdir().unwrap();
    let sc = Scenario::from_toml("builtin = \"toy1d\"\nx0 = [[4.0]]\n[sim]\nimpulses = 3\nsamples_per_period = 5\nwarmup_periods = 2\n").unwrap();
    run_scenario(&sc, dir.path()).unwrap();
    let run = dir.path().join("run_0");
    let warm = read_jumps_csv(&run.join("warmup_jumps.csv")).unwrap();
    assert_eq!(warm.len(), 2);
    assert!(warm.iter().all(|j| j.u[0] == 0.0));
    let samples = read_trajectory_csv(&run.join("trajectory.csv")).unwrap();
    assert_eq!(samples.len(), 3 * 5 + 1);
    let t0 = 2.0 * std::f64::consts::LN_2;
    assert!((samples[0].0 - t0).abs() < 1e-12);
    // two free halvings from 4
    assert!((samples[0].1[0] - 1.0).abs() < 1e-9);
}

#[test]
fn shipped_scenarios_validate() {
    for name in ["lithium.toml", "hiv.toml", "toy1d.toml", "hiv_delta_0p01.toml"] {
        let s = load_scenario(&scenarios_dir().join(name)).unwrap();
        if let Some(builtin) = ["lithium", "hiv", "toy1d"].iter().find(|b| name == format!("{b}.toml")) {
            assert_eq!(s, Scenario::builtin(builtin).unwrap(), "{name}");
        }
    }
}

#[test]
fn validate_names_the_bad_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "builtin = \"lithium\"\n[xstar]\nlower = [0.4, 0.6]\nupper = [0.6, 0.9]\n").unwrap();
    let out = bin().arg("validate").arg(&p).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("xstar"), "{err}");

    fs::write(&p, "builtin = \"toy1d\"\nx0 = [[1.0], [20.0]]\n").unwrap();
    let out = bin().arg("validate").arg(&p).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("x0[1]"));
}

#[test]
fn empty_target_set_fails_fast() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.toml");
    // orbits of x -> x/2 cannot stay in [5, 6]
    fs::write(&p, "builtin = \"toy1d\"\nx0 = [[5.5]]\n[xstar]\nlower = [5.0]\nupper = [6.0]\n[sets]\ntarget_grid = 5\n").unwrap();
    let out = bin().arg("run").arg(&p).arg("-o").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("target equilibrium set is empty"));
}

#[test]
fn run_plot_report_via_binary() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    let out = bin().args(["run", "toy1d", "-o"]).arg(&o).output().unwrap();
    assert!(out.status.success());
    let out = bin().arg("plot").arg(&o).output().unwrap();
    assert!(out.status.success());
    let svg = fs::read_to_string(o.join("run_0/states.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    let out = bin().arg("report").arg(&o).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("scenario   toy1d"), "{text}");
    assert!(text.contains("overall    ok"));
}

#[test]
fn sets_verb_writes_sets_only() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("s");
    let out = bin().args(["sets", "toy1d", "-o"]).arg(&o).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("1 target pairs"));
    assert!(o.join("sets.json").exists());
    assert!(!o.join("run_0").exists());
}
