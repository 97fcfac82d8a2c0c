use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use izmpc_cli::{load_scenario, output, pipeline, plot, report, run_scenario, Result};

/// Zone MPC for impulsive control systems.
///
/// Logging is controlled with RUST_LOG (e.g. RUST_LOG=info).
#[derive(Parser)]
#[command(name = "izmpc", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a scenario file (or builtin name) and print it in full.
    Validate { scenario: PathBuf },
    /// Compute the target equilibria and the feasible set only.
    Sets {
        scenario: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline: sets, closed-loop runs and analysis.
    Run {
        scenario: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Write SVG figures for an output directory.
    Plot { dir: PathBuf },
    /// Summarize an output directory.
    Report { dir: PathBuf },
}

fn exec(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Validate { scenario } => {
            let s = load_scenario(&scenario)?;
            print!("{}", s.to_toml()?);
            Ok(true)
        }
        Cmd::Sets { scenario, out } => {
            let s = load_scenario(&scenario)?;
            let built = s.build()?;
            let sets = pipeline::compute_sets(&s, &built)?;
            println!(
                "{} target pairs, C_phi = {:.6}, X_d by {:?}, {:.2} s",
                sets.target.len(),
                sets.c_phi(),
                sets.xd.method,
                sets.seconds
            );
            if let Some(out) = out {
                output::write_sets(&out, &s, &sets)?;
            }
            Ok(true)
        }
        Cmd::Run { scenario, out } => {
            let s = load_scenario(&scenario)?;
            let manifest = run_scenario(&s, &out)?;
            for r in &manifest.runs {
                println!(
                    "{}: {}/{} solves converged, {} violations, final d = {:.3e}",
                    r.dir,
                    r.converged_solves,
                    r.impulses,
                    r.violations,
                    r.final_dist_to_set.unwrap_or(f64::NAN)
                );
            }
            Ok(manifest.succeeded)
        }
        Cmd::Plot { dir } => {
            for p in plot::plot_dir(&dir)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Cmd::Report { dir } => {
            print!("{}", report::report_dir(&dir)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match exec(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
