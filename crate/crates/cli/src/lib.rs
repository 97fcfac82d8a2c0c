//! Command-line front end: scenario files, runs, output files and figures.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod output;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod scenario;

use std::path::Path;
use std::time::Instant;

pub use error::{CliError, Result};
pub use output::Manifest;
pub use scenario::{load_scenario, Scenario};

/// Builds the sets, runs every initial state and writes `out`.
pub fn run_scenario(scenario: &Scenario, out: &Path) -> Result<Manifest> {
    let start = Instant::now();
    let built = scenario.build()?;
    let sets = pipeline::compute_sets(scenario, &built)?;
    let runs = pipeline::run_all(scenario, &built, &sets)?;
    output::write_all(out, scenario, &sets, &runs, start.elapsed().as_secs_f64())
}
