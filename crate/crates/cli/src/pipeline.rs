//! Set construction, closed-loop runs and their analysis.

use std::time::Instant;

use log::info;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use izmpc::analysis::{stability_report, StabilityReport};
use izmpc::dynamics::{flow_lipschitz_bounds_with_grid, LipschitzEstimate};
use izmpc::equilibria::{
    build_xd_lipschitz_ball, build_xd_mesh_hull, find_target_equilibria, EquilibriumSetApprox, FeasibleSetResult, XdMethod,
};
use izmpc::impulsive::{simulate_closed_loop_with, DiscreteTrajectory, HybridTrajectory, SimOptions};
use izmpc::mpc::{BruteForceSolution, KappaMpc, MpcProblem, MpcSolution, SolveRecord, SolveStatus};

use crate::error::{CliError, Result};
use crate::scenario::{Built, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sets {
    pub lipschitz: LipschitzEstimate,
    pub target: EquilibriumSetApprox,
    pub xd: FeasibleSetResult,
    pub seconds: f64,
}

impl Sets {
    pub fn c_phi(&self) -> f64 {
        self.lipschitz.c_phi_used
    }
}

pub fn compute_sets(scenario: &Scenario, built: &Built) -> Result<Sets> {
    let start = Instant::now();
    let sys = &built.sys;
    let lipschitz = flow_lipschitz_bounds_with_grid(sys.field(), sys.period(), sys.state_bounds(), scenario.sets.lipschitz_grid)?;
    info!("C_phi = {:.6} (c_f = {:.6})", lipschitz.c_phi_used, lipschitz.c_f);
    let target = find_target_equilibria(sys, &built.xstar, &built.search)?;
    if target.is_empty() {
        return Err(CliError::Run(format!(
            "target equilibrium set is empty: no equilibrium of `{}` keeps its orbit inside xstar",
            scenario.name
        )));
    }
    info!("{} target equilibria", target.len());
    let m = scenario.sets.orbit_resolution;
    let xd = match scenario.sets.method {
        XdMethod::LipschitzBall => {
            let center = match &scenario.sets.ball_center {
                Some(c) => DVector::from_column_slice(c),
                None => target.pairs[0].x_s.clone(),
            };
            build_xd_lipschitz_ball(sys, &center, lipschitz.c_phi_used, m, &built.xd_options)?
        }
        XdMethod::MeshHull => build_xd_mesh_hull(sys, scenario.sets.mesh_per_dim, m, &built.xd_options)?,
    };
    Ok(Sets {
        lipschitz,
        target,
        xd,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub solve: MpcSolution,
    pub brute_force: BruteForceSolution,
    pub cost_gap: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub x0: DVector<f64>,
    pub warmup: Option<(HybridTrajectory, DiscreteTrajectory)>,
    pub hybrid: HybridTrajectory,
    pub discrete: DiscreteTrajectory,
    pub solves: Vec<SolveRecord>,
    pub report: StabilityReport,
    pub oracle: Option<OracleCheck>,
    pub seconds: f64,
}

impl RunResult {
    pub fn all_converged(&self) -> bool {
        self.solves.iter().all(|s| s.status == SolveStatus::Converged)
    }

    pub fn succeeded(&self) -> bool {
        self.all_converged() && self.hybrid.is_feasible()
    }
}

pub fn build_problem(built: &Built, sets: &Sets) -> Result<MpcProblem> {
    Ok(MpcProblem::new(
        built.sys.clone(),
        built.mpc.clone(),
        sets.target.clone(),
        sets.xd.clone(),
    )?)
}

/// Runs the closed loop once per initial state, in parallel.
pub fn run_all(scenario: &Scenario, built: &Built, sets: &Sets) -> Result<Vec<RunResult>> {
    let prob = build_problem(built, sets)?;
    std::thread::scope(|s| {
        let handles: Vec<_> = built
            .x0
            .iter()
            .map(|x0| {
                let prob = &prob;
                s.spawn(move || run_one(scenario, prob, sets, x0))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread")).collect()
    })
}

pub fn run_one(scenario: &Scenario, prob: &MpcProblem, sets: &Sets, x0: &DVector<f64>) -> Result<RunResult> {
    let start = Instant::now();
    let sys = prob.sys();
    let sim = &scenario.sim;
    let mut opts = SimOptions {
        samples_per_period: sim.samples_per_period,
        first_jump_at_zero: false,
        t0: 0.0,
    };
    let mut x_start = x0.clone();
    let warmup = if sim.warmup_periods > 0 {
        let m = sys.input_dim();
        let mut idle = |_: &DVector<f64>| DVector::zeros(m);
        let (h, d) = simulate_closed_loop_with(sys, &mut idle, x0, sim.warmup_periods, &opts)?;
        x_start = d.states.last().expect("warmup states").clone();
        opts.t0 = sim.warmup_periods as f64 * sys.period();
        Some((h, d))
    } else {
        None
    };

    let oracle = match scenario.oracle_grid {
        Some(grid) => {
            let solve = prob.solve(&x_start, None)?;
            let brute_force = prob.brute_force_solve(&x_start, grid)?;
            let cost_gap = (solve.cost - brute_force.solution.cost).abs();
            Some(OracleCheck {
                solve,
                brute_force,
                cost_gap,
            })
        }
        None => None,
    };

    opts.first_jump_at_zero = sim.first_jump_at_zero;
    let mut kappa = KappaMpc::new(prob);
    let (hybrid, discrete) = simulate_closed_loop_with(sys, &mut kappa, &x_start, sim.impulses, &opts)?;
    let report = stability_report(&hybrid, &discrete, &sets.target, sets.c_phi(), &scenario.analysis)?;
    let seconds = start.elapsed().as_secs_f64();
    info!(
        "run from {:?}: {} solves, {} violations, {:.2} s",
        x0.as_slice(),
        kappa.history.len(),
        hybrid.violations.len(),
        seconds
    );
    Ok(RunResult {
        x0: x0.clone(),
        warmup,
        hybrid,
        discrete,
        solves: kappa.history,
        report,
        oracle,
        seconds,
    })
}
