//! Acceptance checks, one PASS/FAIL line each.
//!
//! The summary line lists failures; the exit status is nonzero on failure
//! only with `ACCEPTANCE_STRICT=1`, so that a workspace test run still
//! reaches the other targets.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use izmpc::analysis::{attractivity_verdict, distance_to_beam, strong_attractivity_verdict};
use izmpc::dynamics::{flow, flow_lipschitz_bounds, sample_orbit, IntegratorConfig, VectorField};
use izmpc::equilibria::{build_xd_lipschitz_ball, build_xd_mesh_hull, find_target_equilibria, XdOptions};
use izmpc::geometry::BoxSet;
use izmpc::impulsive::{simulate_closed_loop, ArcSegment, DiscreteTrajectory, HybridTrajectory, ImpulsiveSystem, Jump};
use izmpc::models::{self, HivParams};
use izmpc::mpc::{KappaMpc, SolveStatus};

use izmpc_cli::pipeline::{build_problem, compute_sets, run_all, RunResult, Sets};
use izmpc_cli::scenario::{Built, Scenario};

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
}

fn record(out: &mut Vec<Outcome>, id: u32, name: &'static str, pass: bool, detail: String) {
    println!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { id, name, pass });
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs()
}

fn lipschitz_bounds(out: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let field = models::lithium_field();
    let est = flow_lipschitz_bounds(&field, models::LITHIUM_PERIOD, &models::lithium_state_bounds()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let norm = est.norm_exp_ta.unwrap();
    let ok_exp = rel_err(est.c_phi_exp, 34.37) <= 0.02;
    let ok_lin = rel_err(norm, 1.13) <= 0.02;
    record(
        out,
        1,
        "flow Lipschitz bounds",
        ok_exp && ok_lin && secs < 1.0,
        format!(
            "e^(T|A|) = {:.4} vs 34.37 (rel err {:.3}), |e^(TA)| = {:.5} vs 1.13 (rel err {:.4}), {:.3} s",
            est.c_phi_exp,
            rel_err(est.c_phi_exp, 34.37),
            norm,
            rel_err(norm, 1.13),
            secs
        ),
    );
}

fn empirical_lipschitz(out: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let field = models::lithium_field();
    let x = models::lithium_state_bounds();
    let cfg = IntegratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let a = x.sample_uniform(&mut rng);
        let b = x.sample_uniform(&mut rng);
        for _ in 0..10 {
            let t = rng.random_range(0.0..=3.0);
            let fa = flow(&field, &a, t, &cfg).unwrap();
            let fb = flow(&field, &b, t, &cfg).unwrap();
            worst = worst.max((fa - fb).norm() / (&a - &b).norm());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let bound = 1.13 * (1.0 + 1e-6);
    let c_used = flow_lipschitz_bounds(&field, 3.0, &x).unwrap().c_phi_used;
    record(
        out,
        2,
        "empirical flow Lipschitz ratio",
        worst <= bound && secs < 5.0,
        format!(
            "max ratio {worst:.6} vs 1.13(1+1e-6); within C_phi used {c_used:.5}: {}; {secs:.3} s",
            worst <= c_used * (1.0 + 1e-6)
        ),
    );
}

fn hiv_arithmetic(out: &mut Vec<Outcome>) {
    let p = HivParams::default();
    let tc = p.endemic_tc();
    let r0 = p.r0();
    record(
        out,
        3,
        "HIV parameter sanity",
        (tc - 240.0).abs() <= 1e-9 && (r0 - 2.083).abs() < 5e-4 && r0 > 1.0,
        format!("mu c/(beta k) = {tc:.9}, R0 = {r0:.6}"),
    );
}

fn inside_inflated(b: &BoxSet, x: &DVector<f64>, tol: f64) -> bool {
    (0..x.len()).all(|i| x[i] >= b.lower()[i] - tol && x[i] <= b.upper()[i] + tol)
}

fn lithium_closed_loop(out: &mut Vec<Outcome>, sc: &Scenario, built: &Built, sets: &Sets) -> Vec<RunResult> {
    let t0 = Instant::now();
    let runs = run_all(sc, built, sets).unwrap();
    let secs = t0.elapsed().as_secs_f64() + sets.seconds;
    let ub = built.sys.input_bounds();
    let mut ok = secs < 120.0;
    let mut parts = Vec::new();
    for r in &runs {
        let viol = r.hybrid.violations.len();
        let inputs_ok = r.hybrid.jumps.iter().all(|j| inside_inflated(ub, &j.u, 0.0));
        let samples: Vec<&DVector<f64>> = r.hybrid.samples().map(|(_, x)| x).collect();
        let tail_n = (samples.len() as f64 * 0.3).ceil() as usize;
        let tail_ok = samples[samples.len() - tail_n..]
            .iter()
            .all(|x| inside_inflated(&built.xstar, x, 1e-3));
        let first = r.solves.iter().position(|s| s.status == SolveStatus::Converged);
        let after_ok = first.is_some_and(|f| r.solves[f..].iter().all(|s| s.status == SolveStatus::Converged));
        ok &= viol == 0 && inputs_ok && tail_ok && after_ok && r.hybrid.jumps.len() == sc.sim.impulses;
        parts.push(format!(
            "x0 {:?}: violations {viol}, inputs in U {inputs_ok}, tail in X* {tail_ok}, converged after first {after_ok}",
            r.x0.as_slice()
        ));
    }
    record(out, 4, "Lithium closed loop", ok, format!("{}; {secs:.2} s", parts.join("; ")));
    runs
}

fn hiv_closed_loop(out: &mut Vec<Outcome>) -> Option<String> {
    let t0 = Instant::now();
    let sc = Scenario::builtin("hiv").unwrap();
    let built = sc.build().unwrap();
    let target = find_target_equilibria(&built.sys, &built.xstar, &built.search).unwrap();
    let p = HivParams::default();
    if target.is_empty() {
        let why = format!(
            "target equilibrium set is empty (T_c can never exceed s/delta = {:.0} < {:.0}); no closed loop to run; {:.1} s",
            p.s / p.delta,
            built.xstar.lower()[0],
            t0.elapsed().as_secs_f64()
        );
        record(out, 5, "HIV closed loop", false, why.clone());
        return Some(why);
    }
    // only reached if the target set is nonempty
    let sets = compute_sets(&sc, &built).unwrap();
    let runs = run_all(&sc, &built, &sets).unwrap();
    let r = &runs[0];
    let scale = built.xstar.widths();
    let t_end = r.hybrid.samples().last().map(|s| s.0).unwrap_or(0.0);
    let tail: Vec<&DVector<f64>> = r.hybrid.samples().filter(|(t, _)| *t >= t_end - 20.0).map(|s| s.1).collect();
    let in_box = tail
        .iter()
        .all(|x| (0..4).all(|i| x[i] >= built.xstar.lower()[i] - 1e-2 * scale[i] && x[i] <= built.xstar.upper()[i] + 1e-2 * scale[i]));
    let z_ok = tail.iter().all(|x| x[2] < 50.0);
    let secs = t0.elapsed().as_secs_f64();
    record(
        out,
        5,
        "HIV closed loop",
        in_box && z_ok && secs < 600.0,
        format!("tail in X* {in_box}, z < 50 {z_ok}, {secs:.1} s"),
    );
    None
}

fn certificate(out: &mut Vec<Outcome>, runs: &[RunResult], sets: &Sets, hiv_empty: Option<&str>) {
    let slack = sets.target.sampling_slack();
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let rep = &r.report;
        let worst = rep.ineq_51_margin.iter().cloned().fold(f64::INFINITY, f64::min);
        let good = rep.certificate_failures.is_empty() && rep.beam_bound_failures.is_empty();
        ok &= good;
        parts.push(format!(
            "Lithium x0 {:?}: min margin {worst:.3e} (slack {slack:.3e}), beam bound failures {}",
            r.x0.as_slice(),
            rep.beam_bound_failures.len()
        ));
    }
    if let Some(why) = hiv_empty {
        ok = false;
        parts.push(format!("HIV: not evaluable, {why}"));
    }
    record(out, 6, "orbit distance certificate", ok, parts.join("; "));
}

fn xd_soundness(out: &mut Vec<Outcome>, built: &Built, sets: &Sets) {
    let sys = &built.sys;
    let opts = XdOptions {
        n_check: 0,
        seed: 7,
        ..Default::default()
    };
    let hull = build_xd_mesh_hull(sys, 41, 50, &opts).unwrap();
    let ball = build_xd_lipschitz_ball(sys, &sets.target.pairs[0].x_s, sets.c_phi(), 50, &opts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, res) in [("mesh hull", &hull), ("Lipschitz ball", &ball)] {
        let pts = res.region.sample_uniform(200, &mut rng).unwrap();
        let pass = pts.iter().filter(|p| sys.check_feasible_point(p, 50).unwrap()).count();
        ok &= pass == 200;
        parts.push(format!("{name} {pass}/200"));
    }

    let sys1 = ImpulsiveSystem::new(
        VectorField::new(1, |_| DVector::from_element(1, 1.0)),
        DMatrix::identity(1, 1),
        0.5,
        BoxSet::from_slices(&[0.0], &[1.0]).unwrap(),
        BoxSet::from_slices(&[-1.0], &[1.0]).unwrap(),
        IntegratorConfig::default(),
    )
    .unwrap();
    let mesh = 41;
    let cell = 1.0 / (mesh - 1) as f64;
    let r1 = build_xd_mesh_hull(&sys1, mesh, 50, &opts).unwrap();
    let bb = r1.region.bounding_box();
    let (lo, hi) = (bb.lower()[0], bb.upper()[0]);
    let one_d = lo.abs() <= cell && (hi - 0.5).abs() <= cell;
    ok &= one_d;
    parts.push(format!("1-D case [{lo:.4}, {hi:.4}] vs [0, 0.5], cell {cell:.4}"));
    record(out, 7, "X_d soundness", ok, parts.join(", "));
}

fn oracle_equivalence(out: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let sc = Scenario::builtin("toy1d").unwrap();
    let built = sc.build().unwrap();
    let sets = compute_sets(&sc, &built).unwrap();
    let prob = build_problem(&built, &sets).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ok = true;
    let mut worst_gap = 0.0f64;
    let mut worst_tol = f64::INFINITY;
    for _ in 0..20 {
        let x = DVector::from_element(1, rng.random_range(-5.0..=5.0));
        let sol = prob.solve(&x, None).unwrap();
        let bf = prob.brute_force_solve(&x, 2001).unwrap();
        let gap = (sol.cost - bf.solution.cost).abs();
        let tol = f64::max(1e-3, bf.grid_effect);
        ok &= sol.status == SolveStatus::Converged && gap <= tol;
        if gap - tol > worst_gap - worst_tol || worst_tol.is_infinite() {
            worst_gap = gap;
            worst_tol = tol;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    record(
        out,
        8,
        "MPC oracle equivalence",
        ok && secs < 60.0,
        format!("20 starts, tightest case gap {worst_gap:.3e} vs tolerance {worst_tol:.3e}, {secs:.2} s"),
    );
}

fn zero_cost_fixed_point(out: &mut Vec<Outcome>, built: &Built, sets: &Sets) {
    let prob = build_problem(built, sets).unwrap();
    let x_s = sets.target.pairs[0].x_s.clone();
    let mut kappa = KappaMpc::new(&prob);
    let (_, disc) = simulate_closed_loop(&built.sys, &mut kappa, &x_s, 20, 10).unwrap();
    let max_cost = kappa.history.iter().map(|s| s.cost).fold(0.0f64, f64::max);
    let drift = disc.states.iter().map(|x| (x - &x_s).norm()).fold(0.0f64, f64::max);
    let tol = built.mpc.solver_tol;
    record(
        out,
        9,
        "zero-cost fixed point",
        max_cost <= tol && drift <= 1e-6 && kappa.history.len() == 20,
        format!("max cost {max_cost:.3e} (tol {tol:.0e}), max drift {drift:.3e}"),
    );
}

/// Alternates between the orbits of the two stored pairs that lie farthest
/// apart, so the trajectory stays on the beam but never settles.
fn oscillating(sys: &ImpulsiveSystem, sets: &Sets, periods: usize, spp: usize) -> (HybridTrajectory, DiscreteTrajectory, f64) {
    let pairs = &sets.target.pairs;
    let (mut a, mut b, mut far) = (0, 0, 0.0);
    for i in 0..pairs.len() {
        for j in i + 1..pairs.len() {
            let d = (&pairs[i].x_s - &pairs[j].x_s).norm();
            if d > far {
                (a, b, far) = (i, j, d);
            }
        }
    }
    let t = sys.period();
    let mut hybrid = HybridTrajectory::default();
    let mut disc = DiscreteTrajectory::default();
    let pick = |k: usize| if k.is_multiple_of(2) { &pairs[a].x_s } else { &pairs[b].x_s };
    for k in 0..periods {
        let x = pick(k);
        let orbit = sample_orbit(sys.field(), x, t, spp, sys.integrator()).unwrap();
        disc.states.push(x.clone());
        let t_k = k as f64 * t;
        hybrid.arcs.push(ArcSegment {
            k,
            times: (0..spp).map(|j| t_k + t * j as f64 / spp as f64).collect(),
            states: orbit[..spp].to_vec(),
        });
        let next = pick(k + 1).clone();
        let pre = orbit[spp].clone();
        let u = sys.b_pinv() * (&next - &pre);
        disc.inputs.push(u.clone());
        hybrid.jumps.push(Jump {
            k: k + 1,
            t: t_k + t,
            x_pre: pre,
            u,
            x_post: next,
        });
    }
    disc.states.push(pick(periods).clone());
    let (a_cloud, b_cloud) = (
        izmpc::geometry::PointCloud::new(sets.target.orbits[a].clone()).unwrap(),
        izmpc::geometry::PointCloud::new(sets.target.orbits[b].clone()).unwrap(),
    );
    let d_h = izmpc::geometry::hausdorff_distance(&a_cloud, &b_cloud).unwrap();
    (hybrid, disc, d_h)
}

fn strong_attractivity(out: &mut Vec<Outcome>, built: &Built, sets: &Sets, sc: &Scenario) {
    let (eps, settle) = (sc.analysis.eps, sc.analysis.settle_fraction);
    let (hybrid, disc, d_h) = oscillating(&built.sys, sets, 40, sets.target.orbit_resolution);
    let dist = distance_to_beam(&hybrid, &sets.target).unwrap();
    let weak = attractivity_verdict(&dist, eps, settle);
    let (strong, _, _) = strong_attractivity_verdict(&hybrid, &disc, &sets.target, eps, settle).unwrap();
    let max_dist = dist.iter().cloned().fold(0.0f64, f64::max);
    record(
        out,
        10,
        "strong attractivity discrimination",
        weak && !strong,
        format!("eps {eps}, attractive {weak} (max beam distance {max_dist:.2e}), strongly attractive {strong} (orbit gap {d_h:.3})"),
    );
}

fn main() -> ExitCode {
    let mut out = Vec::new();
    lipschitz_bounds(&mut out);
    empirical_lipschitz(&mut out);
    hiv_arithmetic(&mut out);

    let sc = Scenario::builtin("lithium").unwrap();
    let built = sc.build().unwrap();
    let sets = compute_sets(&sc, &built).unwrap();
    let runs = lithium_closed_loop(&mut out, &sc, &built, &sets);
    let hiv_empty = hiv_closed_loop(&mut out);
    certificate(&mut out, &runs, &sets, hiv_empty.as_deref());
    xd_soundness(&mut out, &built, &sets);
    oracle_equivalence(&mut out);
    zero_cost_fixed_point(&mut out, &built, &sets);
    strong_attractivity(&mut out, &built, &sets, &sc);

    out.sort_by_key(|o| o.id);
    let failed: Vec<String> = out.iter().filter(|o| !o.pass).map(|o| format!("{} ({})", o.id, o.name)).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        out.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(": {}", failed.join(", ")) }
    );
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed.is_empty() || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
