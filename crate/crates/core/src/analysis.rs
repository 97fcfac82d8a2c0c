//! Post-processing of closed-loop runs against the beam of target orbits:
//! distances, the per-impulse Lipschitz inequality, and (strong)
//! attractivity verdicts at a chosen `ε`.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::equilibria::EquilibriumSetApprox;
use crate::error::{Error, Result};
use crate::geometry::{hausdorff_distance, nearest_in_points, PointCloud};
use crate::impulsive::{DiscreteTrajectory, HybridTrajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub eps: f64,
    /// Fraction of the run, counted from the end, that must satisfy the
    /// attractivity bound.
    pub settle_fraction: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            eps: 0.05,
            settle_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `d(x(k), X_S^*)` per impulse index.
    pub dist_to_set: Vec<f64>,
    /// `d(x(t), O_S^*)` per hybrid sample.
    pub dist_to_beam: Vec<f64>,
    /// Largest `d(x(t), O_S^*)` over each complete period.
    pub beam_sup_per_period: Vec<f64>,
    pub ineq_51_margin: Vec<f64>,
    pub hausdorff_to_limit: Option<Vec<f64>>,
    pub limit_pair: Option<usize>,
    pub c_phi: f64,
    pub sampling_slack: f64,
    pub orbit_resolution: usize,
    pub samples_per_period: usize,
    pub eps: f64,
    pub settle_fraction: f64,
    /// Periods whose margin falls below `−sampling_slack`.
    pub certificate_failures: Vec<usize>,
    /// Periods where `sup d(x(t), O_S^*) > c_phi·d(x(k), X_S^*) + slack`.
    pub beam_bound_failures: Vec<usize>,
    pub verdicts: BTreeMap<String, bool>,
}

fn require_target(target: &EquilibriumSetApprox) -> Result<()> {
    if target.is_empty() {
        Err(Error::EmptySet("target equilibrium set"))
    } else {
        Ok(())
    }
}

/// Inf-distance from every hybrid sample to the sampled beam.
pub fn distance_to_beam(traj: &HybridTrajectory, target: &EquilibriumSetApprox) -> Result<Vec<f64>> {
    require_target(target)?;
    let beam: Vec<DVector<f64>> = target.orbits.iter().flatten().cloned().collect();
    Ok(traj.samples().map(|(_, x)| nearest_in_points(x, &beam).1).collect())
}

/// Inf-distance from every impulse state to the stored `x_s` components.
pub fn distance_to_set(disc: &DiscreteTrajectory, target: &EquilibriumSetApprox) -> Result<Vec<f64>> {
    require_target(target)?;
    let states: Vec<DVector<f64>> = target.pairs.iter().map(|p| p.x_s.clone()).collect();
    Ok(disc.states.iter().map(|x| nearest_in_points(x, &states).1).collect())
}

/// Sampled orbits `O_{x(k)}` of every complete period: the arc samples
/// followed by the pre-jump state that closes the period.
pub fn period_orbits(traj: &HybridTrajectory) -> Vec<Vec<DVector<f64>>> {
    let closing: BTreeMap<usize, &DVector<f64>> = traj.jumps.iter().map(|j| (j.k, &j.x_pre)).collect();
    traj.arcs
        .iter()
        .filter_map(|a| {
            closing.get(&(a.k + 1)).map(|end| {
                let mut o = a.states.clone();
                o.push((*end).clone());
                o
            })
        })
        .collect()
}

/// `C_φ·d(x(k), X_S^*) − max_τ d(φ(x(k), τ), O_{x_S^k})` for every complete
/// period, `x_S^k` being the stored pair nearest to `x(k)`.
pub fn verify_inequality_51(
    traj: &HybridTrajectory,
    disc: &DiscreteTrajectory,
    target: &EquilibriumSetApprox,
    c_phi: f64,
) -> Result<Vec<f64>> {
    require_target(target)?;
    let orbits = period_orbits(traj);
    let mut margins = Vec::with_capacity(orbits.len());
    for (k, orbit) in orbits.iter().enumerate() {
        let xk = disc.states.get(k).unwrap_or(&orbit[0]);
        let (idx, d) = target.nearest_pair(xk)?;
        let pair_orbit = &target.orbits[idx];
        let sup = orbit
            .iter()
            .map(|p| nearest_in_points(p, pair_orbit).1)
            .fold(0.0, f64::max);
        margins.push(c_phi * d - sup);
    }
    Ok(margins)
}

fn trailing<T>(v: &[T], fraction: f64) -> &[T] {
    let n = ((v.len() as f64) * fraction.clamp(0.0, 1.0)).ceil() as usize;
    &v[v.len() - n.min(v.len())..]
}

/// True iff `d(x(t), O_S^*) < ε` on the trailing `settle_fraction` of the
/// samples.
pub fn attractivity_verdict(dist_to_beam: &[f64], eps: f64, settle_fraction: f64) -> bool {
    let tail = trailing(dist_to_beam, settle_fraction);
    !tail.is_empty() && tail.iter().all(|d| *d < eps)
}

/// Picks the stored pair nearest to the final impulse state as the limit
/// and checks `d_H(O_{x(k)}, O_limit) < ε` over the trailing window.
/// Returns the verdict, the limit index and the Hausdorff series.
pub fn strong_attractivity_verdict(
    traj: &HybridTrajectory,
    disc: &DiscreteTrajectory,
    target: &EquilibriumSetApprox,
    eps: f64,
    settle_fraction: f64,
) -> Result<(bool, usize, Vec<f64>)> {
    require_target(target)?;
    let last = disc
        .states
        .last()
        .ok_or(Error::EmptySet("discrete trajectory"))?;
    let (limit, _) = target.nearest_pair(last)?;
    let limit_cloud = PointCloud::new(target.orbits[limit].clone())?;
    let mut series = Vec::new();
    for orbit in period_orbits(traj) {
        series.push(hausdorff_distance(&PointCloud::new(orbit)?, &limit_cloud)?);
    }
    let tail = trailing(&series, settle_fraction);
    let ok = !tail.is_empty() && tail.iter().all(|d| *d < eps);
    Ok((ok, limit, series))
}

/// Full report for one closed-loop run.
pub fn stability_report(
    traj: &HybridTrajectory,
    disc: &DiscreteTrajectory,
    target: &EquilibriumSetApprox,
    c_phi: f64,
    opts: &AnalysisOptions,
) -> Result<StabilityReport> {
    let dist_to_set = distance_to_set(disc, target)?;
    let dist_to_beam = distance_to_beam(traj, target)?;
    let beam: Vec<DVector<f64>> = target.orbits.iter().flatten().cloned().collect();
    let beam_sup_per_period: Vec<f64> = period_orbits(traj)
        .iter()
        .map(|o| o.iter().map(|p| nearest_in_points(p, &beam).1).fold(0.0, f64::max))
        .collect();
    let margins = verify_inequality_51(traj, disc, target, c_phi)?;
    let slack = target.sampling_slack();
    let certificate_failures: Vec<usize> = margins
        .iter()
        .enumerate()
        .filter(|(_, m)| **m < -slack)
        .map(|(k, _)| k)
        .collect();
    let beam_bound_failures: Vec<usize> = beam_sup_per_period
        .iter()
        .enumerate()
        .filter(|(k, s)| dist_to_set.get(*k).is_some_and(|d| **s > c_phi * d + slack))
        .map(|(k, _)| k)
        .collect();
    let (strong, limit, hd) = strong_attractivity_verdict(traj, disc, target, opts.eps, opts.settle_fraction)?;

    let mut verdicts = BTreeMap::new();
    verdicts.insert(
        "attractive_at_eps".to_string(),
        attractivity_verdict(&dist_to_beam, opts.eps, opts.settle_fraction),
    );
    verdicts.insert("strongly_attractive_at_eps".to_string(), strong);
    verdicts.insert("feasible_throughout".to_string(), traj.is_feasible());
    verdicts.insert("inequality_51_holds".to_string(), certificate_failures.is_empty());
    verdicts.insert("beam_bound_holds".to_string(), beam_bound_failures.is_empty());

    let samples_per_period = traj.arcs.first().map_or(0, |a| a.states.len());
    Ok(StabilityReport {
        dist_to_set,
        dist_to_beam,
        beam_sup_per_period,
        ineq_51_margin: margins,
        hausdorff_to_limit: Some(hd),
        limit_pair: Some(limit),
        c_phi,
        sampling_slack: slack,
        orbit_resolution: target.orbit_resolution,
        samples_per_period,
        eps: opts.eps,
        settle_fraction: opts.settle_fraction,
        certificate_failures,
        beam_bound_failures,
        verdicts,
    })
}
