//! Control equilibria, the target equilibrium set and constructions of
//! the discrete feasible set `X_d`.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::flow_jacobian_from;
use crate::error::{check_dim, Error, Result};
use crate::geometry::{
    max_radius_in_box, nearest_in_points, Ball, BoxSet, PointCloud, Region,
};
use crate::hull::{convex_hull, MAX_QUICKHULL_DIM};
use crate::impulsive::{ImpulsiveSystem, FEASIBILITY_TOL};
use crate::linalg::pseudoinverse;
use crate::serde_nalgebra;

/// Fixed-point residual accepted for an equilibrium pair.
pub const EQ_RESIDUAL_TOL: f64 = 1e-7;
pub const DEFAULT_TARGET_GRID: usize = 15;
pub const DEFAULT_ORBIT_RESOLUTION: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPair {
    #[serde(with = "serde_nalgebra::vector")]
    pub x_s: DVector<f64>,
    #[serde(with = "serde_nalgebra::vector")]
    pub u_s: DVector<f64>,
    /// `‖x_s − φ(x_s, T) − B u_s‖`.
    pub residual: f64,
}

/// Finite sample of `X_S^*` with the orbit of every stored pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSetApprox {
    pub pairs: Vec<EquilibriumPair>,
    /// Orbit samples of each pair, `orbit_resolution + 1` points apiece.
    #[serde(with = "orbit_lists")]
    pub orbits: Vec<Vec<DVector<f64>>>,
    pub orbit_resolution: usize,
}

mod orbit_lists {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<DVector<f64>>], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<Vec<&[f64]>> = v
            .iter()
            .map(|o| o.iter().map(|p| p.as_slice()).collect())
            .collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<DVector<f64>>>, D::Error> {
        let raw = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|o| o.into_iter().map(DVector::from_vec).collect())
            .collect())
    }
}

impl EquilibriumSetApprox {
    /// Samples the orbit of every pair with `orbit_resolution` intervals.
    pub fn from_pairs(sys: &ImpulsiveSystem, pairs: Vec<EquilibriumPair>, orbit_resolution: usize) -> Result<Self> {
        let mut orbits = Vec::with_capacity(pairs.len());
        for p in &pairs {
            check_dim(sys.dim(), p.x_s.len())?;
            check_dim(sys.input_dim(), p.u_s.len())?;
            orbits.push(sys.orbit_of(&p.x_s, orbit_resolution)?.into_points());
        }
        Ok(EquilibriumSetApprox {
            pairs,
            orbits,
            orbit_resolution,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Union of all stored orbit samples, the sampled beam `O_S^*`.
    pub fn beam_samples(&self) -> Result<PointCloud> {
        PointCloud::new(self.orbits.iter().flatten().cloned().collect())
    }

    pub fn state_cloud(&self) -> Result<PointCloud> {
        PointCloud::new(self.pairs.iter().map(|p| p.x_s.clone()).collect())
    }

    pub fn input_cloud(&self) -> Result<PointCloud> {
        PointCloud::new(self.pairs.iter().map(|p| p.u_s.clone()).collect())
    }

    /// Index of the pair whose `x_s` is nearest to `x`, lowest index on ties.
    pub fn nearest_pair(&self, x: &DVector<f64>) -> Result<(usize, f64)> {
        if self.is_empty() {
            return Err(Error::EmptySet("target equilibrium set"));
        }
        let states: Vec<DVector<f64>> = self.pairs.iter().map(|p| p.x_s.clone()).collect();
        Ok(nearest_in_points(x, &states))
    }

    /// Largest gap between consecutive samples along any stored orbit.
    pub fn sampling_slack(&self) -> f64 {
        self.orbits
            .iter()
            .flat_map(|o| o.windows(2).map(|w| (&w[1] - &w[0]).norm()))
            .fold(0.0, f64::max)
    }
}

/// `u = B⁺(x − φ(x, T))` and the part of `x − φ(x, T)` that `B` cannot
/// reach.
pub fn equilibrium_input_for(sys: &ImpulsiveSystem, x: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    check_dim(sys.dim(), x.len())?;
    let d = x - sys.free_step(x)?;
    let u = sys.b_pinv() * &d;
    let residual = (&d - sys.b() * &u).norm();
    Ok((u, residual))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetSearch {
    pub grid_per_dim: usize,
    pub refine: bool,
    pub orbit_resolution: usize,
    /// Seeds are refined when their residual is below this multiple of the
    /// grid-cell diagonal.
    pub capture_factor: f64,
    /// Refined points closer than this fraction of the grid-cell diagonal
    /// to a stored pair are dropped as duplicates.
    pub dedup_fraction: f64,
    pub max_newton_iter: usize,
}

impl Default for TargetSearch {
    fn default() -> Self {
        TargetSearch {
            grid_per_dim: DEFAULT_TARGET_GRID,
            refine: true,
            orbit_resolution: DEFAULT_ORBIT_RESOLUTION,
            capture_factor: 2.0,
            dedup_fraction: 0.1,
            max_newton_iter: 50,
        }
    }
}

fn projected_residual(sys: &ImpulsiveSystem, proj: &DMatrix<f64>, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let phi = sys.free_step(x)?;
    Ok((proj * (x - &phi), phi))
}

/// Damped Gauss–Newton on `r(x) = (I − BB⁺)(x − φ(x, T))` from `seed`.
pub fn refine_equilibrium(sys: &ImpulsiveSystem, seed: &DVector<f64>, max_iter: usize) -> Result<DVector<f64>> {
    let n = sys.dim();
    let proj = DMatrix::identity(n, n) - sys.b() * sys.b_pinv();
    let scale = seed.amax().max(1.0);
    let mut x = seed.clone();
    let (mut r, mut phi) = projected_residual(sys, &proj, &x)?;
    for _ in 0..max_iter {
        let rn = r.norm();
        if rn <= 1e-13 * scale {
            break;
        }
        let dphi = flow_jacobian_from(sys.field(), &x, &phi, sys.period(), sys.integrator())?;
        let jac = &proj * (DMatrix::identity(n, n) - dphi);
        let step = pseudoinverse(&jac, 1e-12) * &r;
        let mut alpha = 1.0;
        let mut improved = false;
        while alpha > 1e-6 {
            let cand = &x - &step * alpha;
            if let Ok((rc, pc)) = projected_residual(sys, &proj, &cand) {
                if rc.norm() < rn {
                    x = cand;
                    r = rc;
                    phi = pc;
                    improved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(x)
}

/// Samples `X_S^*`: equilibria `x_s ∈ F_X` with `u_s ∈ U` whose orbit
/// stays in `xstar`. An empty result is logged and returned as such.
pub fn find_target_equilibria(sys: &ImpulsiveSystem, xstar: &BoxSet, search: &TargetSearch) -> Result<EquilibriumSetApprox> {
    check_dim(sys.dim(), xstar.dim())?;
    if !xstar.is_subset_of(sys.state_bounds(), FEASIBILITY_TOL) {
        return Err(Error::InvalidConfig("target box is not contained in X".into()));
    }
    let per = search.grid_per_dim.max(1);
    let spacing = xstar.grid_spacing(per);
    let diag = spacing.norm();
    let capture = search.capture_factor * diag;
    let dedup_tol = if diag > 0.0 { search.dedup_fraction * diag } else { 1e-9 };

    let mut pairs: Vec<EquilibriumPair> = Vec::new();
    let mut seeds = 0usize;
    for g in xstar.grid(per) {
        let (_, r0) = equilibrium_input_for(sys, &g)?;
        let candidate = if r0 <= EQ_RESIDUAL_TOL {
            g
        } else if search.refine && r0 <= capture {
            seeds += 1;
            match refine_equilibrium(sys, &g, search.max_newton_iter) {
                Ok(x) => x,
                Err(e) => {
                    debug!("refinement from {:?} failed: {e}", g.as_slice());
                    continue;
                }
            }
        } else {
            continue;
        };
        if pairs.iter().any(|p| (&p.x_s - &candidate).norm() <= dedup_tol) {
            continue;
        }
        if let Some(pair) = accept_pair(sys, xstar, &candidate, search.orbit_resolution)? {
            pairs.push(pair);
        }
    }
    debug!("target search: {} seeds refined, {} pairs kept", seeds, pairs.len());
    if pairs.is_empty() {
        warn!("target equilibrium set is empty: no control equilibrium keeps its orbit inside the target box");
    }
    EquilibriumSetApprox::from_pairs(sys, pairs, search.orbit_resolution)
}

fn accept_pair(sys: &ImpulsiveSystem, xstar: &BoxSet, x: &DVector<f64>, m: usize) -> Result<Option<EquilibriumPair>> {
    if !xstar.contains_unchecked(x, FEASIBILITY_TOL) {
        return Ok(None);
    }
    let (u, residual) = equilibrium_input_for(sys, x)?;
    if residual > EQ_RESIDUAL_TOL || !sys.input_bounds().contains_unchecked(&u, FEASIBILITY_TOL) {
        return Ok(None);
    }
    let orbit = sys.orbit_of(x, m)?;
    if !orbit.points().iter().all(|p| xstar.contains_unchecked(p, FEASIBILITY_TOL)) {
        return Ok(None);
    }
    if !sys.check_feasible_point(x, m)? {
        return Ok(None);
    }
    Ok(Some(EquilibriumPair {
        x_s: x.clone(),
        u_s: u,
        residual,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XdMethod {
    LipschitzBall,
    MeshHull,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct XdOptions {
    /// Random region members verified with `check_feasible_point`.
    pub n_check: usize,
    pub seed: u64,
    pub shrink_factor: f64,
    pub max_shrink_rounds: usize,
}

impl Default for XdOptions {
    fn default() -> Self {
        XdOptions {
            n_check: 200,
            seed: 0,
            shrink_factor: 0.95,
            max_shrink_rounds: 40,
        }
    }
}

/// A discrete feasible set together with the sample points that were
/// checked against the orbit constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleSetResult {
    pub region: Region,
    pub method: XdMethod,
    #[serde(with = "serde_nalgebra::vector_list")]
    pub certificate: Vec<DVector<f64>>,
    /// Time samples per period used for every feasibility check.
    pub orbit_resolution: usize,
    pub shrink_rounds: usize,
}

fn certify(sys: &ImpulsiveSystem, region: &Region, m: usize, opts: &XdOptions, salt: u64) -> Result<(bool, Vec<DVector<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt);
    let pts = region.sample_uniform(opts.n_check, &mut rng)?;
    let mut ok = Vec::with_capacity(pts.len());
    for p in pts {
        if !sys.check_feasible_point(&p, m)? {
            return Ok((false, ok));
        }
        ok.push(p);
    }
    Ok((true, ok))
}

/// `B(x_*, r_*/C_φ) ∩ X` with `r_*` the smallest distance from the sampled
/// orbit of `x_*` to the boundary of `X`.
pub fn build_xd_lipschitz_ball(
    sys: &ImpulsiveSystem,
    x_star: &DVector<f64>,
    c_phi: f64,
    m: usize,
    opts: &XdOptions,
) -> Result<FeasibleSetResult> {
    check_dim(sys.dim(), x_star.len())?;
    if !(c_phi > 0.0) {
        return Err(Error::InvalidConfig(format!("C_phi must be positive, got {c_phi}")));
    }
    let r_star = lipschitz_ball_radius(sys, x_star, m)?;
    let region = Region::BallInBox {
        ball: Ball::new(x_star.clone(), r_star / c_phi)?,
        bounds: sys.state_bounds().clone(),
    };
    let (ok, certificate) = certify(sys, &region, m, opts, 1)?;
    if !ok {
        return Err(Error::Certificate(
            "a sampled member of the Lipschitz ball violates the orbit constraint".into(),
        ));
    }
    Ok(FeasibleSetResult {
        region,
        method: XdMethod::LipschitzBall,
        certificate,
        orbit_resolution: m,
        shrink_rounds: 0,
    })
}

/// `r_* = min_t dist(φ(x_*, t), ∂X)` over the `m + 1` orbit samples.
pub fn lipschitz_ball_radius(sys: &ImpulsiveSystem, x_star: &DVector<f64>, m: usize) -> Result<f64> {
    let orbit = sys.orbit_of(x_star, m)?;
    let mut r_star = f64::INFINITY;
    for p in orbit.points() {
        let r = match max_radius_in_box(p, sys.state_bounds()) {
            Ok(r) => r,
            Err(Error::OutsideDomain(_)) => return Err(Error::NotInterior { r_star: 0.0 }),
            Err(e) => return Err(e),
        };
        r_star = r_star.min(r);
    }
    if !(r_star > 0.0) {
        return Err(Error::NotInterior { r_star });
    }
    Ok(r_star)
}

/// Convex hull of the mesh points of `X` whose sampled orbits stay in `X`.
///
/// Linear flows keep the hull feasible by convexity; otherwise the hull is
/// shrunk toward its centroid until all sampled members pass.
pub fn build_xd_mesh_hull(sys: &ImpulsiveSystem, mesh_per_dim: usize, m: usize, opts: &XdOptions) -> Result<FeasibleSetResult> {
    if sys.dim() > MAX_QUICKHULL_DIM {
        return Err(Error::Unsupported(format!(
            "mesh hull needs state dimension ≤ {MAX_QUICKHULL_DIM}, got {}",
            sys.dim()
        )));
    }
    let mut kept = Vec::new();
    for p in sys.state_bounds().grid(mesh_per_dim.max(1)) {
        if sys.check_feasible_point(&p, m)? {
            kept.push(p);
        }
    }
    if kept.is_empty() {
        warn!("no mesh point of X has a feasible orbit; F_X may be empty for this period");
        return Err(Error::EmptySet("feasible mesh points"));
    }
    debug!("mesh hull: {} feasible mesh points", kept.len());
    let mut hull = convex_hull(&PointCloud::new(kept)?)?;
    let linear = sys.field().linear_part().is_some();
    let mut rounds = 0usize;
    loop {
        let region = Region::Hull(hull.clone());
        let (ok, certificate) = certify(sys, &region, m, opts, 2 + rounds as u64)?;
        if ok {
            return Ok(FeasibleSetResult {
                region,
                method: XdMethod::MeshHull,
                certificate,
                orbit_resolution: m,
                shrink_rounds: rounds,
            });
        }
        if linear || rounds >= opts.max_shrink_rounds {
            return Err(Error::Certificate(format!(
                "mesh hull has infeasible members after {rounds} shrink rounds"
            )));
        }
        hull = hull.shrink(opts.shrink_factor);
        rounds += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{IntegratorConfig, VectorField};
    use crate::linalg::expm;

    fn lithium() -> ImpulsiveSystem {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[-0.6137, 0.1835, 0.2406, 1.2644, -0.8, 0.0, 0.2054, 0.0, -0.19],
        );
        ImpulsiveSystem::new(
            VectorField::linear(a),
            DMatrix::from_column_slice(3, 1, &[10.9, 0.0, 0.0]),
            3.0,
            BoxSet::from_slices(&[0.0; 3], &[2.0, 1.2, 1.2]).unwrap(),
            BoxSet::from_slices(&[0.0], &[5.95]).unwrap(),
            IntegratorConfig::default(),
        )
        .unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn lithium_pair(sys: &ImpulsiveSystem, u: f64) -> DVector<f64> {
        let e = expm(&(sys.field().linear_part().unwrap() * 3.0));
        let rhs = sys.b() * u;
        (DMatrix::identity(3, 3) - e).lu().solve(&rhs).unwrap().column(0).into_owned()
    }

    #[test]
    fn origin_needs_no_input() {
        let (u, r) = equilibrium_input_for(&lithium(), &DVector::zeros(3)).unwrap();
        assert_eq!(u[0], 0.0);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn recovers_input_of_known_pair() {
        let sys = lithium();
        let x_s = lithium_pair(&sys, 0.0088);
        let (u, r) = equilibrium_input_for(&sys, &x_s).unwrap();
        assert!((u[0] - 0.0088).abs() < 1e-12);
        assert!(r <= 1e-7);
    }

    #[test]
    fn off_manifold_point_has_residual() {
        let (_, r) = equilibrium_input_for(&lithium(), &v(&[0.5, 0.0, 0.0])).unwrap();
        assert!(r > 1e-2);
    }

    #[test]
    fn lithium_target_set_orbits_stay_in_window() {
        let sys = lithium();
        let xstar = BoxSet::from_slices(&[0.4, 0.6, 0.5], &[0.6, 0.9, 0.8]).unwrap();
        let set = find_target_equilibria(&sys, &xstar, &TargetSearch::default()).unwrap();
        assert!(set.len() > 5);
        for (p, o) in set.pairs.iter().zip(&set.orbits) {
            assert!(p.residual <= EQ_RESIDUAL_TOL);
            assert!((sys.discrete_step(&p.x_s, &p.u_s).unwrap() - &p.x_s).norm() < 1e-6);
            assert!(o.iter().all(|q| xstar.contains_unchecked(q, 1e-9)));
        }
    }

    #[test]
    fn degenerate_target_at_origin() {
        let sys = lithium();
        let xstar = BoxSet::from_slices(&[0.0; 3], &[0.0; 3]).unwrap();
        let set = find_target_equilibria(&sys, &xstar, &TargetSearch::default()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.pairs[0].x_s, DVector::zeros(3));
        assert_eq!(set.pairs[0].u_s, DVector::zeros(1));
    }

    #[test]
    fn unreachable_target_is_empty() {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[-0.6137, 0.1835, 0.2406, 1.2644, -0.8, 0.0, 0.2054, 0.0, -0.19],
        );
        let sys = ImpulsiveSystem::new(
            VectorField::linear(a),
            DMatrix::from_column_slice(3, 1, &[10.9, 0.0, 0.0]),
            3.0,
            BoxSet::from_slices(&[0.0; 3], &[2.0, 1.2, 1.2]).unwrap(),
            BoxSet::from_slices(&[0.0], &[0.001]).unwrap(),
            IntegratorConfig::default(),
        )
        .unwrap();
        let xstar = BoxSet::from_slices(&[1.6, 1.0, 1.0], &[2.0, 1.2, 1.2]).unwrap();
        let set = find_target_equilibria(&sys, &xstar, &TargetSearch::default()).unwrap();
        assert!(set.is_empty());
        assert!(set.beam_samples().is_err());
    }

    #[test]
    fn static_ball_radius() {
        let sys = ImpulsiveSystem::new(
            VectorField::zero(3),
            DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]),
            1.0,
            BoxSet::cube(3, 0.0, 2.0).unwrap(),
            BoxSet::cube(1, -1.0, 1.0).unwrap(),
            IntegratorConfig::default(),
        )
        .unwrap();
        let res = build_xd_lipschitz_ball(&sys, &v(&[1.0, 1.0, 1.0]), 2.0, 10, &XdOptions::default()).unwrap();
        match res.region {
            Region::BallInBox { ball, .. } => assert!((ball.radius - 0.5).abs() < 1e-15),
            _ => panic!("expected a ball"),
        }
        let err = build_xd_lipschitz_ball(&sys, &v(&[0.0, 1.0, 1.0]), 1.0, 10, &XdOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NotInterior { .. }));
    }

    #[test]
    fn drift_mesh_hull_is_half_interval() {
        let sys = ImpulsiveSystem::new(
            VectorField::new(1, |_| DVector::from_element(1, 1.0)),
            DMatrix::identity(1, 1),
            0.5,
            BoxSet::cube(1, 0.0, 1.0).unwrap(),
            BoxSet::cube(1, -1.0, 1.0).unwrap(),
            IntegratorConfig::default(),
        )
        .unwrap();
        let res = build_xd_mesh_hull(&sys, 21, 20, &XdOptions::default()).unwrap();
        let bb = res.region.bounding_box();
        assert!(bb.lower()[0].abs() < 1e-12);
        assert!((bb.upper()[0] - 0.5).abs() <= 0.05 + 1e-12);
    }
}
