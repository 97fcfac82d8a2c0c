//! Impulsive control systems and their hybrid and sampled trajectories.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate_to_times, sample_orbit, IntegratorConfig, VectorField};
use crate::error::{check_dim, Error, Result};
use crate::geometry::{BoxSet, PointCloud, Region};
use crate::linalg::left_pseudoinverse;
use crate::serde_nalgebra;

/// Membership tolerance for the state constraint along orbits.
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Default hybrid-arc sampling density.
pub const DEFAULT_SAMPLES_PER_PERIOD: usize = 50;

/// `ẋ = f(x)` between impulses, `x⁺ = x + Bu` every `T`.
#[derive(Debug, Clone)]
pub struct ImpulsiveSystem {
    field: VectorField,
    b: DMatrix<f64>,
    b_pinv: DMatrix<f64>,
    period: f64,
    x: BoxSet,
    u: BoxSet,
    xd: Option<Region>,
    integrator: IntegratorConfig,
}

impl ImpulsiveSystem {
    pub fn new(
        field: VectorField,
        b: DMatrix<f64>,
        period: f64,
        x: BoxSet,
        u: BoxSet,
        integrator: IntegratorConfig,
    ) -> Result<Self> {
        let n = field.dim();
        check_dim(n, b.nrows())?;
        check_dim(n, x.dim())?;
        check_dim(b.ncols(), u.dim())?;
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::InvalidConfig(format!("impulse period must be positive, got {period}")));
        }
        integrator.validate()?;
        let b_pinv = left_pseudoinverse(&b)?;
        Ok(ImpulsiveSystem {
            field,
            b,
            b_pinv,
            period,
            x,
            u,
            xd: None,
            integrator,
        })
    }

    /// Attaches the discrete-time constraint set, which must lie in `X`.
    pub fn with_xd(mut self, xd: Region) -> Result<Self> {
        check_dim(self.dim(), xd.dim())?;
        let inside = match &xd {
            Region::Hull(h) => h.vertices().iter().all(|v| self.x.contains_unchecked(v, FEASIBILITY_TOL)),
            other => other.bounding_box().is_subset_of(&self.x, FEASIBILITY_TOL),
        };
        if !inside {
            return Err(Error::InvalidConfig("Xd is not contained in X".into()));
        }
        self.xd = Some(xd);
        Ok(self)
    }

    pub fn field(&self) -> &VectorField {
        &self.field
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// `(BᵀB)⁻¹Bᵀ`.
    pub fn b_pinv(&self) -> &DMatrix<f64> {
        &self.b_pinv
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn state_bounds(&self) -> &BoxSet {
        &self.x
    }

    pub fn input_bounds(&self) -> &BoxSet {
        &self.u
    }

    pub fn xd(&self) -> Option<&Region> {
        self.xd.as_ref()
    }

    pub fn integrator(&self) -> &IntegratorConfig {
        &self.integrator
    }

    /// `φ(x, T)`.
    pub fn free_step(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        crate::dynamics::flow(&self.field, x, self.period, &self.integrator)
    }

    /// `φ(x, T) + Bu`.
    pub fn discrete_step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.input_dim(), u.len())?;
        Ok(self.free_step(x)? + &self.b * u)
    }

    /// `m + 1` samples of the orbit `{φ(x, τ) : τ ∈ [0, T]}`.
    pub fn orbit_of(&self, x: &DVector<f64>, m: usize) -> Result<PointCloud> {
        let pts = sample_orbit(&self.field, x, self.period, m, &self.integrator)?;
        PointCloud::new(pts)
    }

    /// Sampled test of `x ∈ F_X`: all `m + 1` orbit samples in `X`.
    pub fn check_feasible_point(&self, x: &DVector<f64>, m: usize) -> Result<bool> {
        check_dim(self.dim(), x.len())?;
        if !self.x.contains_unchecked(x, FEASIBILITY_TOL) {
            return Ok(false);
        }
        let orbit = sample_orbit(&self.field, x, self.period, m.max(1), &self.integrator)?;
        Ok(orbit.iter().all(|p| self.x.contains_unchecked(p, FEASIBILITY_TOL)))
    }
}

/// Feedback evaluated at the impulse instants.
pub trait Controller {
    fn control(&mut self, x: &DVector<f64>) -> Result<DVector<f64>>;
}

impl<F> Controller for F
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    fn control(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self(x))
    }
}

/// Continuous arc on `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArcSegment {
    pub k: usize,
    pub times: Vec<f64>,
    #[serde(with = "serde_nalgebra::vector_list")]
    pub states: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub k: usize,
    pub t: f64,
    #[serde(with = "serde_nalgebra::vector")]
    pub x_pre: DVector<f64>,
    #[serde(with = "serde_nalgebra::vector")]
    pub u: DVector<f64>,
    #[serde(with = "serde_nalgebra::vector")]
    pub x_post: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    State,
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub k: usize,
    pub t: f64,
    /// Largest componentwise excess over the bounds.
    pub amount: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HybridTrajectory {
    pub arcs: Vec<ArcSegment>,
    pub jumps: Vec<Jump>,
    pub violations: Vec<Violation>,
}

impl HybridTrajectory {
    /// All continuous samples in time order.
    pub fn samples(&self) -> impl Iterator<Item = (f64, &DVector<f64>)> {
        self.arcs
            .iter()
            .flat_map(|a| a.times.iter().cloned().zip(a.states.iter()))
    }

    pub fn sample_count(&self) -> usize {
        self.arcs.iter().map(|a| a.states.len()).sum()
    }

    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTrajectory {
    #[serde(with = "serde_nalgebra::vector_list")]
    pub states: Vec<DVector<f64>>,
    #[serde(with = "serde_nalgebra::vector_list")]
    pub inputs: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    pub samples_per_period: usize,
    /// Apply `κ(x0)` as a jump at `t = 0` before the first arc.
    pub first_jump_at_zero: bool,
    /// Time of the first sample; shifts all reported times.
    pub t0: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            samples_per_period: DEFAULT_SAMPLES_PER_PERIOD,
            first_jump_at_zero: false,
            t0: 0.0,
        }
    }
}

pub fn simulate_closed_loop<C: Controller + ?Sized>(
    sys: &ImpulsiveSystem,
    controller: &mut C,
    x0: &DVector<f64>,
    impulses: usize,
    samples_per_period: usize,
) -> Result<(HybridTrajectory, DiscreteTrajectory)> {
    let opts = SimOptions {
        samples_per_period,
        ..Default::default()
    };
    simulate_closed_loop_with(sys, controller, x0, impulses, &opts)
}

/// Closed loop `x(k+1) = φ(x(k), T) + Bκ(x(k))` with the continuous arcs
/// sampled `samples_per_period` times per period.
///
/// `x(k)` is the post-jump state at `t_k = kT`. With `K` impulses the
/// hybrid trajectory has `K·spp + 1` samples, the last one being `x(K)`;
/// `K = 0` yields a single free arc over `[0, T)`.
pub fn simulate_closed_loop_with<C: Controller + ?Sized>(
    sys: &ImpulsiveSystem,
    controller: &mut C,
    x0: &DVector<f64>,
    impulses: usize,
    opts: &SimOptions,
) -> Result<(HybridTrajectory, DiscreteTrajectory)> {
    check_dim(sys.dim(), x0.len())?;
    let spp = opts.samples_per_period;
    if spp == 0 {
        return Err(Error::InvalidConfig("samples_per_period must be positive".into()));
    }
    let period = sys.period();
    let taus: Vec<f64> = (0..=spp).map(|j| period * j as f64 / spp as f64).collect();
    let mut hybrid = HybridTrajectory::default();
    let mut discrete = DiscreteTrajectory::default();
    let mut x = x0.clone();

    if opts.first_jump_at_zero {
        let u = controller.control(&x)?;
        check_input(sys, &u, 0, opts.t0, &mut hybrid.violations)?;
        let post = &x + sys.b() * &u;
        hybrid.jumps.push(Jump {
            k: 0,
            t: opts.t0,
            x_pre: x.clone(),
            u,
            x_post: post.clone(),
        });
        x = post;
    }
    discrete.states.push(x.clone());

    if impulses == 0 {
        let pts = integrate_to_times(sys.field(), &x, &taus[..spp], sys.integrator())?;
        push_arc(sys, &mut hybrid, 0, opts.t0, &taus[..spp], pts);
        return Ok((hybrid, discrete));
    }

    for k in 0..impulses {
        let tk = opts.t0 + period * k as f64;
        let u = controller.control(&x)?;
        check_input(sys, &u, k, tk, &mut hybrid.violations)?;
        let mut pts = integrate_to_times(sys.field(), &x, &taus, sys.integrator())?;
        let x_pre = pts.pop().expect("endpoint sample");
        push_arc(sys, &mut hybrid, k, tk, &taus[..spp], pts);
        let x_post = &x_pre + sys.b() * &u;
        hybrid.jumps.push(Jump {
            k: k + 1,
            t: opts.t0 + period * (k + 1) as f64,
            x_pre,
            u: u.clone(),
            x_post: x_post.clone(),
        });
        discrete.inputs.push(u);
        discrete.states.push(x_post.clone());
        x = x_post;
    }
    let t_end = opts.t0 + period * impulses as f64;
    push_arc(sys, &mut hybrid, impulses, t_end, &[0.0], vec![x]);
    Ok((hybrid, discrete))
}

fn push_arc(
    sys: &ImpulsiveSystem,
    hybrid: &mut HybridTrajectory,
    k: usize,
    tk: f64,
    taus: &[f64],
    pts: Vec<DVector<f64>>,
) {
    let times: Vec<f64> = taus.iter().map(|tau| tk + tau).collect();
    for (t, p) in times.iter().zip(&pts) {
        let excess = sys.state_bounds().violation(p);
        if excess > FEASIBILITY_TOL {
            hybrid.violations.push(Violation {
                kind: ViolationKind::State,
                k,
                t: *t,
                amount: excess,
            });
        }
    }
    hybrid.arcs.push(ArcSegment { k, times, states: pts });
}

fn check_input(
    sys: &ImpulsiveSystem,
    u: &DVector<f64>,
    k: usize,
    t: f64,
    log: &mut Vec<Violation>,
) -> Result<()> {
    check_dim(sys.input_dim(), u.len())?;
    let excess = sys.input_bounds().violation(u);
    if excess > FEASIBILITY_TOL {
        log.push(Violation {
            kind: ViolationKind::Input,
            k,
            t,
            amount: excess,
        });
    }
    Ok(())
}
