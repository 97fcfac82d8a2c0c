//! Autonomous vector fields, their flows and flow Lipschitz bounds.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::BoxSet;
use crate::linalg::{expm, spectral_norm};

pub type FieldFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type JacobianFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Default grid resolution per axis for the field Lipschitz estimate.
pub const DEFAULT_LIPSCHITZ_GRID: usize = 20;
/// Evaluation budget of the gridded estimate before switching to sampling.
pub const LIPSCHITZ_BUDGET: usize = 1_000_000;
/// Time samples used to locate `sup_t ‖e^{tA}‖₂` before refinement.
pub const LINEAR_SUP_SAMPLES: usize = 300;

const EXPM_CACHE_CAP: usize = 4096;

/// `ẋ = f(x)` with an optional analytic Jacobian and, for linear systems,
/// the matrix `A` with `f(x) = Ax`.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    eval: FieldFn,
    jacobian: Option<JacobianFn>,
    linear_part: Option<DMatrix<f64>>,
    expm_cache: Arc<RwLock<HashMap<u64, DMatrix<f64>>>>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("dim", &self.dim)
            .field("has_jacobian", &self.jacobian.is_some())
            .field("linear_part", &self.linear_part)
            .finish()
    }
}

impl VectorField {
    pub fn new<F>(dim: usize, eval: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        assert!(dim > 0, "state dimension must be positive");
        VectorField {
            dim,
            eval: Arc::new(eval),
            jacobian: None,
            linear_part: None,
            expm_cache: Arc::default(),
        }
    }

    pub fn with_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    /// `f(x) = Ax`.
    pub fn linear(a: DMatrix<f64>) -> Self {
        assert!(a.is_square() && a.nrows() > 0, "linear part must be square");
        let a_eval = a.clone();
        let a_jac = a.clone();
        let mut field = VectorField::new(a.nrows(), move |x| &a_eval * x)
            .with_jacobian(move |_| a_jac.clone());
        field.linear_part = Some(a);
        field
    }

    /// `f ≡ 0`.
    pub fn zero(dim: usize) -> Self {
        VectorField::linear(DMatrix::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn linear_part(&self) -> Option<&DMatrix<f64>> {
        self.linear_part.as_ref()
    }

    pub fn has_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim, x.len())?;
        let dx = (self.eval)(x);
        check_dim(self.dim, dx.len())?;
        Ok(dx)
    }

    /// Supplied Jacobian, or central differences with step
    /// `max(1e-6, 1e-6‖x‖)`.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim, x.len())?;
        if let Some(j) = &self.jacobian {
            return Ok(j(x));
        }
        self.jacobian_fd(x)
    }

    pub fn jacobian_fd(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let h = (1e-6 * x.norm()).max(1e-6);
        let mut jac = DMatrix::zeros(self.dim, self.dim);
        let mut xp = x.clone();
        for j in 0..self.dim {
            xp[j] = x[j] + h;
            let fp = self.eval(&xp)?;
            xp[j] = x[j] - h;
            let fm = self.eval(&xp)?;
            xp[j] = x[j];
            jac.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        Ok(jac)
    }

    /// `e^{tA}` for linear fields, memoized per time value.
    pub fn exp_linear(&self, t: f64) -> Option<DMatrix<f64>> {
        let a = self.linear_part.as_ref()?;
        let key = t.to_bits();
        if let Some(m) = self.expm_cache.read().ok().and_then(|c| c.get(&key).cloned()) {
            return Some(m);
        }
        let m = expm(&(a * t));
        if let Ok(mut cache) = self.expm_cache.write() {
            if cache.len() >= EXPM_CACHE_CAP {
                cache.clear();
            }
            cache.insert(key, m.clone());
        }
        Some(m)
    }

    /// Checks the declared structure on `samples` random points of `domain`:
    /// the linear part reproduces `eval` to 1e-12 relative error and the
    /// supplied Jacobian matches central differences to 1e-5.
    pub fn check_consistency(&self, domain: &BoxSet, samples: usize, seed: u64) -> Result<()> {
        check_dim(self.dim, domain.dim())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            let x = domain.sample_uniform(&mut rng);
            let fx = self.eval(&x)?;
            if let Some(a) = &self.linear_part {
                let ax = a * &x;
                if (&fx - &ax).norm() > 1e-12 * ax.norm().max(1e-300) && (&fx - &ax).norm() > 1e-300 {
                    return Err(Error::InvalidConfig(
                        "linear part disagrees with the field".into(),
                    ));
                }
            }
            if let Some(j) = &self.jacobian {
                let ja = j(&x);
                let jf = self.jacobian_fd(&x)?;
                let scale = ja.norm().max(1.0);
                if (&ja - &jf).norm() > 1e-5 * scale {
                    return Err(Error::InvalidConfig(
                        "jacobian disagrees with finite differences".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Classical RK4 with steps no longer than `max_step`.
    Rk4,
    /// Dormand–Prince 5(4) with adaptive steps.
    Dopri45,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_step: f64,
    pub method: Method,
    /// Evaluate linear fields through the matrix exponential.
    pub linear_fast_path: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            abs_tol: 1e-9,
            rel_tol: 1e-9,
            max_step: 1.0,
            method: Method::Dopri45,
            linear_fast_path: true,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("abs_tol", self.abs_tol),
            ("rel_tol", self.rel_tol),
            ("max_step", self.max_step),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn rk4(step: f64) -> Self {
        IntegratorConfig {
            max_step: step,
            method: Method::Rk4,
            ..Default::default()
        }
    }
}

/// `φ(x0, t)`.
pub fn flow(field: &VectorField, x0: &DVector<f64>, t: f64, cfg: &IntegratorConfig) -> Result<DVector<f64>> {
    let mut out = integrate_to_times(field, x0, &[t], cfg)?;
    Ok(out.pop().expect("one output time"))
}

/// `[φ(x0, jT/m)]` for `j = 0..=m`.
pub fn sample_orbit(
    field: &VectorField,
    x0: &DVector<f64>,
    period: f64,
    m: usize,
    cfg: &IntegratorConfig,
) -> Result<Vec<DVector<f64>>> {
    if m == 0 {
        return Err(Error::InvalidConfig("orbit resolution must be at least 1".into()));
    }
    let times: Vec<f64> = (0..=m).map(|j| period * j as f64 / m as f64).collect();
    integrate_to_times(field, x0, &times, cfg)
}

/// States at each of the nondecreasing `times`, starting from `x0` at 0.
pub fn integrate_to_times(
    field: &VectorField,
    x0: &DVector<f64>,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<DVector<f64>>> {
    check_dim(field.dim(), x0.len())?;
    cfg.validate()?;
    if let Some(&t) = times.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::NegativeTime(t));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidConfig("output times must be nondecreasing".into()));
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence { last_valid_t: 0.0 });
    }
    if cfg.linear_fast_path && field.linear_part().is_some() {
        return times
            .iter()
            .map(|&t| {
                let y = field.exp_linear(t).expect("linear field") * x0;
                if y.iter().all(|v| v.is_finite()) {
                    Ok(y)
                } else {
                    Err(Error::Divergence { last_valid_t: 0.0 })
                }
            })
            .collect();
    }
    match cfg.method {
        Method::Rk4 => rk4_to_times(field, x0, times, cfg.max_step),
        Method::Dopri45 => Dopri::new(field, cfg).run(x0, times),
    }
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn rk4_to_times(field: &VectorField, x0: &DVector<f64>, times: &[f64], max_step: f64) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(times.len());
    let mut t = 0.0;
    let mut y = x0.clone();
    for &target in times {
        let span = target - t;
        if span > 0.0 {
            let n = (span / max_step).ceil().max(1.0) as usize;
            let h = span / n as f64;
            for _ in 0..n {
                let k1 = field.eval(&y)?;
                let k2 = field.eval(&(&y + &k1 * (h / 2.0)))?;
                let k3 = field.eval(&(&y + &k2 * (h / 2.0)))?;
                let k4 = field.eval(&(&y + &k3 * h))?;
                let next = &y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                if !finite(&next) {
                    return Err(Error::Divergence { last_valid_t: t });
                }
                y = next;
                t += h;
            }
            t = target;
        }
        out.push(y.clone());
    }
    Ok(out)
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const MAX_STEPS: usize = 10_000_000;

struct Dopri<'a> {
    field: &'a VectorField,
    cfg: &'a IntegratorConfig,
}

impl<'a> Dopri<'a> {
    fn new(field: &'a VectorField, cfg: &'a IntegratorConfig) -> Self {
        Dopri { field, cfg }
    }

    fn err_norm(&self, e: &DVector<f64>, y0: &DVector<f64>, y1: &DVector<f64>) -> f64 {
        let n = e.len() as f64;
        let s: f64 = (0..e.len())
            .map(|i| {
                let sc = self.cfg.abs_tol + self.cfg.rel_tol * y0[i].abs().max(y1[i].abs());
                (e[i] / sc).powi(2)
            })
            .sum();
        (s / n).sqrt()
    }

    fn scaled_norm(&self, v: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let n = v.len() as f64;
        let s: f64 = (0..v.len())
            .map(|i| (v[i] / (self.cfg.abs_tol + self.cfg.rel_tol * y[i].abs())).powi(2))
            .sum();
        (s / n).sqrt()
    }

    fn initial_step(&self, y0: &DVector<f64>, f0: &DVector<f64>) -> Result<f64> {
        let d0 = self.scaled_norm(y0, y0);
        let d1 = self.scaled_norm(f0, y0);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let y1 = y0 + f0 * h0;
        let f1 = self.field.eval(&y1)?;
        let d2 = self.scaled_norm(&(f1 - f0), y0) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        Ok((100.0 * h0).min(h1).min(self.cfg.max_step))
    }

    fn run(&self, x0: &DVector<f64>, times: &[f64]) -> Result<Vec<DVector<f64>>> {
        let f = self.field;
        let mut out = Vec::with_capacity(times.len());
        let mut t = 0.0f64;
        let mut y = x0.clone();
        let mut k1 = f.eval(&y)?;
        let mut h = self.initial_step(&y, &k1)?;
        let mut steps = 0usize;
        for &target in times {
            while t < target {
                steps += 1;
                if steps > MAX_STEPS {
                    return Err(Error::Stiffness { t, h });
                }
                let remaining = target - t;
                let clipped = h >= remaining;
                let hs = if clipped { remaining } else { h };
                if hs < 1e-14 * t.abs().max(1.0) && !clipped {
                    return Err(Error::Stiffness { t, h: hs });
                }
                let k2 = f.eval(&(&y + &k1 * (hs * A21)))?;
                let k3 = f.eval(&(&y + (&k1 * A31 + &k2 * A32) * hs))?;
                let k4 = f.eval(&(&y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * hs))?;
                let k5 = f.eval(&(&y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * hs))?;
                let k6 = f.eval(&(&y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * hs))?;
                let y_new = &y + (&k1 * B1 + &k3 * B3 + &k4 * B4 + &k5 * B5 + &k6 * B6) * hs;
                if !finite(&y_new) {
                    if hs < 1e-14 * t.abs().max(1.0) {
                        return Err(Error::Divergence { last_valid_t: t });
                    }
                    h = hs * 0.2;
                    continue;
                }
                let k7 = f.eval(&y_new)?;
                if !finite(&k7) {
                    return Err(Error::Divergence { last_valid_t: t });
                }
                let e = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * hs;
                let err = self.err_norm(&e, &y, &y_new);
                let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                if err <= 1.0 {
                    t = if clipped { target } else { t + hs };
                    y = y_new;
                    k1 = k7;
                    let proposed = (hs * fac).min(self.cfg.max_step);
                    h = if clipped && fac >= 1.0 { h.max(proposed) } else { proposed };
                } else {
                    h = hs * fac.min(1.0);
                    if h < 1e-14 * t.abs().max(1.0) {
                        return Err(Error::Stiffness { t, h });
                    }
                }
            }
            out.push(y.clone());
        }
        Ok(out)
    }
}

/// `∂φ(x, t)/∂x`: `e^{tA}` for linear fields, the variational equation
/// when the field has a Jacobian, otherwise forward differences with
/// relative step `1e-6`.
pub fn flow_jacobian(field: &VectorField, x: &DVector<f64>, t: f64, cfg: &IntegratorConfig) -> Result<DMatrix<f64>> {
    check_dim(field.dim(), x.len())?;
    if cfg.linear_fast_path {
        if let Some(m) = field.exp_linear(t) {
            return Ok(m);
        }
    }
    if field.has_jacobian() {
        let (_, mut jacs) = flow_with_jacobians(field, x, &[t], cfg)?;
        return Ok(jacs.pop().expect("one output time"));
    }
    let base = flow(field, x, t, cfg)?;
    flow_jacobian_from(field, x, &base, t, cfg)
}

/// As [`flow_jacobian`], reusing an already computed `φ(x, t)` for the
/// difference quotients.
pub fn flow_jacobian_from(
    field: &VectorField,
    x: &DVector<f64>,
    base: &DVector<f64>,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<DMatrix<f64>> {
    if cfg.linear_fast_path {
        if let Some(m) = field.exp_linear(t) {
            return Ok(m);
        }
    }
    if field.has_jacobian() {
        let (_, mut jacs) = flow_with_jacobians(field, x, &[t], cfg)?;
        return Ok(jacs.pop().expect("one output time"));
    }
    let n = field.dim();
    let mut jac = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let fp = flow(field, &xp, t, cfg)?;
        xp[j] = x[j];
        jac.set_column(j, &((fp - base) / h));
    }
    Ok(jac)
}

/// `φ(x, t)` and `∂φ(x, t)/∂x` at each of `times`. Uses the matrix
/// exponential for linear fields, the variational equation
/// `Ψ' = Df(φ)Ψ` when a Jacobian is available, and forward differences
/// otherwise.
pub fn flow_with_jacobians(
    field: &VectorField,
    x: &DVector<f64>,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    check_dim(field.dim(), x.len())?;
    let n = field.dim();
    if cfg.linear_fast_path && field.linear_part().is_some() {
        let states = integrate_to_times(field, x, times, cfg)?;
        let jacs = times.iter().map(|&t| field.exp_linear(t).expect("linear")).collect();
        return Ok((states, jacs));
    }
    if field.has_jacobian() {
        let aug = variational_field(field);
        let mut y0 = DVector::zeros(n + n * n);
        y0.rows_mut(0, n).copy_from(x);
        for i in 0..n {
            y0[n + i * n + i] = 1.0;
        }
        let out = integrate_to_times(&aug, &y0, times, cfg)?;
        let states = out.iter().map(|y| y.rows(0, n).into_owned()).collect();
        let jacs = out
            .iter()
            .map(|y| DMatrix::from_column_slice(n, n, y.rows(n, n * n).as_slice()))
            .collect();
        return Ok((states, jacs));
    }
    let states = integrate_to_times(field, x, times, cfg)?;
    let mut jacs = vec![DMatrix::zeros(n, n); times.len()];
    let mut xp = x.clone();
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let pert = integrate_to_times(field, &xp, times, cfg)?;
        xp[j] = x[j];
        for (i, p) in pert.iter().enumerate() {
            jacs[i].set_column(j, &((p - &states[i]) / h));
        }
    }
    Ok((states, jacs))
}

/// State and column-major sensitivity matrix stacked into one field.
fn variational_field(field: &VectorField) -> VectorField {
    let n = field.dim();
    let f = field.clone();
    VectorField::new(n + n * n, move |y| {
        let x = y.rows(0, n).into_owned();
        let psi = DMatrix::from_column_slice(n, n, y.rows(n, n * n).as_slice());
        let fx = (f.eval)(&x);
        let jx = match &f.jacobian {
            Some(j) => j(&x),
            None => DMatrix::zeros(n, n),
        };
        let dpsi = jx * psi;
        let mut out = DVector::zeros(n + n * n);
        out.rows_mut(0, n).copy_from(&fx);
        out.rows_mut(n, n * n).copy_from_slice(dpsi.as_slice());
        out
    })
}

/// Flow Lipschitz bounds over one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// Sampled bound on the Lipschitz constant of `f`.
    pub c_f: f64,
    /// `e^{T c_f}`.
    pub c_phi_exp: f64,
    /// `sup_{t∈[0,T]} ‖e^{tA}‖₂` for linear fields.
    pub c_phi_linear: Option<f64>,
    /// `‖e^{TA}‖₂` at the end of the period, for linear fields.
    pub norm_exp_ta: Option<f64>,
    /// `min(c_phi_exp, c_phi_linear)` when the latter exists.
    pub c_phi_used: f64,
}

/// Largest Jacobian spectral norm over a grid (or, past the evaluation
/// budget, a seeded uniform sample of the same size) of `domain`.
pub fn estimate_field_lipschitz(field: &VectorField, domain: &BoxSet, grid_per_dim: usize) -> Result<f64> {
    check_dim(field.dim(), domain.dim())?;
    if let Some(a) = field.linear_part() {
        return Ok(spectral_norm(a));
    }
    let per = grid_per_dim.max(1);
    let total = (per as f64).powi(field.dim() as i32);
    let mut best = 0.0f64;
    if total <= LIPSCHITZ_BUDGET as f64 {
        for x in domain.grid(per) {
            best = best.max(spectral_norm(&field.jacobian(&x)?));
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..LIPSCHITZ_BUDGET {
            let x = domain.sample_uniform(&mut rng);
            best = best.max(spectral_norm(&field.jacobian(&x)?));
        }
    }
    Ok(best)
}

/// `sup_{t∈[0,T]} ‖e^{tA}‖₂`: coarse scan, then golden-section refinement
/// around the best sample.
pub fn sup_norm_exp(field: &VectorField, period: f64) -> Option<f64> {
    field.linear_part()?;
    let norm_at = |t: f64| spectral_norm(&field.exp_linear(t).expect("linear field"));
    let n = LINEAR_SUP_SAMPLES;
    let dt = period / n as f64;
    let (mut best_t, mut best) = (0.0, norm_at(0.0));
    for j in 1..=n {
        let t = dt * j as f64;
        let v = norm_at(t);
        if v > best {
            best = v;
            best_t = t;
        }
    }
    let (mut lo, mut hi) = ((best_t - dt).max(0.0), (best_t + dt).min(period));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (norm_at(a), norm_at(b));
    while hi - lo > 1e-9 * period.max(1.0) {
        if fa > fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = norm_at(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = norm_at(b);
        }
    }
    Some(best.max(fa).max(fb))
}

pub fn flow_lipschitz_bounds(field: &VectorField, period: f64, domain: &BoxSet) -> Result<LipschitzEstimate> {
    flow_lipschitz_bounds_with_grid(field, period, domain, DEFAULT_LIPSCHITZ_GRID)
}

pub fn flow_lipschitz_bounds_with_grid(
    field: &VectorField,
    period: f64,
    domain: &BoxSet,
    grid_per_dim: usize,
) -> Result<LipschitzEstimate> {
    if !(period > 0.0) {
        return Err(Error::InvalidConfig(format!("period must be positive, got {period}")));
    }
    let c_f = estimate_field_lipschitz(field, domain, grid_per_dim)?;
    let c_phi_exp = (period * c_f).exp();
    let c_phi_linear = sup_norm_exp(field, period);
    let norm_exp_ta = field
        .exp_linear(period)
        .map(|m| spectral_norm(&m));
    let c_phi_used = match c_phi_linear {
        Some(l) => c_phi_exp.min(l),
        None => c_phi_exp,
    };
    Ok(LipschitzEstimate {
        c_f,
        c_phi_exp,
        c_phi_linear,
        norm_exp_ta,
        c_phi_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lithium_a() -> DMatrix<f64> {
        DMatrix::from_row_slice(
            3,
            3,
            &[-0.6137, 0.1835, 0.2406, 1.2644, -0.8, 0.0, 0.2054, 0.0, -0.19],
        )
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn equilibrium_stays_put() {
        let f = VectorField::new(2, |x| v(&[x[0] * x[1], -x[1] + x[0] * x[0]]));
        let y = flow(&f, &DVector::zeros(2), 5.0, &IntegratorConfig::default()).unwrap();
        assert_eq!(y, DVector::zeros(2));
    }

    #[test]
    fn adaptive_matches_expm_on_lithium() {
        let a = lithium_a();
        let lin = VectorField::linear(a.clone());
        let a2 = a.clone();
        let generic = VectorField::new(3, move |x| &a2 * x);
        let x0 = v(&[0.2, 0.0, 0.0]);
        let exact = flow(&lin, &x0, 3.0, &IntegratorConfig::default()).unwrap();
        let num = flow(&generic, &x0, 3.0, &IntegratorConfig::default()).unwrap();
        assert!((exact - num).amax() < 1e-8);
    }

    #[test]
    fn rk4_matches_exponential_decay() {
        let f = VectorField::new(1, |x| -x.clone());
        let y = flow(&f, &v(&[1.0]), 2.0, &IntegratorConfig::rk4(1e-3)).unwrap();
        assert!((y[0] - (-2f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn blow_up_is_reported() {
        // ẋ = x², x(0) = 1 blows up at t = 1
        let f = VectorField::new(1, |x| x.map(|v| v * v));
        let err = flow(&f, &v(&[1.0]), 2.0, &IntegratorConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. } | Error::Stiffness { .. }), "{err:?}");
        if let Error::Divergence { last_valid_t } | Error::Stiffness { t: last_valid_t, .. } = err {
            assert!(last_valid_t <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn negative_time_rejected() {
        let f = VectorField::zero(1);
        assert_eq!(
            flow(&f, &v(&[1.0]), -1.0, &IntegratorConfig::default()),
            Err(Error::NegativeTime(-1.0))
        );
    }

    #[test]
    fn orbit_has_m_plus_one_samples() {
        let f = VectorField::linear(lithium_a());
        let x0 = v(&[0.5, 0.7, 0.6]);
        let orbit = sample_orbit(&f, &x0, 3.0, 30, &IntegratorConfig::default()).unwrap();
        assert_eq!(orbit.len(), 31);
        assert_eq!(orbit[0], x0);
        let one = sample_orbit(&f, &x0, 3.0, 1, &IntegratorConfig::default()).unwrap();
        assert_eq!(one.len(), 2);
        assert!((&one[1] - &orbit[30]).amax() < 1e-14);
    }

    #[test]
    fn flow_jacobian_of_decay() {
        let f = VectorField::new(2, |x| v(&[-x[0], -2.0 * x[1]]));
        let j = flow_jacobian(&f, &v(&[1.0, 1.0]), 1.0, &IntegratorConfig::default()).unwrap();
        assert!((j[(0, 0)] - (-1f64).exp()).abs() < 1e-6);
        assert!((j[(1, 1)] - (-2f64).exp()).abs() < 1e-6);
        assert!(j[(0, 1)].abs() < 1e-6);
    }

    #[test]
    fn quadratic_field_lipschitz() {
        let f = VectorField::new(1, |x| x.map(|v| v * v));
        let dom = BoxSet::cube(1, 0.0, 2.0).unwrap();
        let c = estimate_field_lipschitz(&f, &dom, 100).unwrap();
        assert!((c - 4.0).abs() < 1e-6, "{c}");
    }

    #[test]
    fn zero_field_bounds_are_one() {
        let f = VectorField::zero(2);
        let b = flow_lipschitz_bounds(&f, 7.0, &BoxSet::cube(2, -1.0, 1.0).unwrap()).unwrap();
        assert_eq!(b.c_phi_exp, 1.0);
        assert_eq!(b.c_phi_linear, Some(1.0));
        assert_eq!(b.c_phi_used, 1.0);
    }

    #[test]
    fn short_period_bounds_near_one() {
        let f = VectorField::linear(lithium_a());
        let dom = BoxSet::from_slices(&[0.0; 3], &[2.0, 1.2, 1.2]).unwrap();
        let b = flow_lipschitz_bounds(&f, 0.01, &dom).unwrap();
        assert!((b.c_phi_exp - 1.0).abs() < 0.02);
        assert!((b.c_phi_linear.unwrap() - 1.0).abs() < 0.02);
    }

    #[test]
    fn consistency_check_flags_bad_jacobian() {
        let dom = BoxSet::cube(1, -1.0, 1.0).unwrap();
        let good = VectorField::new(1, |x| x.map(|v| v.sin())).with_jacobian(|x| DMatrix::from_element(1, 1, x[0].cos()));
        assert!(good.check_consistency(&dom, 20, 1).is_ok());
        let bad = VectorField::new(1, |x| x.map(|v| v.sin())).with_jacobian(|_| DMatrix::from_element(1, 1, 2.0));
        assert!(bad.check_consistency(&dom, 20, 1).is_err());
        assert!(VectorField::linear(lithium_a())
            .check_consistency(&BoxSet::cube(3, 0.0, 1.0).unwrap(), 20, 1)
            .is_ok());
    }
}
