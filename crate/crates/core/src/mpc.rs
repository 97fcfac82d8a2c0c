//! Zone MPC with artificial equilibrium variables.
//!
//! The optimization runs over `z = (u_0, …, u_{N−1}, x_s, u_s)` by single
//! shooting. The terminal and equilibrium equalities and the inequality
//! constraints (`x_j ∈ X_d`, orbit of `x_s` in `X`) are handled by an
//! augmented Lagrangian; box bounds on `u_j`, `x_s`, `u_s` by projection.
//! Each inner problem is solved with a projected Gauss–Newton method
//! whose sensitivities come from forward-difference flow Jacobians.

use std::collections::BTreeMap;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{flow_jacobian_from, flow_with_jacobians, integrate_to_times};
use crate::equilibria::{EquilibriumSetApprox, FeasibleSetResult};
use crate::error::{check_dim, Error, Result};
use crate::geometry::{nearest_in_points, BoxSet};
use crate::impulsive::{Controller, ImpulsiveSystem};
use crate::linalg::{is_symmetric_positive_definite, spectral_norm};
use crate::serde_nalgebra;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon: usize,
    #[serde(with = "serde_nalgebra::matrix")]
    pub q: DMatrix<f64>,
    #[serde(with = "serde_nalgebra::matrix")]
    pub r: DMatrix<f64>,
    /// Weight of the distance from `(x_s, u_s)` to the stored target pairs.
    pub gamma: f64,
    pub solver_tol: f64,
    /// Inner iterations per augmented-Lagrangian round.
    pub max_iter: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub max_outer: usize,
    /// Time samples of the orbit of `x_s` checked against `X`.
    pub orbit_check_resolution: usize,
    /// Fix `(x_s, u_s)` to the single stored target pair.
    pub pin_reference: bool,
    /// Number of seeded starts; 0 or 1 runs the deterministic start only.
    pub multistart: usize,
    pub seed: u64,
}

impl MpcConfig {
    pub fn new(horizon: usize, q: DMatrix<f64>, r: DMatrix<f64>, gamma: f64) -> Self {
        MpcConfig {
            horizon,
            q,
            r,
            gamma,
            solver_tol: 1e-6,
            max_iter: 200,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            max_outer: 12,
            orbit_check_resolution: 20,
            pin_reference: false,
            multistart: 0,
            seed: 0,
        }
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        if self.q.nrows() != n || self.q.ncols() != n || !is_symmetric_positive_definite(&self.q) {
            return Err(Error::InvalidConfig(format!("Q must be a symmetric positive definite {n}x{n} matrix")));
        }
        if self.r.nrows() != m || self.r.ncols() != m || !is_symmetric_positive_definite(&self.r) {
            return Err(Error::InvalidConfig(format!("R must be a symmetric positive definite {m}x{m} matrix")));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig("gamma must be nonnegative".into()));
        }
        if !(self.solver_tol > 0.0) || self.max_iter == 0 || self.max_outer == 0 {
            return Err(Error::InvalidConfig("solver_tol, max_iter and max_outer must be positive".into()));
        }
        if !(self.penalty_init > 0.0) || !(self.penalty_growth > 1.0) {
            return Err(Error::InvalidConfig("penalty_init > 0 and penalty_growth > 1 required".into()));
        }
        if self.orbit_check_resolution == 0 {
            return Err(Error::InvalidConfig("orbit_check_resolution must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    #[serde(with = "serde_nalgebra::vector_list")]
    pub u_seq: Vec<DVector<f64>>,
    #[serde(with = "serde_nalgebra::vector_list")]
    pub x_pred: Vec<DVector<f64>>,
    #[serde(with = "serde_nalgebra::vector")]
    pub x_s: DVector<f64>,
    #[serde(with = "serde_nalgebra::vector")]
    pub u_s: DVector<f64>,
    pub cost: f64,
    pub status: SolveStatus,
    /// Largest violation per constraint group.
    pub constraint_residuals: BTreeMap<String, f64>,
    pub iterations: usize,
    pub outer_rounds: usize,
    /// The shifted previous solution was returned because it was feasible
    /// and no worse than the optimizer's result.
    pub used_warm_candidate: bool,
}

/// Everything the optimizer needs, with the cached factors of the weights.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    sys: ImpulsiveSystem,
    cfg: MpcConfig,
    target: EquilibriumSetApprox,
    xd: FeasibleSetResult,
    lq_t: DMatrix<f64>,
    lr_t: DMatrix<f64>,
    target_states: Vec<DVector<f64>>,
    target_inputs: Vec<DVector<f64>>,
    eps_x: f64,
    eps_u: f64,
}

struct Multipliers {
    lam: DVector<f64>,
    mu: Vec<f64>,
    rho: f64,
    /// Objective scaling.
    weight: f64,
}

struct Eval {
    xs: Vec<DVector<f64>>,
    cost_exact: f64,
    /// Squared-norm residuals (stage terms).
    stage: DVector<f64>,
    stage_jac: Option<DMatrix<f64>>,
    /// `[x_N − x_s; x_s − φ(x_s, T) − B u_s]`.
    eq: DVector<f64>,
    eq_jac: Option<DMatrix<f64>>,
    ineq: Vec<f64>,
    ineq_jac: Option<Vec<DVector<f64>>>,
    dist_val: f64,
    dist_grad: DVector<f64>,
    dist_hess: DMatrix<f64>,
}

impl MpcProblem {
    pub fn new(sys: ImpulsiveSystem, cfg: MpcConfig, target: EquilibriumSetApprox, xd: FeasibleSetResult) -> Result<Self> {
        let (n, m) = (sys.dim(), sys.input_dim());
        cfg.validate(n, m)?;
        if target.is_empty() {
            return Err(Error::EmptySet("target equilibrium set (the controller needs at least one pair)"));
        }
        if cfg.pin_reference && target.len() != 1 {
            return Err(Error::InvalidConfig("pin_reference needs exactly one target pair".into()));
        }
        check_dim(n, xd.region.dim())?;
        let lq_t = cfg.q.clone().cholesky().expect("Q checked positive definite").l().transpose();
        let lr_t = cfg.r.clone().cholesky().expect("R checked positive definite").l().transpose();
        let eps_x = 1e-6 * sys.state_bounds().widths().amax().max(1e-12);
        let eps_u = 1e-6 * sys.input_bounds().widths().amax().max(1e-12);
        Ok(MpcProblem {
            target_states: target.pairs.iter().map(|p| p.x_s.clone()).collect(),
            target_inputs: target.pairs.iter().map(|p| p.u_s.clone()).collect(),
            sys,
            cfg,
            target,
            xd,
            lq_t,
            lr_t,
            eps_x,
            eps_u,
        })
    }

    pub fn sys(&self) -> &ImpulsiveSystem {
        &self.sys
    }

    pub fn cfg(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn target(&self) -> &EquilibriumSetApprox {
        &self.target
    }

    pub fn xd(&self) -> &FeasibleSetResult {
        &self.xd
    }

    fn nu(&self) -> usize {
        self.cfg.horizon * self.sys.input_dim()
    }

    fn nz(&self) -> usize {
        self.nu() + self.sys.dim() + self.sys.input_dim()
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let (n, m, nu) = (self.sys.dim(), self.sys.input_dim(), self.nu());
        let ub = self.sys.input_bounds();
        let xb = self.sys.state_bounds();
        let mut lo = DVector::zeros(self.nz());
        let mut hi = DVector::zeros(self.nz());
        for j in 0..self.cfg.horizon {
            lo.rows_mut(j * m, m).copy_from(ub.lower());
            hi.rows_mut(j * m, m).copy_from(ub.upper());
        }
        if self.cfg.pin_reference {
            let p = &self.target.pairs[0];
            lo.rows_mut(nu, n).copy_from(&p.x_s);
            hi.rows_mut(nu, n).copy_from(&p.x_s);
            lo.rows_mut(nu + n, m).copy_from(&p.u_s);
            hi.rows_mut(nu + n, m).copy_from(&p.u_s);
        } else {
            lo.rows_mut(nu, n).copy_from(xb.lower());
            hi.rows_mut(nu, n).copy_from(xb.upper());
            lo.rows_mut(nu + n, m).copy_from(ub.lower());
            hi.rows_mut(nu + n, m).copy_from(ub.upper());
        }
        (lo, hi)
    }

    fn pack(&self, u_seq: &[DVector<f64>], x_s: &DVector<f64>, u_s: &DVector<f64>) -> DVector<f64> {
        let (n, m, nu) = (self.sys.dim(), self.sys.input_dim(), self.nu());
        let mut z = DVector::zeros(self.nz());
        for (j, u) in u_seq.iter().enumerate() {
            z.rows_mut(j * m, m).copy_from(u);
        }
        z.rows_mut(nu, n).copy_from(x_s);
        z.rows_mut(nu + n, m).copy_from(u_s);
        z
    }

    fn unpack(&self, z: &DVector<f64>) -> (Vec<DVector<f64>>, DVector<f64>, DVector<f64>) {
        let (n, m, nu) = (self.sys.dim(), self.sys.input_dim(), self.nu());
        let u = (0..self.cfg.horizon)
            .map(|j| z.rows(j * m, m).into_owned())
            .collect();
        (u, z.rows(nu, n).into_owned(), z.rows(nu + n, m).into_owned())
    }

    fn rollout(&self, x: &DVector<f64>, u_seq: &[DVector<f64>]) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        let mut xs = Vec::with_capacity(u_seq.len() + 1);
        let mut phis = Vec::with_capacity(u_seq.len());
        xs.push(x.clone());
        for u in u_seq {
            let phi = self.sys.free_step(xs.last().unwrap())?;
            xs.push(&phi + self.sys.b() * u);
            phis.push(phi);
        }
        Ok((xs, phis))
    }

    fn orbit_times(&self) -> Vec<f64> {
        let mo = self.cfg.orbit_check_resolution;
        (0..=mo).map(|i| self.sys.period() * i as f64 / mo as f64).collect()
    }

    /// Exact cost `J_N(x; u, x_s, u_s)` with distances to the stored pairs.
    pub fn cost_eval(&self, x: &DVector<f64>, u_seq: &[DVector<f64>], x_s: &DVector<f64>, u_s: &DVector<f64>) -> Result<f64> {
        check_dim(self.sys.dim(), x.len())?;
        check_dim(self.sys.dim(), x_s.len())?;
        check_dim(self.sys.input_dim(), u_s.len())?;
        if u_seq.len() != self.cfg.horizon {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.horizon,
                got: u_seq.len(),
            });
        }
        for u in u_seq {
            check_dim(self.sys.input_dim(), u.len())?;
        }
        let (xs, _) = self.rollout(x, u_seq)?;
        Ok(self.exact_cost(&xs, u_seq, x_s, u_s))
    }

    fn exact_cost(&self, xs: &[DVector<f64>], u_seq: &[DVector<f64>], x_s: &DVector<f64>, u_s: &DVector<f64>) -> f64 {
        let mut j = 0.0;
        for (xj, uj) in xs.iter().zip(u_seq) {
            let dx = xj - x_s;
            let du = uj - u_s;
            j += (dx.transpose() * &self.cfg.q * &dx)[0] + (du.transpose() * &self.cfg.r * &du)[0];
        }
        if self.cfg.gamma > 0.0 {
            let dxs = nearest_in_points(x_s, &self.target_states).1;
            let dus = nearest_in_points(u_s, &self.target_inputs).1;
            j += self.cfg.gamma * (dxs + dus);
        }
        j
    }

    fn evaluate(&self, x: &DVector<f64>, z: &DVector<f64>, need_jac: bool) -> Result<Eval> {
        let (n, m, nh, nu, nz) = (self.sys.dim(), self.sys.input_dim(), self.cfg.horizon, self.nu(), self.nz());
        let (u_seq, x_s, u_s) = self.unpack(z);
        let (xs, phis) = self.rollout(x, &u_seq)?;
        let b = self.sys.b();

        // sensitivities S_j = ∂x_j/∂(u_0..u_{N−1})
        let sens: Option<Vec<DMatrix<f64>>> = if need_jac {
            let mut s = Vec::with_capacity(nh + 1);
            s.push(DMatrix::zeros(n, nu));
            for j in 0..nh {
                let phi_j = flow_jacobian_from(self.sys.field(), &xs[j], &phis[j], self.sys.period(), self.sys.integrator())?;
                let mut next = &phi_j * &s[j];
                next.view_mut((0, j * m), (n, m)).copy_from(b);
                s.push(next);
            }
            Some(s)
        } else {
            None
        };

        let mut stage = DVector::zeros(nh * (n + m));
        let mut stage_jac = need_jac.then(|| DMatrix::zeros(nh * (n + m), nz));
        for j in 0..nh {
            let row = j * (n + m);
            stage.rows_mut(row, n).copy_from(&(&self.lq_t * (&xs[j] - &x_s)));
            stage.rows_mut(row + n, m).copy_from(&(&self.lr_t * (&u_seq[j] - &u_s)));
            if let (Some(jac), Some(s)) = (stage_jac.as_mut(), sens.as_ref()) {
                jac.view_mut((row, 0), (n, nu)).copy_from(&(&self.lq_t * &s[j]));
                jac.view_mut((row, nu), (n, n)).copy_from(&(-&self.lq_t));
                jac.view_mut((row + n, j * m), (m, m)).copy_from(&self.lr_t);
                jac.view_mut((row + n, nu + n), (m, m)).copy_from(&(-&self.lr_t));
            }
        }

        let times = self.orbit_times();
        let (orbit, orbit_jacs) = if need_jac {
            let (o, j) = flow_with_jacobians(self.sys.field(), &x_s, &times, self.sys.integrator())?;
            (o, Some(j))
        } else {
            (integrate_to_times(self.sys.field(), &x_s, &times, self.sys.integrator())?, None)
        };
        let phi_s = orbit.last().expect("endpoint").clone();
        let mut eq = DVector::zeros(2 * n);
        eq.rows_mut(0, n).copy_from(&(&xs[nh] - &x_s));
        eq.rows_mut(n, n).copy_from(&(&x_s - &phi_s - b * &u_s));

        let eq_jac = if let (Some(s), Some(ojs)) = (sens.as_ref(), orbit_jacs.as_ref()) {
            let mut jac = DMatrix::zeros(2 * n, nz);
            jac.view_mut((0, 0), (n, nu)).copy_from(&s[nh]);
            jac.view_mut((0, nu), (n, n)).copy_from(&(-DMatrix::identity(n, n)));
            let dphi_s = ojs.last().expect("endpoint jacobian").clone();
            jac.view_mut((n, nu), (n, n)).copy_from(&(DMatrix::identity(n, n) - dphi_s));
            jac.view_mut((n, nu + n), (n, m)).copy_from(&(-b));
            Some(jac)
        } else {
            None
        };

        let mut ineq = Vec::new();
        let mut ineq_jac: Option<Vec<DVector<f64>>> = need_jac.then(Vec::new);
        for j in 1..nh {
            for (g, a) in self.xd.region.constraints(&xs[j]) {
                ineq.push(g);
                if let (Some(rows), Some(s)) = (ineq_jac.as_mut(), sens.as_ref()) {
                    let mut row = DVector::zeros(nz);
                    row.rows_mut(0, nu).copy_from(&(s[j].transpose() * &a));
                    rows.push(row);
                }
            }
        }
        if !self.cfg.pin_reference {
            let xb = self.sys.state_bounds();
            for (i, p) in orbit.iter().enumerate() {
                for k in 0..n {
                    ineq.push(p[k] - xb.upper()[k]);
                    ineq.push(xb.lower()[k] - p[k]);
                    if let (Some(rows), Some(ojs)) = (ineq_jac.as_mut(), orbit_jacs.as_ref()) {
                        let d = ojs[i].row(k).transpose();
                        let mut up = DVector::zeros(nz);
                        up.rows_mut(nu, n).copy_from(&d);
                        let lo = -&up;
                        rows.push(up);
                        rows.push(lo);
                    }
                }
            }
        }

        let mut dist_val = 0.0;
        let mut dist_grad = DVector::zeros(nz);
        let mut dist_hess = DMatrix::zeros(nz, nz);
        if self.cfg.gamma > 0.0 && !self.cfg.pin_reference {
            let g = self.cfg.gamma;
            for (offset, point, cloud, eps) in [
                (nu, &x_s, &self.target_states, self.eps_x),
                (nu + n, &u_s, &self.target_inputs, self.eps_u),
            ] {
                let (idx, _) = nearest_in_points(point, cloud);
                let v = point - &cloud[idx];
                let s = (v.norm_squared() + eps * eps).sqrt();
                dist_val += g * (s - eps);
                let k = v.len();
                dist_grad.rows_mut(offset, k).copy_from(&(&v * (g / s)));
                let h = (DMatrix::identity(k, k) / s - &v * v.transpose() / (s * s * s)) * g;
                dist_hess.view_mut((offset, offset), (k, k)).copy_from(&h);
            }
        }

        let cost_exact = self.exact_cost(&xs, &u_seq, &x_s, &u_s);
        Ok(Eval {
            xs,
            cost_exact,
            stage,
            stage_jac,
            eq,
            eq_jac,
            ineq,
            ineq_jac,
            dist_val,
            dist_grad,
            dist_hess,
        })
    }

    fn al_value(&self, e: &Eval, m: &Multipliers) -> f64 {
        let (lam, mu, rho) = (&m.lam, &m.mu, m.rho);
        let mut v = m.weight * (e.stage.norm_squared() + e.dist_val);
        for i in 0..e.eq.len() {
            v += lam[i] * e.eq[i] + 0.5 * rho * e.eq[i] * e.eq[i];
        }
        for (g, m) in e.ineq.iter().zip(mu) {
            let t = (m + rho * g).max(0.0);
            v += (t * t - m * m) / (2.0 * rho);
        }
        v
    }

    fn al_model(&self, e: &Eval, m: &Multipliers) -> (DVector<f64>, DMatrix<f64>) {
        let (lam, mu, rho, w) = (&m.lam, &m.mu, m.rho, m.weight);
        let nz = self.nz();
        let sj = e.stage_jac.as_ref().expect("jacobian requested");
        let ej = e.eq_jac.as_ref().expect("jacobian requested");
        let ij = e.ineq_jac.as_ref().expect("jacobian requested");
        let mut grad = (sj.transpose() * &e.stage * 2.0 + &e.dist_grad) * w;
        let mut hess = (sj.transpose() * sj * 2.0 + &e.dist_hess) * w;
        let w = lam + &e.eq * rho;
        grad += ej.transpose() * w;
        hess += ej.transpose() * ej * rho;
        for ((g, m), row) in e.ineq.iter().zip(mu).zip(ij) {
            let t = m + rho * g;
            if t > 0.0 {
                grad += row * t;
                hess += row * row.transpose() * rho;
            }
        }
        debug_assert_eq!(grad.len(), nz);
        (grad, hess)
    }

    fn violations(&self, e: &Eval) -> (f64, f64) {
        let eq = e.eq.amax();
        let ineq = e.ineq.iter().cloned().fold(0.0, f64::max);
        (eq, ineq)
    }

    /// Projected Gauss–Newton on the augmented Lagrangian with box bounds.
    fn inner(&self, x: &DVector<f64>, mut z: DVector<f64>, mult: &Multipliers, lo: &DVector<f64>, hi: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
        let nz = self.nz();
        let project = |v: &DVector<f64>| DVector::from_fn(nz, |i, _| v[i].clamp(lo[i], hi[i]));
        let mut damping = 1e-10;
        let mut e = self.evaluate(x, &z, true)?;
        let mut val = self.al_value(&e, mult);
        let mut iters = 0;
        let mut stalls = 0;
        for _ in 0..self.cfg.max_iter {
            iters += 1;
            let (grad, hess) = self.al_model(&e, mult);
            let pg = (&z - project(&(&z - &grad))).amax();
            if pg <= 1e-14 * (1.0 + z.amax()) {
                break;
            }
            let eps_b = pg.min(1e-8);
            let free: Vec<usize> = (0..nz)
                .filter(|&i| {
                    let at_lo = z[i] <= lo[i] + eps_b && grad[i] > 0.0;
                    let at_hi = z[i] >= hi[i] - eps_b && grad[i] < 0.0;
                    !(at_lo || at_hi || lo[i] == hi[i])
                })
                .collect();
            let mut accepted = false;
            for _ in 0..12 {
                let k = free.len();
                let mut d = DVector::zeros(nz);
                for i in 0..nz {
                    if !free.contains(&i) {
                        d[i] = -grad[i] / hess[(i, i)].max(1e-12);
                    }
                }
                if k > 0 {
                    let scale = (0..k).map(|a| hess[(free[a], free[a])]).fold(0.0, f64::max).max(1e-12);
                    let hf = DMatrix::from_fn(k, k, |a, bb| {
                        let v = hess[(free[a], free[bb])];
                        if a == bb {
                            v + damping * (v.abs() + 1e-10 * scale)
                        } else {
                            v
                        }
                    });
                    let gf = DVector::from_fn(k, |a, _| -grad[free[a]]);
                    match hf.cholesky() {
                        Some(ch) => {
                            let sol = ch.solve(&gf);
                            for a in 0..k {
                                d[free[a]] = sol[a];
                            }
                        }
                        None => {
                            damping = (damping * 10.0).max(1e-8);
                            continue;
                        }
                    }
                }
                let mut alpha = 1.0;
                while alpha > 1e-10 {
                    let cand = project(&(&z + &d * alpha));
                    let step = &cand - &z;
                    let decrease = grad.dot(&step);
                    if decrease < 0.0 {
                        if let Ok(ec) = self.evaluate(x, &cand, false) {
                            let vc = self.al_value(&ec, mult);
                            if vc <= val + 1e-4 * decrease {
                                let rel = (val - vc) / (1.0 + val.abs());
                                stalls = if rel < 1e-15 { stalls + 1 } else { 0 };
                                z = cand;
                                val = vc;
                                accepted = true;
                                break;
                            }
                        }
                    }
                    alpha *= 0.5;
                }
                if accepted {
                    damping = (damping / 10.0).max(1e-12);
                    break;
                }
                damping = (damping * 100.0).max(1e-6);
            }
            if !accepted || stalls >= 3 {
                break;
            }
            e = self.evaluate(x, &z, true)?;
            val = self.al_value(&e, mult);
        }
        Ok((z, iters))
    }

    fn optimize(&self, x: &DVector<f64>, z0: DVector<f64>) -> Result<(DVector<f64>, usize, usize)> {
        let (lo, hi) = self.bounds();
        let mut z = DVector::from_fn(z0.len(), |i, _| z0[i].clamp(lo[i], hi[i]));
        let e0 = self.evaluate(x, &z, false)?;
        // objective scaled to order one at the start so that the penalty
        // parameter means the same thing across models
        let mut mult = Multipliers {
            lam: DVector::zeros(e0.eq.len()),
            mu: vec![0.0; e0.ineq.len()],
            rho: self.cfg.penalty_init,
            weight: 1.0 / (e0.stage.norm_squared() + e0.dist_val).max(1.0),
        };
        let mut prev = f64::INFINITY;
        let mut iters = 0;
        let mut rounds = 0;
        for _ in 0..self.cfg.max_outer {
            rounds += 1;
            let (zn, it) = self.inner(x, z, &mult, &lo, &hi)?;
            z = zn;
            iters += it;
            let e = self.evaluate(x, &z, false)?;
            let (veq, vin) = self.violations(&e);
            let viol = veq.max(vin);
            debug!("al round {rounds}: rho = {:e}, violation = {viol:e}, cost = {:e}", mult.rho, e.cost_exact);
            if viol <= 0.1 * self.cfg.solver_tol {
                break;
            }
            let rho = mult.rho;
            mult.lam += &e.eq * rho;
            for (m, g) in mult.mu.iter_mut().zip(&e.ineq) {
                *m = (*m + rho * g).max(0.0);
            }
            if viol > 0.1 * prev {
                mult.rho *= self.cfg.penalty_growth;
            }
            prev = viol;
        }
        Ok((z, iters, rounds))
    }

    fn residual_report(&self, x: &DVector<f64>, z: &DVector<f64>) -> Result<(Eval, BTreeMap<String, f64>, bool)> {
        let e = self.evaluate(x, z, false)?;
        let (u_seq, x_s, u_s) = self.unpack(z);
        let n = self.sys.dim();
        let tol = self.cfg.solver_tol;
        let mut res = BTreeMap::new();
        res.insert("terminal".to_string(), e.eq.rows(0, n).norm());
        res.insert("equilibrium".to_string(), e.eq.rows(n, n).norm());
        let ub = self.sys.input_bounds();
        let input = u_seq
            .iter()
            .chain(std::iter::once(&u_s))
            .map(|u| ub.violation(u))
            .fold(0.0, f64::max);
        res.insert("input".to_string(), input);
        res.insert("reference_state".to_string(), self.sys.state_bounds().violation(&x_s));
        let mut xd_ok = true;
        let mut xd_viol = 0.0f64;
        for xj in &e.xs[..self.cfg.horizon] {
            let g = self
                .xd
                .region
                .constraints(xj)
                .into_iter()
                .map(|(g, _)| g)
                .fold(0.0, f64::max);
            xd_viol = xd_viol.max(g);
            if g > tol && !self.xd.region.contains(xj, tol)? {
                xd_ok = false;
            }
        }
        res.insert("xd".to_string(), if xd_ok { xd_viol.min(tol) } else { xd_viol });
        let orbit = integrate_to_times(self.sys.field(), &x_s, &self.orbit_times(), self.sys.integrator())?;
        let ov = orbit.iter().map(|p| self.sys.state_bounds().violation(p)).fold(0.0, f64::max);
        res.insert("orbit".to_string(), ov);
        let ok = res.values().all(|v| *v <= tol);
        Ok((e, res, ok))
    }

    fn assemble(&self, x: &DVector<f64>, z: &DVector<f64>, iterations: usize, outer_rounds: usize) -> Result<MpcSolution> {
        let (e, residuals, ok) = self.residual_report(x, z)?;
        let (u_seq, x_s, u_s) = self.unpack(z);
        Ok(MpcSolution {
            u_seq,
            x_pred: e.xs,
            x_s,
            u_s,
            cost: e.cost_exact,
            status: if ok { SolveStatus::Converged } else { SolveStatus::MaxIter },
            constraint_residuals: residuals,
            iterations,
            outer_rounds,
            used_warm_candidate: false,
        })
    }

    fn cold_start(&self, x: &DVector<f64>) -> DVector<f64> {
        let (idx, _) = nearest_in_points(x, &self.target_states);
        let p = &self.target.pairs[idx];
        let u_seq = vec![p.u_s.clone(); self.cfg.horizon];
        self.pack(&u_seq, &p.x_s, &p.u_s)
    }

    fn shifted(&self, warm: &MpcSolution) -> DVector<f64> {
        let mut u_seq: Vec<DVector<f64>> = warm.u_seq.iter().skip(1).cloned().collect();
        u_seq.push(warm.u_s.clone());
        self.pack(&u_seq, &warm.x_s, &warm.u_s)
    }

    fn infeasible(&self, x: &DVector<f64>, z: &DVector<f64>, what: &str, amount: f64) -> MpcSolution {
        let (u_seq, x_s, u_s) = self.unpack(z);
        let x_pred = self.rollout(x, &u_seq).map(|r| r.0).unwrap_or_else(|_| vec![x.clone()]);
        let cost = if x_pred.len() == u_seq.len() + 1 {
            self.exact_cost(&x_pred, &u_seq, &x_s, &u_s)
        } else {
            f64::INFINITY
        };
        let mut residuals = BTreeMap::new();
        residuals.insert(what.to_string(), amount);
        MpcSolution {
            u_seq,
            x_pred,
            x_s,
            u_s,
            cost,
            status: SolveStatus::Infeasible,
            constraint_residuals: residuals,
            iterations: 0,
            outer_rounds: 0,
            used_warm_candidate: false,
        }
    }

    /// Solves the finite-horizon problem from `x`, warm-started from the
    /// previous solution when given.
    pub fn solve(&self, x: &DVector<f64>, warm: Option<&MpcSolution>) -> Result<MpcSolution> {
        check_dim(self.sys.dim(), x.len())?;
        let z0 = match warm {
            Some(w) => self.shifted(w),
            None => self.cold_start(x),
        };
        let tol = self.cfg.solver_tol.max(1e-9);
        if !self.xd.region.contains(x, tol)? {
            let amount = self
                .xd
                .region
                .constraints(x)
                .into_iter()
                .map(|(g, _)| g)
                .fold(0.0, f64::max);
            return Ok(self.infeasible(x, &z0, "initial_state", amount.max(tol)));
        }

        let mut starts = vec![z0.clone()];
        if self.cfg.multistart > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            for _ in 1..self.cfg.multistart {
                starts.push(self.random_start(&mut rng));
            }
        }
        let results: Vec<Result<MpcSolution>> = if starts.len() == 1 {
            vec![self.solve_from(x, starts.pop().unwrap())]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = starts
                    .into_iter()
                    .map(|z| s.spawn(move || self.solve_from(x, z)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("solver thread")).collect()
            })
        };
        let mut best: Option<MpcSolution> = None;
        for r in results {
            match r {
                Ok(sol) => {
                    if better(&sol, best.as_ref()) {
                        best = Some(sol);
                    }
                }
                Err(Error::Divergence { .. }) | Err(Error::Stiffness { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        let mut best = match best {
            Some(b) => b,
            None => return Ok(self.infeasible(x, &z0, "rollout", f64::INFINITY)),
        };

        // the shifted previous solution is feasible whenever the previous
        // solve was; keep it if the optimizer did no better
        if warm.is_some() {
            if let Ok(cand) = self.assemble(x, &z0, 0, 0) {
                let cand_ok = cand.status == SolveStatus::Converged;
                if cand_ok && (best.status != SolveStatus::Converged || cand.cost < best.cost) {
                    best = MpcSolution {
                        used_warm_candidate: true,
                        iterations: best.iterations,
                        outer_rounds: best.outer_rounds,
                        ..cand
                    };
                }
            }
        }
        Ok(best)
    }

    fn solve_from(&self, x: &DVector<f64>, z0: DVector<f64>) -> Result<MpcSolution> {
        let (z, iters, rounds) = self.optimize(x, z0)?;
        self.assemble(x, &z, iters, rounds)
    }

    fn random_start(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let idx = rng.random_range(0..self.target.len());
        let p = &self.target.pairs[idx];
        let ub = self.sys.input_bounds();
        let u_seq: Vec<DVector<f64>> = (0..self.cfg.horizon).map(|_| ub.sample_uniform(rng)).collect();
        self.pack(&u_seq, &p.x_s, &p.u_s)
    }

    /// Exhaustive search over gridded input sequences for a single fixed
    /// target pair; the validation oracle for [`MpcProblem::solve`].
    pub fn brute_force_solve(&self, x: &DVector<f64>, grid_per_input: usize) -> Result<BruteForceSolution> {
        check_dim(self.sys.dim(), x.len())?;
        let m = self.sys.input_dim();
        let nh = self.cfg.horizon;
        if nh * m > 3 {
            return Err(Error::Unsupported("brute force needs N·m ≤ 3".into()));
        }
        if self.target.len() != 1 {
            return Err(Error::Unsupported("brute force needs a single target pair".into()));
        }
        let pair = &self.target.pairs[0];
        let ub: &BoxSet = self.sys.input_bounds();
        let grid = ub.grid(grid_per_input.max(1));
        let du = ub.grid_spacing(grid_per_input.max(1)).amax();
        let slack = 10.0 * spectral_norm(self.sys.b()) * du;
        let tol = self.cfg.solver_tol.max(1e-9);

        struct Search<'a> {
            prob: &'a MpcProblem,
            grid: &'a [DVector<f64>],
            x_s: &'a DVector<f64>,
            u_s: &'a DVector<f64>,
            slack: f64,
            tol: f64,
            best: Option<(f64, Vec<usize>)>,
        }
        impl Search<'_> {
            fn go(&mut self, depth: usize, xj: &DVector<f64>, acc: f64, path: &mut Vec<usize>) -> Result<()> {
                let p = self.prob;
                let nh = p.cfg.horizon;
                if depth == nh {
                    if (xj - self.x_s).norm() <= self.slack && self.best.as_ref().is_none_or(|(c, _)| acc < *c) {
                        self.best = Some((acc, path.clone()));
                    }
                    return Ok(());
                }
                if depth > 0 && !p.xd.region.contains(xj, self.tol)? {
                    return Ok(());
                }
                let dx = xj - self.x_s;
                let state_cost = (dx.transpose() * &p.cfg.q * &dx)[0];
                let phi = p.sys.free_step(xj)?;
                for (i, u) in self.grid.iter().enumerate() {
                    let du = u - self.u_s;
                    let c = acc + state_cost + (du.transpose() * &p.cfg.r * &du)[0];
                    if self.best.as_ref().is_some_and(|(b, _)| c >= *b) {
                        continue;
                    }
                    let next = &phi + p.sys.b() * u;
                    path.push(i);
                    self.go(depth + 1, &next, c, path)?;
                    path.pop();
                }
                Ok(())
            }
        }

        let mut search = Search {
            prob: self,
            grid: &grid,
            x_s: &pair.x_s,
            u_s: &pair.u_s,
            slack,
            tol,
            best: None,
        };
        search.go(0, x, 0.0, &mut Vec::with_capacity(nh))?;
        let Some((_, path)) = search.best else {
            let z = self.pack(&vec![pair.u_s.clone(); nh], &pair.x_s, &pair.u_s);
            return Ok(BruteForceSolution {
                solution: self.infeasible(x, &z, "no_feasible_grid_point", f64::INFINITY),
                terminal_slack: slack,
                grid_effect: f64::INFINITY,
            });
        };
        let u_seq: Vec<DVector<f64>> = path.iter().map(|&i| grid[i].clone()).collect();
        let z = self.pack(&u_seq, &pair.x_s, &pair.u_s);
        let solution = self.assemble(x, &z, 0, 0)?;

        // repair the last input so the terminal constraint holds exactly
        let (xs, _) = self.rollout(x, &u_seq)?;
        let phi_last = self.sys.free_step(&xs[nh - 1])?;
        let mut repaired = u_seq.clone();
        repaired[nh - 1] = self.sys.b_pinv() * (&pair.x_s - phi_last);
        let repaired_cost = self.cost_eval(x, &repaired, &pair.x_s, &pair.u_s)?;
        Ok(BruteForceSolution {
            grid_effect: (repaired_cost - solution.cost).abs(),
            solution,
            terminal_slack: slack,
        })
    }
}

fn better(cand: &MpcSolution, best: Option<&MpcSolution>) -> bool {
    let Some(b) = best else { return true };
    let cc = cand.status == SolveStatus::Converged;
    let bc = b.status == SolveStatus::Converged;
    match (cc, bc) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => cand.cost < b.cost,
        (false, false) => {
            let v = |s: &MpcSolution| s.constraint_residuals.values().cloned().fold(0.0, f64::max);
            v(cand) < v(b)
        }
    }
}

/// Grid-search result with the terminal slack used as a hard filter and
/// the cost change from repairing the last input to hit `x_s` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForceSolution {
    pub solution: MpcSolution,
    pub terminal_slack: f64,
    pub grid_effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub status: SolveStatus,
    pub cost: f64,
    pub iterations: usize,
    pub used_warm_candidate: bool,
}

/// Receding-horizon law `κ_MPC`: each call solves the problem and applies
/// the first input, keeping the solution as the next warm start.
pub struct KappaMpc<'a> {
    prob: &'a MpcProblem,
    warm: Option<MpcSolution>,
    pub history: Vec<SolveRecord>,
    pub solutions: Vec<MpcSolution>,
    pub keep_solutions: bool,
}

impl<'a> KappaMpc<'a> {
    pub fn new(prob: &'a MpcProblem) -> Self {
        KappaMpc {
            prob,
            warm: None,
            history: Vec::new(),
            solutions: Vec::new(),
            keep_solutions: false,
        }
    }

    pub fn last_solution(&self) -> Option<&MpcSolution> {
        self.warm.as_ref()
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }
}

impl Controller for KappaMpc<'_> {
    fn control(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let sol = self.prob.solve(x, self.warm.as_ref())?;
        self.history.push(SolveRecord {
            status: sol.status,
            cost: sol.cost,
            iterations: sol.iterations,
            used_warm_candidate: sol.used_warm_candidate,
        });
        let u = sol.u_seq[0].clone();
        if self.keep_solutions {
            self.solutions.push(sol.clone());
        }
        self.warm = Some(sol);
        Ok(u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{IntegratorConfig, VectorField};
    use crate::equilibria::{EquilibriumPair, XdMethod};
    use crate::geometry::Region;

    fn toy(gamma: f64, horizon: usize, pin: bool) -> MpcProblem {
        let sys = ImpulsiveSystem::new(
            VectorField::linear(DMatrix::from_element(1, 1, -1.0)),
            DMatrix::identity(1, 1),
            std::f64::consts::LN_2,
            BoxSet::cube(1, -10.0, 10.0).unwrap(),
            BoxSet::cube(1, -10.0, 10.0).unwrap(),
            IntegratorConfig::default(),
        )
        .unwrap();
        let pair = EquilibriumPair {
            x_s: DVector::zeros(1),
            u_s: DVector::zeros(1),
            residual: 0.0,
        };
        let target = EquilibriumSetApprox::from_pairs(&sys, vec![pair], 10).unwrap();
        let xd = FeasibleSetResult {
            region: Region::Box(BoxSet::cube(1, -10.0, 10.0).unwrap()),
            method: XdMethod::MeshHull,
            certificate: vec![],
            orbit_resolution: 10,
            shrink_rounds: 0,
        };
        let mut cfg = MpcConfig::new(horizon, DMatrix::identity(1, 1), DMatrix::identity(1, 1), gamma);
        cfg.pin_reference = pin;
        MpcProblem::new(sys, cfg, target, xd).unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn toy_stage_cost() {
        let p = toy(0.0, 1, false);
        let c = p.cost_eval(&v(&[1.0]), &[v(&[0.0])], &v(&[0.0]), &v(&[0.0])).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn zero_cost_at_stored_pair() {
        let p = toy(1.0, 3, false);
        let sol = p.solve(&v(&[0.0]), None).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!(sol.cost <= 1e-6);
        assert!(sol.u_seq.iter().all(|u| u[0].abs() < 1e-6));
    }

    #[test]
    fn distance_penalty_grows_with_offset() {
        let p = toy(2.0, 1, false);
        let c1 = p.cost_eval(&v(&[0.01]), &[v(&[0.005])], &v(&[0.01]), &v(&[0.005])).unwrap();
        let c2 = p.cost_eval(&v(&[0.02]), &[v(&[0.01])], &v(&[0.02]), &v(&[0.01])).unwrap();
        assert!(c1 > 0.0);
        assert!((c2 - 2.0 * c1).abs() < 1e-12);
    }

    #[test]
    fn toy_two_step_optimum() {
        // min 1 + u0² + (0.5 + u0)² (1 + 1/4) → u0 = −5/18, J = 41/36
        let p = toy(0.0, 2, true);
        let sol = p.solve(&v(&[1.0]), None).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged, "{sol:?}");
        assert!((sol.cost - 41.0 / 36.0).abs() < 1e-6, "{}", sol.cost);
        assert!((sol.u_seq[0][0] + 5.0 / 18.0).abs() < 1e-5);
        for j in 0..2 {
            let next = p.sys().discrete_step(&sol.x_pred[j], &sol.u_seq[j]).unwrap();
            assert!((next - &sol.x_pred[j + 1]).amax() < 1e-8);
        }
    }

    #[test]
    fn brute_force_brackets_optimum() {
        let p = toy(0.0, 2, true);
        let bf = p.brute_force_solve(&v(&[1.0]), 401).unwrap();
        let exact = 41.0 / 36.0;
        assert!((bf.solution.cost - exact).abs() <= bf.grid_effect.max(1e-3) * 2.0);
        let zero = p.brute_force_solve(&v(&[0.0]), 401).unwrap();
        assert_eq!(zero.solution.cost, 0.0);
    }

    #[test]
    fn outside_xd_is_infeasible() {
        let p = toy(0.0, 2, true);
        let sol = p.solve(&v(&[50.0]), None).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn kappa_is_deterministic() {
        let p = toy(0.0, 2, true);
        let mut k1 = KappaMpc::new(&p);
        let mut k2 = KappaMpc::new(&p);
        let a = k1.control(&v(&[2.0])).unwrap();
        let b = k2.control(&v(&[2.0])).unwrap();
        assert_eq!(a, b);
    }
}
