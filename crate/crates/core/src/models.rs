//! Built-in case studies: a three-compartment lithium model, a four-state
//! HIV model with impulsive drug intake, and a scalar toy system.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{IntegratorConfig, VectorField};
use crate::error::Result;
use crate::geometry::BoxSet;
use crate::impulsive::ImpulsiveSystem;
use crate::mpc::MpcConfig;

pub const LITHIUM_A: [[f64; 3]; 3] = [
    [-0.6137, 0.1835, 0.2406],
    [1.2644, -0.8, 0.0],
    [0.2054, 0.0, -0.19],
];
pub const LITHIUM_B: [f64; 3] = [10.9, 0.0, 0.0];
pub const LITHIUM_PERIOD: f64 = 3.0;

pub fn lithium_a() -> DMatrix<f64> {
    DMatrix::from_fn(3, 3, |i, j| LITHIUM_A[i][j])
}

pub fn lithium_field() -> VectorField {
    VectorField::linear(lithium_a())
}

pub fn lithium_state_bounds() -> BoxSet {
    BoxSet::from_slices(&[0.0, 0.0, 0.0], &[2.0, 1.2, 1.2]).expect("valid box")
}

pub fn lithium_input_bounds() -> BoxSet {
    BoxSet::from_slices(&[0.0], &[5.95]).expect("valid box")
}

/// Therapeutic window.
pub fn lithium_target() -> BoxSet {
    BoxSet::from_slices(&[0.4, 0.6, 0.5], &[0.6, 0.9, 0.8]).expect("valid box")
}

pub fn lithium_system(integrator: IntegratorConfig) -> Result<ImpulsiveSystem> {
    ImpulsiveSystem::new(
        lithium_field(),
        DMatrix::from_column_slice(3, 1, &LITHIUM_B),
        LITHIUM_PERIOD,
        lithium_state_bounds(),
        lithium_input_bounds(),
        integrator,
    )
}

pub fn lithium_mpc() -> MpcConfig {
    MpcConfig::new(5, DMatrix::identity(3, 3), DMatrix::from_element(1, 1, 2.0), 100.0)
}

pub fn lithium_initial_states() -> Vec<DVector<f64>> {
    vec![
        DVector::from_column_slice(&[0.2, 0.0, 0.0]),
        DVector::from_column_slice(&[1.579, 0.0, 0.0]),
    ]
}

/// Parameters of the HIV model; time in days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HivParams {
    /// Source of healthy CD4+ cells.
    pub s: f64,
    pub delta: f64,
    pub beta: f64,
    pub mu: f64,
    pub k: f64,
    pub c: f64,
    /// Drug elimination rate.
    pub kw: f64,
    /// Drug level that halves virion production.
    pub w50: f64,
}

impl Default for HivParams {
    fn default() -> Self {
        HivParams {
            s: 10.0,
            delta: 0.02,
            beta: 2.4e-5,
            mu: 0.24,
            k: 100.0,
            c: 2.4,
            kw: 5.3,
            w50: 50.0,
        }
    }
}

impl HivParams {
    /// Basic reproduction number `βks / (μcδ)`.
    pub fn r0(&self) -> f64 {
        self.beta * self.k * self.s / (self.mu * self.c * self.delta)
    }

    /// Healthy-cell level of the untreated endemic equilibrium, `μc/(βk)`.
    pub fn endemic_tc(&self) -> f64 {
        self.mu * self.c / (self.beta * self.k)
    }

    /// Infection-free equilibrium `(s/δ, 0, 0, 0)`.
    pub fn healthy_state(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.s / self.delta, 0.0, 0.0, 0.0])
    }
}

/// State `(T_c, y, z, w)`: healthy cells, infected cells, free virions, drug.
pub fn hiv_field(p: HivParams) -> VectorField {
    VectorField::new(4, move |x| {
        let (tc, y, z, w) = (x[0], x[1], x[2], x[3]);
        let block = p.w50 / (w + p.w50);
        DVector::from_column_slice(&[
            p.s - p.delta * tc - p.beta * tc * z,
            p.beta * tc * z - p.mu * y,
            block * p.k * y - p.c * z,
            -p.kw * w,
        ])
    })
    .with_jacobian(move |x| {
        let (tc, y, z, w) = (x[0], x[1], x[2], x[3]);
        let den = w + p.w50;
        let block = p.w50 / den;
        DMatrix::from_row_slice(
            4,
            4,
            &[
                -p.delta - p.beta * z,
                0.0,
                -p.beta * tc,
                0.0,
                p.beta * z,
                -p.mu,
                p.beta * tc,
                0.0,
                0.0,
                block * p.k,
                -p.c,
                -p.k * y * p.w50 / (den * den),
                0.0,
                0.0,
                0.0,
                -p.kw,
            ],
        )
    })
}

pub const HIV_PERIOD: f64 = 0.5;

pub fn hiv_state_bounds() -> BoxSet {
    BoxSet::from_slices(&[0.0; 4], &[1200.0, 100.0, 3000.0, 1000.0]).expect("valid box")
}

pub fn hiv_input_bounds() -> BoxSet {
    BoxSet::from_slices(&[0.0], &[610.0]).expect("valid box")
}

pub fn hiv_target() -> BoxSet {
    BoxSet::from_slices(&[900.0, 0.0, 0.0, 0.0], &[1000.0, 5.0, 250.0, 650.0]).expect("valid box")
}

pub fn hiv_system(p: HivParams, integrator: IntegratorConfig) -> Result<ImpulsiveSystem> {
    ImpulsiveSystem::new(
        hiv_field(p),
        DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 0.0, 1.0]),
        HIV_PERIOD,
        hiv_state_bounds(),
        hiv_input_bounds(),
        integrator,
    )
}

pub fn hiv_mpc() -> MpcConfig {
    let mut cfg = MpcConfig::new(10, DMatrix::identity(4, 4) * 5.0, DMatrix::identity(1, 1), 5e6);
    cfg.multistart = 4;
    cfg
}

pub fn hiv_initial_state() -> DVector<f64> {
    DVector::from_column_slice(&[240.0, 63.33, 2639.0, 0.0])
}

/// `ẋ = −x`, `B = 1`, `T = ln 2`, so that `φ(x, T) = x/2`.
pub fn toy1d_system(integrator: IntegratorConfig) -> Result<ImpulsiveSystem> {
    ImpulsiveSystem::new(
        VectorField::linear(DMatrix::from_element(1, 1, -1.0)),
        DMatrix::identity(1, 1),
        std::f64::consts::LN_2,
        BoxSet::cube(1, -10.0, 10.0)?,
        BoxSet::cube(1, -10.0, 10.0)?,
        integrator,
    )
}
