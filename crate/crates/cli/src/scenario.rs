//! Scenario files: model, constraint sets, tuning and run parameters.
//!
//! A scenario is a TOML document. `builtin = "<name>"` starts from one of
//! the shipped scenarios and overrides any keys given next to it.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use izmpc::analysis::AnalysisOptions;
use izmpc::dynamics::{IntegratorConfig, VectorField};
use izmpc::equilibria::{TargetSearch, XdMethod, XdOptions};
use izmpc::geometry::BoxSet;
use izmpc::impulsive::ImpulsiveSystem;
use izmpc::models::{self, HivParams};
use izmpc::mpc::MpcConfig;

use crate::error::{CliError, Result};

pub const BUILTINS: [&str; 3] = ["lithium", "hiv", "toy1d"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Lithium,
    Hiv {
        #[serde(default)]
        params: HivParams,
    },
    Toy1d,
    /// `ẋ = Ax` with jump matrix `B`, both given row by row.
    Linear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
}

impl ModelSpec {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            ModelSpec::Lithium => (3, 1),
            ModelSpec::Hiv { .. } => (4, 1),
            ModelSpec::Toy1d => (1, 1),
            ModelSpec::Linear { a, b } => (a.len(), b.first().map_or(0, |r| r.len())),
        }
    }

    pub fn field_and_b(&self) -> Result<(VectorField, DMatrix<f64>)> {
        Ok(match self {
            ModelSpec::Lithium => (
                models::lithium_field(),
                DMatrix::from_column_slice(3, 1, &models::LITHIUM_B),
            ),
            ModelSpec::Hiv { params } => (
                models::hiv_field(*params),
                DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 0.0, 1.0]),
            ),
            ModelSpec::Toy1d => (
                VectorField::linear(DMatrix::from_element(1, 1, -1.0)),
                DMatrix::identity(1, 1),
            ),
            ModelSpec::Linear { a, b } => {
                let a = rows_to_matrix(a, "model.a")?;
                let b = rows_to_matrix(b, "model.b")?;
                if !a.is_square() || a.nrows() == 0 {
                    return Err(CliError::invalid("model.a", "must be a nonempty square matrix"));
                }
                if b.nrows() != a.nrows() || b.ncols() == 0 {
                    return Err(CliError::invalid("model.b", "must have one row per state and at least one column"));
                }
                (VectorField::linear(a), b)
            }
        })
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return Err(CliError::invalid(field, "rows have different lengths"));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSpec {
    fn new(lower: &[f64], upper: &[f64]) -> Self {
        BoxSpec {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
        }
    }

    fn of(b: &BoxSet) -> Self {
        BoxSpec::new(b.lower().as_slice(), b.upper().as_slice())
    }

    pub fn to_box(&self, field: &str, dim: usize) -> Result<BoxSet> {
        if self.lower.len() != dim || self.upper.len() != dim {
            return Err(CliError::invalid(field, format!("bounds must have length {dim}")));
        }
        BoxSet::from_slices(&self.lower, &self.upper).map_err(|e| CliError::invalid(field, e.to_string()))
    }
}

/// A weight matrix: a scalar times the identity, a diagonal, or full rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Weight {
    pub fn to_matrix(&self, dim: usize, field: &str) -> Result<DMatrix<f64>> {
        match self {
            Weight::Scalar(s) => Ok(DMatrix::identity(dim, dim) * *s),
            Weight::Diagonal(d) if d.len() == dim => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d))),
            Weight::Full(rows) if rows.len() == dim => {
                let m = rows_to_matrix(rows, field)?;
                if m.ncols() != dim {
                    return Err(CliError::invalid(field, format!("must be {dim}x{dim}")));
                }
                Ok(m)
            }
            _ => Err(CliError::invalid(field, format!("must be a scalar, a length-{dim} diagonal or a {dim}x{dim} matrix"))),
        }
    }
}

fn default_solver_tol() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    200
}
fn default_penalty_init() -> f64 {
    10.0
}
fn default_penalty_growth() -> f64 {
    10.0
}
fn default_max_outer() -> usize {
    12
}
fn default_orbit_check() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSpec {
    pub horizon: usize,
    pub q: Weight,
    pub r: Weight,
    pub gamma: f64,
    #[serde(default = "default_solver_tol")]
    pub solver_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_penalty_init")]
    pub penalty_init: f64,
    #[serde(default = "default_penalty_growth")]
    pub penalty_growth: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_orbit_check")]
    pub orbit_check_resolution: usize,
    #[serde(default)]
    pub pin_reference: bool,
    #[serde(default)]
    pub multistart: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    /// Closed-loop impulses `K`.
    pub impulses: usize,
    pub samples_per_period: usize,
    /// Open-loop periods (u = 0) before the controller is engaged.
    #[serde(default)]
    pub warmup_periods: usize,
    #[serde(default)]
    pub first_jump_at_zero: bool,
}

fn default_lipschitz_grid() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSpec {
    pub method: XdMethod,
    /// Mesh points per dimension for the mesh-hull construction.
    pub mesh_per_dim: usize,
    /// Time samples per period in every feasibility check.
    pub orbit_resolution: usize,
    pub target_grid: usize,
    #[serde(default = "default_true")]
    pub refine: bool,
    #[serde(default = "default_n_check")]
    pub n_check: usize,
    /// Center of the Lipschitz ball; defaults to the first target pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ball_center: Option<Vec<f64>>,
    #[serde(default = "default_lipschitz_grid")]
    pub lipschitz_grid: usize,
}

fn default_true() -> bool {
    true
}
fn default_n_check() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub model: ModelSpec,
    /// Impulse period `T`.
    pub period: f64,
    pub x: BoxSpec,
    pub u: BoxSpec,
    pub xstar: BoxSpec,
    pub x0: Vec<Vec<f64>>,
    pub mpc: MpcSpec,
    pub sim: SimSpec,
    pub sets: SetSpec,
    #[serde(default)]
    pub analysis: AnalysisOptions,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub seed: u64,
    /// Input grid for the brute-force cross-check of the first solve; needs
    /// a single target pair and `N·m ≤ 3`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_grid: Option<usize>,
}

/// Everything a run needs, built from a validated scenario.
pub struct Built {
    pub sys: ImpulsiveSystem,
    pub xstar: BoxSet,
    pub x0: Vec<DVector<f64>>,
    pub mpc: MpcConfig,
    pub search: TargetSearch,
    pub xd_options: XdOptions,
}

impl Scenario {
    pub fn builtin(name: &str) -> Result<Scenario> {
        match name {
            "lithium" => Ok(lithium()),
            "hiv" => Ok(hiv()),
            "toy1d" => Ok(toy1d()),
            other => Err(CliError::invalid(
                "builtin",
                format!("unknown builtin {other:?}, expected one of {}", BUILTINS.join(", ")),
            )),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Scenario> {
        let mut table: toml::Table = text.parse()?;
        let scenario: Scenario = match table.remove("builtin") {
            Some(toml::Value::String(name)) => {
                let mut base = toml::Table::try_from(Scenario::builtin(&name)?)?;
                merge(&mut base, table);
                base.try_into()?
            }
            Some(_) => return Err(CliError::invalid("builtin", "must be a string")),
            None => table.try_into()?,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Checks every invariant and assembles the library objects.
    pub fn build(&self) -> Result<Built> {
        let (n, m) = self.model.dims();
        if n == 0 || m == 0 {
            return Err(CliError::invalid("model", "state and input dimensions must be positive"));
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(CliError::invalid("period", "must be positive"));
        }
        let x = self.x.to_box("x", n)?;
        let u = self.u.to_box("u", m)?;
        let xstar = self.xstar.to_box("xstar", n)?;
        if !xstar.is_subset_of(&x, 0.0) {
            return Err(CliError::invalid("xstar", "target box must lie inside x"));
        }
        if self.x0.is_empty() {
            return Err(CliError::invalid("x0", "at least one initial state is required"));
        }
        let mut x0 = Vec::with_capacity(self.x0.len());
        for (i, v) in self.x0.iter().enumerate() {
            let field = format!("x0[{i}]");
            if v.len() != n {
                return Err(CliError::invalid(&field, format!("must have length {n}")));
            }
            let v = DVector::from_column_slice(v);
            if !x.contains(&v, 0.0).unwrap_or(false) {
                return Err(CliError::invalid(&field, "initial state lies outside x"));
            }
            x0.push(v);
        }
        for (field, value) in [
            ("sim.samples_per_period", self.sim.samples_per_period),
            ("sets.mesh_per_dim", self.sets.mesh_per_dim),
            ("sets.orbit_resolution", self.sets.orbit_resolution),
            ("sets.target_grid", self.sets.target_grid),
            ("sets.lipschitz_grid", self.sets.lipschitz_grid),
            ("mpc.horizon", self.mpc.horizon),
        ] {
            if value == 0 {
                return Err(CliError::invalid(field, "must be positive"));
            }
        }
        if self.oracle_grid == Some(0) || self.oracle_grid == Some(1) {
            return Err(CliError::invalid("oracle_grid", "needs at least 2 points per input"));
        }
        if let Some(c) = &self.sets.ball_center {
            if c.len() != n {
                return Err(CliError::invalid("sets.ball_center", format!("must have length {n}")));
            }
        }
        if !(self.analysis.eps > 0.0) || !(self.analysis.settle_fraction > 0.0 && self.analysis.settle_fraction < 1.0) {
            return Err(CliError::invalid("analysis", "eps > 0 and 0 < settle_fraction < 1 required"));
        }
        self.integrator
            .validate()
            .map_err(|e| CliError::invalid("integrator", e.to_string()))?;

        let mut mpc = MpcConfig::new(
            self.mpc.horizon,
            self.mpc.q.to_matrix(n, "mpc.q")?,
            self.mpc.r.to_matrix(m, "mpc.r")?,
            self.mpc.gamma,
        );
        mpc.solver_tol = self.mpc.solver_tol;
        mpc.max_iter = self.mpc.max_iter;
        mpc.penalty_init = self.mpc.penalty_init;
        mpc.penalty_growth = self.mpc.penalty_growth;
        mpc.max_outer = self.mpc.max_outer;
        mpc.orbit_check_resolution = self.mpc.orbit_check_resolution;
        mpc.pin_reference = self.mpc.pin_reference;
        mpc.multistart = self.mpc.multistart;
        mpc.seed = self.seed;
        mpc.validate(n, m).map_err(|e| CliError::invalid("mpc", e.to_string()))?;

        let (field, b) = self.model.field_and_b()?;
        if b.nrows() != n || b.ncols() != m {
            return Err(CliError::invalid("model.b", format!("must be {n}x{m}")));
        }
        let sys = ImpulsiveSystem::new(field, b, self.period, x, u, self.integrator)
            .map_err(|e| CliError::invalid("model", e.to_string()))?;
        let search = TargetSearch {
            grid_per_dim: self.sets.target_grid,
            refine: self.sets.refine,
            orbit_resolution: self.sets.orbit_resolution,
            ..Default::default()
        };
        let xd_options = XdOptions {
            n_check: self.sets.n_check,
            seed: self.seed,
            ..Default::default()
        };
        Ok(Built {
            sys,
            xstar,
            x0,
            mpc,
            search,
            xd_options,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.build().map(|_| ())
    }
}

/// Loads a scenario file, or a builtin when `path` names one and no such
/// file exists.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    if !path.exists() {
        if let Some(name) = path.to_str().filter(|p| BUILTINS.contains(p)) {
            let s = Scenario::builtin(name)?;
            s.validate()?;
            return Ok(s);
        }
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Scenario::from_toml(&text)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn lithium() -> Scenario {
    Scenario {
        name: "lithium".into(),
        model: ModelSpec::Lithium,
        period: models::LITHIUM_PERIOD,
        x: BoxSpec::of(&models::lithium_state_bounds()),
        u: BoxSpec::of(&models::lithium_input_bounds()),
        xstar: BoxSpec::of(&models::lithium_target()),
        x0: models::lithium_initial_states().iter().map(|v| v.as_slice().to_vec()).collect(),
        mpc: MpcSpec {
            horizon: 5,
            q: Weight::Diagonal(vec![1.0, 1.0, 1.0]),
            r: Weight::Scalar(2.0),
            gamma: 100.0,
            solver_tol: default_solver_tol(),
            max_iter: default_max_iter(),
            penalty_init: default_penalty_init(),
            penalty_growth: default_penalty_growth(),
            max_outer: default_max_outer(),
            orbit_check_resolution: default_orbit_check(),
            pin_reference: false,
            multistart: 0,
        },
        sim: SimSpec {
            impulses: 60,
            samples_per_period: 50,
            warmup_periods: 0,
            first_jump_at_zero: false,
        },
        sets: SetSpec {
            method: XdMethod::MeshHull,
            mesh_per_dim: 41,
            orbit_resolution: 50,
            target_grid: 15,
            refine: true,
            n_check: default_n_check(),
            ball_center: None,
            lipschitz_grid: default_lipschitz_grid(),
        },
        analysis: AnalysisOptions {
            eps: 0.05,
            settle_fraction: 0.3,
        },
        integrator: IntegratorConfig::default(),
        seed: 0,
        oracle_grid: None,
    }
}

fn hiv() -> Scenario {
    Scenario {
        name: "hiv".into(),
        model: ModelSpec::Hiv {
            params: HivParams::default(),
        },
        period: models::HIV_PERIOD,
        x: BoxSpec::of(&models::hiv_state_bounds()),
        u: BoxSpec::of(&models::hiv_input_bounds()),
        xstar: BoxSpec::of(&models::hiv_target()),
        x0: vec![models::hiv_initial_state().as_slice().to_vec()],
        mpc: MpcSpec {
            horizon: 10,
            q: Weight::Scalar(5.0),
            r: Weight::Scalar(1.0),
            gamma: 5e6,
            solver_tol: default_solver_tol(),
            max_iter: default_max_iter(),
            penalty_init: default_penalty_init(),
            penalty_growth: default_penalty_growth(),
            max_outer: default_max_outer(),
            orbit_check_resolution: default_orbit_check(),
            pin_reference: false,
            multistart: 4,
        },
        sim: SimSpec {
            impulses: 400,
            samples_per_period: 10,
            warmup_periods: 40,
            first_jump_at_zero: false,
        },
        sets: SetSpec {
            method: XdMethod::MeshHull,
            mesh_per_dim: 7,
            orbit_resolution: 50,
            target_grid: 8,
            refine: true,
            n_check: default_n_check(),
            ball_center: None,
            lipschitz_grid: 8,
        },
        analysis: AnalysisOptions {
            eps: 10.0,
            settle_fraction: 0.1,
        },
        integrator: IntegratorConfig::default(),
        seed: 0,
        oracle_grid: None,
    }
}

fn toy1d() -> Scenario {
    Scenario {
        name: "toy1d".into(),
        model: ModelSpec::Toy1d,
        period: std::f64::consts::LN_2,
        x: BoxSpec::new(&[-10.0], &[10.0]),
        u: BoxSpec::new(&[-10.0], &[10.0]),
        xstar: BoxSpec::new(&[0.0], &[0.0]),
        x0: vec![vec![1.0], vec![-3.0], vec![4.5]],
        mpc: MpcSpec {
            horizon: 2,
            q: Weight::Scalar(1.0),
            r: Weight::Scalar(1.0),
            gamma: 0.0,
            solver_tol: default_solver_tol(),
            max_iter: default_max_iter(),
            penalty_init: default_penalty_init(),
            penalty_growth: default_penalty_growth(),
            max_outer: default_max_outer(),
            orbit_check_resolution: default_orbit_check(),
            pin_reference: true,
            multistart: 0,
        },
        sim: SimSpec {
            impulses: 20,
            samples_per_period: 20,
            warmup_periods: 0,
            first_jump_at_zero: false,
        },
        sets: SetSpec {
            method: XdMethod::MeshHull,
            mesh_per_dim: 41,
            orbit_resolution: 50,
            target_grid: 1,
            refine: false,
            n_check: default_n_check(),
            ball_center: None,
            lipschitz_grid: default_lipschitz_grid(),
        },
        analysis: AnalysisOptions {
            eps: 1e-3,
            settle_fraction: 0.3,
        },
        integrator: IntegratorConfig::default(),
        seed: 0,
        oracle_grid: Some(401),
    }
}
