//! Constraint and target sets, and the point/set distances used by the
//! controller and the stability analysis.
//!
//! Continuous sets such as orbits or equilibrium manifolds are always
//! handled through finite samplings ([`PointCloud`]); every caller chooses
//! and reports its own sampling density.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::hull::ConvexHullRegion;
use crate::serde_nalgebra;

/// Axis-aligned box `{x : lower ≤ x ≤ upper}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    #[serde(with = "serde_nalgebra::vector")]
    lower: DVector<f64>,
    #[serde(with = "serde_nalgebra::vector")]
    upper: DVector<f64>,
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(Error::InvalidConfig("box of dimension zero".into()));
        }
        for i in 0..lower.len() {
            if !(lower[i].is_finite() && upper[i].is_finite()) || lower[i] > upper[i] {
                return Err(Error::InvalidConfig(format!(
                    "box bound {i}: lower {} > upper {}",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn from_slices(lower: &[f64], upper: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(lower), DVector::from_column_slice(upper))
    }

    /// The box `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(DVector::from_element(dim, lo), DVector::from_element(dim, hi))
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.lower + &self.upper) / 2.0
    }

    pub fn widths(&self) -> DVector<f64> {
        &self.upper - &self.lower
    }

    /// Componentwise membership in the box inflated by `tol`.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        check_dim(self.dim(), x.len())?;
        Ok(self.contains_unchecked(x, tol))
    }

    pub(crate) fn contains_unchecked(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(xi, (lo, hi))| *xi >= lo - tol && *xi <= hi + tol)
    }

    /// Largest componentwise excursion outside the box (0 when inside).
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .map(|(xi, (lo, hi))| (lo - xi).max(xi - hi).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i].clamp(self.lower[i], self.upper[i]))
    }

    pub fn is_subset_of(&self, other: &BoxSet, tol: f64) -> bool {
        self.dim() == other.dim()
            && other.contains_unchecked(&self.lower, tol)
            && other.contains_unchecked(&self.upper, tol)
    }

    /// Box grown by `frac` of its width on every side.
    pub fn inflate_relative(&self, frac: f64) -> BoxSet {
        let w = self.widths() * frac;
        BoxSet {
            lower: &self.lower - &w,
            upper: &self.upper + &w,
        }
    }

    pub fn inflate(&self, tol: f64) -> BoxSet {
        BoxSet {
            lower: self.lower.add_scalar(-tol),
            upper: self.upper.add_scalar(tol),
        }
    }

    /// Tensor grid with `per_dim` points per axis including both ends.
    /// Degenerate axes contribute a single coordinate; `per_dim = 1` gives
    /// the center.
    pub fn grid(&self, per_dim: usize) -> Vec<DVector<f64>> {
        let n = self.dim();
        let axes: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let (lo, hi) = (self.lower[i], self.upper[i]);
                if per_dim <= 1 || hi == lo {
                    vec![(lo + hi) / 2.0]
                } else {
                    (0..per_dim)
                        .map(|k| lo + (hi - lo) * k as f64 / (per_dim - 1) as f64)
                        .collect()
                }
            })
            .collect();
        let total: usize = axes.iter().map(|a| a.len()).product();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; n];
        for _ in 0..total {
            out.push(DVector::from_fn(n, |i, _| axes[i][idx[i]]));
            for i in (0..n).rev() {
                idx[i] += 1;
                if idx[i] < axes[i].len() {
                    break;
                }
                idx[i] = 0;
            }
        }
        out
    }

    /// Grid spacing per axis for [`BoxSet::grid`].
    pub fn grid_spacing(&self, per_dim: usize) -> DVector<f64> {
        if per_dim <= 1 {
            return self.widths();
        }
        self.widths() / (per_dim - 1) as f64
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        })
    }
}

/// Closed Euclidean ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    #[serde(with = "serde_nalgebra::vector")]
    pub center: DVector<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::InvalidConfig(format!("negative ball radius {radius}")));
        }
        Ok(Self { center, radius })
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        check_dim(self.center.len(), x.len())?;
        Ok((x - &self.center).norm() <= self.radius + tol)
    }
}

/// Finite, nonempty set of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    #[serde(with = "serde_nalgebra::vector_list")]
    points: Vec<DVector<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<DVector<f64>>) -> Result<Self> {
        let first = points.first().ok_or(Error::EmptySet("point cloud"))?;
        let dim = first.len();
        for p in &points {
            check_dim(dim, p.len())?;
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<DVector<f64>> {
        self.points
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Index and distance of the nearest cloud point to `x`; ties go to the
/// lowest index.
pub fn nearest_in_cloud(x: &DVector<f64>, cloud: &PointCloud) -> Result<(usize, f64)> {
    check_dim(cloud.dim(), x.len())?;
    Ok(nearest_in_points(x, cloud.points()))
}

pub(crate) fn nearest_in_points(x: &DVector<f64>, points: &[DVector<f64>]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d2 = (x - p).norm_squared();
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    (best.0, best.1.sqrt())
}

/// `d(x, S) = min_{s∈S} ‖x − s‖`.
pub fn distance_point_to_cloud(x: &DVector<f64>, cloud: &PointCloud) -> Result<f64> {
    nearest_in_cloud(x, cloud).map(|(_, d)| d)
}

fn directed_hausdorff(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter()
        .map(|x| nearest_in_points(x, b).1)
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance between two finite clouds.
pub fn hausdorff_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(directed_hausdorff(a.points(), b.points()).max(directed_hausdorff(b.points(), a.points())))
}

/// Largest `r` with `B(center, r) ⊆ X`: the smallest slack to any face.
pub fn max_radius_in_box(center: &DVector<f64>, bounds: &BoxSet) -> Result<f64> {
    if !bounds.contains(center, 0.0)? {
        return Err(Error::OutsideDomain(format!(
            "ball center {:?} is not in the box",
            center.as_slice()
        )));
    }
    Ok((0..center.len())
        .map(|i| (center[i] - bounds.lower[i]).min(bounds.upper[i] - center[i]))
        .fold(f64::INFINITY, f64::min))
}

/// Any region the controller or the analysis may test membership in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    Box(BoxSet),
    Ball(Ball),
    Hull(ConvexHullRegion),
    /// `B(center, r) ∩ X`.
    BallInBox { ball: Ball, bounds: BoxSet },
}

impl Region {
    pub fn dim(&self) -> usize {
        match self {
            Region::Box(b) => b.dim(),
            Region::Ball(b) => b.center.len(),
            Region::Hull(h) => h.dim(),
            Region::BallInBox { bounds, .. } => bounds.dim(),
        }
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        match self {
            Region::Box(b) => b.contains(x, tol),
            Region::Ball(b) => b.contains(x, tol),
            Region::Hull(h) => h.contains(x, tol),
            Region::BallInBox { ball, bounds } => {
                Ok(ball.contains(x, tol)? && bounds.contains(x, tol)?)
            }
        }
    }

    /// Axis-aligned bounding box.
    pub fn bounding_box(&self) -> BoxSet {
        match self {
            Region::Box(b) => b.clone(),
            Region::Ball(b) => BoxSet {
                lower: b.center.add_scalar(-b.radius),
                upper: b.center.add_scalar(b.radius),
            },
            Region::Hull(h) => h.bounding_box(),
            Region::BallInBox { ball, bounds } => {
                let n = bounds.dim();
                BoxSet {
                    lower: DVector::from_fn(n, |i, _| {
                        (ball.center[i] - ball.radius).max(bounds.lower[i])
                    }),
                    upper: DVector::from_fn(n, |i, _| {
                        (ball.center[i] + ball.radius).min(bounds.upper[i])
                    }),
                }
            }
        }
    }

    /// Inequality constraints `g_i(x) ≤ 0` describing the region, with
    /// their gradients. Used as penalties by the controller.
    pub fn constraints(&self, x: &DVector<f64>) -> Vec<(f64, DVector<f64>)> {
        let n = x.len();
        let unit = |i: usize, s: f64| {
            let mut e = DVector::zeros(n);
            e[i] = s;
            e
        };
        let box_rows = |b: &BoxSet, out: &mut Vec<(f64, DVector<f64>)>| {
            for i in 0..n {
                out.push((x[i] - b.upper[i], unit(i, 1.0)));
                out.push((b.lower[i] - x[i], unit(i, -1.0)));
            }
        };
        let ball_row = |b: &Ball, out: &mut Vec<(f64, DVector<f64>)>| {
            let v = x - &b.center;
            let norm = v.norm();
            let grad = if norm > 0.0 { v / norm } else { DVector::zeros(n) };
            out.push((norm - b.radius, grad));
        };
        let mut out = Vec::new();
        match self {
            Region::Box(b) => box_rows(b, &mut out),
            Region::Ball(b) => ball_row(b, &mut out),
            Region::Hull(h) => out.extend(h.constraints(x)),
            Region::BallInBox { ball, bounds } => {
                ball_row(ball, &mut out);
                box_rows(bounds, &mut out);
            }
        }
        out
    }

    /// `n` uniform samples by rejection from the bounding box.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let bbox = self.bounding_box();
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        let cap = 10_000 * n.max(1);
        while out.len() < n {
            attempts += 1;
            if attempts > cap {
                return Err(Error::EmptySet("region has negligible volume for rejection sampling"));
            }
            let x = bbox.sample_uniform(rng);
            if self.contains(&x, 0.0)? {
                out.push(x);
            }
        }
        Ok(out)
    }
}
