//! Convex hulls of point clouds in low dimension.
//!
//! Hulls are built with Quickhull on the affine hull of the input (so
//! flat inputs such as collinear points are handled in their own
//! coordinates). The result keeps both representations: the extreme
//! vertices, which define the region, and the facet half-spaces, which
//! the controller uses as smooth inequality constraints.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::geometry::{BoxSet, PointCloud};
use crate::linalg::affine_basis;
use crate::lp::fit_convex_combination;
use crate::serde_nalgebra;

/// Largest dimension handled by Quickhull. Above it the region keeps all
/// extreme input points and membership is decided by the LP alone.
pub const MAX_QUICKHULL_DIM: usize = 4;

/// Tolerance for discarding non-extreme vertices.
pub const EXTREME_TOL: f64 = 1e-10;

/// Half-space `normal·x ≤ offset` in ambient coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    #[serde(with = "serde_nalgebra::vector")]
    pub normal: DVector<f64>,
    pub offset: f64,
}

/// Convex hull in vertex representation, with cached facet half-spaces
/// and, for flat hulls, the orthonormal basis of the affine hull.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexHullRegion {
    #[serde(with = "serde_nalgebra::vector_list")]
    vertices: Vec<DVector<f64>>,
    facets: Vec<HalfSpace>,
    #[serde(with = "serde_nalgebra::vector")]
    origin: DVector<f64>,
    #[serde(with = "serde_nalgebra::matrix")]
    basis: DMatrix<f64>,
}

impl ConvexHullRegion {
    pub fn vertices(&self) -> &[DVector<f64>] {
        &self.vertices
    }

    pub fn facets(&self) -> &[HalfSpace] {
        &self.facets
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    /// Dimension of the affine hull.
    pub fn affine_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn is_full_dimensional(&self) -> bool {
        self.affine_dim() == self.dim()
    }

    pub fn centroid(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.dim());
        for v in &self.vertices {
            c += v;
        }
        c / self.vertices.len() as f64
    }

    pub fn bounding_box(&self) -> BoxSet {
        let n = self.dim();
        let lower = DVector::from_fn(n, |i, _| {
            self.vertices.iter().map(|v| v[i]).fold(f64::INFINITY, f64::min)
        });
        let upper = DVector::from_fn(n, |i, _| {
            self.vertices.iter().map(|v| v[i]).fold(f64::NEG_INFINITY, f64::max)
        });
        BoxSet::new(lower, upper).expect("vertex bounds are ordered")
    }

    /// L1 gap between `x` and its best convex combination of vertices.
    pub fn membership_residual(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(fit_convex_combination(&self.vertices, x).residual_l1)
    }

    /// Membership in the hull inflated by `tol`, decided by the LP.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        Ok(self.membership_residual(x)? <= tol)
    }

    /// Largest facet excess `max_i (aᵢ·x − bᵢ)` plus the distance to the
    /// affine hull. Nonpositive inside a full-dimensional hull.
    pub fn facet_violation(&self, x: &DVector<f64>) -> f64 {
        self.constraints(x)
            .into_iter()
            .map(|(g, _)| g)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn constraints(&self, x: &DVector<f64>) -> Vec<(f64, DVector<f64>)> {
        let mut out: Vec<(f64, DVector<f64>)> = self
            .facets
            .iter()
            .map(|h| (h.normal.dot(x) - h.offset, h.normal.clone()))
            .collect();
        if !self.is_full_dimensional() {
            let rel = x - &self.origin;
            let off = &rel - &self.basis * (self.basis.transpose() * &rel);
            let norm = off.norm();
            let grad = if norm > 0.0 { &off / norm } else { DVector::zeros(x.len()) };
            out.push((norm, grad));
        }
        if self.facets.is_empty() && self.is_full_dimensional() {
            let r = fit_convex_combination(&self.vertices, x).residual_l1;
            out.push((r, DVector::zeros(x.len())));
        }
        out
    }

    /// The hull scaled about its vertex centroid by `factor`.
    pub fn shrink(&self, factor: f64) -> ConvexHullRegion {
        let c = self.centroid();
        let vertices: Vec<DVector<f64>> = self
            .vertices
            .iter()
            .map(|v| &c + (v - &c) * factor)
            .collect();
        let facets = self
            .facets
            .iter()
            .map(|h| HalfSpace {
                normal: h.normal.clone(),
                offset: h.normal.dot(&c) + factor * (h.offset - h.normal.dot(&c)),
            })
            .collect();
        ConvexHullRegion {
            vertices,
            facets,
            origin: &c + (&self.origin - &c) * factor,
            basis: self.basis.clone(),
        }
    }
}

struct Facet {
    verts: Vec<usize>,
    normal: DVector<f64>,
    offset: f64,
    outside: Vec<usize>,
    alive: bool,
}

fn plane_through(pts: &[DVector<f64>], verts: &[usize], interior: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    let k = pts[verts[0]].len();
    let p0 = &pts[verts[0]];
    let mut normal = DVector::zeros(k);
    if k == 1 {
        normal[0] = 1.0;
    } else {
        let diffs = DMatrix::from_fn(k - 1, k, |i, j| pts[verts[i + 1]][j] - p0[j]);
        for j in 0..k {
            let minor = diffs.clone().remove_column(j);
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            normal[j] = sign * minor.determinant();
        }
    }
    let norm = normal.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    normal /= norm;
    let mut offset = normal.dot(p0);
    if normal.dot(interior) > offset {
        normal = -normal;
        offset = -offset;
    }
    Some((normal, offset))
}

/// Indices of `k + 1` affinely independent points, chosen greedily by
/// distance to the span of those already picked.
fn initial_simplex(pts: &[DVector<f64>]) -> Vec<usize> {
    let k = pts[0].len();
    let first = (0..pts.len())
        .min_by(|&a, &b| pts[a][0].partial_cmp(&pts[b][0]).unwrap())
        .unwrap();
    let mut chosen = vec![first];
    let mut basis: Vec<DVector<f64>> = Vec::new();
    while chosen.len() < k + 1 {
        let origin = &pts[chosen[0]];
        let (best, _) = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut r = p - origin;
                for b in &basis {
                    r -= b * b.dot(&r);
                }
                (i, r.norm())
            })
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        let mut r = &pts[best] - origin;
        for b in &basis {
            r -= b * b.dot(&r);
        }
        let n = r.norm();
        basis.push(r / n);
        chosen.push(best);
    }
    chosen
}

/// Quickhull on full-dimensional points; returns alive facets as
/// (vertex indices, normal, offset).
fn quickhull(pts: &[DVector<f64>], eps: f64) -> Vec<(Vec<usize>, DVector<f64>, f64)> {
    let k = pts[0].len();
    let simplex = initial_simplex(pts);
    let mut interior = DVector::zeros(k);
    for &i in &simplex {
        interior += &pts[i];
    }
    interior /= simplex.len() as f64;

    let mut facets: Vec<Facet> = Vec::new();
    for skip in 0..simplex.len() {
        let verts: Vec<usize> = simplex
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != skip)
            .map(|(_, &v)| v)
            .collect();
        if let Some((normal, offset)) = plane_through(pts, &verts, &interior) {
            facets.push(Facet {
                verts,
                normal,
                offset,
                outside: Vec::new(),
                alive: true,
            });
        }
    }
    let in_simplex: Vec<bool> = {
        let mut m = vec![false; pts.len()];
        for &i in &simplex {
            m[i] = true;
        }
        m
    };
    for (i, p) in pts.iter().enumerate() {
        if in_simplex[i] {
            continue;
        }
        assign(&mut facets, 0, i, p, eps);
    }

    while let Some(fi) = facets.iter().position(|f| f.alive && !f.outside.is_empty()) {
        let apex = {
            let f = &facets[fi];
            *f.outside
                .iter()
                .max_by(|&&a, &&b| {
                    let da = f.normal.dot(&pts[a]) - f.offset;
                    let db = f.normal.dot(&pts[b]) - f.offset;
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
        };
        let p = &pts[apex];
        let visible: Vec<usize> = facets
            .iter()
            .enumerate()
            .filter(|(_, f)| f.alive && f.normal.dot(p) - f.offset > eps)
            .map(|(i, _)| i)
            .collect();
        let mut ridge_count: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut ridge_order: Vec<Vec<usize>> = Vec::new();
        for &vi in &visible {
            let verts = &facets[vi].verts;
            for skip in 0..verts.len() {
                let mut ridge: Vec<usize> = verts
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != skip)
                    .map(|(_, &v)| v)
                    .collect();
                ridge.sort_unstable();
                let c = ridge_count.entry(ridge.clone()).or_insert(0);
                if *c == 0 {
                    ridge_order.push(ridge);
                }
                *c += 1;
            }
        }
        let mut orphans: Vec<usize> = Vec::new();
        for &vi in &visible {
            facets[vi].alive = false;
            orphans.append(&mut facets[vi].outside);
        }
        let first_new = facets.len();
        for ridge in ridge_order {
            if ridge_count[&ridge] != 1 {
                continue;
            }
            let mut verts = ridge;
            verts.push(apex);
            if let Some((normal, offset)) = plane_through(pts, &verts, &interior) {
                facets.push(Facet {
                    verts,
                    normal,
                    offset,
                    outside: Vec::new(),
                    alive: true,
                });
            }
        }
        for q in orphans {
            if q != apex {
                assign(&mut facets, first_new, q, &pts[q], eps);
            }
        }
    }
    facets
        .into_iter()
        .filter(|f| f.alive)
        .map(|f| (f.verts, f.normal, f.offset))
        .collect()
}

fn assign(facets: &mut [Facet], from: usize, idx: usize, p: &DVector<f64>, eps: f64) {
    let mut best: Option<(usize, f64)> = None;
    for (fi, f) in facets.iter().enumerate().skip(from) {
        if !f.alive {
            continue;
        }
        let d = f.normal.dot(p) - f.offset;
        if d > eps && best.is_none_or(|(_, bd)| d > bd) {
            best = Some((fi, d));
        }
    }
    if let Some((fi, _)) = best {
        facets[fi].outside.push(idx);
    }
}

fn drop_non_extreme(points: Vec<DVector<f64>>, tol: f64) -> Vec<DVector<f64>> {
    let mut kept = points;
    let mut i = 0;
    while i < kept.len() && kept.len() > 1 {
        let others: Vec<DVector<f64>> = kept
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| v.clone())
            .collect();
        if fit_convex_combination(&others, &kept[i]).residual_l1 <= tol {
            kept.remove(i);
        } else {
            i += 1;
        }
    }
    kept
}

fn dedup(points: &[DVector<f64>], tol: f64) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::new();
    for p in points {
        if !out.iter().any(|q| (p - q).amax() <= tol) {
            out.push(p.clone());
        }
    }
    out
}

/// Vertex set of the convex hull of a point cloud.
///
/// Flat inputs produce their lower-dimensional hull (two endpoints for
/// collinear points, a single point for repeated points).
pub fn convex_hull(cloud: &PointCloud) -> Result<ConvexHullRegion> {
    let points = cloud.points();
    let dim = cloud.dim();
    let scale = points
        .iter()
        .map(|p| p.amax())
        .fold(0.0, f64::max)
        .max(1.0);
    let (origin, basis) = affine_basis(points, 1e-10);
    let k = basis.ncols();
    let to_local = |p: &DVector<f64>| basis.transpose() * (p - &origin);
    let to_ambient = |y: &DVector<f64>| &origin + &basis * y;

    let (vertices, facets) = if k == 0 {
        (vec![points[0].clone()], Vec::new())
    } else if k > MAX_QUICKHULL_DIM {
        let verts = drop_non_extreme(dedup(points, EXTREME_TOL * scale), EXTREME_TOL * scale);
        (verts, Vec::new())
    } else {
        let local: Vec<DVector<f64>> = points.iter().map(to_local).collect();
        let eps = 1e-10 * scale * k as f64;
        let faces = quickhull(&local, eps);
        let mut idx: Vec<usize> = faces.iter().flat_map(|(v, _, _)| v.iter().cloned()).collect();
        idx.sort_unstable();
        idx.dedup();
        let candidates: Vec<DVector<f64>> = idx.iter().map(|&i| points[i].clone()).collect();
        let verts = drop_non_extreme(dedup(&candidates, EXTREME_TOL * scale), EXTREME_TOL * scale);
        let facets = faces
            .into_iter()
            .map(|(_, n, b)| {
                // local half-space n·y ≤ b with y = Uᵀ(x − o)
                let normal = &basis * n;
                let offset = b + normal.dot(&origin);
                HalfSpace { normal, offset }
            })
            .collect();
        let _ = to_ambient;
        (verts, facets)
    };
    check_dim(dim, vertices[0].len())?;
    Ok(ConvexHullRegion {
        vertices,
        facets,
        origin,
        basis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn sorted(mut vs: Vec<DVector<f64>>) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = vs.drain(..).map(|x| x.as_slice().to_vec()).collect();
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out
    }

    #[test]
    fn square_with_center_keeps_corners() {
        let cloud = PointCloud::new(vec![
            v(&[0.0, 0.0]),
            v(&[1.0, 0.0]),
            v(&[0.5, 0.5]),
            v(&[1.0, 1.0]),
            v(&[0.0, 1.0]),
        ])
        .unwrap();
        let h = convex_hull(&cloud).unwrap();
        assert_eq!(
            sorted(h.vertices().to_vec()),
            vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]
        );
        assert!(h.contains(&v(&[0.25, 0.75]), 0.0).unwrap());
        assert!(h.facet_violation(&v(&[0.25, 0.75])) < 0.0);
        assert!(h.facet_violation(&v(&[1.25, 0.75])) > 0.0);
    }

    #[test]
    fn collinear_points_give_endpoints() {
        let cloud = PointCloud::new(vec![
            v(&[0.5, 0.5]),
            v(&[0.0, 0.0]),
            v(&[2.0, 2.0]),
            v(&[1.0, 1.0]),
        ])
        .unwrap();
        let h = convex_hull(&cloud).unwrap();
        assert_eq!(sorted(h.vertices().to_vec()), vec![vec![0.0, 0.0], vec![2.0, 2.0]]);
        assert_eq!(h.affine_dim(), 1);
        assert!(h.contains(&v(&[1.5, 1.5]), 1e-9).unwrap());
        assert!(!h.contains(&v(&[1.5, 1.0]), 1e-9).unwrap());
        assert!(h.facet_violation(&v(&[1.5, 1.0])) > 0.0);
    }

    #[test]
    fn repeated_point_is_a_single_vertex() {
        let cloud = PointCloud::new(vec![v(&[1.0, 2.0, 3.0]); 4]).unwrap();
        let h = convex_hull(&cloud).unwrap();
        assert_eq!(h.vertices().len(), 1);
        assert!(h.contains(&v(&[1.0, 2.0, 3.0]), 0.0).unwrap());
    }

    #[test]
    fn random_cube_points_are_all_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<DVector<f64>> = (0..100)
            .map(|_| DVector::from_fn(3, |_, _| rng.random::<f64>()))
            .collect();
        let h = convex_hull(&PointCloud::new(pts.clone()).unwrap()).unwrap();
        assert!(h.vertices().len() < pts.len());
        for p in &pts {
            assert!(h.contains(p, 1e-9).unwrap());
            assert!(h.facet_violation(p) <= 1e-9);
        }
        // every vertex is extreme
        for (i, vert) in h.vertices().iter().enumerate() {
            let others: Vec<DVector<f64>> = h
                .vertices()
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, x)| x.clone())
                .collect();
            assert!(fit_convex_combination(&others, vert).residual_l1 > 1e-10);
        }
    }

    #[test]
    fn tesseract_grid_hull_has_sixteen_vertices() {
        let pts = BoxSet::cube(4, -1.0, 1.0).unwrap().grid(3);
        let h = convex_hull(&PointCloud::new(pts).unwrap()).unwrap();
        assert_eq!(h.vertices().len(), 16);
        assert!(h.facet_violation(&DVector::zeros(4)) < 0.0);
        assert!(h.facet_violation(&DVector::from_element(4, 1.01)) > 0.0);
    }

    #[test]
    fn one_dimensional_hull() {
        let cloud = PointCloud::new(vec![v(&[0.3]), v(&[-1.0]), v(&[2.0])]).unwrap();
        let h = convex_hull(&cloud).unwrap();
        assert_eq!(sorted(h.vertices().to_vec()), vec![vec![-1.0], vec![2.0]]);
        assert!(h.facet_violation(&v(&[2.5])) > 0.0);
        assert!(h.facet_violation(&v(&[0.0])) < 0.0);
    }

    #[test]
    fn shrink_moves_facets_with_vertices() {
        let pts = BoxSet::cube(2, 0.0, 2.0).unwrap().grid(2);
        let h = convex_hull(&PointCloud::new(pts).unwrap()).unwrap().shrink(0.5);
        assert!(h.contains(&v(&[1.4, 1.4]), 1e-12).unwrap());
        assert!(!h.contains(&v(&[1.6, 1.0]), 1e-12).unwrap());
        assert!(h.facet_violation(&v(&[1.6, 1.0])) > 0.0);
        assert!(h.facet_violation(&v(&[1.4, 1.4])) < 0.0);
    }
}
