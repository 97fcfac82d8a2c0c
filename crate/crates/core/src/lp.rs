//! Dense tableau simplex for the convex-combination feasibility problem
//!
//! ```text
//! min ‖Vλ − x‖₁  s.t.  λ ≥ 0, 1ᵀλ = 1
//! ```
//!
//! which decides hull membership: the optimum is zero exactly when `x`
//! is a convex combination of the columns of `V`.

use nalgebra::DVector;

const PIVOT_EPS: f64 = 1e-12;
const MAX_PIVOTS: usize = 50_000;

/// Optimal L1 residual and the convex weights attaining it.
#[derive(Debug, Clone)]
pub struct CombinationFit {
    pub residual_l1: f64,
    pub weights: Vec<f64>,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    cost: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.rows[row][col];
        for v in self.rows[row].iter_mut() {
            *v /= p;
        }
        self.rhs[row] /= p;
        let pivot_row = self.rows[row].clone();
        let pivot_rhs = self.rhs[row];
        for r in 0..self.rows.len() {
            if r == row {
                continue;
            }
            let f = self.rows[r][col];
            if f != 0.0 {
                for (v, pv) in self.rows[r].iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                self.rhs[r] -= f * pivot_rhs;
            }
        }
        self.basis[row] = col;
    }

    fn reduced_costs(&self) -> Vec<f64> {
        let mut rc = self.cost.clone();
        for (r, &b) in self.basis.iter().enumerate() {
            let cb = self.cost[b];
            if cb != 0.0 {
                for (j, v) in rc.iter_mut().enumerate() {
                    *v -= cb * self.rows[r][j];
                }
            }
        }
        rc
    }

    fn objective(&self) -> f64 {
        self.basis
            .iter()
            .zip(&self.rhs)
            .map(|(&b, v)| self.cost[b] * v)
            .sum()
    }
}

/// Best convex combination of `vertices` approximating `x` in the L1 sense.
pub fn fit_convex_combination(vertices: &[DVector<f64>], x: &DVector<f64>) -> CombinationFit {
    let k = vertices.len();
    let d = x.len();
    let nv = k + 2 * d;
    let mut rows = vec![vec![0.0; nv]; d + 1];
    let mut rhs = vec![0.0; d + 1];
    for i in 0..d {
        for (j, v) in vertices.iter().enumerate() {
            rows[i][j] = v[i];
        }
        rows[i][k + i] = 1.0;
        rows[i][k + d + i] = -1.0;
        rhs[i] = x[i];
    }
    for v in rows[d].iter_mut().take(k) {
        *v = 1.0;
    }
    rhs[d] = 1.0;
    let mut cost = vec![0.0; nv];
    for c in cost.iter_mut().skip(k) {
        *c = 1.0;
    }
    let mut t = Tableau {
        rows,
        rhs,
        cost,
        basis: vec![0; d + 1],
    };
    // Starting basis: λ₀ = 1 on the simplex row, then one slack per
    // coordinate with the sign that keeps the right-hand side nonnegative.
    t.pivot(d, 0);
    for i in 0..d {
        let col = if t.rhs[i] >= 0.0 { k + i } else { k + d + i };
        t.pivot(i, col);
    }

    let mut pivots = 0usize;
    loop {
        let rc = t.reduced_costs();
        let bland = pivots > 200;
        let entering = if bland {
            rc.iter().position(|&r| r < -PIVOT_EPS)
        } else {
            rc.iter()
                .enumerate()
                .filter(|(_, &r)| r < -PIVOT_EPS)
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
        };
        let Some(col) = entering else { break };
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..t.rows.len() {
            let a = t.rows[r][col];
            if a > PIVOT_EPS {
                let ratio = t.rhs[r] / a;
                let better = match leave {
                    None => true,
                    Some((lr, best)) => {
                        ratio < best - 1e-15 || (ratio <= best + 1e-15 && t.basis[r] < t.basis[lr])
                    }
                };
                if better {
                    leave = Some((r, ratio));
                }
            }
        }
        // The objective is bounded below by zero, so an entering column
        // always has a leaving row; a missing one signals round-off.
        let Some((row, _)) = leave else { break };
        t.pivot(row, col);
        pivots += 1;
        if pivots >= MAX_PIVOTS {
            break;
        }
    }

    let mut weights = vec![0.0; k];
    for (r, &b) in t.basis.iter().enumerate() {
        if b < k {
            weights[b] = t.rhs[r].max(0.0);
        }
    }
    CombinationFit {
        residual_l1: t.objective().max(0.0),
        weights,
    }
}
