//! Minimal dense solver for least-distance quadratic programs.
//!
//! Solves `minimize ||x - x0||^2 subject to A x <= b` with a dual active-set
//! method in the style of Goldfarb and Idnani: start from the unconstrained
//! minimizer `x0`, repeatedly add the most violated constraint, and take
//! partial dual steps (dropping blocking constraints) until the constraint
//! can be added with dual feasibility intact. Infeasibility of the polyhedron
//! is detected exactly, as a step that is unbounded in both the primal and
//! dual directions; this doubles as the phase-1 feasibility test used by
//! [`is_feasible`].
//!
//! The factorization `N = J [R; 0]` of the active-constraint normals is kept
//! up to date with Givens rotations. Ties in the active-set selection are
//! broken by lowest constraint index, which keeps runs bit-reproducible.

use thiserror::Error;

use crate::vecops::{all_finite, dot};

/// A finite system of linear inequalities `A x <= b`.
#[derive(Debug, Clone, Default)]
pub struct LinearSystem {
    /// Row-major coefficient matrix, `rows * n` entries.
    a: Vec<f64>,
    b: Vec<f64>,
    n: usize,
}

impl LinearSystem {
    pub fn new(n: usize) -> Self {
        LinearSystem { a: Vec::new(), b: Vec::new(), n }
    }

    pub fn push_row(&mut self, row: &[f64], rhs: f64) {
        assert_eq!(row.len(), self.n, "row length must match variable count");
        self.a.extend_from_slice(row);
        self.b.push(rhs);
    }

    /// Adds `lo <= x_i <= hi` for every coordinate.
    pub fn push_box(&mut self, lo: &[f64], hi: &[f64]) {
        assert_eq!(lo.len(), self.n);
        assert_eq!(hi.len(), self.n);
        for i in 0..self.n {
            let mut row = vec![0.0; self.n];
            row[i] = 1.0;
            self.push_row(&row, hi[i]);
            row[i] = -1.0;
            self.push_row(&row, -lo[i]);
        }
    }

    pub fn n_vars(&self) -> usize {
        self.n
    }

    pub fn n_rows(&self) -> usize {
        self.b.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.n..(i + 1) * self.n]
    }

    pub fn rhs(&self, i: usize) -> f64 {
        self.b[i]
    }

    pub fn is_valid(&self) -> bool {
        self.a.len() == self.b.len() * self.n && all_finite(&self.a) && all_finite(&self.b)
    }

    /// Largest violation `max_i (a_i . x - b_i)`, or 0 for an empty system.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        (0..self.n_rows())
            .map(|i| dot(self.row(i), x) - self.b[i])
            .fold(0.0_f64, f64::max)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    /// The polyhedron `A x <= b` is empty.
    #[error("infeasible: the constraint polyhedron is empty")]
    Infeasible,
    #[error("dimension mismatch or non-finite data: {0}")]
    BadInput(&'static str),
    #[error("numerical failure: {0}")]
    Numerical(&'static str),
}

/// Tolerances for the active-set solver.
#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    /// A constraint counts as violated when `a.x - b` exceeds this.
    pub feas_tol: f64,
    /// Target bound on KKT residuals, used by self-checks and tests.
    pub kkt_tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions { feas_tol: 1e-10, kkt_tol: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// One multiplier per constraint row; zero for inactive rows.
    pub lambda: Vec<f64>,
    /// Indices of the final active set.
    pub active: Vec<usize>,
    /// Number of constraint additions performed.
    pub additions: usize,
}

/// Projects `x0` onto `{x : A x <= b}`, returning the unique minimizer of
/// `||x - x0||^2`, or [`QpError::Infeasible`] when the set is empty.
pub fn project_point(x0: &[f64], sys: &LinearSystem) -> Result<Vec<f64>, QpError> {
    solve_least_distance(x0, sys, &QpOptions::default()).map(|s| s.x)
}

/// True iff `{x : A x <= b}` is nonempty, decided by a projection subproblem
/// whose infeasibility signal is a negative-spanning certificate.
pub fn is_feasible(sys: &LinearSystem) -> Result<bool, QpError> {
    let origin = vec![0.0; sys.n_vars()];
    match solve_least_distance(&origin, sys, &QpOptions::default()) {
        Ok(_) => Ok(true),
        Err(QpError::Infeasible) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Full least-distance solve with multipliers.
pub fn solve_least_distance(
    x0: &[f64],
    sys: &LinearSystem,
    opts: &QpOptions,
) -> Result<QpSolution, QpError> {
    match solve_inner(x0, sys, opts, false) {
        Err(QpError::Numerical(_)) => solve_inner(x0, sys, opts, true),
        other => other,
    }
}

fn solve_inner(
    x0: &[f64],
    sys: &LinearSystem,
    opts: &QpOptions,
    reversed: bool,
) -> Result<QpSolution, QpError> {
    let n = sys.n_vars();
    let m = sys.n_rows();
    if x0.len() != n || !sys.is_valid() || !all_finite(x0) {
        return Err(QpError::BadInput("inconsistent dimensions or non-finite entries"));
    }

    // Optional restart path: visit the rows in reverse order. The solved
    // problem is identical; only the pivoting path changes.
    let order: Vec<usize> = if reversed { (0..m).rev().collect() } else { (0..m).collect() };

    let mut norms = vec![0.0; m];
    for i in 0..m {
        norms[i] = dot(sys.row(i), sys.row(i)).sqrt();
        if norms[i] == 0.0 && sys.rhs(i) < -opts.feas_tol {
            // 0 <= b with b < 0 can never be satisfied.
            return Err(QpError::Infeasible);
        }
    }

    let mut x = x0.to_vec();
    // Column-major orthogonal accumulator, J = I initially.
    let mut jmat = vec![0.0; n * n];
    for i in 0..n {
        jmat[i * n + i] = 1.0;
    }
    // Row-major upper-triangular factor workspace.
    let mut rmat = vec![0.0; n * n];
    let mut active: Vec<usize> = Vec::with_capacity(n);
    let mut umul: Vec<f64> = Vec::with_capacity(n);

    let max_additions = 40 * (m + 1) + 100;
    let mut additions = 0usize;
    let mut d = vec![0.0; n];
    let mut r = vec![0.0; n];

    loop {
        // Most violated constraint, scaled by row norm; ties to lowest index.
        let mut pick: Option<usize> = None;
        let mut worst = 0.0;
        for &i in &order {
            if norms[i] == 0.0 || active.contains(&i) {
                continue;
            }
            let v = dot(sys.row(i), &x) - sys.rhs(i);
            if v <= opts.feas_tol {
                continue;
            }
            let scaled = v / norms[i];
            let better = match pick {
                None => true,
                Some(p) => scaled > worst || (scaled == worst && i < p),
            };
            if better {
                pick = Some(i);
                worst = scaled;
            }
        }
        let p = match pick {
            None => {
                let mut lambda = vec![0.0; m];
                for (j, &idx) in active.iter().enumerate() {
                    lambda[idx] = umul[j];
                }
                return Ok(QpSolution { x, lambda, active, additions });
            }
            Some(p) => p,
        };

        additions += 1;
        if additions > max_additions {
            return Err(QpError::Numerical("active-set iteration limit exceeded"));
        }

        // Work in the `c.x >= d` orientation for the added constraint.
        let chat: Vec<f64> = sys.row(p).iter().map(|v| -v).collect();
        let mut u_plus = 0.0;
        let mut inner_steps = 0usize;

        loop {
            inner_steps += 1;
            if inner_steps > 4 * (n + m) + 20 {
                return Err(QpError::Numerical("inner dual loop limit exceeded"));
            }

            let q = active.len();
            for k in 0..n {
                d[k] = dot(&jmat[k * n..(k + 1) * n], &chat);
            }
            let dnorm2 = dot(&d, &d);
            let dtail2: f64 = d[q..].iter().map(|v| v * v).sum();
            let have_primal = dtail2 > 1e-26 * (1.0 + dnorm2);

            // r = R^{-1} d_1
            for i in (0..q).rev() {
                let mut s = d[i];
                for j in i + 1..q {
                    s -= rmat[i * n + j] * r[j];
                }
                r[i] = s / rmat[i * n + i];
            }

            // Largest dual step before a multiplier hits zero; ties broken by
            // lowest constraint index.
            let mut t1 = f64::INFINITY;
            let mut idel: Option<usize> = None;
            for j in 0..q {
                if r[j] > 0.0 {
                    let t = umul[j] / r[j];
                    let take = match idel {
                        None => true,
                        Some(dj) => t < t1 || (t == t1 && active[j] < active[dj]),
                    };
                    if take {
                        t1 = t;
                        idel = Some(j);
                    }
                }
            }

            // Full primal step that brings the new constraint to equality.
            let shat = sys.rhs(p) - dot(sys.row(p), &x); // negative while violated
            let t2 = if have_primal { -shat / dtail2 } else { f64::INFINITY };

            if !t1.is_finite() && !t2.is_finite() {
                return Err(QpError::Infeasible);
            }
            let t = t1.min(t2);

            if have_primal && t.is_finite() {
                // z = J_2 d_2
                for k in q..n {
                    let col = &jmat[k * n..(k + 1) * n];
                    let step = t * d[k];
                    for i in 0..n {
                        x[i] += step * col[i];
                    }
                }
            }
            for j in 0..q {
                umul[j] -= t * r[j];
            }
            u_plus += t;

            if t2 <= t1 {
                // Add p to the active set.
                qr_add(&mut jmat, &mut d, q, n);
                for i in 0..=q {
                    rmat[i * n + q] = d[i];
                }
                active.push(p);
                umul.push(u_plus);
                break;
            }
            // Partial step: drop the blocking constraint and retry.
            let del = idel.expect("finite t1 implies a blocking index");
            qr_delete(&mut jmat, &mut rmat, del, q, n);
            active.remove(del);
            umul.remove(del);
        }
    }
}

/// Givens-rotate `J` so that the entries of `d` beyond position `q` vanish;
/// `d[q]` accumulates the norm of the zeroed tail.
fn qr_add(jmat: &mut [f64], d: &mut [f64], q: usize, n: usize) {
    for k in ((q + 1)..n).rev() {
        let b = d[k];
        if b == 0.0 {
            continue;
        }
        let a = d[k - 1];
        let h = a.hypot(b).copysign(if a == 0.0 { b } else { a });
        let gc = a / h;
        let gs = b / h;
        d[k - 1] = h;
        d[k] = 0.0;
        let (lo, hi) = jmat.split_at_mut(k * n);
        let col_a = &mut lo[(k - 1) * n..k * n];
        let col_b = &mut hi[..n];
        for i in 0..n {
            let t1 = col_a[i];
            let t2 = col_b[i];
            col_a[i] = gc * t1 + gs * t2;
            col_b[i] = -gs * t1 + gc * t2;
        }
    }
}

/// Removes column `del` from the q-column factor `R`, restoring triangularity
/// with row rotations mirrored onto the columns of `J`.
fn qr_delete(jmat: &mut [f64], rmat: &mut [f64], del: usize, q: usize, n: usize) {
    // Shift columns left.
    for j in del + 1..q {
        for i in 0..=j {
            rmat[i * n + (j - 1)] = rmat[i * n + j];
        }
    }
    let q_new = q - 1;
    // Eliminate the subdiagonal introduced by the shift.
    for i in del..q_new {
        let a = rmat[i * n + i];
        let b = rmat[(i + 1) * n + i];
        if b == 0.0 {
            continue;
        }
        let h = a.hypot(b).copysign(if a == 0.0 { b } else { a });
        let gc = a / h;
        let gs = b / h;
        rmat[i * n + i] = h;
        rmat[(i + 1) * n + i] = 0.0;
        for j in i + 1..q_new {
            let t1 = rmat[i * n + j];
            let t2 = rmat[(i + 1) * n + j];
            rmat[i * n + j] = gc * t1 + gs * t2;
            rmat[(i + 1) * n + j] = -gs * t1 + gc * t2;
        }
        let (lo, hi) = jmat.split_at_mut((i + 1) * n);
        let col_a = &mut lo[i * n..(i + 1) * n];
        let col_b = &mut hi[..n];
        for k in 0..n {
            let t1 = col_a[k];
            let t2 = col_b[k];
            col_a[k] = gc * t1 + gs * t2;
            col_b[k] = -gs * t1 + gc * t2;
        }
    }
}

/// KKT residuals of a candidate solution; used by tests and `verify`.
pub fn kkt_residuals(x0: &[f64], sys: &LinearSystem, sol: &QpSolution) -> (f64, f64, f64) {
    let n = sys.n_vars();
    // stationarity: (x - x0) + A^T lambda = 0
    let mut stat = vec![0.0; n];
    for i in 0..n {
        stat[i] = sol.x[i] - x0[i];
    }
    for (i, &l) in sol.lambda.iter().enumerate() {
        if l != 0.0 {
            for k in 0..n {
                stat[k] += l * sys.row(i)[k];
            }
        }
    }
    let stat_res = stat.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let mut comp = 0.0_f64;
    let mut feas = 0.0_f64;
    for i in 0..sys.n_rows() {
        let slack = dot(sys.row(i), &sol.x) - sys.rhs(i);
        feas = feas.max(slack);
        comp = comp.max((sol.lambda[i] * slack).abs());
    }
    (stat_res, comp, feas.max(0.0))
}
