//! Projection of RTO targets onto robust local feasible-descent cones.
//!
//! Each cone row demands descent against every gradient in a box:
//! `sup { g . (u - u_k) : g in [lo, hi] } <= -delta`. A row with a zero-width
//! box is the nominal (point-gradient) halfspace. The semi-infinite
//! requirement is equivalent to a finite slack reformulation (one slack per
//! row and coordinate, pairwise bounded by the low and high derivative rows),
//! which is what all feasibility checks solve. The projection itself is
//! computed exactly by outer linearization of the per-row piecewise-linear
//! constraint, which terminates after at most `2^n_u` cuts per row.

use thiserror::Error;

use crate::qp::{is_feasible, solve_least_distance, LinearSystem, QpError, QpOptions};
use crate::uncertainty::GradientBox;
use crate::vecops::{dot, sub};

#[derive(Debug, Error, PartialEq)]
pub enum ProjectionError {
    /// The descent cone is empty: a negative spanning exists among the
    /// demanded descent directions (stationarity evidence).
    #[error("projection infeasible: empty descent cone")]
    Infeasible,
    #[error("numerical failure in projection solve: {0}")]
    Numerical(&'static str),
    #[error("dimension mismatch in projection inputs")]
    Dimension,
}

impl From<QpError> for ProjectionError {
    fn from(e: QpError) -> Self {
        match e {
            QpError::Infeasible => ProjectionError::Infeasible,
            QpError::Numerical(m) => ProjectionError::Numerical(m),
            QpError::BadInput(_) => ProjectionError::Dimension,
        }
    }
}

/// Projection parameters with their scheduling ceilings and floors. All
/// values refer to range-scaled constraints and cost, for which the natural
/// ceiling is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub eps: Vec<f64>,
    pub delta_g: Vec<f64>,
    pub delta_phi: f64,
    pub eps_ceil: Vec<f64>,
    pub delta_g_ceil: Vec<f64>,
    pub delta_phi_ceil: f64,
    pub eps_floor: Vec<f64>,
    pub delta_g_floor: Vec<f64>,
    pub delta_phi_floor: f64,
    /// Robustness level in [0, 1]: 1 keeps the full gradient boxes, 0
    /// collapses them onto the estimates.
    pub p: f64,
}

impl ProjectionParams {
    pub fn scaled_default(n_g: usize) -> Self {
        Self::with_floor(n_g, 1e-6)
    }

    pub fn with_floor(n_g: usize, floor: f64) -> Self {
        assert!(floor > 0.0 && floor < 1.0);
        ProjectionParams {
            eps: vec![1.0; n_g],
            delta_g: vec![1.0; n_g],
            delta_phi: 1.0,
            eps_ceil: vec![1.0; n_g],
            delta_g_ceil: vec![1.0; n_g],
            delta_phi_ceil: 1.0,
            eps_floor: vec![floor; n_g],
            delta_g_floor: vec![floor; n_g],
            delta_phi_floor: floor,
            p: 1.0,
        }
    }

    /// Resets the schedule to the ceilings at full robustness.
    pub fn reset(&mut self) {
        self.eps = self.eps_ceil.clone();
        self.delta_g = self.delta_g_ceil.clone();
        self.delta_phi = self.delta_phi_ceil;
        self.p = 1.0;
    }

    pub fn halve(&mut self) {
        for e in &mut self.eps {
            *e *= 0.5;
        }
        for d in &mut self.delta_g {
            *d *= 0.5;
        }
        self.delta_phi *= 0.5;
    }

    /// Schedule value after `t` halvings from the ceilings.
    pub fn at_level(&self, t: u32) -> Self {
        let f = 0.5_f64.powi(t as i32);
        let mut out = self.clone();
        out.eps = self.eps_ceil.iter().map(|e| e * f).collect();
        out.delta_g = self.delta_g_ceil.iter().map(|d| d * f).collect();
        out.delta_phi = self.delta_phi_ceil * f;
        out
    }

    /// True when every scheduled parameter sits strictly below its floor,
    /// the declared-convergence condition.
    pub fn below_floors(&self) -> bool {
        self.eps.iter().zip(&self.eps_floor).all(|(e, f)| e < f)
            && self.delta_g.iter().zip(&self.delta_g_floor).all(|(d, f)| d < f)
            && self.delta_phi < self.delta_phi_floor
    }

    /// Number of halvings after which `below_floors` first holds.
    pub fn floor_level(&self) -> u32 {
        let mut t = 0u32;
        while !self.at_level(t).below_floors() && t < 64 {
            t += 1;
        }
        t
    }

    pub fn eps_min(&self) -> f64 {
        self.eps.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// One descent requirement against a gradient box.
#[derive(Debug, Clone)]
pub struct ConeRow {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub delta: f64,
}

impl ConeRow {
    pub fn point(grad: &[f64], delta: f64) -> Self {
        ConeRow { lo: grad.to_vec(), hi: grad.to_vec(), delta }
    }

    pub fn boxed(b: &GradientBox, delta: f64) -> Self {
        ConeRow { lo: b.lo.clone(), hi: b.hi.clone(), delta }
    }

    /// Worst-case descent value over the box for the move `delta_u`.
    pub fn worst_value(&self, delta_u: &[f64]) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(delta_u)
            .map(|((&l, &h), &d)| (l * d).max(h * d))
            .sum()
    }

    fn pattern_of(&self, delta_u: &[f64]) -> u64 {
        let mut bits = 0u64;
        for (i, &d) in delta_u.iter().enumerate() {
            if d >= 0.0 {
                bits |= 1 << i;
            }
        }
        bits
    }

    fn coeffs_for_pattern(&self, bits: u64) -> Vec<f64> {
        (0..self.lo.len())
            .map(|i| if bits & (1 << i) != 0 { self.hi[i] } else { self.lo[i] })
            .collect()
    }
}

/// A full projection instance: descent rows anchored at `u_k` plus the box.
#[derive(Debug, Clone)]
pub struct DescentCone {
    pub u_k: Vec<f64>,
    pub rows: Vec<ConeRow>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DescentCone {
    pub fn n_u(&self) -> usize {
        self.u_k.len()
    }

    /// Point-gradient system: one halfspace per row, using the box midpoint
    /// (rows are expected to be zero-width here).
    pub fn nominal_system(&self) -> LinearSystem {
        let n = self.n_u();
        let mut sys = LinearSystem::new(n);
        for row in &self.rows {
            let g: Vec<f64> = row.lo.iter().zip(&row.hi).map(|(l, h)| 0.5 * (l + h)).collect();
            let rhs = dot(&g, &self.u_k) - row.delta;
            sys.push_row(&g, rhs);
        }
        sys.push_box(&self.lo, &self.hi);
        sys
    }

    /// Finite slack reformulation of the semi-infinite cone: variables
    /// `(u, s_11..s_1n, ..., s_m1..s_mn)`, with per-coordinate low/high
    /// derivative rows bounding each slack and one budget row per cone row.
    pub fn slack_system(&self) -> LinearSystem {
        let n = self.n_u();
        let m = self.rows.len();
        let nv = n * (m + 1);
        let mut sys = LinearSystem::new(nv);
        for (f, row) in self.rows.iter().enumerate() {
            let base = n * (f + 1);
            let mut budget = vec![0.0; nv];
            for i in 0..n {
                budget[base + i] = 1.0;
            }
            sys.push_row(&budget, -row.delta);
            for i in 0..n {
                let mut lo_row = vec![0.0; nv];
                lo_row[i] = row.lo[i];
                lo_row[base + i] = -1.0;
                sys.push_row(&lo_row, row.lo[i] * self.u_k[i]);
                let mut hi_row = vec![0.0; nv];
                hi_row[i] = row.hi[i];
                hi_row[base + i] = -1.0;
                sys.push_row(&hi_row, row.hi[i] * self.u_k[i]);
            }
        }
        for i in 0..n {
            let mut r = vec![0.0; nv];
            r[i] = 1.0;
            sys.push_row(&r, self.hi[i]);
            r[i] = -1.0;
            sys.push_row(&r, -self.lo[i]);
        }
        sys
    }

    /// Feasibility of the cone through the slack reformulation.
    pub fn feasible(&self) -> Result<bool, ProjectionError> {
        Ok(is_feasible(&self.slack_system())?)
    }

    /// Exact minimizer of `||u - target||^2` over the cone, by outer
    /// linearization of the per-row worst-case constraints.
    pub fn project(&self, target: &[f64]) -> Result<Vec<f64>, ProjectionError> {
        if target.len() != self.n_u() {
            return Err(ProjectionError::Dimension);
        }
        let n = self.n_u();
        let opts = QpOptions::default();
        let viol_tol = 10.0 * opts.feas_tol;
        let seed_delta = sub(target, &self.u_k);
        let mut patterns: Vec<Vec<u64>> =
            self.rows.iter().map(|r| vec![r.pattern_of(&seed_delta)]).collect();
        let cap = self
            .rows
            .len()
            .saturating_mul(1usize << n.min(20))
            .saturating_add(2);

        for _ in 0..cap {
            let mut sys = LinearSystem::new(n);
            for (f, row) in self.rows.iter().enumerate() {
                for &bits in &patterns[f] {
                    let c = row.coeffs_for_pattern(bits);
                    let rhs = dot(&c, &self.u_k) - row.delta;
                    sys.push_row(&c, rhs);
                }
            }
            sys.push_box(&self.lo, &self.hi);
            let sol = solve_least_distance(target, &sys, &opts)?;
            let delta = sub(&sol.x, &self.u_k);
            let mut added = false;
            for (f, row) in self.rows.iter().enumerate() {
                if row.worst_value(&delta) > -row.delta + viol_tol {
                    let bits = row.pattern_of(&delta);
                    if !patterns[f].contains(&bits) {
                        patterns[f].push(bits);
                        added = true;
                    }
                }
            }
            if !added {
                return Ok(sol.x);
            }
        }
        Err(ProjectionError::Numerical("outer linearization failed to settle"))
    }
}

/// Point-gradient projection: descent halfspaces for the cost and each
/// active constraint, plus the input box.
pub fn project_nominal(
    u_target: &[f64],
    u_k: &[f64],
    cost_grad: &[f64],
    active_grads: &[&[f64]],
    active: &[usize],
    params: &ProjectionParams,
    lo: &[f64],
    hi: &[f64],
) -> Result<Vec<f64>, ProjectionError> {
    let mut rows = Vec::with_capacity(active.len() + 1);
    for (g, &j) in active_grads.iter().zip(active) {
        rows.push(ConeRow::point(g, params.delta_g[j]));
    }
    rows.push(ConeRow::point(cost_grad, params.delta_phi));
    let cone =
        DescentCone { u_k: u_k.to_vec(), rows, lo: lo.to_vec(), hi: hi.to_vec() };
    cone.project(u_target)
}

/// Robust projection: descent against every gradient in the supplied boxes
/// (already shrunk to the desired robustness level).
pub fn project_robust(
    u_target: &[f64],
    u_k: &[f64],
    cost_box: &GradientBox,
    active_boxes: &[&GradientBox],
    active: &[usize],
    params: &ProjectionParams,
    lo: &[f64],
    hi: &[f64],
) -> Result<Vec<f64>, ProjectionError> {
    let mut rows = Vec::with_capacity(active.len() + 1);
    for (b, &j) in active_boxes.iter().zip(active) {
        rows.push(ConeRow::boxed(b, params.delta_g[j]));
    }
    rows.push(ConeRow::boxed(cost_box, params.delta_phi));
    let cone =
        DescentCone { u_k: u_k.to_vec(), rows, lo: lo.to_vec(), hi: hi.to_vec() };
    cone.project(u_target)
}

/// Projection for a known cost: only the uncertain-constraint descent cones
/// and the box remain.
pub fn project_known_cost(
    u_target: &[f64],
    u_k: &[f64],
    active_boxes: &[&GradientBox],
    active: &[usize],
    params: &ProjectionParams,
    lo: &[f64],
    hi: &[f64],
) -> Result<Vec<f64>, ProjectionError> {
    let mut rows = Vec::with_capacity(active.len());
    for (b, &j) in active_boxes.iter().zip(active) {
        rows.push(ConeRow::boxed(b, params.delta_g[j]));
    }
    let cone =
        DescentCone { u_k: u_k.to_vec(), rows, lo: lo.to_vec(), hi: hi.to_vec() };
    cone.project(u_target)
}

/// Cost-row handling for the mixed known-element projections.
pub enum CostRowSpec<'a> {
    RobustBox(&'a GradientBox),
    Known(&'a [f64]),
    Absent,
}

/// Projection with a mix of uncertain (robust) and known (exact) constraint
/// rows. Known constraints contribute a descent halfspace only when active,
/// with their analytic gradients and the corresponding delta schedule.
#[allow(clippy::too_many_arguments)]
pub fn project_known_constraints(
    u_target: &[f64],
    u_k: &[f64],
    uncertain_boxes: &[&GradientBox],
    active_uncertain: &[usize],
    known_grads: &[&[f64]],
    active_known: &[usize],
    cost: CostRowSpec<'_>,
    params: &ProjectionParams,
    lo: &[f64],
    hi: &[f64],
) -> Result<Vec<f64>, ProjectionError> {
    let mut rows = Vec::new();
    for (b, &j) in uncertain_boxes.iter().zip(active_uncertain) {
        rows.push(ConeRow::boxed(b, params.delta_g[j]));
    }
    for (g, &j) in known_grads.iter().zip(active_known) {
        rows.push(ConeRow::point(g, params.delta_g[j]));
    }
    match cost {
        CostRowSpec::RobustBox(b) => rows.push(ConeRow::boxed(b, params.delta_phi)),
        CostRowSpec::Known(g) => rows.push(ConeRow::point(g, params.delta_phi)),
        CostRowSpec::Absent => {}
    }
    let cone =
        DescentCone { u_k: u_k.to_vec(), rows, lo: lo.to_vec(), hi: hi.to_vec() };
    cone.project(u_target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecops::norm2;

    fn params2() -> ProjectionParams {
        let mut p = ProjectionParams::scaled_default(3);
        p.delta_g = vec![1e-3; 3];
        p.delta_phi = 1e-3;
        p
    }

    #[test]
    fn schedule_halving_and_floors() {
        let mut p = ProjectionParams::scaled_default(2);
        assert!(!p.below_floors());
        for _ in 0..20 {
            p.halve();
        }
        assert!(p.below_floors());
        assert_eq!(p.floor_level(), 20);
        let lvl = p.at_level(3);
        assert!((lvl.eps[0] - 0.125).abs() < 1e-15);
        assert!((lvl.delta_phi - 0.125).abs() < 1e-15);
    }

    #[test]
    fn in_cone_target_is_unchanged() {
        // Cost gradient (-1, 0), target strictly descending, no active rows.
        let out = project_nominal(
            &[0.5, 0.4],
            &[0.0, 0.4],
            &[-1.0, 0.0],
            &[],
            &[],
            &params2(),
            &[-0.5, 0.0],
            &[0.5, 0.8],
        )
        .unwrap();
        assert!((out[0] - 0.5).abs() < 1e-10);
        assert!((out[1] - 0.4).abs() < 1e-10);
    }

    #[test]
    fn zero_cost_gradient_is_infeasible() {
        let r = project_nominal(
            &[0.1, 0.1],
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[],
            &[],
            &params2(),
            &[-1.0, -1.0],
            &[1.0, 1.0],
        );
        assert_eq!(r, Err(ProjectionError::Infeasible));
    }

    #[test]
    fn active_constraint_pushes_target() {
        // Constraint gradient (0, 1) forces descent in u2; target points up.
        let p = params2();
        let out = project_nominal(
            &[0.0, 0.5],
            &[0.0, 0.0],
            &[-1.0, 0.0],
            &[&[0.0, 1.0]],
            &[0],
            &p,
            &[-1.0, -1.0],
            &[1.0, 1.0],
        )
        .unwrap();
        assert!(out[1] <= -p.delta_g[0] + 1e-10);
    }

    #[test]
    fn degenerate_boxes_match_nominal() {
        let p = params2();
        let target = [0.37, 0.61];
        let u_k = [0.0, 0.4];
        let cg = [-1.0, 0.2];
        let g1 = [0.5, 1.0];
        let nom = project_nominal(
            &target, &u_k, &cg, &[&g1], &[0], &p, &[-0.5, 0.0], &[0.5, 0.8],
        )
        .unwrap();
        let rob = project_robust(
            &target,
            &u_k,
            &GradientBox::exact(&cg),
            &[&GradientBox::exact(&g1)],
            &[0],
            &p,
            &[-0.5, 0.0],
            &[0.5, 0.8],
        )
        .unwrap();
        assert!(norm2(&sub(&nom, &rob)) < 1e-8);
    }

    #[test]
    fn zero_in_cost_box_is_infeasible() {
        let b = GradientBox { lo: vec![-0.5, -0.5], hi: vec![0.5, 0.5], estimate: vec![0.0, 0.0] };
        let r = project_robust(
            &[0.2, 0.2],
            &[0.0, 0.0],
            &b,
            &[],
            &[],
            &params2(),
            &[-1.0, -1.0],
            &[1.0, 1.0],
        );
        assert_eq!(r, Err(ProjectionError::Infeasible));
    }

    #[test]
    fn robust_output_satisfies_all_vertex_gradients() {
        let p = params2();
        let cb = GradientBox { lo: vec![-1.2, -0.3], hi: vec![-0.6, 0.3], estimate: vec![-0.9, 0.0] };
        let gb = GradientBox { lo: vec![0.2, 0.8], hi: vec![0.8, 1.2], estimate: vec![0.5, 1.0] };
        let u_k = [0.0, 0.4];
        let out = project_robust(
            &[0.5, 0.41],
            &u_k,
            &cb,
            &[&gb],
            &[0],
            &p,
            &[-0.5, 0.0],
            &[0.5, 0.8],
        )
        .unwrap();
        let d = sub(&out, &u_k);
        for (bx, delta) in [(&cb, p.delta_phi), (&gb, p.delta_g[0])] {
            for bits in 0..4u64 {
                let g: Vec<f64> = (0..2)
                    .map(|i| if bits & (1 << i) != 0 { bx.hi[i] } else { bx.lo[i] })
                    .collect();
                assert!(dot(&g, &d) <= -delta + 1e-9);
            }
        }
    }

    #[test]
    fn known_cost_projection_is_weakly_closer() {
        let p = params2();
        let target = [0.3, 0.7];
        let u_k = [0.0, 0.4];
        let cb = GradientBox::exact(&[-1.0, 0.0]);
        let gb = GradientBox { lo: vec![0.4, 0.9], hi: vec![0.6, 1.1], estimate: vec![0.5, 1.0] };
        let without_cost = project_known_cost(
            &target, &u_k, &[&gb], &[0], &p, &[-0.5, 0.0], &[0.5, 0.8],
        )
        .unwrap();
        let with_cost = project_robust(
            &target, &u_k, &cb, &[&gb], &[0], &p, &[-0.5, 0.0], &[0.5, 0.8],
        )
        .unwrap();
        assert!(norm2(&sub(&without_cost, &target)) <= norm2(&sub(&with_cost, &target)) + 1e-12);
        // no active rows at all: the in-box target is returned unchanged
        let free = project_known_cost(&target, &u_k, &[], &[], &p, &[-0.5, 0.0], &[0.5, 0.8])
            .unwrap();
        assert!(norm2(&sub(&free, &target)) < 1e-12);
    }

    #[test]
    fn known_cost_zero_gradient_constraint_box_is_infeasible() {
        let p = params2();
        let gb = GradientBox { lo: vec![-0.1, -0.1], hi: vec![0.1, 0.1], estimate: vec![0.0, 0.0] };
        let r = project_known_cost(
            &[0.3, 0.7],
            &[0.0, 0.4],
            &[&gb],
            &[0],
            &p,
            &[-0.5, 0.0],
            &[0.5, 0.8],
        );
        assert_eq!(r, Err(ProjectionError::Infeasible));
    }

    #[test]
    fn known_constraint_row_projects_outward_target_inward() {
        let p = params2();
        // Known active constraint with gradient (1, 0): must move left.
        let out = project_known_constraints(
            &[0.4, 0.1],
            &[0.0, 0.0],
            &[],
            &[],
            &[&[1.0, 0.0]],
            &[0],
            CostRowSpec::Known(&[0.0, -1.0]),
            &p,
            &[-1.0, -1.0],
            &[1.0, 1.0],
        )
        .unwrap();
        assert!(out[0] <= -p.delta_g[0] + 1e-10);
        // Known gradient anti-parallel to every cost-box vertex: the known
        // row wants the first coordinate to grow, the cost row forbids it.
        let cb = GradientBox { lo: vec![0.9, -0.1], hi: vec![1.1, 0.1], estimate: vec![1.0, 0.0] };
        let r = project_known_constraints(
            &[0.4, 0.1],
            &[0.0, 0.0],
            &[],
            &[],
            &[&[-1.0, 0.0]],
            &[0],
            CostRowSpec::RobustBox(&cb),
            &p,
            &[-1.0, -1.0],
            &[1.0, 1.0],
        );
        assert_eq!(r, Err(ProjectionError::Infeasible));
    }

    #[test]
    fn slack_and_nominal_feasibility_agree_on_point_rows() {
        let grads: Vec<Vec<f64>> = vec![vec![-1.0, 0.3], vec![0.4, 1.0]];
        let rows: Vec<ConeRow> =
            grads.iter().map(|g| ConeRow::point(g, 0.01)).collect();
        let cone = DescentCone {
            u_k: vec![0.1, 0.2],
            rows,
            lo: vec![-1.0, -1.0],
            hi: vec![1.0, 1.0],
        };
        let nom = is_feasible(&cone.nominal_system()).unwrap();
        let slk = cone.feasible().unwrap();
        assert_eq!(nom, slk);
        assert!(nom);
    }
}
