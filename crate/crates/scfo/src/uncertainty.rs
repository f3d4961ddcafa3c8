//! Bounds machinery: gradient boxes, constraint-value upper bounds,
//! directional Lipschitz envelopes, concavity relaxations, and the quadratic
//! cost bound.
//!
//! Everything here operates on *scaled* quantities (constraints and cost
//! divided by their ranges) when driven by the supervisor, but no function in
//! this module assumes a particular scaling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::IterateState;

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("box multiplier m must be nonnegative")]
    NegativeM,
    #[error("gradient box required for concave coordinates of constraint {0}")]
    MissingGradientBox(usize),
    #[error("no measurement available at the current iterate")]
    EmptyHistory,
    #[error("dimension mismatch")]
    Dimension,
}

/// Componentwise interval `[lo, hi]` known to contain a gradient, together
/// with the point estimate it was built around.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub estimate: Vec<f64>,
}

impl GradientBox {
    /// Zero-width box: the estimate is trusted exactly.
    pub fn exact(estimate: &[f64]) -> Self {
        GradientBox { lo: estimate.to_vec(), hi: estimate.to_vec(), estimate: estimate.to_vec() }
    }

    pub fn is_degenerate(&self) -> bool {
        self.lo == self.hi
    }

    pub fn len(&self) -> usize {
        self.estimate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimate.is_empty()
    }

    /// True iff `other` is contained in `self` componentwise.
    pub fn contains_box(&self, other: &GradientBox) -> bool {
        self.lo
            .iter()
            .zip(&other.lo)
            .all(|(a, b)| a <= b)
            && self.hi.iter().zip(&other.hi).all(|(a, b)| a >= b)
    }
}

/// Symmetric interval `estimate +- m * sigma` around a gradient estimate.
pub fn build_gradient_box(
    estimate: &[f64],
    sigma: &[f64],
    m: f64,
) -> Result<GradientBox, UncertaintyError> {
    if m < 0.0 {
        return Err(UncertaintyError::NegativeM);
    }
    if estimate.len() != sigma.len() {
        return Err(UncertaintyError::Dimension);
    }
    let lo = estimate.iter().zip(sigma).map(|(e, s)| e - m * s).collect();
    let hi = estimate.iter().zip(sigma).map(|(e, s)| e + m * s).collect();
    Ok(GradientBox { lo, hi, estimate: estimate.to_vec() })
}

/// Interpolates the box toward its estimate: `P = 1` keeps the original
/// bounds, `P = 0` collapses onto the estimate.
pub fn shrink_box(b: &GradientBox, p: f64) -> GradientBox {
    let lo = b
        .estimate
        .iter()
        .zip(&b.lo)
        .map(|(e, l)| e + p * (l - e))
        .collect();
    let hi = b
        .estimate
        .iter()
        .zip(&b.hi)
        .map(|(e, h)| e + p * (h - e))
        .collect();
    GradientBox { lo, hi, estimate: b.estimate.clone() }
}

/// Tight supremum of `g . delta` over all gradients `g` in the box:
/// the maximum of a linear functional over a box separates per component.
pub fn worst_case_directional(b: &GradientBox, delta: &[f64]) -> f64 {
    debug_assert_eq!(b.len(), delta.len());
    b.lo
        .iter()
        .zip(&b.hi)
        .zip(delta)
        .map(|((&l, &h), &d)| (l * d).max(h * d))
        .sum()
}

/// Directional Lipschitz bounds per constraint and input, with optional
/// per-coordinate concavity declarations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LipschitzTable {
    /// n_g x n_u lower derivative bounds.
    pub kappa_lo: Vec<Vec<f64>>,
    /// n_g x n_u upper derivative bounds.
    pub kappa_hi: Vec<Vec<f64>>,
    /// Coordinates in which each constraint is declared strictly concave on
    /// the local step box.
    pub concave_in: Vec<Vec<bool>>,
}

impl LipschitzTable {
    /// Single-constant mode: `|dg_j/du_i| < kappa_ji`.
    pub fn symmetric(rows: &[Vec<f64>]) -> Self {
        let kappa_hi: Vec<Vec<f64>> = rows.to_vec();
        let kappa_lo = rows
            .iter()
            .map(|r| r.iter().map(|k| -k).collect())
            .collect();
        let concave_in = rows.iter().map(|r| vec![false; r.len()]).collect();
        LipschitzTable { kappa_lo, kappa_hi, concave_in }
    }

    pub fn n_constraints(&self) -> usize {
        self.kappa_hi.len()
    }

    pub fn set_concave(&mut self, j: usize, coords: &[usize]) {
        for &i in coords {
            self.concave_in[j][i] = true;
        }
    }

    /// Same table with every row of constraint `j` divided by `scale[j]`.
    pub fn scaled(&self, scale: &[f64]) -> Self {
        let div = |rows: &Vec<Vec<f64>>| {
            rows.iter()
                .zip(scale)
                .map(|(r, s)| r.iter().map(|k| k / s).collect())
                .collect()
        };
        LipschitzTable {
            kappa_lo: div(&self.kappa_lo),
            kappa_hi: div(&self.kappa_hi),
            concave_in: self.concave_in.clone(),
        }
    }
}

/// Worst-case growth of constraint `j` over the move `delta_u`.
///
/// Non-concave coordinates contribute `max(kappa_lo * d, kappa_hi * d)`; in
/// `local` mode, coordinates declared concave contribute the worst-case
/// directional term of the supplied gradient box instead, which is valid on
/// the box spanned by the step and never exceeds the Lipschitz term. With
/// `local = false` the concavity declarations are ignored (moves between
/// distant points fall outside the box on which concavity was declared).
pub fn lipschitz_growth(
    lip: &LipschitzTable,
    j: usize,
    delta_u: &[f64],
    grad_box: Option<&GradientBox>,
    local: bool,
) -> Result<f64, UncertaintyError> {
    let mut total = 0.0;
    for (i, &d) in delta_u.iter().enumerate() {
        if local && lip.concave_in[j][i] {
            let b = grad_box.ok_or(UncertaintyError::MissingGradientBox(j))?;
            total += (b.lo[i] * d).max(b.hi[i] * d);
        } else {
            total += (lip.kappa_lo[j][i] * d).max(lip.kappa_hi[j][i] * d);
        }
    }
    Ok(total)
}

/// Membership of `u` in the certified-feasible polytope generated by a past
/// strictly feasible measurement at `rec_u` with recorded upper bound
/// `rec_g_upper_j`, allowing a violation budget of `allow` (0 for hard
/// constraints).
pub fn feasible_polytope_contains(
    rec_u: &[f64],
    rec_g_upper_j: f64,
    lip: &LipschitzTable,
    j: usize,
    u: &[f64],
    allow: f64,
) -> bool {
    let delta: Vec<f64> = u.iter().zip(rec_u).map(|(a, b)| a - b).collect();
    let growth = lipschitz_growth(lip, j, &delta, None, false).expect("no box needed");
    rec_g_upper_j + growth <= allow
}

/// Additive-noise bounds for measured constraint and cost values, plus the
/// scale parameters of the gradient-estimate uncertainty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Per-constraint lower bound on a single additive noise term (<= 0).
    pub w_lo: Vec<f64>,
    /// Constraint measurement noise scale (standard deviation as a fraction
    /// of the constraint range).
    pub sigma_g: f64,
    /// Gradient-estimate noise scale.
    pub sigma_grad: f64,
    /// Cost measurement noise scale.
    pub sigma_cost: f64,
    /// Box multiplier for general-purpose gradient bounds.
    pub m: f64,
    /// Per-coordinate gradient uncertainty scales for the general-purpose
    /// bounds (one vector applied to every function).
    pub sigma_nabla: Vec<f64>,
}

impl NoiseModel {
    pub fn noise_free(n_g: usize, n_u: usize) -> Self {
        NoiseModel {
            w_lo: vec![0.0; n_g],
            sigma_g: 0.0,
            sigma_grad: 0.0,
            sigma_cost: 0.0,
            m: 0.0,
            sigma_nabla: vec![1.0; n_u],
        }
    }

    /// Lower bound on the mean of `n` noise terms: the single-measurement
    /// bound tightened by the variance reduction law `1/sqrt(n)`.
    pub fn w_lo_mean(&self, j: usize, n: u32) -> f64 {
        self.w_lo[j] / (n.max(1) as f64).sqrt()
    }
}

/// Robust upper bound on the true constraint value at the current iterate:
/// the minimum of (i) zero, (ii) the latest measurement minus the noise floor,
/// (iii) the mean of repeated measurements minus the reduced noise floor, and
/// (iv) every past point's recorded bound plus worst-case directional growth.
/// `cutoff`, when set, skips past points farther than that distance (their
/// growth term rarely wins anyway).
pub fn constraint_upper_bound(
    j: usize,
    state: &IterateState,
    noise: &NoiseModel,
    lip: &LipschitzTable,
    cutoff: Option<f64>,
) -> Result<f64, UncertaintyError> {
    let cur = state.current_record().ok_or(UncertaintyError::EmptyHistory)?;
    // (i) worst case: the feasibility guarantee itself. Hard constraints are
    // kept at or below zero; soft constraints are kept at or below their
    // current violation allowance, which the bound must not mask (the slack
    // reduction and fallback triggers compare against it).
    let mut bound = state.slack.d[j].max(0.0);
    // (ii) single measurement.
    bound = bound.min(cur.g_meas_last[j] - noise.w_lo[j]);
    // (iii) repeated measurements at the same input.
    bound = bound.min(cur.g_meas_mean[j] - noise.w_lo_mean(j, cur.repetitions));
    // (iv) growth from past points.
    for (idx, rec) in state.history.iter().enumerate() {
        if idx == state.current {
            continue;
        }
        let delta: Vec<f64> = state.u.iter().zip(&rec.u).map(|(a, b)| a - b).collect();
        if let Some(c) = cutoff {
            if delta.iter().any(|d| d.abs() > c) {
                continue;
            }
        }
        let growth = lipschitz_growth(lip, j, &delta, None, false)?;
        bound = bound.min(rec.g_upper[j] + growth);
    }
    Ok(bound)
}

/// Indices whose upper-bounded values are within `eps` of the boundary.
pub fn epsilon_active_set(g_upper: &[f64], eps: &[f64]) -> Vec<usize> {
    g_upper
        .iter()
        .zip(eps)
        .enumerate()
        .filter(|(_, (&g, &e))| g >= -e)
        .map(|(j, _)| j)
        .collect()
}

/// Quadratic upper bound state for the cost.
#[derive(Debug, Clone, PartialEq)]
pub struct QBoundState {
    /// Flat row-major n_u x n_u symmetric matrix.
    pub q: Vec<f64>,
    pub n_u: usize,
    /// Optional elementwise second-derivative bounds (flat row-major).
    pub m_lo: Option<Vec<f64>>,
    pub m_hi: Option<Vec<f64>>,
    /// Iteration index of the last reset of the doubling rule.
    pub best_since_reset: usize,
    pub adaptive: bool,
}

impl QBoundState {
    pub fn isotropic(n_u: usize, scale: f64) -> Self {
        let mut q = vec![0.0; n_u * n_u];
        for i in 0..n_u {
            q[i * n_u + i] = scale;
        }
        QBoundState { q, n_u, m_lo: None, m_hi: None, best_since_reset: 0, adaptive: false }
    }

    pub fn from_matrix(q: Vec<f64>, n_u: usize) -> Self {
        assert_eq!(q.len(), n_u * n_u);
        QBoundState { q, n_u, m_lo: None, m_hi: None, best_since_reset: 0, adaptive: false }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.q {
            *v *= s;
        }
    }
}

/// Worst-case quadratic form: uses the elementwise second-derivative bounds
/// when present, otherwise the plain form `delta' Q delta`.
pub fn quad_form_upper(q: &QBoundState, delta_u: &[f64]) -> f64 {
    let n = q.n_u;
    debug_assert_eq!(delta_u.len(), n);
    match (&q.m_lo, &q.m_hi) {
        (Some(lo), Some(hi)) => {
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let dd = delta_u[i] * delta_u[j];
                    total += (lo[i * n + j] * dd).max(hi[i * n + j] * dd);
                }
            }
            total
        }
        _ => {
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    total += delta_u[i] * q.q[i * n + j] * delta_u[j];
                }
            }
            total
        }
    }
}

/// Doubling rule for the quadratic bound: when the newest measured cost fails
/// to improve on the best value seen since the last reset by more than the
/// detection threshold (3x the cost-noise standard deviation; any strict
/// increase when noise-free), the bound doubles and the window restarts.
pub fn adapt_qbound(q: &QBoundState, cost_history: &[f64], cost_noise_std: f64) -> QBoundState {
    let mut out = q.clone();
    if !q.adaptive || cost_history.len() < 2 {
        return out;
    }
    let k = cost_history.len() - 1;
    let start = q.best_since_reset.min(k - 1);
    let best_prev = cost_history[start..k]
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    if cost_history[k] - best_prev > 3.0 * cost_noise_std {
        for v in &mut out.q {
            *v *= 2.0;
        }
        out.best_since_reset = k;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_multiplier_collapses_box() {
        let b = build_gradient_box(&[1.0, -1.0], &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(b.lo, b.hi);
        assert_eq!(b.lo, vec![1.0, -1.0]);
    }

    #[test]
    fn box_arithmetic() {
        let b = build_gradient_box(&[1.0, -1.0], &[1.0, 1.0], 0.5).unwrap();
        assert_eq!(b.lo, vec![0.5, -1.5]);
        assert_eq!(b.hi, vec![1.5, -0.5]);
        assert!(build_gradient_box(&[0.0], &[1.0], -0.1).is_err());
    }

    #[test]
    fn known_sigma_box_structure() {
        // estimate +- sigma * kappa, the known-noise-scale robust bounds
        let kappa = [2.2, 0.35];
        let est = [0.3, -0.9];
        let b = build_gradient_box(&est, &kappa, 0.5).unwrap();
        for i in 0..2 {
            assert!((b.lo[i] - (est[i] - 0.5 * kappa[i])).abs() < 1e-15);
            assert!((b.hi[i] - (est[i] + 0.5 * kappa[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn shrink_identity_and_collapse() {
        let b = build_gradient_box(&[0.0], &[2.0], 1.0).unwrap();
        let same = shrink_box(&b, 1.0);
        assert_eq!(same, b);
        let point = shrink_box(&b, 0.0);
        assert_eq!(point.lo, point.hi);
        assert_eq!(point.lo, b.estimate);
    }

    #[test]
    fn shrink_arithmetic() {
        let b = GradientBox { lo: vec![-2.0], hi: vec![4.0], estimate: vec![0.0] };
        let s = shrink_box(&b, 0.5);
        assert_eq!(s.lo, vec![-1.0]);
        assert_eq!(s.hi, vec![2.0]);
    }

    #[test]
    fn shrink_is_monotone() {
        let b = GradientBox { lo: vec![-2.0, 1.0], hi: vec![4.0, 3.0], estimate: vec![0.5, 1.5] };
        let outer = shrink_box(&b, 0.8);
        let inner = shrink_box(&b, 0.3);
        assert!(outer.contains_box(&inner));
    }

    #[test]
    fn directional_worst_case() {
        let b = GradientBox::exact(&[2.0, -3.0]);
        assert!((worst_case_directional(&b, &[1.0, 2.0]) - (2.0 - 6.0)).abs() < 1e-15);
        let b = GradientBox { lo: vec![-1.0, -1.0], hi: vec![1.0, 1.0], estimate: vec![0.0, 0.0] };
        assert!((worst_case_directional(&b, &[1.0, -2.0]) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn growth_symmetric_mode() {
        let lip = LipschitzTable::symmetric(&[vec![1.0, 1.0]]);
        let g = lipschitz_growth(&lip, 0, &[0.1, -0.1], None, true).unwrap();
        assert!((g - 0.2).abs() < 1e-15);
    }

    #[test]
    fn growth_directional_mode_ignores_safe_decrease() {
        // kappa_lo = 0 means decreasing the input cannot raise the constraint.
        let lip = LipschitzTable {
            kappa_lo: vec![vec![0.0, -1.0]],
            kappa_hi: vec![vec![1.0, 1.0]],
            concave_in: vec![vec![false, false]],
        };
        let g = lipschitz_growth(&lip, 0, &[-0.3, 0.0], None, true).unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn growth_concave_coordinates_can_go_negative() {
        let mut lip = LipschitzTable::symmetric(&[vec![1.0, 1.0]]);
        lip.set_concave(0, &[0, 1]);
        let b = GradientBox { lo: vec![-2.0, -1.0], hi: vec![-1.0, -0.5], estimate: vec![-1.5, -0.75] };
        let g = lipschitz_growth(&lip, 0, &[0.2, 0.2], Some(&b), true).unwrap();
        assert!(g < 0.0);
        // missing box is an error in local mode
        assert!(lipschitz_growth(&lip, 0, &[0.2, 0.2], None, true).is_err());
        // non-local mode ignores the declarations
        let g_global = lipschitz_growth(&lip, 0, &[0.2, 0.2], None, false).unwrap();
        assert!((g_global - 0.4).abs() < 1e-15);
    }

    #[test]
    fn concave_term_never_exceeds_symmetric_term() {
        // validity of the declared-concavity relaxation at the growth level
        let mut lip = LipschitzTable::symmetric(&[vec![2.0, 2.0]]);
        lip.set_concave(0, &[0]);
        // any gradient box inside [-kappa, kappa]
        let b = GradientBox { lo: vec![-1.0, 0.0], hi: vec![1.5, 0.0], estimate: vec![0.2, 0.0] };
        for &d in &[-0.7, -0.1, 0.0, 0.3, 0.9] {
            let relaxed = lipschitz_growth(&lip, 0, &[d, 0.0], Some(&b), true).unwrap();
            let plain = lipschitz_growth(&lip, 0, &[d, 0.0], None, false).unwrap();
            assert!(relaxed <= plain + 1e-15);
        }
    }

    #[test]
    fn polytope_membership() {
        let lip = LipschitzTable::symmetric(&[vec![1.0, 1.0]]);
        // center of its own polytope
        assert!(feasible_polytope_contains(&[0.1, 0.2], -1.0, &lip, 0, &[0.1, 0.2], 0.0));
        // -1 + 1.2 > 0
        assert!(!feasible_polytope_contains(&[0.0, 0.0], -1.0, &lip, 0, &[0.6, 0.6], 0.0));
        // zero margin degenerates to the point itself
        assert!(feasible_polytope_contains(&[0.0, 0.0], 0.0, &lip, 0, &[0.0, 0.0], 0.0));
        assert!(!feasible_polytope_contains(&[0.0, 0.0], 0.0, &lip, 0, &[1e-9, 0.0], 0.0));
    }

    #[test]
    fn active_set_examples() {
        assert_eq!(epsilon_active_set(&[-0.5], &[1.0]), vec![0]);
        assert!(epsilon_active_set(&[-0.5], &[0.1]).is_empty());
        assert_eq!(epsilon_active_set(&[0.0], &[0.3]), vec![0]);
    }

    #[test]
    fn quad_form_plain_and_bounded() {
        let q = QBoundState::isotropic(2, 2.0);
        assert!((quad_form_upper(&q, &[1.0, 0.0]) - 2.0).abs() < 1e-15);
        // diagonal second-derivative bounds 2*theta with theta in [1, 5]
        let mut qb = QBoundState::isotropic(2, 0.0);
        qb.m_lo = Some(vec![2.0, 0.0, 0.0, 2.0]);
        qb.m_hi = Some(vec![10.0, 0.0, 0.0, 10.0]);
        let d = [0.3, -0.4];
        let expect = 10.0 * (d[0] * d[0] + d[1] * d[1]);
        assert!((quad_form_upper(&qb, &d) - expect).abs() < 1e-12);
    }

    fn state_with(records: Vec<crate::problem::HistoryRecord>, current: usize) -> IterateState {
        let u = records[current].u.clone();
        let mut s = IterateState::new(
            u,
            crate::gain::SlackState::hard(1),
            QBoundState::isotropic(2, 2.0),
        );
        s.history = records;
        s.current = current;
        s
    }

    fn record_at(u: &[f64], g_last: f64, g_mean: f64, reps: u32, g_upper: f64) -> crate::problem::HistoryRecord {
        crate::problem::HistoryRecord {
            k_first: 0,
            u: u.to_vec(),
            repetitions: reps,
            g_meas_last: vec![g_last],
            g_meas_mean: vec![g_mean],
            cost_meas_last: 0.0,
            cost_meas_mean: 0.0,
            g_upper: vec![g_upper],
            cost_grad_est: vec![0.0; u.len()],
            cons_grad_est: vec![vec![0.0; u.len()]],
            cost_box: GradientBox::exact(&vec![0.0; u.len()]),
            cons_boxes: vec![GradientBox::exact(&vec![0.0; u.len()])],
        }
    }

    #[test]
    fn upper_bound_single_measurement() {
        // measured -0.5 with noise floor -0.3: min(0, -0.2) = -0.2
        let noise = NoiseModel {
            w_lo: vec![-0.3],
            sigma_g: 0.1,
            sigma_grad: 0.0,
            sigma_cost: 0.0,
            m: 0.0,
            sigma_nabla: vec![1.0; 2],
        };
        let lip = LipschitzTable::symmetric(&[vec![1.0, 1.0]]);
        let state = state_with(vec![record_at(&[0.0, 0.0], -0.5, -0.5, 1, 0.0)], 0);
        let b = constraint_upper_bound(0, &state, &noise, &lip, None).unwrap();
        assert!((b - (-0.2)).abs() < 1e-15);
    }

    #[test]
    fn upper_bound_repetitions_tighten() {
        // four repeats with mean -0.5 and w_lo(4) = -0.15 beat the single
        // -0.2 bound; latest measurement -0.2 gives (ii) = 0.1, not binding
        let noise = NoiseModel {
            w_lo: vec![-0.3],
            sigma_g: 0.1,
            sigma_grad: 0.0,
            sigma_cost: 0.0,
            m: 0.0,
            sigma_nabla: vec![1.0; 2],
        };
        let lip = LipschitzTable::symmetric(&[vec![1.0, 1.0]]);
        let state = state_with(vec![record_at(&[0.0, 0.0], -0.2, -0.5, 4, 0.0)], 0);
        let b = constraint_upper_bound(0, &state, &noise, &lip, None).unwrap();
        assert!((b - (-0.35)).abs() < 1e-15, "bound {b}");
    }

    #[test]
    fn upper_bound_from_neighbor_growth() {
        // neighbor with recorded bound -1.0 and |du| = (0.2, 0.1) under unit
        // symmetric sensitivities: -1.0 + 0.3 = -0.7 beats the local -0.2
        let noise = NoiseModel {
            w_lo: vec![-0.3],
            sigma_g: 0.1,
            sigma_grad: 0.0,
            sigma_cost: 0.0,
            m: 0.0,
            sigma_nabla: vec![1.0; 2],
        };
        let lip = LipschitzTable::symmetric(&[vec![1.0, 1.0]]);
        let state = state_with(
            vec![
                record_at(&[0.2, 0.1], 0.0, 0.0, 1, -1.0),
                record_at(&[0.0, 0.0], -0.5, -0.5, 1, 0.0),
            ],
            1,
        );
        let b = constraint_upper_bound(0, &state, &noise, &lip, None).unwrap();
        assert!((b - (-0.7)).abs() < 1e-15, "bound {b}");
        // a distance cutoff below the neighbor spacing disables bound (iv)
        let b = constraint_upper_bound(0, &state, &noise, &lip, Some(0.05)).unwrap();
        assert!((b - (-0.2)).abs() < 1e-15, "bound {b}");
    }

    #[test]
    fn upper_bound_soft_cap_is_the_allowance() {
        // with a violation allowance the worst-case cap is d, not 0, so a
        // bad measurement cannot hide a true violation from the slack logic
        let noise = NoiseModel {
            w_lo: vec![0.0],
            sigma_g: 0.0,
            sigma_grad: 0.0,
            sigma_cost: 0.0,
            m: 0.0,
            sigma_nabla: vec![1.0; 2],
        };
        let lip = LipschitzTable::symmetric(&[vec![1.0, 1.0]]);
        let mut state = state_with(vec![record_at(&[0.0, 0.0], 0.003, 0.003, 1, 0.0)], 0);
        state.slack = crate::gain::SlackState {
            d: vec![0.004],
            d_total: vec![0.04],
            beta: vec![0.9],
            d0: vec![0.004],
        };
        let b = constraint_upper_bound(0, &state, &noise, &lip, None).unwrap();
        assert!((b - 0.003).abs() < 1e-15, "bound {b}");
    }

    #[test]
    fn qbound_doubling_rule() {
        let mut q = QBoundState::isotropic(2, 1.0);
        q.adaptive = true;
        // strictly decreasing history never triggers
        let out = adapt_qbound(&q, &[3.0, 2.0, 1.0], 0.0);
        assert_eq!(out.q, q.q);
        // one trigger doubles and resets
        let out = adapt_qbound(&q, &[1.0, 2.0], 0.0);
        assert_eq!(out.q[0], 2.0);
        assert_eq!(out.best_since_reset, 1);
        // three consecutive triggers compose to 8x
        let mut s = q.clone();
        let mut hist = vec![1.0];
        for step in 0..3 {
            hist.push(1.0 + (step + 1) as f64);
            s = adapt_qbound(&s, &hist, 0.0);
        }
        assert_eq!(s.q[0], 8.0);
        // noisy mode requires a confident increase
        let out = adapt_qbound(&q, &[1.0, 1.1], 0.1);
        assert_eq!(out.q[0], 1.0);
        let out = adapt_qbound(&q, &[1.0, 1.5], 0.1);
        assert_eq!(out.q[0], 2.0);
    }
}
