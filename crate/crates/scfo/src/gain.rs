//! Filter-gain computations: the feasibility and cost-decrease step bounds,
//! their composition, line searches for known elements and history reuse,
//! and the soft-constraint slack law.

use thiserror::Error;

use crate::uncertainty::{
    lipschitz_growth, quad_form_upper, worst_case_directional, GradientBox, LipschitzTable,
    QBoundState,
};
use crate::vecops::add_scaled;

/// Default multiplier in the cost-decrease gain bound: strictly below 2 so a
/// full step keeps a guaranteed margin of decrease.
pub const COST_GAIN_FACTOR: f64 = 1.99;

#[derive(Debug, Error, PartialEq)]
pub enum GainError {
    #[error("cost-descent numerator is nonnegative; projection contract violated upstream")]
    NonDescentDirection,
    #[error("violation budget smaller than one worst-case violation")]
    BudgetTooSmall,
}

/// Soft-constraint slack state: per-constraint allowance `d`, its initial
/// value, the total violation budget, and the geometric reduction constant.
#[derive(Debug, Clone, PartialEq)]
pub struct SlackState {
    pub d: Vec<f64>,
    pub d_total: Vec<f64>,
    pub beta: Vec<f64>,
    pub d0: Vec<f64>,
}

impl SlackState {
    /// All-hard constraints: zero allowance everywhere.
    pub fn hard(n_g: usize) -> Self {
        SlackState {
            d: vec![0.0; n_g],
            d_total: vec![0.0; n_g],
            beta: vec![0.0; n_g],
            d0: vec![0.0; n_g],
        }
    }

    /// Soft constraints with the largest reduction constant the budget
    /// permits. A zero initial allowance marks a hard constraint.
    pub fn from_budgets(d0: Vec<f64>, d_total: Vec<f64>) -> Result<Self, GainError> {
        let mut beta = vec![0.0; d0.len()];
        for j in 0..d0.len() {
            if d0[j] > 0.0 {
                beta[j] = beta_max(d0[j], d_total[j])?;
            }
        }
        Ok(SlackState { d: d0.clone(), d_total, beta, d0 })
    }

    pub fn is_soft(&self, j: usize) -> bool {
        self.d0[j] > 0.0
    }
}

/// Largest slack reduction constant that still guarantees the total
/// violation budget: `(d_total - d0) / d_total`.
pub fn beta_max(d0: f64, d_total: f64) -> Result<f64, GainError> {
    if !(d_total >= d0 && d0 > 0.0) {
        return Err(GainError::BudgetTooSmall);
    }
    Ok((d_total - d0) / d_total)
}

/// Geometric slack reduction, applied to each soft constraint whose upper
/// bound shows a violation at the current iterate.
pub fn slack_step(slack: &SlackState, g_upper_at_uk: &[f64]) -> SlackState {
    let mut out = slack.clone();
    for j in 0..out.d.len() {
        if out.is_soft(j) && g_upper_at_uk[j] >= 0.0 {
            out.d[j] *= out.beta[j];
        }
    }
    out
}

/// Step bound preserving feasibility: `min_j (-g_upper_j + d_j) / growth_j`
/// over constraints whose worst-case growth along the step is positive.
/// Constraints that cannot grow impose no limit. The result is clamped to
/// `[0, inf)`; an empty limiting set yields `inf`.
pub fn gain_feasibility(g_upper: &[f64], growth: &[f64], slack: &SlackState) -> f64 {
    let mut bound = f64::INFINITY;
    for j in 0..g_upper.len() {
        if growth[j] > 0.0 {
            bound = bound.min((-g_upper[j] + slack.d[j]) / growth[j]);
        }
    }
    bound.max(0.0)
}

/// Step bound preserving monotonic cost decrease:
/// `-factor * sup(grad . delta) / (delta' Q delta)`.
pub fn gain_cost_decrease(
    cost_box: &GradientBox,
    q: &QBoundState,
    delta_u: &[f64],
    factor: f64,
) -> Result<f64, GainError> {
    let wc = worst_case_directional(cost_box, delta_u);
    if wc >= 0.0 {
        return Err(GainError::NonDescentDirection);
    }
    let quad = quad_form_upper(q, delta_u);
    if quad <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-factor * wc / quad)
}

/// Final filter gain: the smaller of the two step bounds, clamped to [0, 1].
pub fn compose_gain(k_feas: f64, k_cost: f64) -> f64 {
    let k = k_feas.min(k_cost);
    if k.is_nan() {
        return 0.0;
    }
    k.clamp(0.0, 1.0)
}

const SEARCH_SAMPLES: usize = 1024;
const SEARCH_TOL: f64 = 1e-9;

/// Largest `K` in [0, 1] whose endpoint lies, for every constraint, in the
/// union of feasible polytopes generated by past strictly feasible points.
/// Never below the supplied local feasibility gain: the current point's own
/// polytope belongs to every union.
pub fn union_line_search(
    u_k: &[f64],
    u_bar: &[f64],
    records: &[(&[f64], &[f64])],
    lip: &LipschitzTable,
    slack: &SlackState,
    local_gain: f64,
) -> f64 {
    let n_g = lip.n_constraints();
    let delta: Vec<f64> = u_bar.iter().zip(u_k).map(|(a, b)| a - b).collect();
    let member = |kk: f64| -> bool {
        let u = add_scaled(u_k, kk, &delta);
        'cons: for j in 0..n_g {
            for (ru, rg) in records {
                let d: Vec<f64> = u.iter().zip(ru.iter()).map(|(a, b)| a - b).collect();
                let growth = lipschitz_growth(lip, j, &d, None, false).expect("global mode");
                if rg[j] + growth <= slack.d[j] {
                    continue 'cons;
                }
            }
            return false;
        }
        true
    };

    let floor = local_gain.clamp(0.0, 1.0);
    let mut best_t = None;
    for t in (0..=SEARCH_SAMPLES).rev() {
        let kk = t as f64 / SEARCH_SAMPLES as f64;
        if member(kk) {
            best_t = Some(t);
            break;
        }
    }
    let t = match best_t {
        None => return floor,
        Some(t) => t,
    };
    if t == SEARCH_SAMPLES {
        return 1.0;
    }
    let mut lo = t as f64 / SEARCH_SAMPLES as f64;
    let mut hi = (t + 1) as f64 / SEARCH_SAMPLES as f64;
    while hi - lo > SEARCH_TOL {
        let mid = 0.5 * (lo + hi);
        if member(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo.max(floor)
}

/// A known constraint as seen by the line searches.
pub struct KnownConstraintView<'a> {
    pub f: &'a dyn Fn(&[f64]) -> f64,
    pub convex: bool,
}

/// What to optimize along the projected direction when parts of the problem
/// are known analytically.
pub enum KnownSearch<'a> {
    /// Minimize a known cost along the segment (cost condition replaced by
    /// the exact line search).
    MinimizeKnownCost { cost: &'a dyn Fn(&[f64]) -> f64 },
    /// Maximize the step subject to the robust cost-decrease cap (cost still
    /// uncertain, some constraints known).
    MaximizeStep { cost_gain_cap: f64 },
}

/// Line search over `K` in `[0, cap]` with known-constraint feasibility
/// enforced pointwise at the endpoint. Returns 0 when no improving feasible
/// step exists, which signals the caller to fall back to a stricter
/// projection.
pub fn line_search_known_cost(
    u_k: &[f64],
    u_bar: &[f64],
    search: KnownSearch<'_>,
    feas_cap: f64,
    known: &[KnownConstraintView<'_>],
) -> f64 {
    let delta: Vec<f64> = u_bar.iter().zip(u_k).map(|(a, b)| a - b).collect();
    let cap = match &search {
        KnownSearch::MinimizeKnownCost { .. } => feas_cap.min(1.0),
        KnownSearch::MaximizeStep { cost_gain_cap } => feas_cap.min(*cost_gain_cap).min(1.0),
    };
    if !(cap > 0.0) {
        return 0.0;
    }
    let feasible_at = |kk: f64| -> bool {
        let u = add_scaled(u_k, kk, &delta);
        known.iter().all(|c| (c.f)(&u) <= 1e-12)
    };
    // Endpoint test plus convexity covers the whole segment.
    let jensen = !known.is_empty() && known.iter().all(|c| c.convex) && feasible_at(cap);
    let all_free = known.is_empty() || jensen;

    match search {
        KnownSearch::MaximizeStep { .. } => {
            if all_free {
                return cap;
            }
            let mut best = None;
            for t in (0..=SEARCH_SAMPLES).rev() {
                let kk = cap * t as f64 / SEARCH_SAMPLES as f64;
                if feasible_at(kk) {
                    best = Some(t);
                    break;
                }
            }
            let t = match best {
                None => return 0.0,
                Some(t) => t,
            };
            if t == SEARCH_SAMPLES {
                return cap;
            }
            let mut lo = cap * t as f64 / SEARCH_SAMPLES as f64;
            let mut hi = cap * (t + 1) as f64 / SEARCH_SAMPLES as f64;
            while hi - lo > SEARCH_TOL {
                let mid = 0.5 * (lo + hi);
                if feasible_at(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        }
        KnownSearch::MinimizeKnownCost { cost } => {
            let value = |kk: f64| -> f64 {
                if !all_free && !feasible_at(kk) {
                    return f64::INFINITY;
                }
                let u = add_scaled(u_k, kk, &delta);
                cost(&u)
            };
            let mut best_t = 0;
            let mut best_v = value(0.0);
            for t in 1..=SEARCH_SAMPLES {
                let v = value(cap * t as f64 / SEARCH_SAMPLES as f64);
                if v < best_v {
                    best_v = v;
                    best_t = t;
                }
            }
            // Golden-section refinement inside the bracketing cells.
            let cell = cap / SEARCH_SAMPLES as f64;
            let mut a = (best_t as f64 * cell - cell).max(0.0);
            let mut b = (best_t as f64 * cell + cell).min(cap);
            let phi = 0.5 * (5.0_f64.sqrt() - 1.0);
            let mut x1 = b - phi * (b - a);
            let mut x2 = a + phi * (b - a);
            let mut f1 = value(x1);
            let mut f2 = value(x2);
            for _ in 0..70 {
                if f1 <= f2 {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = b - phi * (b - a);
                    f1 = value(x1);
                } else {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + phi * (b - a);
                    f2 = value(x2);
                }
            }
            let k_star = if f1 <= f2 { x1 } else { x2 };
            let v_star = f1.min(f2);
            if v_star < best_v {
                best_v = v_star;
                best_t = usize::MAX; // marker: refined point wins
            }
            let k_best = if best_t == usize::MAX {
                k_star
            } else {
                best_t as f64 * cell
            };
            if best_v >= value(0.0) {
                0.0
            } else {
                k_best
            }
        }
    }
}

/// Index of the reference iterate for the soft-constraint fallback: the
/// best-measured-cost history entry satisfying every soft constraint under
/// the reduced slack. The initial point always qualifies by assumption, so
/// index 0 is the anchor when nothing else does.
pub fn fallback_reference(history: &[crate::problem::HistoryRecord], slack: &SlackState) -> usize {
    let qualifies = |rec: &crate::problem::HistoryRecord| -> bool {
        (0..slack.d.len())
            .all(|j| !slack.is_soft(j) || rec.g_upper[j] < slack.beta[j] * slack.d[j])
    };
    let mut best: Option<usize> = None;
    for (i, rec) in history.iter().enumerate() {
        if qualifies(rec) {
            let better = match best {
                None => true,
                Some(b) => rec.cost_meas_mean < history[b].cost_meas_mean,
            };
            if better {
                best = Some(i);
            }
        }
    }
    best.unwrap_or(0)
}
