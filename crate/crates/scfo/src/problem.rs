//! Domain types for the optimization problem, the input filter law, and the
//! campaign performance metric.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::gain::SlackState;
use crate::poly::Poly;
use crate::uncertainty::{GradientBox, LipschitzTable, QBoundState};
use crate::vecops::in_box;

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Debug, Error, PartialEq)]
pub enum ProblemError {
    #[error("dimension mismatch")]
    Dimension,
    #[error("filter gain must lie in [0, 1]")]
    BadGain,
    #[error("trace is empty or missing reference cost values")]
    BadTrace,
}

/// One cost regime: the plant cost from iteration `start_k` onward, with its
/// cached optimum, scaling range, gradient-noise scales, and quadratic bound.
#[derive(Clone)]
pub struct CostModel {
    pub start_k: usize,
    pub f: ScalarFn,
    pub grad: GradFn,
    /// Plant optimum of this cost over the feasible set (cached at build).
    pub u_star: Vec<f64>,
    pub phi_star: f64,
    /// Scale used to normalize the cost (max |phi| over the box).
    pub range: f64,
    /// Per-input gradient-noise scale row.
    pub kappa: Vec<f64>,
    /// Flat row-major quadratic upper bound on the raw cost.
    pub q_upper: Vec<f64>,
}

impl fmt::Debug for CostModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostModel")
            .field("start_k", &self.start_k)
            .field("u_star", &self.u_star)
            .field("phi_star", &self.phi_star)
            .field("range", &self.range)
            .finish()
    }
}

/// One plant constraint `g_j(u) <= 0`.
#[derive(Clone)]
pub struct ConstraintModel {
    pub f: ScalarFn,
    pub grad: GradFn,
    /// Scale used to normalize the constraint (max |g_j| over the box).
    pub range: f64,
    /// When true, the analytic form is available to the decision logic.
    pub known: bool,
    /// Declared convexity of a known constraint (enables the endpoint
    /// shortcut in segment feasibility tests).
    pub convex: bool,
}

impl fmt::Debug for ConstraintModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintModel")
            .field("range", &self.range)
            .field("known", &self.known)
            .field("convex", &self.convex)
            .finish()
    }
}

/// The static problem definition: oracles, box bounds, dimensions, and the
/// knowledge flags that route the supervisor.
#[derive(Debug, Clone)]
pub struct RtoProblem {
    pub name: String,
    pub n_u: usize,
    pub n_g: usize,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub u0: Vec<f64>,
    /// Cost regimes ordered by `start_k`; the first entry starts at 0.
    pub costs: Vec<CostModel>,
    pub constraints: Vec<ConstraintModel>,
    /// Raw-space directional Lipschitz table.
    pub lipschitz: LipschitzTable,
    /// When true, the decision logic may evaluate the cost analytically.
    pub known_cost: bool,
}

impl RtoProblem {
    pub fn phase_index(&self, k: usize) -> usize {
        let mut idx = 0;
        for (i, c) in self.costs.iter().enumerate() {
            if k >= c.start_k {
                idx = i;
            }
        }
        idx
    }

    pub fn cost_at(&self, k: usize) -> &CostModel {
        &self.costs[self.phase_index(k)]
    }

    pub fn eval_constraints(&self, u: &[f64]) -> Vec<f64> {
        self.constraints.iter().map(|c| (c.f)(u)).collect()
    }

    /// Number of uncertain constraints.
    pub fn n_uncertain(&self) -> usize {
        self.constraints.iter().filter(|c| !c.known).count()
    }

    /// Initial point must be strictly inside the constraint set.
    pub fn check_initial_point(&self) -> bool {
        in_box(&self.u0, &self.u_lo, &self.u_hi, 0.0)
            && self.eval_constraints(&self.u0).iter().all(|&g| g < 0.0)
    }

    /// Builds a polynomial-backed cost or constraint oracle pair.
    pub fn oracle_from_poly(p: &Poly) -> (ScalarFn, GradFn) {
        let p1 = p.clone();
        let p2 = p.clone();
        (
            Arc::new(move |u: &[f64]| p1.eval(u)),
            Arc::new(move |u: &[f64]| p2.grad(u)),
        )
    }
}

/// One aggregated measurement site: repeated measurements at the same input
/// are merged into a running mean with a repetition count.
///
/// Only measured and derived quantities live here; true plant values are
/// never stored in the state that drives decisions.
#[derive(Debug, Clone)]
pub struct HistoryRecord {
    /// Iteration at which this input was first applied.
    pub k_first: usize,
    pub u: Vec<f64>,
    pub repetitions: u32,
    /// Latest measured constraint values, scaled by the constraint ranges.
    pub g_meas_last: Vec<f64>,
    /// Running mean of scaled measured constraint values.
    pub g_meas_mean: Vec<f64>,
    /// Latest and mean measured cost (raw units).
    pub cost_meas_last: f64,
    pub cost_meas_mean: f64,
    /// Robust upper bounds on the scaled constraint values, as recorded when
    /// this point was last current.
    pub g_upper: Vec<f64>,
    /// Raw-space gradient estimates (cost, then one row per constraint).
    pub cost_grad_est: Vec<f64>,
    pub cons_grad_est: Vec<Vec<f64>>,
    /// Scaled gradient boxes at full robustness.
    pub cost_box: GradientBox,
    pub cons_boxes: Vec<GradientBox>,
}

/// Mutable per-campaign state: the current iterate, the measurement history,
/// and the slack and quadratic-bound sub-states.
#[derive(Debug, Clone)]
pub struct IterateState {
    pub k: usize,
    pub u: Vec<f64>,
    pub history: Vec<HistoryRecord>,
    /// Index of the record for the current iterate.
    pub current: usize,
    pub slack: SlackState,
    pub qbound: QBoundState,
}

impl IterateState {
    pub fn new(u0: Vec<f64>, slack: SlackState, qbound: QBoundState) -> Self {
        IterateState { k: 0, u: u0, history: Vec::new(), current: 0, slack, qbound }
    }

    pub fn current_record(&self) -> Option<&HistoryRecord> {
        self.history.get(self.current)
    }

    /// Merges an observation at `u` into the history: bitwise-equal inputs
    /// accumulate repetitions, anything else starts a new record. Returns the
    /// record index, which also becomes `current`.
    pub fn merge_observation(&mut self, rec: HistoryRecord) -> usize {
        if let Some(idx) = self.history.iter().position(|r| r.u == rec.u) {
            let old = &mut self.history[idx];
            let n = old.repetitions + 1;
            for j in 0..old.g_meas_mean.len() {
                old.g_meas_mean[j] =
                    (old.g_meas_mean[j] * old.repetitions as f64 + rec.g_meas_last[j]) / n as f64;
            }
            old.cost_meas_mean =
                (old.cost_meas_mean * old.repetitions as f64 + rec.cost_meas_last) / n as f64;
            old.repetitions = n;
            old.g_meas_last = rec.g_meas_last;
            old.cost_meas_last = rec.cost_meas_last;
            old.cost_grad_est = rec.cost_grad_est;
            old.cons_grad_est = rec.cons_grad_est;
            old.cost_box = rec.cost_box;
            old.cons_boxes = rec.cons_boxes;
            self.current = idx;
        } else {
            self.history.push(rec);
            self.current = self.history.len() - 1;
        }
        self.current
    }
}

/// How the step at one iteration was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepVariant {
    Nominal,
    Robust,
    KnownCost,
    KnownConstraints,
    KnownBoth,
    Converged,
    FloorNull,
    Final,
}

impl fmt::Display for StepVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StepVariant::Nominal => "nominal",
            StepVariant::Robust => "robust",
            StepVariant::KnownCost => "known-cost",
            StepVariant::KnownConstraints => "known-cons",
            StepVariant::KnownBoth => "known-both",
            StepVariant::Converged => "converged",
            StepVariant::FloorNull => "floor-null",
            StepVariant::Final => "final",
        };
        f.write_str(s)
    }
}

impl StepVariant {
    pub fn parse(s: &str) -> Option<StepVariant> {
        Some(match s {
            "nominal" => StepVariant::Nominal,
            "robust" => StepVariant::Robust,
            "known-cost" => StepVariant::KnownCost,
            "known-cons" => StepVariant::KnownConstraints,
            "known-both" => StepVariant::KnownBoth,
            "converged" => StepVariant::Converged,
            "floor-null" => StepVariant::FloorNull,
            "final" => StepVariant::Final,
            _ => return None,
        })
    }
}

/// Which condition produced the final gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    Feasibility,
    Cost,
    Clamp,
    UnionRelaxed,
    LineSearch,
    Null,
}

/// Per-iteration record of a campaign, including the true plant values that
/// only the simulation oracle can see.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub k: usize,
    pub u: Vec<f64>,
    pub phi_true: f64,
    pub g_true: Vec<f64>,
    pub phi_meas: f64,
    pub g_meas: Vec<f64>,
    /// Reference optimal cost of the phase active at this iteration.
    pub phi_star: f64,
    pub gain: f64,
    pub p_level: f64,
    pub eps_min: f64,
    pub variant: StepVariant,
    /// Raw-space slack allowances.
    pub d: Vec<f64>,
    pub k_feas: f64,
    pub k_cost: f64,
    pub binding: Binding,
}

#[derive(Debug, Clone)]
pub struct CampaignTrace {
    pub problem: String,
    pub records: Vec<TraceRecord>,
}

impl CampaignTrace {
    pub fn final_u(&self) -> &[f64] {
        &self.records.last().expect("nonempty trace").u
    }

    /// Largest true constraint value observed anywhere in the campaign,
    /// scaled by nothing (raw units).
    pub fn max_true_violation(&self) -> f64 {
        self.records
            .iter()
            .flat_map(|r| r.g_true.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sum of positive true values of constraint `j` over the campaign.
    pub fn violation_integral(&self, j: usize) -> f64 {
        self.records.iter().map(|r| r.g_true[j].max(0.0)).sum()
    }
}

/// Damped step law: moves from `u_k` toward `u_target` by the fraction `k`.
pub fn apply_input_filter(u_k: &[f64], u_target: &[f64], k: f64) -> Result<Vec<f64>, ProblemError> {
    if u_k.len() != u_target.len() {
        return Err(ProblemError::Dimension);
    }
    if !(0.0..=1.0).contains(&k) {
        return Err(ProblemError::BadGain);
    }
    Ok(u_k
        .iter()
        .zip(u_target)
        .map(|(a, b)| a + k * (b - a))
        .collect())
}

/// Total optimality loss of a campaign: the per-iteration excess of the true
/// cost over the (phase-appropriate) optimal cost, summed over all records.
pub fn optimality_loss(trace: &CampaignTrace) -> Result<f64, ProblemError> {
    if trace.records.is_empty() {
        return Err(ProblemError::BadTrace);
    }
    let mut total = 0.0;
    for r in &trace.records {
        if !r.phi_true.is_finite() || !r.phi_star.is_finite() {
            return Err(ProblemError::BadTrace);
        }
        total += r.phi_true - r.phi_star;
    }
    Ok(total)
}
