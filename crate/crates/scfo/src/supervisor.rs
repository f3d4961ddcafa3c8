//! Per-iteration orchestration: parameter scheduling, the feasible-direction
//! search at decreasing strictness and robustness levels, routing to the
//! known-element projection variants, gain composition, and the campaign
//! driver that ties measurement, bounding, target generation, and stepping
//! into a reproducible trace.
//!
//! The per-iteration procedure is: reset the projection parameters to their
//! ceilings, halve them until the point-estimate (0-robustness) projection
//! becomes feasible, then walk the robustness level down from 1 in fixed
//! steps until the box-robust projection becomes feasible, solve it, and
//! damp the step with the feasibility and cost-decrease gains. Bottoming out
//! below the parameter floors is convergence evidence, handled by policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithms::{next_target, AlgorithmSpec, TargetContext};
use crate::bench::{inject_constraint_noise, inject_gradient_noise};
use crate::gain::{
    compose_gain, fallback_reference, gain_cost_decrease, gain_feasibility,
    line_search_known_cost, slack_step, union_line_search, KnownConstraintView, KnownSearch,
    SlackState, COST_GAIN_FACTOR,
};
use crate::problem::{
    apply_input_filter, Binding, CampaignTrace, HistoryRecord, IterateState, RtoProblem,
    StepVariant, TraceRecord,
};
use crate::projection::{ConeRow, DescentCone, ProjectionError, ProjectionParams};
use crate::qp::{is_feasible, QpError};
use crate::uncertainty::{
    adapt_qbound, build_gradient_box, constraint_upper_bound, epsilon_active_set,
    lipschitz_growth, shrink_box, GradientBox, LipschitzTable, NoiseModel, QBoundState,
    UncertaintyError,
};
use crate::vecops::{clamp_to_box, norm2, sub};

/// Step gains below this threshold count as a stalled line search and
/// trigger the next fallback projection variant.
const K_NULL: f64 = 1e-8;
/// Activity test for known constraints (exact values, scaled units).
const KNOWN_ACTIVE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("problem definition rejected: {0}")]
    BadProblem(&'static str),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("internal invariant broken: {0}")]
    Internal(&'static str),
}

/// What to do when the feasible-direction search bottoms out below the
/// parameter floors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfeasibilityPolicy {
    /// Stop adapting for the rest of the campaign.
    DeclareConvergence,
    /// Re-estimate the local gradients with tighter uncertainty and retry;
    /// in simulation the refinement halves the estimate noise scale.
    PerturbAndRefine,
    /// Take a null step this iteration and keep going; fresh estimates may
    /// reopen the cone later.
    PartialRobustness,
}

/// How gradient estimates and their uncertainty boxes are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Exact gradients, zero-width boxes.
    Exact,
    /// Noisy estimates used directly, zero-width boxes.
    NoisyDirect,
    /// Noisy estimates with boxes `estimate +- sigma * kappa`.
    KnownSigma,
    /// Noisy estimates with boxes `estimate +- m * sigma_nabla`, where `m` is
    /// half the bisected infeasibility threshold, recomputed per iteration.
    AdaptiveM,
}

impl GradientMode {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_uppercase().as_str() {
            "I" | "1" | "EXACT" => GradientMode::Exact,
            "II" | "2" | "NOISY-DIRECT" => GradientMode::NoisyDirect,
            "III" | "3" | "KNOWN-SIGMA" => GradientMode::KnownSigma,
            "IV" | "4" | "ADAPTIVE-M" => GradientMode::AdaptiveM,
            _ => return None,
        })
    }

    pub fn short(&self) -> &'static str {
        match self {
            GradientMode::Exact => "I",
            GradientMode::NoisyDirect => "II",
            GradientMode::KnownSigma => "III",
            GradientMode::AdaptiveM => "IV",
        }
    }
}

/// Scheduling knobs of the per-iteration search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupervisorConfig {
    /// Floor for the scaled projection parameters (ceilings are 1).
    pub eps_floor: f64,
    /// Robustness-level decrement of the feasibility walk.
    pub p_step: f64,
    /// Fraction of the bisected infeasibility threshold used as the box
    /// multiplier in adaptive-m mode.
    pub m_fraction: f64,
    /// Cap for the box multiplier when the bisection never turns infeasible.
    pub m_max: f64,
    pub policy: InfeasibilityPolicy,
    /// Multiplier in the cost-decrease gain (strictly below 2).
    pub cost_gain_factor: f64,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        SupervisorConfig {
            eps_floor: 1e-6,
            p_step: 0.05,
            m_fraction: 0.5,
            m_max: 1e4,
            policy: InfeasibilityPolicy::PartialRobustness,
            cost_gain_factor: COST_GAIN_FACTOR,
        }
    }
}

/// Full campaign configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub algorithm: AlgorithmSpec,
    pub implementation: GradientMode,
    /// Gradient-estimate noise scale.
    pub sigma: f64,
    /// Constraint measurement noise scale (fraction of the range).
    pub sigma_g: f64,
    /// Cost measurement noise scale (fraction of the range).
    pub sigma_cost: f64,
    pub k_f: usize,
    pub seed: u64,
    /// Replace the local feasibility gain by the line search over the union
    /// of past feasible polytopes.
    pub reuse_history: bool,
    /// Soft-constraint level: initial allowance as a fraction of each
    /// constraint range (0 = all hard).
    pub slack_level: f64,
    /// Violation budget as a multiple of the initial allowance.
    pub slack_total_factor: f64,
    /// Override the quadratic cost bound with `scale * I` (raw units).
    pub q_upper_scale: Option<f64>,
    pub adaptive_qbound: bool,
    /// Initial isotropic bound when adapting.
    pub qbound_init: f64,
    /// Per-coordinate gradient uncertainty for adaptive-m mode (raw units).
    pub sigma_nabla: Option<Vec<f64>>,
    /// Distance cutoff for the past-point constraint bound.
    pub history_cutoff: Option<f64>,
    pub supervisor: SupervisorConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            algorithm: AlgorithmSpec::default(),
            implementation: GradientMode::Exact,
            sigma: 0.0,
            sigma_g: 0.0,
            sigma_cost: 0.0,
            k_f: 100,
            seed: 0,
            reuse_history: false,
            slack_level: 0.0,
            slack_total_factor: 10.0,
            q_upper_scale: None,
            adaptive_qbound: false,
            qbound_init: 1.0,
            sigma_nabla: None,
            history_cutoff: None,
            supervisor: SupervisorConfig::default(),
        }
    }
}

/// Per-iteration diagnostics surfaced into the trace.
#[derive(Debug, Clone)]
pub struct IterationDiagnostics {
    pub variant: StepVariant,
    pub eps_level: u32,
    pub eps_min: f64,
    pub p_level: f64,
    pub k_feas: f64,
    pub k_cost: f64,
    pub gain: f64,
    pub binding: Binding,
    pub m_bar: Option<f64>,
    pub fell_back: bool,
    pub u_bar: Vec<f64>,
}

pub enum IterationOutcome {
    Step { u_next: Vec<f64>, diag: IterationDiagnostics },
    /// The feasible-direction search bottomed out below the floors.
    FloorInfeasible,
}

/// A known constraint as presented to one iteration.
pub struct KnownConsInput<'a> {
    pub j: usize,
    pub f: &'a dyn Fn(&[f64]) -> f64,
    pub convex: bool,
    pub grad_scaled: Vec<f64>,
    pub g_scaled: f64,
}

pub struct KnownCostInput<'a> {
    pub f: &'a dyn Fn(&[f64]) -> f64,
    pub grad_scaled: Vec<f64>,
}

/// Adaptive-m data: scaled per-function uncertainty vectors.
pub struct AdaptiveMInput {
    pub sigma_cost: Vec<f64>,
    /// Aligned with the `uncertain` index list.
    pub sigma_cons: Vec<Vec<f64>>,
    /// Bisection tolerance on the multiplier.
    pub tol: f64,
}

/// Everything one iteration of the supervisor needs, in scaled units.
pub struct IterationInputs<'a> {
    pub u_k: &'a [f64],
    pub target: &'a [f64],
    /// Scaled robust upper bounds for all constraints.
    pub g_upper: &'a [f64],
    /// Scaled full-robustness boxes (cost, then one per constraint).
    pub cost_box: &'a GradientBox,
    pub cons_boxes: &'a [GradientBox],
    pub lip: &'a LipschitzTable,
    pub lo: &'a [f64],
    pub hi: &'a [f64],
    pub slack: &'a SlackState,
    /// Scaled quadratic bound on the cost.
    pub qbound: &'a QBoundState,
    /// Indices of uncertain constraints.
    pub uncertain: &'a [usize],
    pub known_cons: &'a [KnownConsInput<'a>],
    pub known_cost: Option<&'a KnownCostInput<'a>>,
    pub adaptive_m: Option<&'a AdaptiveMInput>,
    /// `(u, g_upper over the uncertain subset)` views of the history.
    pub union_records: &'a [(Vec<f64>, Vec<f64>)],
    /// Lipschitz sub-table over the uncertain subset (row order matches).
    pub lip_uncertain: &'a LipschitzTable,
    pub reuse_history: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum CostRowKind {
    Robust,
    Exact,
    Absent,
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    cost_row: CostRowKind,
    known_rows: bool,
}

fn route_stages(known_cost: bool, any_known_cons: bool) -> Vec<Stage> {
    match (known_cost, any_known_cons) {
        (false, false) => vec![Stage { cost_row: CostRowKind::Robust, known_rows: false }],
        (true, false) => vec![
            Stage { cost_row: CostRowKind::Absent, known_rows: false },
            Stage { cost_row: CostRowKind::Exact, known_rows: false },
        ],
        (false, true) => vec![
            Stage { cost_row: CostRowKind::Robust, known_rows: false },
            Stage { cost_row: CostRowKind::Robust, known_rows: true },
        ],
        (true, true) => vec![
            Stage { cost_row: CostRowKind::Absent, known_rows: false },
            Stage { cost_row: CostRowKind::Exact, known_rows: false },
            Stage { cost_row: CostRowKind::Exact, known_rows: true },
        ],
    }
}

enum BoxMode {
    /// Point estimates only (the 0-robustness system).
    Points,
    /// Boxes shrunk to robustness level `p`.
    Shrunk(f64),
}

#[allow(clippy::too_many_arguments)]
fn build_cone(
    inputs: &IterationInputs<'_>,
    stage: Stage,
    params: &ProjectionParams,
    active_unc: &[usize],
    cost_box_eff: &GradientBox,
    cons_boxes_eff: &[GradientBox],
    mode: &BoxMode,
) -> DescentCone {
    let mut rows = Vec::new();
    for &j in active_unc {
        let row = match mode {
            BoxMode::Points => ConeRow::point(&cons_boxes_eff[j].estimate, params.delta_g[j]),
            BoxMode::Shrunk(p) => {
                ConeRow::boxed(&shrink_box(&cons_boxes_eff[j], *p), params.delta_g[j])
            }
        };
        rows.push(row);
    }
    if stage.known_rows {
        for kc in inputs.known_cons {
            if kc.g_scaled.abs() <= KNOWN_ACTIVE_TOL {
                rows.push(ConeRow::point(&kc.grad_scaled, params.delta_g[kc.j]));
            }
        }
    }
    match stage.cost_row {
        CostRowKind::Robust => {
            let row = match mode {
                BoxMode::Points => ConeRow::point(&cost_box_eff.estimate, params.delta_phi),
                BoxMode::Shrunk(p) => {
                    ConeRow::boxed(&shrink_box(cost_box_eff, *p), params.delta_phi)
                }
            };
            rows.push(row);
        }
        CostRowKind::Exact => {
            let g = &inputs.known_cost.expect("exact cost row requires known cost").grad_scaled;
            rows.push(ConeRow::point(g, params.delta_phi));
        }
        CostRowKind::Absent => {}
    }
    DescentCone {
        u_k: inputs.u_k.to_vec(),
        rows,
        lo: inputs.lo.to_vec(),
        hi: inputs.hi.to_vec(),
    }
}

/// Walks the robustness level down from 1 in `p_step` decrements until the
/// supplied feasibility test passes. Level 0 collapses the boxes onto the
/// point estimates and must therefore pass whenever the 0-robustness search
/// succeeded.
pub fn select_p_level<F>(mut feasible_at: F, p_step: f64) -> Result<(f64, usize), CampaignError>
where
    F: FnMut(f64) -> Result<bool, CampaignError>,
{
    let steps = (1.0 / p_step).round() as usize;
    for t in 0..=steps {
        let p = (1.0 - t as f64 * p_step).max(0.0);
        if feasible_at(p)? {
            return Ok((p, t));
        }
    }
    Err(CampaignError::Internal("robustness walk failed at level 0"))
}

/// Largest box multiplier `m` at which the robust feasible-direction system
/// stays feasible, found by bracketing and bisection. Returns `m_max` when
/// no multiplier up to the cap makes the system infeasible (for instance
/// with zero uncertainty vectors).
#[allow(clippy::too_many_arguments)]
pub fn max_robust_m<F>(mut feasible_at: F, m_max: f64, tol: f64) -> Result<f64, CampaignError>
where
    F: FnMut(f64) -> Result<bool, CampaignError>,
{
    if feasible_at(m_max)? {
        return Ok(m_max);
    }
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64.min(m_max);
    while feasible_at(hi)? {
        lo = hi;
        hi = (hi * 2.0).min(m_max);
        if hi >= m_max {
            break;
        }
    }
    let tol = tol.max(1e-12);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if feasible_at(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One supervised iteration at a fixed base point: the feasible-direction
/// search, the projection (with known-element routing), and the gain
/// composition. Returns the filtered next input or the bottom-out signal.
pub fn run_iteration(
    inputs: &IterationInputs<'_>,
    cfg: &SupervisorConfig,
) -> Result<IterationOutcome, CampaignError> {
    let n_g = inputs.lip.n_constraints();
    let template = ProjectionParams::with_floor(n_g, cfg.eps_floor);
    let t_stop = template.floor_level();
    let stages = route_stages(inputs.known_cost.is_some(), !inputs.known_cons.is_empty());
    let mut last_null: Option<IterationDiagnostics> = None;

    for (si, &stage) in stages.iter().enumerate() {
        let is_last_stage = si + 1 == stages.len();

        // Search for strictness parameters that open the point-estimate cone.
        let mut chosen: Option<(u32, ProjectionParams, Vec<usize>)> = None;
        for t in 0..=t_stop {
            let params_t = template.at_level(t);
            let active: Vec<usize> = epsilon_active_set(inputs.g_upper, &params_t.eps)
                .into_iter()
                .filter(|j| inputs.uncertain.contains(j))
                .collect();
            let cone0 = build_cone(
                inputs,
                stage,
                &params_t,
                &active,
                inputs.cost_box,
                inputs.cons_boxes,
                &BoxMode::Points,
            );
            if is_feasible(&cone0.nominal_system())? {
                chosen = Some((t, params_t, active));
                break;
            }
        }
        let (t, params_t, active) = match chosen {
            Some(c) => c,
            None => return Ok(IterationOutcome::FloorInfeasible),
        };

        // Adaptive-m mode: rebuild every box at half the bisected threshold.
        let mut cost_box_eff = inputs.cost_box.clone();
        let mut cons_boxes_eff = inputs.cons_boxes.to_vec();
        let mut m_bar = None;
        if let Some(ad) = inputs.adaptive_m {
            if stage.cost_row == CostRowKind::Robust || !active.is_empty() {
                let feas = |m: f64| -> Result<bool, CampaignError> {
                    let mut rows = Vec::new();
                    for (slot, &j) in inputs.uncertain.iter().enumerate() {
                        if active.contains(&j) {
                            let b = build_gradient_box(
                                &inputs.cons_boxes[j].estimate,
                                &ad.sigma_cons[slot],
                                m,
                            )?;
                            rows.push(ConeRow::boxed(&b, params_t.delta_g[j]));
                        }
                    }
                    if stage.cost_row == CostRowKind::Robust {
                        let b =
                            build_gradient_box(&inputs.cost_box.estimate, &ad.sigma_cost, m)?;
                        rows.push(ConeRow::boxed(&b, params_t.delta_phi));
                    }
                    let cone = DescentCone {
                        u_k: inputs.u_k.to_vec(),
                        rows,
                        lo: inputs.lo.to_vec(),
                        hi: inputs.hi.to_vec(),
                    };
                    Ok(is_feasible(&cone.slack_system())?)
                };
                let mb = max_robust_m(feas, cfg.m_max, ad.tol)?;
                let m = cfg.m_fraction * mb;
                for (slot, &j) in inputs.uncertain.iter().enumerate() {
                    cons_boxes_eff[j] = build_gradient_box(
                        &inputs.cons_boxes[j].estimate,
                        &ad.sigma_cons[slot],
                        m,
                    )?;
                }
                cost_box_eff =
                    build_gradient_box(&inputs.cost_box.estimate, &ad.sigma_cost, m)?;
                m_bar = Some(mb);
            }
        }

        // Robustness walk, skipped when every participating box is a point.
        let boxes_matter = (stage.cost_row == CostRowKind::Robust
            && !cost_box_eff.is_degenerate())
            || active.iter().any(|&j| !cons_boxes_eff[j].is_degenerate());
        let (p, _p_idx) = if boxes_matter {
            select_p_level(
                |p| {
                    let cone = build_cone(
                        inputs,
                        stage,
                        &params_t,
                        &active,
                        &cost_box_eff,
                        &cons_boxes_eff,
                        &BoxMode::Shrunk(p),
                    );
                    Ok(is_feasible(&cone.slack_system())?)
                },
                cfg.p_step,
            )?
        } else {
            (1.0, 0)
        };

        // Solve the projection at the selected level; step the level down on
        // a numerical disagreement between the feasibility test and solver.
        let mut p_solve = p;
        let u_bar = loop {
            let cone = build_cone(
                inputs,
                stage,
                &params_t,
                &active,
                &cost_box_eff,
                &cons_boxes_eff,
                &BoxMode::Shrunk(p_solve),
            );
            match cone.project(inputs.target) {
                Ok(u) => break u,
                Err(ProjectionError::Infeasible) if p_solve > 0.0 => {
                    p_solve = (p_solve - cfg.p_step).max(0.0);
                }
                Err(ProjectionError::Infeasible) => return Ok(IterationOutcome::FloorInfeasible),
                Err(e) => return Err(e.into()),
            }
        };

        let delta = sub(&u_bar, inputs.u_k);
        let step_norm = norm2(&delta);
        let variant = stage_variant(stage, inputs, &cost_box_eff, &cons_boxes_eff);
        if step_norm < 1e-14 {
            let diag = IterationDiagnostics {
                variant,
                eps_level: t,
                eps_min: params_t.eps_min(),
                p_level: p_solve,
                k_feas: 0.0,
                k_cost: 0.0,
                gain: 0.0,
                binding: Binding::Null,
                m_bar,
                fell_back: false,
                u_bar: u_bar.clone(),
            };
            if is_last_stage {
                return Ok(IterationOutcome::Step { u_next: inputs.u_k.to_vec(), diag });
            }
            last_null = Some(diag);
            continue;
        }

        // Worst-case growth of every uncertain constraint along the step;
        // concave coordinates use the full-robustness boxes.
        let mut growth = Vec::with_capacity(inputs.uncertain.len());
        let mut g_up_unc = Vec::with_capacity(inputs.uncertain.len());
        for &j in inputs.uncertain {
            growth.push(lipschitz_growth(
                inputs.lip,
                j,
                &delta,
                Some(&cons_boxes_eff[j]),
                true,
            )?);
            g_up_unc.push(inputs.g_upper[j]);
        }
        let slack_unc = subset_slack(inputs.slack, inputs.uncertain);
        let mut k_feas = gain_feasibility(&g_up_unc, &growth, &slack_unc);
        let mut union_relaxed = false;
        if inputs.reuse_history && !inputs.union_records.is_empty() {
            let views: Vec<(&[f64], &[f64])> = inputs
                .union_records
                .iter()
                .map(|(u, g)| (u.as_slice(), g.as_slice()))
                .collect();
            let relaxed = union_line_search(
                inputs.u_k,
                &u_bar,
                &views,
                inputs.lip_uncertain,
                &slack_unc,
                k_feas.min(1.0),
            );
            if relaxed > k_feas {
                k_feas = relaxed;
                union_relaxed = true;
            }
        }

        let known_views: Vec<KnownConstraintView<'_>> = inputs
            .known_cons
            .iter()
            .map(|kc| KnownConstraintView { f: kc.f, convex: kc.convex })
            .collect();

        let (k_cost, k_final, binding) = match (inputs.known_cost, stage.cost_row) {
            (Some(kc), _) => {
                let k = line_search_known_cost(
                    inputs.u_k,
                    &u_bar,
                    KnownSearch::MinimizeKnownCost { cost: kc.f },
                    k_feas,
                    &known_views,
                );
                (f64::INFINITY, k, Binding::LineSearch)
            }
            (None, _) if !inputs.known_cons.is_empty() => {
                let kc = cost_gain(&cost_box_eff, p_solve, inputs, cfg, &delta);
                let k = line_search_known_cost(
                    inputs.u_k,
                    &u_bar,
                    KnownSearch::MaximizeStep { cost_gain_cap: kc },
                    k_feas,
                    &known_views,
                );
                (kc, k, Binding::LineSearch)
            }
            (None, _) => {
                let kc = cost_gain(&cost_box_eff, p_solve, inputs, cfg, &delta);
                let k = compose_gain(k_feas, kc);
                let binding = if k >= 1.0 {
                    Binding::Clamp
                } else if k_feas <= kc {
                    if union_relaxed {
                        Binding::UnionRelaxed
                    } else {
                        Binding::Feasibility
                    }
                } else {
                    Binding::Cost
                };
                (kc, k, binding)
            }
        };

        if k_final < K_NULL && !is_last_stage {
            last_null = Some(IterationDiagnostics {
                variant,
                eps_level: t,
                eps_min: params_t.eps_min(),
                p_level: p_solve,
                k_feas,
                k_cost,
                gain: 0.0,
                binding: Binding::Null,
                m_bar,
                fell_back: false,
                u_bar: u_bar.clone(),
            });
            continue;
        }

        let gain = k_final.clamp(0.0, 1.0);
        let mut u_next = apply_input_filter(inputs.u_k, &u_bar, gain)
            .map_err(|_| CampaignError::Internal("filter inputs disagree"))?;
        clamp_to_box(&mut u_next, inputs.lo, inputs.hi);
        let binding = if gain < K_NULL { Binding::Null } else { binding };
        return Ok(IterationOutcome::Step {
            u_next,
            diag: IterationDiagnostics {
                variant,
                eps_level: t,
                eps_min: params_t.eps_min(),
                p_level: p_solve,
                k_feas,
                k_cost,
                gain,
                binding,
                m_bar,
                fell_back: false,
                u_bar,
            },
        });
    }

    // Every stage stalled with a feasible projection: take the null step.
    let diag = last_null.ok_or(CampaignError::Internal("no stage produced a diagnostic"))?;
    Ok(IterationOutcome::Step { u_next: inputs.u_k.to_vec(), diag })
}

fn cost_gain(
    cost_box_eff: &GradientBox,
    p: f64,
    inputs: &IterationInputs<'_>,
    cfg: &SupervisorConfig,
    delta: &[f64],
) -> f64 {
    let shrunk = shrink_box(cost_box_eff, p);
    match gain_cost_decrease(&shrunk, inputs.qbound, delta, cfg.cost_gain_factor) {
        Ok(k) => k,
        Err(_) => 0.0,
    }
}

fn stage_variant(
    stage: Stage,
    inputs: &IterationInputs<'_>,
    cost_box: &GradientBox,
    cons_boxes: &[GradientBox],
) -> StepVariant {
    match (inputs.known_cost.is_some(), !inputs.known_cons.is_empty()) {
        (true, true) => StepVariant::KnownBoth,
        (true, false) => StepVariant::KnownCost,
        (false, true) => StepVariant::KnownConstraints,
        (false, false) => {
            let degenerate = cost_box.is_degenerate()
                && inputs
                    .uncertain
                    .iter()
                    .all(|&j| cons_boxes[j].is_degenerate());
            let _ = stage;
            if degenerate {
                StepVariant::Nominal
            } else {
                StepVariant::Robust
            }
        }
    }
}

fn subset_slack(slack: &SlackState, idx: &[usize]) -> SlackState {
    SlackState {
        d: idx.iter().map(|&j| slack.d[j]).collect(),
        d_total: idx.iter().map(|&j| slack.d_total[j]).collect(),
        beta: idx.iter().map(|&j| slack.beta[j]).collect(),
        d0: idx.iter().map(|&j| slack.d0[j]).collect(),
    }
}

/// Runs a full campaign: at each iteration measure, bound, ask the algorithm
/// for a target, supervise the step, and record. Deterministic for a fixed
/// seed.
pub fn run_campaign(
    problem: &RtoProblem,
    cfg: &CampaignConfig,
) -> Result<CampaignTrace, CampaignError> {
    Engine::new(problem, cfg)?.run()
}

struct Engine<'a> {
    problem: &'a RtoProblem,
    cfg: &'a CampaignConfig,
    /// Scaled Lipschitz table over all constraints.
    lip: LipschitzTable,
    /// Sub-table over uncertain constraints, in `uncertain` order.
    lip_unc: LipschitzTable,
    uncertain: Vec<usize>,
    noise: NoiseModel,
    rng: ChaCha8Rng,
    state: IterateState,
    records: Vec<TraceRecord>,
    cost_meas_hist: Vec<f64>,
    converged: bool,
    /// Current gradient-estimate noise scale (halved by refinement).
    sigma_now: f64,
}

impl<'a> Engine<'a> {
    fn new(problem: &'a RtoProblem, cfg: &'a CampaignConfig) -> Result<Self, CampaignError> {
        if !problem.check_initial_point() {
            return Err(CampaignError::BadProblem(
                "initial point must lie strictly inside the constraint set",
            ));
        }
        if problem.costs.is_empty() || problem.costs[0].start_k != 0 {
            return Err(CampaignError::BadProblem("first cost phase must start at 0"));
        }
        let ranges: Vec<f64> = problem.constraints.iter().map(|c| c.range).collect();
        if ranges.iter().any(|&r| !(r > 0.0)) {
            return Err(CampaignError::BadProblem("constraint ranges must be positive"));
        }
        let lip = problem.lipschitz.scaled(&ranges);
        let uncertain: Vec<usize> = (0..problem.n_g)
            .filter(|&j| !problem.constraints[j].known)
            .collect();
        let lip_unc = LipschitzTable {
            kappa_lo: uncertain.iter().map(|&j| lip.kappa_lo[j].clone()).collect(),
            kappa_hi: uncertain.iter().map(|&j| lip.kappa_hi[j].clone()).collect(),
            concave_in: uncertain.iter().map(|&j| lip.concave_in[j].clone()).collect(),
        };
        let noise = NoiseModel {
            w_lo: vec![-3.0 * cfg.sigma_g; problem.n_g],
            sigma_g: cfg.sigma_g,
            sigma_grad: cfg.sigma,
            sigma_cost: cfg.sigma_cost,
            m: 0.0,
            sigma_nabla: cfg.sigma_nabla.clone().unwrap_or(vec![1.0; problem.n_u]),
        };
        let slack = if cfg.slack_level > 0.0 {
            let d0 = vec![cfg.slack_level; problem.n_g];
            let dt = vec![cfg.slack_level * cfg.slack_total_factor; problem.n_g];
            SlackState::from_budgets(d0, dt)
                .map_err(|_| CampaignError::BadProblem("slack budget below one violation"))?
        } else {
            SlackState::hard(problem.n_g)
        };
        let qbound = if cfg.adaptive_qbound {
            let mut q = QBoundState::isotropic(problem.n_u, cfg.qbound_init);
            q.adaptive = true;
            q
        } else if let Some(s) = cfg.q_upper_scale {
            QBoundState::isotropic(problem.n_u, s)
        } else {
            QBoundState::from_matrix(problem.costs[0].q_upper.clone(), problem.n_u)
        };
        let state = IterateState::new(problem.u0.clone(), slack, qbound);
        Ok(Engine {
            problem,
            cfg,
            lip,
            lip_unc,
            uncertain,
            noise,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            state,
            records: Vec::with_capacity(cfg.k_f + 1),
            cost_meas_hist: Vec::with_capacity(cfg.k_f + 1),
            converged: false,
            sigma_now: cfg.sigma,
        })
    }

    /// Draws one measurement at the current iterate and merges it into the
    /// history, returning the raw truth and measurements for the trace.
    fn measure(&mut self, k: usize) -> Result<(f64, Vec<f64>, f64, Vec<f64>), CampaignError> {
        let phase = self.problem.phase_index(k);
        let cost = &self.problem.costs[phase];
        let u = self.state.u.clone();
        let g_true: Vec<f64> = self.problem.eval_constraints(&u);
        let phi_true = (cost.f)(&u);
        let ranges: Vec<f64> = self.problem.constraints.iter().map(|c| c.range).collect();
        let g_meas =
            inject_constraint_noise(&g_true, self.cfg.sigma_g, &ranges, &mut self.rng);
        let phi_meas = if self.cfg.sigma_cost > 0.0 {
            let noisy = inject_constraint_noise(
                &[phi_true],
                self.cfg.sigma_cost,
                &[cost.range],
                &mut self.rng,
            );
            noisy[0]
        } else {
            phi_true
        };

        let (cost_grad_est, cost_box) = self.estimate_cost_gradient(&u, phase, self.sigma_now)?;
        let (cons_grad_est, cons_boxes) = self.estimate_cons_gradients(&u, self.sigma_now)?;

        let g_meas_scaled: Vec<f64> =
            g_meas.iter().zip(&ranges).map(|(g, r)| g / r).collect();
        let rec = HistoryRecord {
            k_first: k,
            u: u.clone(),
            repetitions: 1,
            g_meas_last: g_meas_scaled.clone(),
            g_meas_mean: g_meas_scaled,
            cost_meas_last: phi_meas,
            cost_meas_mean: phi_meas,
            g_upper: vec![0.0; self.problem.n_g],
            cost_grad_est,
            cons_grad_est,
            cost_box,
            cons_boxes,
        };
        let idx = self.state.merge_observation(rec);
        self.state.k = k;
        self.refresh_upper_bounds(idx, &g_true, &ranges)?;
        self.cost_meas_hist.push(phi_meas);
        Ok((phi_true, g_true, phi_meas, g_meas))
    }

    /// Theorem-style robust bounds for uncertain constraints; exact scaled
    /// values for known ones.
    fn refresh_upper_bounds(
        &mut self,
        idx: usize,
        g_true: &[f64],
        ranges: &[f64],
    ) -> Result<(), CampaignError> {
        let mut g_upper = vec![0.0; self.problem.n_g];
        for j in 0..self.problem.n_g {
            if self.problem.constraints[j].known {
                // Known constraints are evaluated analytically, not measured.
                g_upper[j] = g_true[j] / ranges[j];
            } else {
                g_upper[j] = constraint_upper_bound(
                    j,
                    &self.state,
                    &self.noise,
                    &self.lip,
                    self.cfg.history_cutoff,
                )?;
            }
        }
        self.state.history[idx].g_upper = g_upper;
        Ok(())
    }

    fn estimate_cost_gradient(
        &mut self,
        u: &[f64],
        phase: usize,
        sigma: f64,
    ) -> Result<(Vec<f64>, GradientBox), CampaignError> {
        let cost = &self.problem.costs[phase];
        let true_grad = (cost.grad)(u);
        let est = if self.problem.known_cost || self.cfg.implementation == GradientMode::Exact {
            true_grad
        } else {
            inject_gradient_noise(&true_grad, &cost.kappa, sigma, &mut self.rng)
        };
        let est_scaled: Vec<f64> = est.iter().map(|g| g / cost.range).collect();
        let bx = if self.problem.known_cost {
            GradientBox::exact(&est_scaled)
        } else {
            match self.cfg.implementation {
                GradientMode::Exact | GradientMode::NoisyDirect | GradientMode::AdaptiveM => {
                    GradientBox::exact(&est_scaled)
                }
                GradientMode::KnownSigma => {
                    let kappa_scaled: Vec<f64> =
                        cost.kappa.iter().map(|k| k / cost.range).collect();
                    build_gradient_box(&est_scaled, &kappa_scaled, sigma)?
                }
            }
        };
        Ok((est, bx))
    }

    fn estimate_cons_gradients(
        &mut self,
        u: &[f64],
        sigma: f64,
    ) -> Result<(Vec<Vec<f64>>, Vec<GradientBox>), CampaignError> {
        let mut ests = Vec::with_capacity(self.problem.n_g);
        let mut boxes = Vec::with_capacity(self.problem.n_g);
        for j in 0..self.problem.n_g {
            let c = &self.problem.constraints[j];
            let true_grad = (c.grad)(u);
            let kappa_row: Vec<f64> = (0..self.problem.n_u)
                .map(|i| {
                    self.problem.lipschitz.kappa_hi[j][i]
                        .abs()
                        .max(self.problem.lipschitz.kappa_lo[j][i].abs())
                })
                .collect();
            let est = if c.known || self.cfg.implementation == GradientMode::Exact {
                true_grad
            } else {
                inject_gradient_noise(&true_grad, &kappa_row, sigma, &mut self.rng)
            };
            let est_scaled: Vec<f64> = est.iter().map(|g| g / c.range).collect();
            let bx = if c.known {
                GradientBox::exact(&est_scaled)
            } else {
                match self.cfg.implementation {
                    GradientMode::Exact | GradientMode::NoisyDirect | GradientMode::AdaptiveM => {
                        GradientBox::exact(&est_scaled)
                    }
                    GradientMode::KnownSigma => {
                        let kappa_scaled: Vec<f64> =
                            kappa_row.iter().map(|x| x / c.range).collect();
                        build_gradient_box(&est_scaled, &kappa_scaled, sigma)?
                    }
                }
            };
            ests.push(est);
            boxes.push(bx);
        }
        Ok((ests, boxes))
    }

    fn run(mut self) -> Result<CampaignTrace, CampaignError> {
        let k_f = self.cfg.k_f;
        for k in 0..=k_f {
            let phase = self.problem.phase_index(k);
            let (phi_true, g_true, phi_meas, g_meas) = self.measure(k)?;
            let phi_star = self.problem.costs[phase].phi_star;
            let ranges: Vec<f64> =
                self.problem.constraints.iter().map(|c| c.range).collect();

            if k == k_f {
                self.push_record(
                    k, phi_true, &g_true, phi_meas, &g_meas, phi_star, &ranges,
                    None,
                );
                break;
            }
            if self.converged {
                self.push_record(
                    k, phi_true, &g_true, phi_meas, &g_meas, phi_star, &ranges,
                    Some(converged_diag(&self.state.u)),
                );
                continue;
            }

            // Soft-constraint bookkeeping: pick the reference point under the
            // pre-reduction slack, then apply the reduction law.
            let g_up_now = self.state.history[self.state.current].g_upper.clone();
            let trigger = (0..self.problem.n_g).any(|j| {
                self.state.slack.is_soft(j)
                    && g_up_now[j] >= self.state.slack.beta[j] * self.state.slack.d[j]
            });
            let base_idx = if trigger {
                fallback_reference(&self.state.history, &self.state.slack)
            } else {
                self.state.current
            };
            self.state.slack = slack_step(&self.state.slack, &g_up_now);

            if self.cfg.adaptive_qbound {
                self.state.qbound = adapt_qbound(
                    &self.state.qbound,
                    &self.cost_meas_hist,
                    self.cfg.sigma_cost * self.problem.costs[phase].range,
                );
            }

            let target = {
                let base = &self.state.history[base_idx];
                let ctx = TargetContext {
                    u_k: &base.u,
                    cost_grad_est: &base.cost_grad_est,
                    history: &self.state.history,
                    problem: self.problem,
                    phase,
                };
                next_target(&self.cfg.algorithm, &ctx, &mut self.rng)
            };

            let fell_back = base_idx != self.state.current;
            let mut refinements = 0u32;
            loop {
                let outcome = self.step_from(base_idx, &target, phase)?;
                match outcome {
                    IterationOutcome::Step { u_next, mut diag } => {
                        diag.fell_back = fell_back;
                        self.push_record(
                            k, phi_true, &g_true, phi_meas, &g_meas, phi_star, &ranges,
                            Some(diag),
                        );
                        self.state.u = u_next;
                        break;
                    }
                    IterationOutcome::FloorInfeasible => {
                        match self.cfg.supervisor.policy {
                            InfeasibilityPolicy::DeclareConvergence => {
                                self.converged = true;
                                self.push_record(
                                    k, phi_true, &g_true, phi_meas, &g_meas, phi_star,
                                    &ranges, Some(converged_diag(&self.state.u)),
                                );
                                break;
                            }
                            InfeasibilityPolicy::PartialRobustness => {
                                self.push_record(
                                    k, phi_true, &g_true, phi_meas, &g_meas, phi_star,
                                    &ranges, Some(floor_null_diag(&self.state.u)),
                                );
                                break;
                            }
                            InfeasibilityPolicy::PerturbAndRefine => {
                                refinements += 1;
                                let sigma = self.sigma_now * 0.5_f64.powi(refinements as i32);
                                if sigma < 1e-14 || refinements > 46 {
                                    self.push_record(
                                        k, phi_true, &g_true, phi_meas, &g_meas, phi_star,
                                        &ranges, Some(floor_null_diag(&self.state.u)),
                                    );
                                    break;
                                }
                                self.refine_estimates(base_idx, phase, sigma)?;
                            }
                        }
                    }
                }
            }
        }

        Ok(CampaignTrace { problem: self.problem.name.clone(), records: self.records })
    }

    /// Refinement hook for the perturb-and-refine policy: redraw the local
    /// gradient estimates with a tighter noise scale and rebuild the boxes.
    fn refine_estimates(
        &mut self,
        idx: usize,
        phase: usize,
        sigma: f64,
    ) -> Result<(), CampaignError> {
        let u = self.state.history[idx].u.clone();
        let (cost_est, cost_box) = self.estimate_cost_gradient(&u, phase, sigma)?;
        let (cons_est, cons_boxes) = self.estimate_cons_gradients(&u, sigma)?;
        let rec = &mut self.state.history[idx];
        rec.cost_grad_est = cost_est;
        rec.cost_box = cost_box;
        rec.cons_grad_est = cons_est;
        rec.cons_boxes = cons_boxes;
        Ok(())
    }

    fn step_from(
        &mut self,
        base_idx: usize,
        target: &[f64],
        phase: usize,
    ) -> Result<IterationOutcome, CampaignError> {
        let cost = &self.problem.costs[phase];
        let base = &self.state.history[base_idx];
        let mut qb = self.state.qbound.clone();
        qb.scale(1.0 / cost.range);

        // Known-element closures.
        let known_cost_fn;
        let known_cost_input = if self.problem.known_cost {
            let f = cost.f.clone();
            known_cost_fn = move |u: &[f64]| f(u);
            let grad_scaled: Vec<f64> =
                (cost.grad)(&base.u).iter().map(|g| g / cost.range).collect();
            Some(KnownCostInput { f: &known_cost_fn, grad_scaled })
        } else {
            None
        };
        let known_fns: Vec<(usize, crate::problem::ScalarFn)> = (0..self.problem.n_g)
            .filter(|&j| self.problem.constraints[j].known)
            .map(|j| (j, self.problem.constraints[j].f.clone()))
            .collect();
        let known_closures: Vec<Box<dyn Fn(&[f64]) -> f64>> = known_fns
            .iter()
            .map(|(_, f)| {
                let f = f.clone();
                Box::new(move |u: &[f64]| f(u)) as Box<dyn Fn(&[f64]) -> f64>
            })
            .collect();
        let known_cons: Vec<KnownConsInput<'_>> = known_fns
            .iter()
            .zip(&known_closures)
            .map(|((j, _), cl)| {
                let c = &self.problem.constraints[*j];
                let grad_scaled: Vec<f64> =
                    (c.grad)(&base.u).iter().map(|g| g / c.range).collect();
                KnownConsInput {
                    j: *j,
                    f: cl.as_ref(),
                    convex: c.convex,
                    grad_scaled,
                    g_scaled: (c.f)(&base.u) / c.range,
                }
            })
            .collect();

        let adaptive = if self.cfg.implementation == GradientMode::AdaptiveM {
            let raw = self
                .cfg
                .sigma_nabla
                .clone()
                .unwrap_or(vec![1.0; self.problem.n_u]);
            let tol = 1e-4 * norm2(&raw);
            Some(AdaptiveMInput {
                sigma_cost: raw.iter().map(|s| s / cost.range).collect(),
                sigma_cons: self
                    .uncertain
                    .iter()
                    .map(|&j| {
                        raw.iter()
                            .map(|s| s / self.problem.constraints[j].range)
                            .collect()
                    })
                    .collect(),
                tol,
            })
        } else {
            None
        };

        let union_records: Vec<(Vec<f64>, Vec<f64>)> = if self.cfg.reuse_history {
            self.state
                .history
                .iter()
                .map(|r| {
                    (
                        r.u.clone(),
                        self.uncertain.iter().map(|&j| r.g_upper[j]).collect(),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };

        let inputs = IterationInputs {
            u_k: &base.u,
            target,
            g_upper: &base.g_upper,
            cost_box: &base.cost_box,
            cons_boxes: &base.cons_boxes,
            lip: &self.lip,
            lo: &self.problem.u_lo,
            hi: &self.problem.u_hi,
            slack: &self.state.slack,
            qbound: &qb,
            uncertain: &self.uncertain,
            known_cons: &known_cons,
            known_cost: known_cost_input.as_ref(),
            adaptive_m: adaptive.as_ref(),
            union_records: &union_records,
            lip_uncertain: &self.lip_unc,
            reuse_history: self.cfg.reuse_history,
        };
        run_iteration(&inputs, &self.cfg.supervisor)
    }

    #[allow(clippy::too_many_arguments)]
    fn push_record(
        &mut self,
        k: usize,
        phi_true: f64,
        g_true: &[f64],
        phi_meas: f64,
        g_meas: &[f64],
        phi_star: f64,
        ranges: &[f64],
        diag: Option<IterationDiagnostics>,
    ) {
        let d_raw: Vec<f64> = self
            .state
            .slack
            .d
            .iter()
            .zip(ranges)
            .map(|(d, r)| d * r)
            .collect();
        let rec = match diag {
            None => TraceRecord {
                k,
                u: self.state.u.clone(),
                phi_true,
                g_true: g_true.to_vec(),
                phi_meas,
                g_meas: g_meas.to_vec(),
                phi_star,
                gain: 0.0,
                p_level: 1.0,
                eps_min: 0.0,
                variant: StepVariant::Final,
                d: d_raw,
                k_feas: 0.0,
                k_cost: 0.0,
                binding: Binding::Null,
            },
            Some(diag) => TraceRecord {
                k,
                u: self.state.u.clone(),
                phi_true,
                g_true: g_true.to_vec(),
                phi_meas,
                g_meas: g_meas.to_vec(),
                phi_star,
                gain: diag.gain,
                p_level: diag.p_level,
                eps_min: diag.eps_min,
                variant: diag.variant,
                d: d_raw,
                k_feas: diag.k_feas,
                k_cost: diag.k_cost,
                binding: diag.binding,
            },
        };
        self.records.push(rec);
    }
}

fn converged_diag(u: &[f64]) -> IterationDiagnostics {
    IterationDiagnostics {
        variant: StepVariant::Converged,
        eps_level: 0,
        eps_min: 0.0,
        p_level: 1.0,
        k_feas: 0.0,
        k_cost: 0.0,
        gain: 0.0,
        binding: Binding::Null,
        m_bar: None,
        fell_back: false,
        u_bar: u.to_vec(),
    }
}

fn floor_null_diag(u: &[f64]) -> IterationDiagnostics {
    IterationDiagnostics {
        variant: StepVariant::FloorNull,
        eps_level: 0,
        eps_min: 0.0,
        p_level: 1.0,
        k_feas: 0.0,
        k_cost: 0.0,
        gain: 0.0,
        binding: Binding::Null,
        m_bar: None,
        fell_back: false,
        u_bar: u.to_vec(),
    }
}
