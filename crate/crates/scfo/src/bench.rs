//! Benchmark problems, the simulation noise model, the experiment grid, and
//! CSV trace I/O.
//!
//! Two built-in campaigns share one plant: a quadratic cost over a box with
//! three polynomial constraints. "A" starts in the difficult corner and runs
//! 1000 iterations, "B" starts mid-box and runs 100. "B-changing" swaps in a
//! second cost from iteration 50 to exercise history reuse.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::algorithms::{AlgorithmKind, AlgorithmSpec};
use crate::poly::Poly;
use crate::problem::{CampaignTrace, ConstraintModel, CostModel, RtoProblem, StepVariant};
use crate::supervisor::{run_campaign, CampaignConfig, CampaignError, GradientMode};
use crate::uncertainty::LipschitzTable;
use crate::vecops::compass_minimize;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown builtin problem `{0}`")]
    UnknownProblem(String),
    #[error("unknown study `{0}`")]
    UnknownStudy(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Campaign(#[from] CampaignError),
    #[error("malformed trace csv: {0}")]
    BadCsv(&'static str),
}

/// Default campaign lengths for the builtin problems.
pub fn default_kf(problem: &str) -> usize {
    match problem {
        "A" => 1000,
        _ => 100,
    }
}

/// Grid resolution used for constraint/cost ranges.
const RANGE_GRID: usize = 200;
/// Coarse-grid step for the cached-plant-optimum search.
const OPT_GRID_STEP: f64 = 1e-3;
/// Relative polish tolerance for the optimum search.
const OPT_POLISH_TOL: f64 = 1e-10;

fn grid_points(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let span = hi - lo;
    (0..n).map(move |i| lo + span * i as f64 / (n - 1) as f64)
}

/// Max |f| over an even grid on a 2-D box.
pub fn range_on_grid(f: &dyn Fn(&[f64]) -> f64, lo: &[f64], hi: &[f64]) -> f64 {
    assert_eq!(lo.len(), 2, "builtin range grid is two-dimensional");
    let mut best = 0.0_f64;
    for u1 in grid_points(lo[0], hi[0], RANGE_GRID) {
        for u2 in grid_points(lo[1], hi[1], RANGE_GRID) {
            best = best.max(f(&[u1, u2]).abs());
        }
    }
    best
}

/// Dense-grid search plus local polish for the plant optimum of `cost` over
/// the feasible set. The polish minimizes a smooth quadratic-penalty merit
/// function (a hard feasibility wall would stall the pattern search on a
/// curved active boundary), then pulls the result back onto the feasible
/// side. Deterministic.
pub fn find_optimum(
    cost: &dyn Fn(&[f64]) -> f64,
    constraints: &dyn Fn(&[f64]) -> Vec<f64>,
    lo: &[f64],
    hi: &[f64],
) -> (Vec<f64>, f64) {
    assert_eq!(lo.len(), 2, "builtin optimum grid is two-dimensional");
    let n1 = ((hi[0] - lo[0]) / OPT_GRID_STEP).round() as usize + 1;
    let n2 = ((hi[1] - lo[1]) / OPT_GRID_STEP).round() as usize + 1;
    let mut best_u = vec![lo[0], lo[1]];
    let mut best_f = f64::INFINITY;
    for u1 in grid_points(lo[0], hi[0], n1) {
        for u2 in grid_points(lo[1], hi[1], n2) {
            let u = [u1, u2];
            if constraints(&u).iter().all(|&g| g <= 0.0) {
                let f = cost(&u);
                if f < best_f {
                    best_f = f;
                    best_u = u.to_vec();
                }
            }
        }
    }
    // Graduated quadratic penalty: each stage is smooth and starts at the
    // previous minimizer, so the pattern search never faces a hard wall or a
    // valley much narrower than its step.
    let mut u_star = best_u.clone();
    let mut rho = 1e3_f64;
    let mut h0 = 2.0 * OPT_GRID_STEP;
    while rho <= 1e13 {
        let merit = |u: &[f64]| {
            let mut m = cost(u);
            for g in constraints(u) {
                if g > 0.0 {
                    m += rho * g * g;
                }
            }
            m
        };
        let h_min = (1e-4 / rho).max(1e-12);
        let (next, _) = compass_minimize(merit, |_| true, lo, hi, &u_star, h0, h_min);
        u_star = next;
        rho *= 10.0;
        h0 = (100.0 / rho).max(1e-3).min(2.0 * OPT_GRID_STEP);
    }
    // The penalty minimizer can sit a hair outside; bisect back toward the
    // feasible grid anchor.
    let feasible = |u: &[f64]| constraints(u).iter().all(|&g| g <= 0.0);
    if !feasible(&u_star) {
        let mut t_lo = 0.0_f64;
        let mut t_hi = 1.0_f64;
        for _ in 0..80 {
            let mid = 0.5 * (t_lo + t_hi);
            let u: Vec<f64> = u_star
                .iter()
                .zip(&best_u)
                .map(|(a, b)| a + mid * (b - a))
                .collect();
            if feasible(&u) {
                t_hi = mid;
            } else {
                t_lo = mid;
            }
        }
        u_star = u_star
            .iter()
            .zip(&best_u)
            .map(|(a, b)| a + t_hi * (b - a))
            .collect();
    }
    let phi_star = cost(&u_star);
    (u_star, phi_star)
}

fn benchmark_polys() -> (Poly, Poly, [Poly; 3]) {
    // cost 1: (u1 - 0.5)^2 + (u2 - 0.4)^2
    let cost1 = Poly::from_tuples(&[
        (1.0, &[2, 0][..]),
        (-1.0, &[1, 0]),
        (1.0, &[0, 2]),
        (-0.8, &[0, 1]),
        (0.41, &[0, 0]),
    ]);
    // cost 2 (changing-cost study): (u1 + 0.25)^2 + (u2 - 0.6)^2
    let cost2 = Poly::from_tuples(&[
        (1.0, &[2, 0][..]),
        (0.5, &[1, 0]),
        (1.0, &[0, 2]),
        (-1.2, &[0, 1]),
        (0.4225, &[0, 0]),
    ]);
    let g1 = Poly::from_tuples(&[
        (-6.0, &[2, 0][..]),
        (-3.5, &[1, 0]),
        (1.0, &[0, 1]),
        (-0.6, &[0, 0]),
    ]);
    let g2 = Poly::from_tuples(&[
        (2.0, &[2, 0][..]),
        (0.5, &[1, 0]),
        (1.0, &[0, 1]),
        (-0.75, &[0, 0]),
    ]);
    let g3 = Poly::from_tuples(&[
        (-1.0, &[2, 0][..]),
        (-1.0, &[0, 2]),
        (0.3, &[0, 1]),
        (-0.0125, &[0, 0]),
    ]);
    (cost1, cost2, [g1, g2, g3])
}

fn build_benchmark(name: &str, u0: Vec<f64>, changing: bool) -> RtoProblem {
    let lo = vec![-0.5, 0.0];
    let hi = vec![0.5, 0.8];
    let (cost1, cost2, gs) = benchmark_polys();

    let cons_fn = {
        let gs = gs.clone();
        move |u: &[f64]| -> Vec<f64> { gs.iter().map(|g| g.eval(u)).collect() }
    };

    let make_cost = |poly: &Poly, start_k: usize, kappa: Vec<f64>| -> CostModel {
        let (f, grad) = RtoProblem::oracle_from_poly(poly);
        let eval = {
            let p = poly.clone();
            move |u: &[f64]| p.eval(u)
        };
        let (u_star, phi_star) = find_optimum(&eval, &cons_fn, &lo, &hi);
        let range = range_on_grid(&eval, &lo, &hi);
        CostModel {
            start_k,
            f,
            grad,
            u_star,
            phi_star,
            range,
            kappa,
            q_upper: vec![2.0, 0.0, 0.0, 2.0],
        }
    };

    let mut costs = vec![make_cost(&cost1, 0, vec![2.2, 0.35])];
    if changing {
        costs.push(make_cost(&cost2, 50, vec![1.5, 1.2]));
    }

    let constraints: Vec<ConstraintModel> = gs
        .iter()
        .enumerate()
        .map(|(j, g)| {
            let (f, grad) = RtoProblem::oracle_from_poly(g);
            let eval = {
                let p = g.clone();
                move |u: &[f64]| p.eval(u)
            };
            let range = range_on_grid(&eval, &lo, &hi);
            ConstraintModel { f, grad, range, known: false, convex: j == 1 }
        })
        .collect();

    RtoProblem {
        name: name.to_string(),
        n_u: 2,
        n_g: 3,
        u_lo: lo,
        u_hi: hi,
        u0,
        costs,
        constraints,
        lipschitz: LipschitzTable::symmetric(&[
            vec![9.5, 1.0],
            vec![2.5, 1.0],
            vec![1.0, 1.3],
        ]),
        known_cost: false,
    }
}

/// Built-in benchmark problems: `A`, `B`, and `B-changing`.
pub fn builtin_problem(name: &str) -> Result<RtoProblem, BenchError> {
    static A: OnceLock<RtoProblem> = OnceLock::new();
    static B: OnceLock<RtoProblem> = OnceLock::new();
    static BC: OnceLock<RtoProblem> = OnceLock::new();
    match name {
        "A" => Ok(A
            .get_or_init(|| build_benchmark("A", vec![-0.5, 0.05], false))
            .clone()),
        "B" => Ok(B
            .get_or_init(|| build_benchmark("B", vec![0.0, 0.4], false))
            .clone()),
        "B-changing" => Ok(BC
            .get_or_init(|| build_benchmark("B-changing", vec![0.0, 0.4], true))
            .clone()),
        other => Err(BenchError::UnknownProblem(other.to_string())),
    }
}

/// Additive uniform gradient noise scaled componentwise by the sensitivity
/// bounds: `estimate_i = true_i + sigma * kappa_i * U[-1, 1]`.
pub fn inject_gradient_noise(
    true_grad: &[f64],
    kappa_row: &[f64],
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    if sigma == 0.0 {
        return true_grad.to_vec();
    }
    true_grad
        .iter()
        .zip(kappa_row)
        .map(|(g, k)| g + sigma * k * rng.random_range(-1.0..=1.0))
        .collect()
}

/// Gaussian constraint measurement noise proportional to each constraint's
/// range: `w_j ~ N(0, (sigma_g * range_j)^2)`.
pub fn inject_constraint_noise(
    true_g: &[f64],
    sigma_g: f64,
    ranges: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    if sigma_g == 0.0 {
        return true_g.to_vec();
    }
    true_g
        .iter()
        .zip(ranges)
        .map(|(g, r)| {
            let n = Normal::new(0.0, sigma_g * r).expect("positive std");
            g + n.sample(rng)
        })
        .collect()
}

/// Which benchmark study a grid cell belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    Gradient,
    ConstraintNoise,
    Concavity,
    History,
    Slack,
    Known,
}

impl Study {
    pub fn parse(s: &str) -> Option<Study> {
        Some(match s.to_ascii_lowercase().as_str() {
            "gradient" => Study::Gradient,
            "constraint-noise" | "constraint" => Study::ConstraintNoise,
            "concavity" => Study::Concavity,
            "history" => Study::History,
            "slack" => Study::Slack,
            "known" => Study::Known,
            _ => return None,
        })
    }

    pub fn all() -> [Study; 6] {
        [
            Study::Gradient,
            Study::ConstraintNoise,
            Study::Concavity,
            Study::History,
            Study::Slack,
            Study::Known,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Study::Gradient => "gradient",
            Study::ConstraintNoise => "constraint-noise",
            Study::Concavity => "concavity",
            Study::History => "history",
            Study::Slack => "slack",
            Study::Known => "known",
        }
    }
}

/// Which coordinates the concave constraints are declared concave in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConcavityCase {
    None,
    FirstInput,
    SecondInput,
    Both,
}

impl ConcavityCase {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "none" => ConcavityCase::None,
            "u1" => ConcavityCase::FirstInput,
            "u2" => ConcavityCase::SecondInput,
            "both" => ConcavityCase::Both,
            _ => return None,
        })
    }

    fn coords(&self) -> &'static [usize] {
        match self {
            ConcavityCase::None => &[],
            ConcavityCase::FirstInput => &[0],
            ConcavityCase::SecondInput => &[1],
            ConcavityCase::Both => &[0, 1],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConcavityCase::None => "none",
            ConcavityCase::FirstInput => "u1",
            ConcavityCase::SecondInput => "u2",
            ConcavityCase::Both => "both",
        }
    }
}

/// One cell of the experiment grid.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub id: String,
    pub study: Study,
    pub problem: String,
    pub algo: AlgorithmKind,
    pub implementation: GradientMode,
    pub sigma: f64,
    pub sigma_g: f64,
    pub concavity: ConcavityCase,
    pub reuse_history: bool,
    pub slack_level: f64,
    pub known_cost: bool,
    pub known_cons: Vec<usize>,
    pub k_f: usize,
    pub q_scale: Option<f64>,
}

impl GridCell {
    fn base(study: Study, problem: &str, algo: AlgorithmKind) -> GridCell {
        GridCell {
            id: String::new(),
            study,
            problem: problem.to_string(),
            algo,
            implementation: GradientMode::Exact,
            sigma: 0.0,
            sigma_g: 0.0,
            concavity: ConcavityCase::None,
            reuse_history: false,
            slack_level: 0.0,
            known_cost: false,
            known_cons: vec![],
            k_f: default_kf(problem),
            q_scale: None,
        }
    }

    fn tag(mut self) -> GridCell {
        let known = if self.known_cost || !self.known_cons.is_empty() {
            let mut parts: Vec<String> = Vec::new();
            if self.known_cost {
                parts.push("phi".into());
            }
            for j in &self.known_cons {
                parts.push(format!("g{}", j + 1));
            }
            parts.join("+")
        } else {
            "none".into()
        };
        self.id = format!(
            "{}_{}_{}_{}_s{}_sg{}_c{}_r{}_l{}_k{}",
            self.study.name(),
            self.problem,
            self.algo.short(),
            self.implementation.short(),
            self.sigma,
            self.sigma_g,
            self.concavity.name(),
            if self.reuse_history { 1 } else { 0 },
            self.slack_level,
            known,
        );
        self
    }

    /// Builds the problem (with cell overrides) and the campaign config.
    pub fn instantiate(&self, seed: u64) -> Result<(RtoProblem, CampaignConfig), BenchError> {
        let mut problem = builtin_problem(&self.problem)?;
        for &j in &[0usize, 2] {
            // Declared concavity applies to the two concave constraints.
            problem.lipschitz.concave_in[j] = vec![false; problem.n_u];
            for &i in self.concavity.coords() {
                problem.lipschitz.concave_in[j][i] = true;
            }
        }
        problem.known_cost = self.known_cost;
        for &j in &self.known_cons {
            problem.constraints[j].known = true;
        }
        let cfg = CampaignConfig {
            algorithm: AlgorithmSpec::new(self.algo),
            implementation: self.implementation,
            sigma: self.sigma,
            sigma_g: self.sigma_g,
            k_f: self.k_f,
            seed,
            reuse_history: self.reuse_history,
            slack_level: self.slack_level,
            q_upper_scale: self.q_scale,
            ..CampaignConfig::default()
        };
        Ok((problem, cfg))
    }
}

/// The full set of cells for one study, mirroring the benchmark tables.
pub fn study_cells(study: Study) -> Vec<GridCell> {
    let mut cells = Vec::new();
    match study {
        Study::Gradient => {
            for problem in ["A", "B"] {
                let sigmas: &[f64] =
                    if problem == "A" { &[0.1, 0.3, 0.5] } else { &[0.1, 0.5, 1.0] };
                for algo in AlgorithmKind::all() {
                    cells.push(GridCell::base(study, problem, algo).tag());
                    for &sigma in sigmas {
                        for imp in [
                            GradientMode::NoisyDirect,
                            GradientMode::KnownSigma,
                            GradientMode::AdaptiveM,
                        ] {
                            let mut c = GridCell::base(study, problem, algo);
                            c.implementation = imp;
                            c.sigma = sigma;
                            cells.push(c.tag());
                        }
                    }
                }
            }
        }
        Study::ConstraintNoise => {
            for problem in ["A", "B"] {
                let sgs: &[f64] = if problem == "A" {
                    &[0.001, 0.002, 0.004]
                } else {
                    &[0.005, 0.01, 0.02]
                };
                for algo in AlgorithmKind::all() {
                    for &sg in sgs {
                        let mut c = GridCell::base(study, problem, algo);
                        c.sigma_g = sg;
                        cells.push(c.tag());
                    }
                }
            }
        }
        Study::Concavity => {
            for case in [
                ConcavityCase::None,
                ConcavityCase::FirstInput,
                ConcavityCase::SecondInput,
                ConcavityCase::Both,
            ] {
                let mut c = GridCell::base(study, "A", AlgorithmKind::IdealTarget);
                c.concavity = case;
                c.k_f = 200;
                cells.push(c.tag());
            }
        }
        Study::History => {
            for reuse in [false, true] {
                let mut c = GridCell::base(study, "B-changing", AlgorithmKind::IdealTarget);
                c.reuse_history = reuse;
                cells.push(c.tag());
            }
        }
        Study::Slack => {
            for (problem, levels) in
                [("A", [0.0, 0.005, 0.02, 0.05]), ("B", [0.0, 0.01, 0.05, 0.1])]
            {
                for &l in &levels {
                    let mut c = GridCell::base(study, problem, AlgorithmKind::IdealTarget);
                    c.slack_level = l;
                    cells.push(c.tag());
                }
            }
        }
        Study::Known => {
            let sets: &[(bool, &[usize])] = &[
                (false, &[]),
                (true, &[]),
                (false, &[0]),
                (false, &[1]),
                (false, &[2]),
                (false, &[0, 2]),
                (true, &[0, 2]),
            ];
            for &(kc, kg) in sets {
                let mut c = GridCell::base(study, "A", AlgorithmKind::IdealTarget);
                c.known_cost = kc;
                c.known_cons = kg.to_vec();
                c.k_f = 200;
                c.q_scale = Some(20.0);
                cells.push(c.tag());
            }
        }
    }
    cells
}

/// Aggregate of one grid cell over its replicates.
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub id: String,
    pub replicates: usize,
    pub losses: Vec<f64>,
    pub loss_mean: f64,
    pub loss_median: f64,
    /// Total count of iterates with a true violation above tolerance, summed
    /// over replicates.
    pub violations: usize,
    /// Replicates whose final iterate ended outside the optimum
    /// neighborhood.
    pub premature: usize,
}

/// Radius separating converged runs from prematurely stalled ones.
pub const PREMATURE_RADIUS: f64 = 0.05;
/// True-violation tolerance, relative to each constraint's range.
pub const VIOLATION_TOL: f64 = 1e-9;

/// Count of iterates with any true constraint value above tolerance.
pub fn count_violations(trace: &CampaignTrace, ranges: &[f64]) -> usize {
    trace
        .records
        .iter()
        .filter(|r| {
            r.g_true
                .iter()
                .zip(ranges)
                .any(|(&g, &range)| g > VIOLATION_TOL * range)
        })
        .count()
}

/// Runs one grid cell: `replicates` seeded campaigns, optional per-replicate
/// trace CSVs, and a summary row. Replicates run in parallel; the seed of
/// replicate `r` is `seed_base + r`.
pub fn run_experiment(
    cell: &GridCell,
    replicates: usize,
    seed_base: u64,
    out_dir: Option<&Path>,
) -> Result<CellSummary, BenchError> {
    let runs: Vec<Result<(CampaignTrace, RtoProblem), BenchError>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let (problem, cfg) = cell.instantiate(seed_base + r as u64)?;
            let trace = run_campaign(&problem, &cfg)?;
            Ok((trace, problem))
        })
        .collect();

    let mut losses = Vec::with_capacity(replicates);
    let mut violations = 0usize;
    let mut premature = 0usize;
    for (r, run) in runs.into_iter().enumerate() {
        let (trace, problem) = run?;
        let ranges: Vec<f64> = problem.constraints.iter().map(|c| c.range).collect();
        losses.push(crate::problem::optimality_loss(&trace).map_err(|_| {
            BenchError::BadCsv("trace missing reference costs")
        })?);
        violations += count_violations(&trace, &ranges);
        let final_phase = problem.phase_index(cell.k_f);
        let u_star = &problem.costs[final_phase].u_star;
        let dist: f64 = trace
            .final_u()
            .iter()
            .zip(u_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist > PREMATURE_RADIUS {
            premature += 1;
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
            let path = dir.join(format!("{}_r{}.csv", cell.id, r));
            write_trace_csv(&path, &trace)?;
        }
    }
    let mut sorted = losses.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let loss_mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    let loss_median = if sorted.is_empty() {
        f64::NAN
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    Ok(CellSummary {
        id: cell.id.clone(),
        replicates,
        losses,
        loss_mean,
        loss_median,
        violations,
        premature,
    })
}

fn fmt_float(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Writes the per-iteration trace with the fixed column schema
/// `k,u1..,phi_true,g*_true,phi_meas,g*_meas,K,P,eps_min,variant,d*`.
pub fn write_trace_csv(path: &Path, trace: &CampaignTrace) -> Result<(), BenchError> {
    let mut out = String::new();
    let n_u = trace.records.first().map_or(0, |r| r.u.len());
    let n_g = trace.records.first().map_or(0, |r| r.g_true.len());
    out.push('k');
    for i in 0..n_u {
        let _ = write!(out, ",u{}", i + 1);
    }
    out.push_str(",phi_true");
    for j in 0..n_g {
        let _ = write!(out, ",g{}_true", j + 1);
    }
    out.push_str(",phi_meas");
    for j in 0..n_g {
        let _ = write!(out, ",g{}_meas", j + 1);
    }
    out.push_str(",K,P,eps_min,variant");
    for j in 0..n_g {
        let _ = write!(out, ",d{}", j + 1);
    }
    out.push('\n');
    for r in &trace.records {
        let _ = write!(out, "{}", r.k);
        for v in &r.u {
            let _ = write!(out, ",{}", fmt_float(*v));
        }
        let _ = write!(out, ",{}", fmt_float(r.phi_true));
        for v in &r.g_true {
            let _ = write!(out, ",{}", fmt_float(*v));
        }
        let _ = write!(out, ",{}", fmt_float(r.phi_meas));
        for v in &r.g_meas {
            let _ = write!(out, ",{}", fmt_float(*v));
        }
        let _ = write!(
            out,
            ",{},{},{},{}",
            fmt_float(r.gain),
            fmt_float(r.p_level),
            fmt_float(r.eps_min),
            r.variant
        );
        for v in &r.d {
            let _ = write!(out, ",{}", fmt_float(*v));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Summary of one trace CSV as produced by [`write_trace_csv`].
#[derive(Debug, Clone)]
pub struct TraceFileSummary {
    pub rows: usize,
    pub final_u: Vec<f64>,
    pub phi_final: f64,
    pub phi_sum: f64,
    pub max_true_violation: f64,
    pub mean_gain: f64,
    pub converged_rows: usize,
}

/// Reads back a trace CSV and reduces it to headline numbers.
pub fn summarize_trace_csv(path: &Path) -> Result<TraceFileSummary, BenchError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(BenchError::BadCsv("empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let n_u = cols.iter().filter(|c| c.starts_with('u')).count();
    let n_g = cols.iter().filter(|c| c.ends_with("_true") && c.starts_with('g')).count();
    let variant_col = 1 + n_u + 1 + n_g + 1 + n_g + 3;
    let mut rows = 0usize;
    let mut final_u = vec![0.0; n_u];
    let mut phi_final = 0.0;
    let mut phi_sum = 0.0;
    let mut max_viol = f64::NEG_INFINITY;
    let mut gain_sum = 0.0;
    let mut converged = 0usize;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(BenchError::BadCsv("row width mismatch"));
        }
        rows += 1;
        for i in 0..n_u {
            final_u[i] = f[1 + i].parse().map_err(|_| BenchError::BadCsv("bad float"))?;
        }
        phi_final = f[1 + n_u].parse().map_err(|_| BenchError::BadCsv("bad float"))?;
        phi_sum += phi_final;
        for j in 0..n_g {
            let g: f64 =
                f[2 + n_u + j].parse().map_err(|_| BenchError::BadCsv("bad float"))?;
            max_viol = max_viol.max(g);
        }
        let gain: f64 = f[2 + n_u + 2 * n_g + 1]
            .parse()
            .map_err(|_| BenchError::BadCsv("bad float"))?;
        gain_sum += gain;
        if StepVariant::parse(f[variant_col]) == Some(StepVariant::Converged) {
            converged += 1;
        }
    }
    Ok(TraceFileSummary {
        rows,
        final_u,
        phi_final,
        phi_sum,
        max_true_violation: max_viol,
        mean_gain: if rows > 0 { gain_sum / rows as f64 } else { 0.0 },
        converged_rows: converged,
    })
}

/// Writes cell summaries as a CSV table.
pub fn write_summary_csv(path: &Path, summaries: &[CellSummary]) -> Result<(), BenchError> {
    let mut out =
        String::from("cell,replicates,loss_mean,loss_median,violations,premature\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.id,
            s.replicates,
            fmt_float(s.loss_mean),
            fmt_float(s.loss_median),
            s.violations,
            s.premature
        );
    }
    fs::write(path, out)?;
    Ok(())
}
