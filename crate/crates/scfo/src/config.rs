//! Declarative problem and campaign configuration (TOML).
//!
//! A config file can name a builtin problem or define a custom
//! two-input polynomial problem, set the campaign parameters, and optionally
//! describe an experiment grid run:
//!
//! ```toml
//! [problem]
//! builtin = "B"
//!
//! [campaign]
//! algo = "it"
//! implementation = "III"
//! sigma = 0.3
//! kf = 100
//! seed = 7
//! ```
//!
//! Custom problems list polynomial terms as `[coef, p1, p2]` rows; gradients
//! are derived analytically and the scaling ranges, sensitivity bounds, and
//! cached optima are computed at load time.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::algorithms::{AlgorithmKind, AlgorithmSpec};
use crate::bench::{builtin_problem, default_kf, find_optimum, range_on_grid, ConcavityCase};
use crate::poly::{Poly, Term};
use crate::problem::{ConstraintModel, CostModel, RtoProblem};
use crate::supervisor::{CampaignConfig, GradientMode, InfeasibilityPolicy, SupervisorConfig};
use crate::uncertainty::LipschitzTable;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("toml parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub problem: Option<ProblemSpec>,
    pub campaign: Option<CampaignSpec>,
    pub grid: Option<GridSpec>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub builtin: Option<String>,
    pub name: Option<String>,
    pub box_lo: Option<Vec<f64>>,
    pub box_hi: Option<Vec<f64>>,
    pub u0: Option<Vec<f64>>,
    #[serde(default)]
    pub costs: Vec<CostSpec>,
    #[serde(default)]
    pub constraints: Vec<ConstraintSpec>,
    /// Symmetric sensitivity-bound rows overriding the derived defaults.
    pub lipschitz: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    /// Rows of `[coef, p1, p2]`.
    pub terms: Vec<Vec<f64>>,
    #[serde(default)]
    pub start_k: usize,
    pub kappa: Option<Vec<f64>>,
    pub q_scale: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub terms: Vec<Vec<f64>>,
    #[serde(default)]
    pub known: bool,
    #[serde(default)]
    pub convex: bool,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    pub algo: Option<String>,
    pub implementation: Option<String>,
    pub sigma: Option<f64>,
    pub sigma_g: Option<f64>,
    pub sigma_cost: Option<f64>,
    pub kf: Option<usize>,
    pub seed: Option<u64>,
    pub reuse_history: Option<bool>,
    pub slack_level: Option<f64>,
    pub slack_total_factor: Option<f64>,
    pub q_scale: Option<f64>,
    pub adaptive_qbound: Option<bool>,
    pub qbound_init: Option<f64>,
    /// Knowledge shortcuts: `"phi"` or `"g<j>"`.
    pub known: Option<Vec<String>>,
    /// Concavity declaration for the concave benchmark constraints:
    /// `none|u1|u2|both`.
    pub concave: Option<String>,
    pub policy: Option<String>,
    pub eps_floor: Option<f64>,
    pub p_step: Option<f64>,
    pub m_fraction: Option<f64>,
}

#[derive(Debug, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub study: Option<String>,
    pub replicates: Option<usize>,
    pub seed_base: Option<u64>,
    pub out_dir: Option<String>,
}

#[derive(Debug)]
pub struct LoadedConfig {
    pub problem: RtoProblem,
    pub campaign: CampaignConfig,
    pub grid: Option<GridSpec>,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<LoadedConfig, ConfigError> {
    let file: FileConfig = toml::from_str(text)?;
    let mut problem = match &file.problem {
        None => builtin_problem("B").map_err(|e| invalid(e.to_string()))?,
        Some(spec) => build_problem(spec)?,
    };
    let campaign = build_campaign(file.campaign.as_ref(), &mut problem)?;
    Ok(LoadedConfig { problem, campaign, grid: file.grid })
}

fn parse_terms(rows: &[Vec<f64>]) -> Result<Poly, ConfigError> {
    let mut terms = Vec::new();
    for row in rows {
        if row.len() < 2 {
            return Err(invalid("polynomial term must be [coef, p1, p2, ...]"));
        }
        let powers: Vec<u32> = row[1..]
            .iter()
            .map(|p| {
                if *p < 0.0 || p.fract() != 0.0 {
                    Err(invalid("powers must be nonnegative integers"))
                } else {
                    Ok(*p as u32)
                }
            })
            .collect::<Result<_, _>>()?;
        terms.push(Term { coef: row[0], powers });
    }
    Ok(Poly::new(terms))
}

fn build_problem(spec: &ProblemSpec) -> Result<RtoProblem, ConfigError> {
    if let Some(name) = &spec.builtin {
        return builtin_problem(name).map_err(|e| invalid(e.to_string()));
    }
    let lo = spec.box_lo.clone().ok_or_else(|| invalid("custom problem needs box_lo"))?;
    let hi = spec.box_hi.clone().ok_or_else(|| invalid("custom problem needs box_hi"))?;
    let u0 = spec.u0.clone().ok_or_else(|| invalid("custom problem needs u0"))?;
    if lo.len() != 2 || hi.len() != 2 || u0.len() != 2 {
        return Err(invalid("custom problems are two-dimensional"));
    }
    if spec.costs.is_empty() {
        return Err(invalid("custom problem needs at least one [[problem.costs]] entry"));
    }
    if spec.constraints.is_empty() {
        return Err(invalid("custom problem needs at least one [[problem.constraints]] entry"));
    }

    let cons_polys: Vec<Poly> = spec
        .constraints
        .iter()
        .map(|c| parse_terms(&c.terms))
        .collect::<Result<_, _>>()?;
    let cons_eval = {
        let polys = cons_polys.clone();
        move |u: &[f64]| -> Vec<f64> { polys.iter().map(|p| p.eval(u)).collect() }
    };

    let mut costs = Vec::new();
    for cs in &spec.costs {
        let poly = parse_terms(&cs.terms)?;
        let (f, grad) = RtoProblem::oracle_from_poly(&poly);
        let eval = {
            let p = poly.clone();
            move |u: &[f64]| p.eval(u)
        };
        let (u_star, phi_star) = find_optimum(&eval, &cons_eval, &lo, &hi);
        let range = range_on_grid(&eval, &lo, &hi);
        if range <= 0.0 {
            return Err(invalid("cost is identically zero on the box"));
        }
        let kappa = match &cs.kappa {
            Some(k) => k.clone(),
            None => (0..2).map(|i| poly.derivative(i).abs_bound(&lo, &hi)).collect(),
        };
        let q_scale = cs.q_scale.unwrap_or_else(|| {
            let mut worst = 0.0_f64;
            for i in 0..2 {
                for j in 0..2 {
                    worst = worst.max(poly.derivative(i).derivative(j).abs_bound(&lo, &hi));
                }
            }
            (2.0 * worst).max(1e-6)
        });
        costs.push(CostModel {
            start_k: cs.start_k,
            f,
            grad,
            u_star,
            phi_star,
            range,
            kappa,
            q_upper: vec![q_scale, 0.0, 0.0, q_scale],
        });
    }
    costs.sort_by_key(|c| c.start_k);
    if costs[0].start_k != 0 {
        return Err(invalid("the first cost phase must have start_k = 0"));
    }

    let mut kappa_rows = Vec::new();
    let mut constraints = Vec::new();
    for (cs, poly) in spec.constraints.iter().zip(&cons_polys) {
        let (f, grad) = RtoProblem::oracle_from_poly(poly);
        let eval = {
            let p = poly.clone();
            move |u: &[f64]| p.eval(u)
        };
        let range = range_on_grid(&eval, &lo, &hi);
        if range <= 0.0 {
            return Err(invalid("a constraint is identically zero on the box"));
        }
        kappa_rows.push(
            (0..2)
                .map(|i| poly.derivative(i).abs_bound(&lo, &hi).max(1e-12))
                .collect::<Vec<f64>>(),
        );
        constraints.push(ConstraintModel { f, grad, range, known: cs.known, convex: cs.convex });
    }
    if let Some(rows) = &spec.lipschitz {
        if rows.len() != constraints.len() || rows.iter().any(|r| r.len() != 2) {
            return Err(invalid("lipschitz override must be n_g rows of 2 entries"));
        }
        kappa_rows = rows.clone();
    }

    let problem = RtoProblem {
        name: spec.name.clone().unwrap_or_else(|| "custom".to_string()),
        n_u: 2,
        n_g: constraints.len(),
        u_lo: lo,
        u_hi: hi,
        u0,
        costs,
        constraints,
        lipschitz: LipschitzTable::symmetric(&kappa_rows),
        known_cost: false,
    };
    if !problem.check_initial_point() {
        return Err(invalid("u0 must be strictly feasible"));
    }
    Ok(problem)
}

/// Applies knowledge and concavity shortcuts to a problem in place.
pub fn apply_overrides(
    problem: &mut RtoProblem,
    known: &[String],
    concave: Option<&str>,
) -> Result<(), ConfigError> {
    for item in known {
        let item = item.to_ascii_lowercase();
        if item == "phi" || item == "cost" {
            problem.known_cost = true;
        } else if let Some(idx) = item.strip_prefix('g').and_then(|s| s.parse::<usize>().ok()) {
            if idx == 0 || idx > problem.n_g {
                return Err(invalid(format!("constraint index out of range: {item}")));
            }
            problem.constraints[idx - 1].known = true;
        } else {
            return Err(invalid(format!("unknown knowledge item `{item}`")));
        }
    }
    if let Some(c) = concave {
        let case = ConcavityCase::parse(c)
            .ok_or_else(|| invalid(format!("unknown concavity case `{c}`")))?;
        // The declarations target the two concave benchmark constraints.
        for &j in &[0usize, 2] {
            if j < problem.n_g {
                problem.lipschitz.concave_in[j] = vec![false; problem.n_u];
                match case {
                    ConcavityCase::None => {}
                    ConcavityCase::FirstInput => problem.lipschitz.concave_in[j][0] = true,
                    ConcavityCase::SecondInput => problem.lipschitz.concave_in[j][1] = true,
                    ConcavityCase::Both => {
                        problem.lipschitz.concave_in[j][0] = true;
                        problem.lipschitz.concave_in[j][1] = true;
                    }
                }
            }
        }
    }
    Ok(())
}

fn build_campaign(
    spec: Option<&CampaignSpec>,
    problem: &mut RtoProblem,
) -> Result<CampaignConfig, ConfigError> {
    let mut cfg = CampaignConfig { k_f: default_kf(&problem.name), ..CampaignConfig::default() };
    let Some(s) = spec else { return Ok(cfg) };
    if let Some(a) = &s.algo {
        let kind = AlgorithmKind::parse(a)
            .ok_or_else(|| invalid(format!("unknown algorithm `{a}`")))?;
        cfg.algorithm = AlgorithmSpec::new(kind);
    }
    if let Some(i) = &s.implementation {
        cfg.implementation = GradientMode::parse(i)
            .ok_or_else(|| invalid(format!("unknown implementation `{i}`")))?;
    }
    if let Some(v) = s.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = s.sigma_g {
        cfg.sigma_g = v;
    }
    if let Some(v) = s.sigma_cost {
        cfg.sigma_cost = v;
    }
    if let Some(v) = s.kf {
        cfg.k_f = v;
    }
    if let Some(v) = s.seed {
        cfg.seed = v;
    }
    if let Some(v) = s.reuse_history {
        cfg.reuse_history = v;
    }
    if let Some(v) = s.slack_level {
        cfg.slack_level = v;
    }
    if let Some(v) = s.slack_total_factor {
        cfg.slack_total_factor = v;
    }
    if let Some(v) = s.q_scale {
        cfg.q_upper_scale = Some(v);
    }
    if let Some(v) = s.adaptive_qbound {
        cfg.adaptive_qbound = v;
    }
    if let Some(v) = s.qbound_init {
        cfg.qbound_init = v;
    }
    let mut sup = SupervisorConfig::default();
    if let Some(p) = &s.policy {
        sup.policy = match p.to_ascii_lowercase().as_str() {
            "declare-convergence" | "converge" => InfeasibilityPolicy::DeclareConvergence,
            "perturb-and-refine" | "perturb" => InfeasibilityPolicy::PerturbAndRefine,
            "partial-robustness" | "partial" => InfeasibilityPolicy::PartialRobustness,
            other => return Err(invalid(format!("unknown policy `{other}`"))),
        };
    }
    if let Some(v) = s.eps_floor {
        sup.eps_floor = v;
    }
    if let Some(v) = s.p_step {
        sup.p_step = v;
    }
    if let Some(v) = s.m_fraction {
        sup.m_fraction = v;
    }
    cfg.supervisor = sup;
    apply_overrides(problem, s.known.as_deref().unwrap_or(&[]), s.concave.as_deref())?;
    Ok(cfg)
}
