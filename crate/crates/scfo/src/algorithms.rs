//! Reference RTO algorithms that supply the raw targets the supervisor
//! filters. These are standard reconstructions of the five usual suspects
//! (ideal target, gradient descent, modifier adaptation, two-step parameter
//! fitting, random step), kept deliberately simple: constraint handling is
//! the supervisor's job, not the algorithm's.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::problem::{HistoryRecord, RtoProblem};
use crate::vecops::{clamp_to_box, compass_minimize, in_box};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmKind {
    IdealTarget,
    GradientDescent,
    ModifierAdaptation,
    TwoStep,
    RandomStep,
}

impl AlgorithmKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "it" | "ideal-target" => AlgorithmKind::IdealTarget,
            "gd" | "gradient-descent" => AlgorithmKind::GradientDescent,
            "ma" | "modifier-adaptation" => AlgorithmKind::ModifierAdaptation,
            "ts" | "two-step" => AlgorithmKind::TwoStep,
            "rs" | "random-step" => AlgorithmKind::RandomStep,
            _ => return None,
        })
    }

    pub fn short(&self) -> &'static str {
        match self {
            AlgorithmKind::IdealTarget => "it",
            AlgorithmKind::GradientDescent => "gd",
            AlgorithmKind::ModifierAdaptation => "ma",
            AlgorithmKind::TwoStep => "ts",
            AlgorithmKind::RandomStep => "rs",
        }
    }

    pub fn all() -> [AlgorithmKind; 5] {
        [
            AlgorithmKind::IdealTarget,
            AlgorithmKind::GradientDescent,
            AlgorithmKind::ModifierAdaptation,
            AlgorithmKind::TwoStep,
            AlgorithmKind::RandomStep,
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    pub kind: AlgorithmKind,
    /// Gradient-descent step length.
    pub step_scale: f64,
    /// Random-step amplitude as a fraction of the box span.
    pub random_scale: f64,
    /// Number of recent measurement sites used by the two-step fit.
    pub fit_window: usize,
}

impl AlgorithmSpec {
    pub fn new(kind: AlgorithmKind) -> Self {
        AlgorithmSpec { kind, step_scale: 1.0, random_scale: 0.2, fit_window: 8 }
    }
}

impl Default for AlgorithmSpec {
    fn default() -> Self {
        AlgorithmSpec::new(AlgorithmKind::IdealTarget)
    }
}

/// Everything an algorithm may look at when proposing a target: the current
/// base point, its raw gradient estimate, the measurement history, and the
/// problem definition (used for box bounds, cached optima, and the cost
/// structure of the active phase).
pub struct TargetContext<'a> {
    pub u_k: &'a [f64],
    pub cost_grad_est: &'a [f64],
    pub history: &'a [HistoryRecord],
    pub problem: &'a RtoProblem,
    pub phase: usize,
}

/// Proposes the next raw target; always returned inside the box.
pub fn next_target(spec: &AlgorithmSpec, ctx: &TargetContext<'_>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let lo = &ctx.problem.u_lo;
    let hi = &ctx.problem.u_hi;
    let mut target = match spec.kind {
        AlgorithmKind::IdealTarget => ctx.problem.costs[ctx.phase].u_star.clone(),
        AlgorithmKind::GradientDescent => ctx
            .u_k
            .iter()
            .zip(ctx.cost_grad_est)
            .map(|(u, g)| u - spec.step_scale * g)
            .collect(),
        AlgorithmKind::ModifierAdaptation => {
            // Structural cost model corrected by the first-order mismatch
            // between the measured gradient and the model gradient.
            let cost = &ctx.problem.costs[ctx.phase];
            let model_grad = (cost.grad)(ctx.u_k);
            let lambda: Vec<f64> = ctx
                .cost_grad_est
                .iter()
                .zip(&model_grad)
                .map(|(e, m)| e - m)
                .collect();
            let f = |u: &[f64]| {
                (cost.f)(u) + lambda.iter().zip(u).map(|(l, ui)| l * ui).sum::<f64>()
            };
            let (opt, _) = compass_minimize(f, |_| true, lo, hi, ctx.u_k, 0.25, 1e-9);
            opt
        }
        AlgorithmKind::TwoStep => two_step_target(spec, ctx),
        AlgorithmKind::RandomStep => {
            let mut t = ctx.u_k.to_vec();
            for i in 0..t.len() {
                let span = hi[i] - lo[i];
                t[i] += spec.random_scale * span * rng.random_range(-1.0..=1.0);
            }
            t
        }
    };
    clamp_to_box(&mut target, lo, hi);
    debug_assert!(in_box(&target, lo, hi, 0.0));
    target
}

/// Two-step scheme: fit the parameters of an isotropic quadratic cost model
/// `||u - theta||^2 + c` to recent measured costs, then optimize the model.
/// With too few (or degenerate) sites the fit falls back to matching the
/// current gradient estimate instead.
fn two_step_target(spec: &AlgorithmSpec, ctx: &TargetContext<'_>) -> Vec<f64> {
    let n = ctx.u_k.len();
    let take = ctx.history.len().min(spec.fit_window);
    let recent = &ctx.history[ctx.history.len() - take..];
    if take >= n + 1 {
        // psi = cost - ||u||^2 = -2 theta . u + c, linear in (theta, c)
        let dim = n + 1;
        let mut ata = vec![0.0; dim * dim];
        let mut atb = vec![0.0; dim];
        for rec in recent {
            let mut row = Vec::with_capacity(dim);
            for &ui in &rec.u {
                row.push(-2.0 * ui);
            }
            row.push(1.0);
            let unorm2: f64 = rec.u.iter().map(|v| v * v).sum();
            let psi = rec.cost_meas_mean - unorm2;
            for a in 0..dim {
                for b in 0..dim {
                    ata[a * dim + b] += row[a] * row[b];
                }
                atb[a] += row[a] * psi;
            }
        }
        if let Some(sol) = solve_dense(&mut ata, &mut atb, dim) {
            return sol[..n].to_vec();
        }
    }
    // Bootstrap: center implied by the gradient estimate of the quadratic
    // structure (Hessian 2I).
    ctx.u_k
        .iter()
        .zip(ctx.cost_grad_est)
        .map(|(u, g)| u - 0.5 * g)
        .collect()
}

/// In-place Gaussian elimination with partial pivoting; None when singular.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col].abs() < 1e-12 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = b[r];
        for c in r + 1..n {
            s -= a[r * n + c] * x[c];
        }
        x[r] = s / a[r * n + r];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::builtin_problem;
    use crate::uncertainty::GradientBox;
    use rand::SeedableRng;

    fn ctx_record(u: &[f64], cost: f64) -> HistoryRecord {
        HistoryRecord {
            k_first: 0,
            u: u.to_vec(),
            repetitions: 1,
            g_meas_last: vec![],
            g_meas_mean: vec![],
            cost_meas_last: cost,
            cost_meas_mean: cost,
            g_upper: vec![],
            cost_grad_est: vec![0.0; u.len()],
            cons_grad_est: vec![],
            cost_box: GradientBox::exact(&vec![0.0; u.len()]),
            cons_boxes: vec![],
        }
    }

    #[test]
    fn ideal_target_returns_cached_optimum() {
        let p = builtin_problem("B").unwrap();
        let spec = AlgorithmSpec::new(AlgorithmKind::IdealTarget);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ctx = TargetContext {
            u_k: &[0.0, 0.4],
            cost_grad_est: &[-1.0, 0.0],
            history: &[],
            problem: &p,
            phase: 0,
        };
        let t = next_target(&spec, &ctx, &mut rng);
        assert_eq!(t, p.costs[0].u_star);
    }

    #[test]
    fn gradient_descent_clips_to_box() {
        let p = builtin_problem("B").unwrap();
        let spec = AlgorithmSpec::new(AlgorithmKind::GradientDescent);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ctx = TargetContext {
            u_k: &[0.0, 0.4],
            cost_grad_est: &[-1.0, 0.0],
            history: &[],
            problem: &p,
            phase: 0,
        };
        let t = next_target(&spec, &ctx, &mut rng);
        assert_eq!(t, vec![0.5, 0.4]); // u1 capped at the upper box bound
    }

    #[test]
    fn random_step_is_reproducible_and_boxed() {
        let p = builtin_problem("B").unwrap();
        let spec = AlgorithmSpec::new(AlgorithmKind::RandomStep);
        let ctx = TargetContext {
            u_k: &[0.0, 0.4],
            cost_grad_est: &[0.0, 0.0],
            history: &[],
            problem: &p,
            phase: 0,
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let t1 = next_target(&spec, &ctx, &mut r1);
        let t2 = next_target(&spec, &ctx, &mut r2);
        assert_eq!(t1, t2);
        assert!(in_box(&t1, &p.u_lo, &p.u_hi, 0.0));
    }

    #[test]
    fn modifier_adaptation_with_exact_gradient_finds_model_optimum() {
        let p = builtin_problem("B").unwrap();
        let spec = AlgorithmSpec::new(AlgorithmKind::ModifierAdaptation);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u_k = [0.0, 0.4];
        let exact = (p.costs[0].grad)(&u_k);
        let ctx = TargetContext {
            u_k: &u_k,
            cost_grad_est: &exact,
            history: &[],
            problem: &p,
            phase: 0,
        };
        let t = next_target(&spec, &ctx, &mut rng);
        // zero mismatch: the model optimum is the unconstrained cost center
        assert!((t[0] - 0.5).abs() < 1e-6 && (t[1] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn two_step_fit_recovers_center_from_exact_data() {
        let p = builtin_problem("B").unwrap();
        let spec = AlgorithmSpec::new(AlgorithmKind::TwoStep);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cost = |u: &[f64]| (u[0] - 0.5_f64).powi(2) + (u[1] - 0.4_f64).powi(2);
        let pts = [[0.0, 0.4], [0.1, 0.2], [-0.2, 0.3], [0.2, 0.5]];
        let history: Vec<HistoryRecord> =
            pts.iter().map(|u| ctx_record(u, cost(u))).collect();
        let ctx = TargetContext {
            u_k: &[0.2, 0.5],
            cost_grad_est: &[0.0, 0.0],
            history: &history,
            problem: &p,
            phase: 0,
        };
        let t = next_target(&spec, &ctx, &mut rng);
        assert!((t[0] - 0.5).abs() < 1e-8 && (t[1] - 0.4).abs() < 1e-8);
    }
}
