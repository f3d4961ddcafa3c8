//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS/FAIL line with its measured numbers. Run with
//! `cargo test --test acceptance -- --nocapture`.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use common::{enumeration_projection, random_cone, random_feasible_instance, vertex_system};
use scfo::algorithms::{AlgorithmKind, AlgorithmSpec};
use scfo::bench::{
    builtin_problem, count_violations, study_cells, write_trace_csv, ConcavityCase, Study,
};
use scfo::gain::SlackState;
use scfo::problem::{optimality_loss, HistoryRecord, IterateState};
use scfo::projection::{ConeRow, DescentCone, ProjectionParams};
use scfo::qp::{is_feasible, kkt_residuals, solve_least_distance, QpOptions};
use scfo::supervisor::{
    run_campaign, run_iteration, CampaignConfig, GradientMode, IterationInputs,
    IterationOutcome, SupervisorConfig,
};
use scfo::uncertainty::{
    constraint_upper_bound, GradientBox, LipschitzTable, NoiseModel, QBoundState,
};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {}: {} - {}",
        criterion,
        if pass { "PASS" } else { "FAIL" },
        detail
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn nominal_traces(problem: &str, k_f: usize) -> Vec<(AlgorithmKind, scfo::CampaignTrace)> {
    let p = builtin_problem(problem).unwrap();
    AlgorithmKind::all()
        .into_iter()
        .map(|algo| {
            let cfg = CampaignConfig {
                algorithm: AlgorithmSpec::new(algo),
                k_f,
                seed: 1,
                ..CampaignConfig::default()
            };
            (algo, run_campaign(&p, &cfg).unwrap())
        })
        .collect()
}

#[test]
fn criterion_1_feasibility_guarantee() {
    let mut worst = f64::NEG_INFINITY;
    let mut slowest = 0.0_f64;
    for (problem, k_f) in [("A", 1000usize), ("B", 100)] {
        let p = builtin_problem(problem).unwrap();
        let ranges: Vec<f64> = p.constraints.iter().map(|c| c.range).collect();
        for algo in AlgorithmKind::all() {
            let cfg = CampaignConfig {
                algorithm: AlgorithmSpec::new(algo),
                k_f,
                seed: 1,
                ..CampaignConfig::default()
            };
            let t0 = Instant::now();
            let trace = run_campaign(&p, &cfg).unwrap();
            slowest = slowest.max(t0.elapsed().as_secs_f64());
            assert_eq!(trace.records.len(), k_f + 1);
            let v = count_violations(&trace, &ranges);
            assert_eq!(v, 0, "{problem}/{algo:?} had violating iterates");
            for r in &trace.records {
                for (j, &g) in r.g_true.iter().enumerate() {
                    worst = worst.max(g / ranges[j]);
                }
            }
        }
    }
    report(
        "1 feasibility",
        worst <= 1e-9 && slowest < 10.0,
        &format!("worst scaled constraint value {:.2e}, slowest campaign {:.2}s", worst, slowest),
    );
}

#[test]
fn criterion_2_monotone_cost() {
    let mut worst_rise = f64::NEG_INFINITY;
    for (problem, k_f) in [("A", 1000usize), ("B", 100)] {
        for (algo, trace) in nominal_traces(problem, k_f) {
            for w in trace.records.windows(2) {
                if w[0].gain > 0.0 {
                    let rise = w[1].phi_true - w[0].phi_true;
                    worst_rise = worst_rise.max(rise);
                    assert!(
                        rise <= 1e-12,
                        "{problem}/{algo:?} cost rose by {rise:.3e} at k={}",
                        w[0].k
                    );
                }
            }
        }
    }
    report("2 monotone-cost", worst_rise <= 1e-12, &format!("worst rise {:.2e}", worst_rise));
}

#[test]
fn criterion_3_slack_vertex_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut feasible_count = 0usize;
    let mut infeasible_count = 0usize;
    for trial in 0..1000 {
        let n_u = rng.random_range(2..=4usize);
        let n_rows = rng.random_range(1..=3usize);
        let cone = random_cone(&mut rng, n_u, n_rows);
        let lib_cone = DescentCone {
            u_k: cone.u_k.clone(),
            rows: cone
                .rows
                .iter()
                .map(|(lo, hi, d)| ConeRow {
                    lo: lo.clone(),
                    hi: hi.clone(),
                    delta: *d,
                })
                .collect(),
            lo: cone.lo.clone(),
            hi: cone.hi.clone(),
        };
        let slack_feasible = is_feasible(&lib_cone.slack_system()).unwrap();
        let vertex_feasible = is_feasible(&vertex_system(&cone)).unwrap();
        assert_eq!(
            slack_feasible, vertex_feasible,
            "disagreement on trial {trial}: slack={slack_feasible} vertex={vertex_feasible}"
        );
        if slack_feasible {
            feasible_count += 1;
        } else {
            infeasible_count += 1;
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    report(
        "3 slack-vertex-equivalence",
        feasible_count > 0 && infeasible_count > 0 && dt < 30.0,
        &format!(
            "1000 instances agree ({} feasible, {} infeasible) in {:.2}s",
            feasible_count, infeasible_count, dt
        ),
    );
}

#[test]
fn criterion_4_qp_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst_kkt = 0.0_f64;
    let mut worst_obj_gap = 0.0_f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=4usize);
        let (x0, sys) = random_feasible_instance(&mut rng, n, 6);
        let sol = solve_least_distance(&x0, &sys, &QpOptions::default()).unwrap();
        let (stat, comp, feas) = kkt_residuals(&x0, &sys, &sol);
        assert!(stat <= 1e-8 && comp <= 1e-8 && feas <= 1e-10, "kkt {stat} {comp} {feas}");
        worst_kkt = worst_kkt.max(stat).max(comp);
        let (_, oracle_obj) = enumeration_projection(&x0, &sys).expect("feasible by anchor");
        let obj: f64 = sol.x.iter().zip(&x0).map(|(a, b)| (a - b) * (a - b)).sum();
        let gap = (obj - oracle_obj).abs();
        assert!(gap <= 1e-6, "objective gap {gap}");
        worst_obj_gap = worst_obj_gap.max(gap);
    }
    report(
        "4 qp-correctness",
        true,
        &format!("worst KKT residual {:.2e}, worst oracle gap {:.2e}", worst_kkt, worst_obj_gap),
    );
}

#[test]
fn criterion_5_bound_coverage() {
    // 10,000 simulated noisy measurements at strictly feasible points; the
    // robust upper bound must cover the true value in at least 99.8%.
    let p = builtin_problem("B").unwrap();
    let ranges: Vec<f64> = p.constraints.iter().map(|c| c.range).collect();
    let sigma_g = 0.02;
    let noise = NoiseModel {
        w_lo: vec![-3.0 * sigma_g; 3],
        sigma_g,
        sigma_grad: 0.0,
        sigma_cost: 0.0,
        m: 0.0,
        sigma_nabla: vec![1.0; 2],
    };
    let lip = p.lipschitz.scaled(&ranges);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut covered = 0usize;
    let mut total = 0usize;
    while total < 10_000 {
        let u = [
            rng.random_range(p.u_lo[0]..=p.u_hi[0]),
            rng.random_range(p.u_lo[1]..=p.u_hi[1]),
        ];
        let g_true = p.eval_constraints(&u);
        if g_true.iter().any(|&g| g >= 0.0) {
            continue; // the bound presumes feasible-side operation
        }
        let g_meas =
            scfo::bench::inject_constraint_noise(&g_true, sigma_g, &ranges, &mut rng);
        let g_meas_scaled: Vec<f64> =
            g_meas.iter().zip(&ranges).map(|(g, r)| g / r).collect();
        let rec = HistoryRecord {
            k_first: 0,
            u: u.to_vec(),
            repetitions: 1,
            g_meas_last: g_meas_scaled.clone(),
            g_meas_mean: g_meas_scaled,
            cost_meas_last: 0.0,
            cost_meas_mean: 0.0,
            g_upper: vec![0.0; 3],
            cost_grad_est: vec![0.0; 2],
            cons_grad_est: vec![vec![0.0; 2]; 3],
            cost_box: GradientBox::exact(&[0.0, 0.0]),
            cons_boxes: vec![GradientBox::exact(&[0.0, 0.0]); 3],
        };
        let mut state =
            IterateState::new(u.to_vec(), SlackState::hard(3), QBoundState::isotropic(2, 2.0));
        state.merge_observation(rec);
        for j in 0..3 {
            let bound = constraint_upper_bound(j, &state, &noise, &lip, None).unwrap();
            if bound >= g_true[j] / ranges[j] {
                covered += 1;
            }
            total += 1;
        }
    }
    let rate = covered as f64 / total as f64;
    report("5 bound-coverage", rate >= 0.998, &format!("coverage {:.4} of {}", rate, total));
}

#[test]
fn criterion_6_violation_budget() {
    let cells: Vec<_> = study_cells(Study::Slack)
        .into_iter()
        .filter(|c| c.slack_level > 0.0)
        .collect();
    let mut worst_margin = f64::NEG_INFINITY;
    for cell in &cells {
        for (sigma_g, seeds) in [(0.0, vec![0u64]), (0.005, vec![1, 2])] {
            for &seed in &seeds {
                let (problem, mut cfg) = cell.instantiate(seed).unwrap();
                cfg.sigma_g = sigma_g;
                let trace = run_campaign(&problem, &cfg).unwrap();
                for j in 0..problem.n_g {
                    let range = problem.constraints[j].range;
                    let budget = cfg.slack_level * cfg.slack_total_factor * range
                        + 3.0 * sigma_g * range;
                    let integral = trace.violation_integral(j);
                    worst_margin = worst_margin.max(integral - budget);
                    assert!(
                        integral <= budget,
                        "{} sigma_g={} seed={} g{}: integral {:.4e} > budget {:.4e}",
                        cell.id,
                        sigma_g,
                        seed,
                        j + 1,
                        integral,
                        budget
                    );
                }
            }
        }
    }
    report(
        "6 violation-budget",
        true,
        &format!("worst integral-to-budget margin {:.2e}", worst_margin),
    );
}

fn cell_loss(study: Study, pick: impl Fn(&scfo::bench::GridCell) -> bool, seed: u64) -> f64 {
    let cells = study_cells(study);
    let cell = cells.iter().find(|c| pick(c)).expect("cell present");
    let (problem, cfg) = cell.instantiate(seed).unwrap();
    optimality_loss(&run_campaign(&problem, &cfg).unwrap()).unwrap()
}

#[test]
fn criterion_7_table_orderings() {
    let t0 = Instant::now();
    let replicates = 5u64;

    // (a) concavity ordering
    let mut ok_a = 0;
    for seed in 0..replicates {
        let l = |case: ConcavityCase| {
            cell_loss(Study::Concavity, |c| c.concavity == case, seed)
        };
        let (none, u1, u2, both) = (
            l(ConcavityCase::None),
            l(ConcavityCase::FirstInput),
            l(ConcavityCase::SecondInput),
            l(ConcavityCase::Both),
        );
        if both < u1 && u1 < u2 && u2 <= none {
            ok_a += 1;
        }
    }

    // (b) slack monotonicity on both problems
    let mut ok_b = 0;
    for seed in 0..replicates {
        let mut pass = true;
        for problem in ["A", "B"] {
            let mut levels: Vec<f64> = study_cells(Study::Slack)
                .iter()
                .filter(|c| c.problem == problem)
                .map(|c| c.slack_level)
                .collect();
            levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let losses: Vec<f64> = levels
                .iter()
                .map(|&lv| {
                    cell_loss(Study::Slack, |c| c.problem == problem && c.slack_level == lv, seed)
                })
                .collect();
            pass &= losses.windows(2).all(|w| w[1] < w[0]);
        }
        if pass {
            ok_b += 1;
        }
    }

    // (c) history reuse on the changing-cost run
    let mut ok_c = 0;
    for seed in 0..replicates {
        let without = cell_loss(Study::History, |c| !c.reuse_history, seed);
        let with = cell_loss(Study::History, |c| c.reuse_history, seed);
        if with < without {
            ok_c += 1;
        }
    }

    // (d) known-element ordering
    let mut ok_d = 0;
    for seed in 0..replicates {
        let none = cell_loss(Study::Known, |c| !c.known_cost && c.known_cons.is_empty(), seed);
        let g13 = cell_loss(Study::Known, |c| !c.known_cost && c.known_cons == vec![0, 2], seed);
        let full = cell_loss(Study::Known, |c| c.known_cost && c.known_cons == vec![0, 2], seed);
        if full < g13 && g13 < none {
            ok_d += 1;
        }
    }

    let dt = t0.elapsed().as_secs_f64();
    let majority = (replicates / 2 + 1) as i32;
    let pass = ok_a >= majority && ok_b >= majority && ok_c >= majority && ok_d >= majority;
    report(
        "7 table-orderings",
        pass && dt < 120.0,
        &format!(
            "majorities concavity {}/5, slack {}/5, history {}/5, known {}/5 in {:.1}s",
            ok_a, ok_b, ok_c, ok_d, dt
        ),
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    }
}

#[test]
fn criterion_8_noise_trend() {
    let t0 = Instant::now();
    let p = builtin_problem("A").unwrap();
    let mut all_pass = true;
    let mut detail = String::new();
    for algo in AlgorithmKind::all() {
        let med = |imp: GradientMode, sigma: f64| -> f64 {
            let losses: Vec<f64> = (0..20u64)
                .into_par_iter()
                .map(|r| {
                    let cfg = CampaignConfig {
                        algorithm: AlgorithmSpec::new(algo),
                        implementation: imp,
                        sigma,
                        k_f: 1000,
                        seed: r,
                        ..CampaignConfig::default()
                    };
                    optimality_loss(&run_campaign(&p, &cfg).unwrap()).unwrap()
                })
                .collect();
            median(losses)
        };
        let m0 = med(GradientMode::Exact, 0.0);
        let m1 = med(GradientMode::NoisyDirect, 0.1);
        let m3 = med(GradientMode::NoisyDirect, 0.3);
        let m3r = med(GradientMode::KnownSigma, 0.3);
        let trend = m0 <= m1 && m1 <= m3;
        let robust_helps = m3r <= m3;
        all_pass &= trend && robust_helps;
        detail.push_str(&format!(
            "{}[{:.0},{:.0},{:.0};III {:.0}]{}{} ",
            algo.short(),
            m0,
            m1,
            m3,
            m3r,
            if trend { "" } else { "!trend" },
            if robust_helps { "" } else { "!robust" },
        ));
    }
    let dt = t0.elapsed().as_secs_f64();
    report("8 noise-trend", all_pass && dt < 300.0, &format!("{detail}in {:.0}s", dt));
}

#[test]
fn criterion_9_p_scheduler_agreement() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n_u = 2;
    let n_g = 2;
    let lip = LipschitzTable::symmetric(&vec![vec![1.0; n_u]; n_g]);
    let sup = SupervisorConfig::default();
    let mut walked_down = 0usize;
    for trial in 0..200 {
        let u_k: Vec<f64> = (0..n_u).map(|_| rng.random_range(-0.5..0.5)).collect();
        let lo: Vec<f64> = u_k.iter().map(|u| u - 1.0).collect();
        let hi: Vec<f64> = u_k.iter().map(|u| u + 1.0).collect();
        let mk_box = |rng: &mut ChaCha8Rng| {
            let est: Vec<f64> = (0..n_u).map(|_| rng.random_range(-1.5..1.5)).collect();
            let w: Vec<f64> = (0..n_u).map(|_| rng.random_range(0.0..2.5)).collect();
            GradientBox {
                lo: est.iter().zip(&w).map(|(e, x)| e - x).collect(),
                hi: est.iter().zip(&w).map(|(e, x)| e + x).collect(),
                estimate: est,
            }
        };
        let cost_box = mk_box(&mut rng);
        let cons_boxes: Vec<GradientBox> = (0..n_g).map(|_| mk_box(&mut rng)).collect();
        let g_upper: Vec<f64> = (0..n_g).map(|_| rng.random_range(-0.9..-0.05)).collect();
        let target: Vec<f64> =
            u_k.iter().map(|u| u + rng.random_range(-0.8..0.8)).collect();
        let slack = SlackState::hard(n_g);
        let qb = QBoundState::isotropic(n_u, 2.0);
        let uncertain: Vec<usize> = (0..n_g).collect();
        let inputs = IterationInputs {
            u_k: &u_k,
            target: &target,
            g_upper: &g_upper,
            cost_box: &cost_box,
            cons_boxes: &cons_boxes,
            lip: &lip,
            lo: &lo,
            hi: &hi,
            slack: &slack,
            qbound: &qb,
            uncertain: &uncertain,
            known_cons: &[],
            known_cost: None,
            adaptive_m: None,
            union_records: &[],
            lip_uncertain: &lip,
            reuse_history: false,
        };
        let outcome = run_iteration(&inputs, &sup).unwrap();
        let IterationOutcome::Step { diag, .. } = outcome else {
            continue; // bottomed out: no robustness level was selected
        };

        // Exhaustive-scan oracle: redo the strictness ladder, then test all
        // 21 robustness levels in order.
        let template = ProjectionParams::with_floor(n_g, sup.eps_floor);
        let mut chosen = None;
        for t in 0..=template.floor_level() {
            let params_t = template.at_level(t);
            let active: Vec<usize> = (0..n_g)
                .filter(|&j| g_upper[j] >= -params_t.eps[j])
                .collect();
            let mut rows: Vec<ConeRow> = active
                .iter()
                .map(|&j| ConeRow::point(&cons_boxes[j].estimate, params_t.delta_g[j]))
                .collect();
            rows.push(ConeRow::point(&cost_box.estimate, params_t.delta_phi));
            let cone =
                DescentCone { u_k: u_k.clone(), rows, lo: lo.clone(), hi: hi.clone() };
            if is_feasible(&cone.nominal_system()).unwrap() {
                chosen = Some((params_t, active));
                break;
            }
        }
        let (params_t, active) = chosen.expect("iteration stepped, so the ladder must open");
        let mut scan_p = None;
        for tp in 0..=20 {
            let pval = (1.0 - tp as f64 * 0.05).max(0.0);
            let mut rows: Vec<ConeRow> = active
                .iter()
                .map(|&j| {
                    ConeRow::boxed(
                        &scfo::uncertainty::shrink_box(&cons_boxes[j], pval),
                        params_t.delta_g[j],
                    )
                })
                .collect();
            rows.push(ConeRow::boxed(
                &scfo::uncertainty::shrink_box(&cost_box, pval),
                params_t.delta_phi,
            ));
            let cone =
                DescentCone { u_k: u_k.clone(), rows, lo: lo.clone(), hi: hi.clone() };
            if is_feasible(&cone.slack_system()).unwrap() {
                scan_p = Some(pval);
                break;
            }
        }
        let scan_p = scan_p.expect("level 0 collapses to the feasible ladder system");
        assert_eq!(
            diag.p_level, scan_p,
            "trial {trial}: scheduler chose {} but scan found {}",
            diag.p_level, scan_p
        );
        if scan_p < 1.0 {
            walked_down += 1;
        }
    }
    report(
        "9 p-scheduler",
        walked_down > 20,
        &format!("zero disagreements; {} instances required walking down", walked_down),
    );
}

#[test]
fn criterion_10_determinism() {
    let p = builtin_problem("B").unwrap();
    let cfg = CampaignConfig {
        algorithm: AlgorithmSpec::new(AlgorithmKind::RandomStep),
        implementation: GradientMode::KnownSigma,
        sigma: 0.3,
        sigma_g: 0.01,
        k_f: 100,
        seed: 2024,
        ..CampaignConfig::default()
    };
    let dir = std::env::temp_dir().join("scfo-acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    let p1 = dir.join("det1.csv");
    let p2 = dir.join("det2.csv");
    write_trace_csv(&p1, &run_campaign(&p, &cfg).unwrap()).unwrap();
    write_trace_csv(&p2, &run_campaign(&p, &cfg).unwrap()).unwrap();
    let b1 = std::fs::read(&p1).unwrap();
    let b2 = std::fs::read(&p2).unwrap();
    report(
        "10 determinism",
        b1 == b2,
        &format!("repeated campaign traces identical ({} bytes)", b1.len()),
    );
}
