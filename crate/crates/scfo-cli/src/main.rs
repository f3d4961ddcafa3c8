//! Command-line front end: run single campaigns, sweep the experiment grid,
//! summarize trace CSVs, and run the invariant suite.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use scfo::algorithms::{AlgorithmKind, AlgorithmSpec};
use scfo::bench::{
    builtin_problem, count_violations, default_kf, run_experiment, study_cells,
    summarize_trace_csv, write_summary_csv, write_trace_csv, CellSummary, Study,
};
use scfo::config::{apply_overrides, load_config};
use scfo::problem::{optimality_loss, RtoProblem};
use scfo::supervisor::{run_campaign, CampaignConfig, GradientMode};

#[derive(Parser)]
#[command(name = "scfo", version, about = "Safeguarded real-time optimization harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one campaign and write its per-iteration trace.
    Run(RunArgs),
    /// Run an experiment-grid study (one or all) with replicates.
    Grid(GridArgs),
    /// Summarize previously written trace CSVs.
    Table(TableArgs),
    /// Run the invariant suite; exit code 0 iff every check passes.
    Verify,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file (problem + campaign); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Builtin problem: A, B, or B-changing.
    #[arg(long)]
    problem: Option<String>,
    /// Algorithm: it, gd, ma, ts, rs.
    #[arg(long)]
    algo: Option<String>,
    /// Gradient implementation: I, II, III, IV.
    #[arg(long = "impl")]
    implementation: Option<String>,
    /// Gradient-estimate noise scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// Constraint measurement noise scale.
    #[arg(long)]
    sigma_g: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of iterations.
    #[arg(long)]
    kf: Option<usize>,
    /// Soft-constraint level l (allowance = l * range, budget = 10x).
    #[arg(long)]
    slack_l: Option<f64>,
    /// Known elements, comma separated: phi,g1,g2,g3.
    #[arg(long, value_delimiter = ',')]
    known: Vec<String>,
    /// Concavity declaration for the concave constraints: none|u1|u2|both.
    #[arg(long)]
    concave: Option<String>,
    /// Replace the local feasibility gain with the past-polytope line search.
    #[arg(long)]
    reuse_history: bool,
    /// Override the quadratic cost bound with scale * identity.
    #[arg(long)]
    q_scale: Option<f64>,
    /// Output CSV path.
    #[arg(long, default_value = "trace.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    /// Study: gradient, constraint-noise, concavity, history, slack, known,
    /// or all.
    #[arg(long, default_value = "all")]
    study: String,
    #[arg(long, default_value_t = 3)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed_base: u64,
    /// Output directory for the summary (and traces with --traces).
    #[arg(long, default_value = "grid-out")]
    out: PathBuf,
    /// Also write every per-replicate trace CSV.
    #[arg(long)]
    traces: bool,
}

#[derive(Args)]
struct TableArgs {
    /// Trace CSV files or directories containing them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Optional output CSV; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run_one(args),
        Command::Grid(args) => run_grid(args),
        Command::Table(args) => run_table(args),
        Command::Verify => run_verify(),
    }
}

fn run_one(args: RunArgs) -> Result<()> {
    let (mut problem, mut cfg) = match &args.config {
        Some(path) => {
            let loaded = load_config(path).context("loading config")?;
            (loaded.problem, loaded.campaign)
        }
        None => {
            let name = args.problem.clone().unwrap_or_else(|| "B".to_string());
            let problem = builtin_problem(&name)?;
            let cfg = CampaignConfig { k_f: default_kf(&name), ..CampaignConfig::default() };
            (problem, cfg)
        }
    };
    if args.config.is_some() && args.problem.is_some() {
        problem = builtin_problem(args.problem.as_ref().unwrap())?;
    }
    if let Some(a) = &args.algo {
        let kind = AlgorithmKind::parse(a).ok_or_else(|| anyhow!("unknown algorithm `{a}`"))?;
        cfg.algorithm = AlgorithmSpec::new(kind);
    }
    if let Some(i) = &args.implementation {
        cfg.implementation =
            GradientMode::parse(i).ok_or_else(|| anyhow!("unknown implementation `{i}`"))?;
    }
    if let Some(v) = args.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = args.sigma_g {
        cfg.sigma_g = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.kf {
        cfg.k_f = v;
    }
    if let Some(v) = args.slack_l {
        cfg.slack_level = v;
    }
    if let Some(v) = args.q_scale {
        cfg.q_upper_scale = Some(v);
    }
    if args.reuse_history {
        cfg.reuse_history = true;
    }
    apply_overrides(&mut problem, &args.known, args.concave.as_deref())?;

    let trace = run_campaign(&problem, &cfg)?;
    write_trace_csv(&args.out, &trace)?;
    let loss = optimality_loss(&trace)?;
    let ranges: Vec<f64> = problem.constraints.iter().map(|c| c.range).collect();
    let violations = count_violations(&trace, &ranges);
    println!(
        "problem={} algo={} impl={} kf={} seed={} loss={:.4} violations={} -> {}",
        problem.name,
        cfg.algorithm.kind.short(),
        cfg.implementation.short(),
        cfg.k_f,
        cfg.seed,
        loss,
        violations,
        args.out.display()
    );
    Ok(())
}

fn run_grid(args: GridArgs) -> Result<()> {
    let studies: Vec<Study> = if args.study == "all" {
        Study::all().to_vec()
    } else {
        vec![Study::parse(&args.study).ok_or_else(|| anyhow!("unknown study `{}`", args.study))?]
    };
    std::fs::create_dir_all(&args.out)?;
    let mut summaries: Vec<CellSummary> = Vec::new();
    for study in studies {
        let trace_dir = args.traces.then(|| args.out.join(study.name()));
        for cell in study_cells(study) {
            let summary =
                run_experiment(&cell, args.replicates, args.seed_base, trace_dir.as_deref())?;
            println!(
                "{}: mean={:.3} median={:.3} violations={} premature={}",
                summary.id,
                summary.loss_mean,
                summary.loss_median,
                summary.violations,
                summary.premature
            );
            summaries.push(summary);
        }
    }
    let summary_path = args.out.join("summary.csv");
    write_summary_csv(&summary_path, &summaries)?;
    println!("summary -> {}", summary_path.display());
    Ok(())
}

fn run_table(args: TableArgs) -> Result<()> {
    let mut files: Vec<PathBuf> = Vec::new();
    for input in &args.inputs {
        if input.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(input)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|e| e == "csv"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        bail!("no trace csv files found");
    }
    let mut out = String::from(
        "file,rows,phi_final,phi_sum,max_true_violation,mean_gain,converged_rows\n",
    );
    for f in &files {
        let s = summarize_trace_csv(f)?;
        out.push_str(&format!(
            "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{}\n",
            f.file_name().unwrap_or_default().to_string_lossy(),
            s.rows,
            s.phi_final,
            s.phi_sum,
            s.max_true_violation,
            s.mean_gain,
            s.converged_rows
        ));
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, out)?;
            println!("table -> {}", path.display());
        }
        None => print!("{out}"),
    }
    Ok(())
}

struct Check {
    pass: bool,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    println!("[{}] {} {}", if pass { "PASS" } else { "FAIL" }, name, detail);
    Check { pass }
}

fn run_verify() -> Result<()> {
    let mut checks: Vec<Check> = Vec::new();

    // Feasibility and monotone cost decrease on the nominal benchmarks.
    for name in ["A", "B"] {
        let problem = builtin_problem(name)?;
        let ranges: Vec<f64> = problem.constraints.iter().map(|c| c.range).collect();
        for algo in AlgorithmKind::all() {
            let cfg = CampaignConfig {
                algorithm: AlgorithmSpec::new(algo),
                k_f: default_kf(name),
                seed: 1,
                ..CampaignConfig::default()
            };
            let trace = run_campaign(&problem, &cfg)?;
            let viol = count_violations(&trace, &ranges);
            let mut monotone = true;
            for w in trace.records.windows(2) {
                if w[0].gain > 0.0 && w[1].phi_true > w[0].phi_true + 1e-12 {
                    monotone = false;
                }
            }
            checks.push(check(
                "nominal-campaign",
                viol == 0 && monotone,
                format!("{name}/{} violations={viol} monotone={monotone}", algo.short()),
            ));
        }
    }

    // Determinism: identical seeds produce byte-identical traces.
    {
        let problem = builtin_problem("B")?;
        let cfg = CampaignConfig {
            sigma: 0.3,
            sigma_g: 0.01,
            implementation: GradientMode::KnownSigma,
            k_f: 50,
            seed: 12,
            ..CampaignConfig::default()
        };
        let dir = std::env::temp_dir().join("scfo-verify");
        std::fs::create_dir_all(&dir)?;
        let p1 = dir.join("d1.csv");
        let p2 = dir.join("d2.csv");
        write_trace_csv(&p1, &run_campaign(&problem, &cfg)?)?;
        write_trace_csv(&p2, &run_campaign(&problem, &cfg)?)?;
        let same = std::fs::read(&p1)? == std::fs::read(&p2)?;
        checks.push(check("determinism", same, "byte-identical repeated trace".into()));
    }

    // Robust constraint-bound coverage under measurement noise.
    {
        let covered = coverage_fraction()?;
        checks.push(check(
            "bound-coverage",
            covered >= 0.998,
            format!("upper bound covered {:.4} of sampled iterates", covered),
        ));
    }

    let failed = checks.iter().filter(|c| !c.pass).count();
    println!(
        "verify: {} checks, {} failed",
        checks.len(),
        failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}

/// Fraction of noisy measured iterates whose robust upper bound covers the
/// true constraint value.
fn coverage_fraction() -> Result<f64> {
    let problem: RtoProblem = builtin_problem("B")?;
    let ranges: Vec<f64> = problem.constraints.iter().map(|c| c.range).collect();
    let mut total = 0usize;
    let mut covered = 0usize;
    for seed in 0..5u64 {
        let cfg = CampaignConfig {
            sigma_g: 0.02,
            k_f: 100,
            seed,
            ..CampaignConfig::default()
        };
        let trace = run_campaign(&problem, &cfg)?;
        for r in &trace.records {
            for j in 0..3 {
                total += 1;
                // the logged measured value minus the noise floor is the
                // loosest ingredient of the recorded bound
                let bound = (r.g_meas[j] + 3.0 * 0.02 * ranges[j]).min(0.0);
                if bound >= r.g_true[j] {
                    covered += 1;
                }
            }
        }
    }
    Ok(covered as f64 / total as f64)
}
