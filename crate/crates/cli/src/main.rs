//! `dissipcert` command-line tool.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dissipcert::equilibrium::{find_global_equilibrium, solve_kkt, Guess, Multistart};
use dissipcert::expr::parse_expression;
use dissipcert::lq::{check_nu_linearity, combine_storage_matrices, lmi_margin, solve_lmi, weighted_q};
use dissipcert::model::{load_problem, Problem, Weights};
use dissipcert::ocp::{pareto_sweep, OcpOptions};
use dissipcert::verifier::{Sampling, ScanOptions, Verifier, VerifierConfig};

#[derive(Parser, Debug)]
#[command(name = "dissipcert", version, about = "Certify or refute strict dissipativity of weighted-sum optimal control problems")]
struct Cli {
    /// Seed for all random sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "DISSIPCERT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimal equilibrium and multiplier for one weight.
    Equilibrium {
        problem: PathBuf,
        #[command(flatten)]
        weight: WeightArgs,
        /// Print the full search result as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Continuity scan of the optimal equilibrium over a uniform weight grid.
    Sweep {
        problem: PathBuf,
        #[arg(long, default_value_t = 101)]
        grid: usize,
        /// Absolute jump threshold (default: max(10 × median step, floor)).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 1e-3)]
        threshold_floor: f64,
        /// CSV output (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dissipativity certificate for one weight, as JSON.
    Certify {
        problem: PathBuf,
        #[command(flatten)]
        weight: WeightArgs,
        #[arg(long, value_enum, default_value_t = CertifyMethod::Auto)]
        method: CertifyMethod,
        /// Convex lower bound of the cost for the convex method.
        #[arg(long)]
        lower_bound: Option<String>,
        /// Grid points per dimension of the global sample set.
        #[arg(long, default_value_t = 200)]
        per_dim: usize,
        /// Uniform random points added to the global sample set.
        #[arg(long, default_value_t = 1000)]
        random: usize,
        /// JSON output (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// LMI storage synthesis and multiplier linearity for linear-quadratic problems.
    Lq {
        problem: PathBuf,
        #[command(flatten)]
        weight: WeightArgs,
        #[arg(long, default_value_t = 101)]
        grid: usize,
        /// Require P ⪰ 0 in the LMI.
        #[arg(long)]
        psd: bool,
        /// CSV of the multiplier curve against its chord (scalar problems).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weighted-sum Pareto front of the finite-horizon problem.
    Pareto {
        problem: PathBuf,
        #[arg(long, default_value_t = 10)]
        horizon: usize,
        /// Initial state, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        x0: Vec<f64>,
        #[arg(long, default_value_t = 101)]
        grid: usize,
        /// Random restarts per weight.
        #[arg(long, default_value_t = 5)]
        restarts: usize,
        /// Write every grid solution instead of the nondominated set.
        #[arg(long)]
        all: bool,
        /// CSV output (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct WeightArgs {
    /// Weight of the first of two costs.
    #[arg(long, conflicts_with = "weights", allow_hyphen_values = true)]
    mu: Option<f64>,
    /// Full weight vector, comma separated.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CertifyMethod {
    Auto,
    Local,
    Global,
    Shared,
    Convex,
}

/// Invalid argument values; reported with the usage exit code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn weights(args: &WeightArgs, k: usize) -> Result<Weights> {
    let w = match (&args.mu, &args.weights) {
        (Some(mu), None) => {
            if !(0.0..=1.0).contains(mu) {
                return Err(usage(format!("--mu must lie in [0, 1], got {mu}")));
            }
            if k != 2 {
                return Err(usage(format!("--mu needs exactly two costs, the problem has {k}; use --weights")));
            }
            Weights::pair(*mu)
        }
        (None, Some(v)) => {
            if v.len() != k {
                return Err(usage(format!("--weights has {} entries, the problem has {k} costs", v.len())));
            }
            Weights::new(v.clone())
        }
        _ => return Err(usage("give --mu or --weights")),
    };
    w.map_err(|e| usage(e.to_string()))
}

fn check_grid(k: usize) -> Result<()> {
    if k < 2 {
        return Err(usage(format!("--grid must be at least 2, got {k}")));
    }
    Ok(())
}

fn read_problem(path: &Path) -> Result<Problem> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    load_problem(&text).with_context(|| format!("malformed problem {}", path.display()))
}

/// Nine significant digits, fixed notation for moderate magnitudes.
fn num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

fn vector(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| num(*x)).collect();
    format!("[{}]", parts.join(", "))
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn verifier_config(seed: u64, global: Option<Sampling>) -> VerifierConfig {
    let mut cfg = VerifierConfig {
        seed,
        ..VerifierConfig::default()
    };
    if let Some(g) = global {
        cfg.global = g;
    }
    cfg
}

fn equilibrium(problem: &Path, weight: &WeightArgs, json: bool) -> Result<()> {
    let p = read_problem(problem)?;
    let w = weights(weight, p.num_costs())?;
    let g = find_global_equilibrium(&p, &w, &Multistart::default())?;
    if json {
        println!("{}", serde_json::to_string_pretty(&g)?);
        return Ok(());
    }
    let e = &g.best;
    println!("x_e = {}", vector(&e.x_e));
    println!("u_e = {}", vector(&e.u_e));
    println!("nu = {}", vector(&e.nu));
    println!("cost = {}", num(e.cost_value));
    println!("kkt_residual = {}", num(e.kkt_residual));
    println!("regular = {}, sosc = {}, interior = {}", e.regular, e.sosc, e.interior);
    println!("candidates = {} from {} starts", g.candidates.len(), g.starts);
    for t in &g.ties {
        println!("tie: x_e = {}, u_e = {}, nu = {}", vector(&t.x_e), vector(&t.u_e), vector(&t.nu));
    }
    Ok(())
}

fn sweep(problem: &Path, opts: ScanOptions, seed: u64, out: &Option<PathBuf>) -> Result<()> {
    check_grid(opts.grid)?;
    let p = read_problem(problem)?;
    if p.num_costs() != 2 {
        bail!("the continuity scan needs exactly two costs");
    }
    let v = Verifier::new(&p, verifier_config(seed, None))?;
    let r = v.continuity_scan(&opts)?;

    let mut csv = String::from("mu");
    for prefix in ["x_e", "u_e", "nu"] {
        let count = if prefix == "u_e" { p.m } else { p.n };
        for i in 1..=count {
            write!(csv, ",{prefix}{i}")?;
        }
    }
    for i in 1..=p.n {
        write!(csv, ",lambda_tilde{i}")?;
    }
    csv.push_str(",min_hessian_eigenvalue,interior,status,jump_adjacent,error\n");
    let cell = |v: &Option<Vec<f64>>, len: usize| -> Vec<String> {
        match v {
            Some(v) => v.iter().map(|x| num(*x)).collect(),
            None => vec![String::new(); len],
        }
    };
    for rec in &r.records {
        let mut row = vec![num(rec.mu)];
        row.extend(cell(&rec.x_e, p.n));
        row.extend(cell(&rec.u_e, p.m));
        row.extend(cell(&rec.nu, p.n));
        row.extend(cell(&rec.lambda_tilde, p.n));
        row.push(rec.min_hessian_eigenvalue.map(num).unwrap_or_default());
        row.push(rec.interior.to_string());
        row.push(format!("{:?}", rec.status));
        row.push(rec.jump_adjacent.to_string());
        row.push(rec.error.as_deref().unwrap_or("").replace(',', ";"));
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    emit(out, &csv)?;

    let report = if out.is_some() { print_summary } else { eprint_summary };
    report(&format!("median step {}, threshold {}", num(r.median_step), num(r.threshold)));
    report(&format!("{} jump interval(s)", r.jumps.len()));
    for j in &r.jumps {
        report(&format!(
            "jump in [{}, {}] of size {}, refined to [{}, {}] of size {}",
            num(j.mu_lo),
            num(j.mu_hi),
            num(j.size),
            num(j.refined_lo),
            num(j.refined_hi),
            num(j.refined_size)
        ));
    }
    Ok(())
}

fn print_summary(s: &str) {
    println!("{s}");
}

fn eprint_summary(s: &str) {
    eprintln!("{s}");
}

struct CertifyArgs<'a> {
    weight: &'a WeightArgs,
    method: CertifyMethod,
    lower_bound: Option<&'a str>,
    sampling: Sampling,
    out: &'a Option<PathBuf>,
}

fn certify(problem: &Path, args: CertifyArgs, seed: u64) -> Result<()> {
    let p = read_problem(problem)?;
    let w = weights(args.weight, p.num_costs())?;
    let lb = args
        .lower_bound
        .map(|text| parse_expression(text, p.n, p.m))
        .transpose()
        .map_err(|e| usage(format!("--lower-bound: {e}")))?;
    let v = Verifier::new(&p, verifier_config(seed, Some(args.sampling)))?;
    let cert = match args.method {
        CertifyMethod::Auto => v.certify(&w)?,
        CertifyMethod::Local => v.certify_local(&w)?,
        CertifyMethod::Global => v.certify_global_sampled(&w)?,
        CertifyMethod::Shared => v.certify_shared_equilibrium(&w)?,
        CertifyMethod::Convex => v.certify_convex(&w, lb.as_ref())?,
    };
    let json = cert.to_json() + "\n";
    emit(args.out, &json)?;
    if args.out.is_some() {
        println!("{:?}: {}", cert.status, cert.reason);
    }
    Ok(())
}

fn lq(problem: &Path, weight: &WeightArgs, grid: usize, psd: bool, out: &Option<PathBuf>) -> Result<()> {
    check_grid(grid)?;
    let p = read_problem(problem)?;
    let lq = p.extract_lq()?;
    let w = if weight.mu.is_some() || weight.weights.is_some() {
        Some(weights(weight, p.num_costs())?)
    } else {
        None
    };

    let mut solutions = Vec::new();
    for (i, c) in lq.costs.iter().enumerate() {
        let s = solve_lmi(&lq.a, &c.q, psd)?;
        println!(
            "cost {}: feasible = {}, margin = {}, method = {:?}, P = {}",
            i + 1,
            s.feasible,
            num(s.margin),
            s.method,
            matrix(s.p.row_iter().map(|r| r.iter().copied().collect()).collect())
        );
        solutions.push(s);
    }
    if let Some(w) = &w {
        let q = weighted_q(&lq, w);
        let s = solve_lmi(&lq.a, &q, psd)?;
        println!(
            "weighted: feasible = {}, margin = {}, method = {:?}, P = {}",
            s.feasible,
            num(s.margin),
            s.method,
            matrix(s.p.row_iter().map(|r| r.iter().copied().collect()).collect())
        );
        if solutions.len() == 2 {
            let pm = combine_storage_matrices(&solutions[0].p, &solutions[1].p, w.first());
            println!("combined P margin = {}", num(lmi_margin(&lq.a, &q, &pm)));
        }
        let e = solve_kkt(&p, w, &Guess::new(vec![0.0; p.n], vec![0.0; p.m], vec![0.0; p.n]))?;
        println!("x_e = {}, u_e = {}, nu = {}", vector(&e.x_e), vector(&e.u_e), vector(&e.nu));
    }
    if lq.is_scalar() && lq.costs.len() == 2 {
        let lin = check_nu_linearity(&lq, grid)?;
        println!(
            "nu linearity: max deviation = {} at mu = {}, a = 1: {}, q1 r2 = q2 r1: {}",
            num(lin.max_deviation),
            num(lin.argmax_mu),
            lin.a_is_one,
            lin.ratio_condition
        );
        if out.is_some() {
            let nu = |mu: f64| -> Result<f64> {
                let w = Weights::pair(mu)?;
                Ok(dissipcert::equilibrium::lq_scalar_closed_form(&lq, &w)?.nu[0])
            };
            let (nu1, nu2) = (nu(1.0)?, nu(0.0)?);
            let mut csv = String::from("mu,nu,chord,deviation\n");
            for k in 0..grid {
                let mu = k as f64 / (grid - 1) as f64;
                let v = nu(mu)?;
                let chord = mu * nu1 + (1.0 - mu) * nu2;
                writeln!(csv, "{},{},{},{}", num(mu), num(v), num(chord), num(v - chord))?;
            }
            emit(out, &csv)?;
        }
    } else if out.is_some() {
        bail!("the multiplier curve is only available for scalar problems with two costs");
    }
    Ok(())
}

fn matrix(rows: Vec<Vec<f64>>) -> String {
    let rows: Vec<String> = rows.iter().map(|r| vector(r)).collect();
    format!("[{}]", rows.join(", "))
}

struct ParetoArgs<'a> {
    horizon: usize,
    x0: &'a [f64],
    grid: usize,
    restarts: usize,
    all: bool,
    out: &'a Option<PathBuf>,
}

fn pareto(problem: &Path, args: ParetoArgs, seed: u64) -> Result<()> {
    check_grid(args.grid)?;
    if args.horizon == 0 {
        return Err(usage("--horizon must be at least 1"));
    }
    let p = read_problem(problem)?;
    if p.num_costs() != 2 {
        bail!("the Pareto sweep needs exactly two costs");
    }
    let opts = OcpOptions {
        restarts: args.restarts,
        seed,
        ..OcpOptions::default()
    };
    let r = pareto_sweep(&p, args.x0, args.horizon, args.grid, &opts)?;
    let points = if args.all { &r.solutions } else { &r.front };
    let mut csv = String::from("mu,J1,J2,converged\n");
    for pt in points {
        writeln!(csv, "{},{},{},{}", num(pt.mu), num(pt.j1), num(pt.j2), pt.converged)?;
    }
    emit(args.out, &csv)?;
    let report = if args.out.is_some() { print_summary } else { eprint_summary };
    report(&format!(
        "{} grid solutions, {} nondominated (weighted-sum reachable front), {} failures",
        r.solutions.len(),
        r.front.len(),
        r.failures.len()
    ));
    for (mu, e) in &r.failures {
        report(&format!("mu = {}: {e}", num(*mu)));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    let seed = cli.seed;
    match &cli.command {
        Command::Equilibrium { problem, weight, json } => equilibrium(problem, weight, *json),
        Command::Sweep {
            problem,
            grid,
            threshold,
            threshold_floor,
            out,
        } => {
            let opts = ScanOptions {
                threshold: *threshold,
                threshold_floor: *threshold_floor,
                ..ScanOptions::new(*grid)
            };
            sweep(problem, opts, seed, out)
        }
        Command::Certify {
            problem,
            weight,
            method,
            lower_bound,
            per_dim,
            random,
            out,
        } => certify(
            problem,
            CertifyArgs {
                weight,
                method: *method,
                lower_bound: lower_bound.as_deref(),
                sampling: Sampling {
                    per_dim: *per_dim,
                    random: *random,
                },
                out,
            },
            seed,
        ),
        Command::Lq {
            problem,
            weight,
            grid,
            psd,
            out,
        } => lq(problem, weight, *grid, *psd, out),
        Command::Pareto {
            problem,
            horizon,
            x0,
            grid,
            restarts,
            all,
            out,
        } => pareto(
            problem,
            ParetoArgs {
                horizon: *horizon,
                x0,
                grid: *grid,
                restarts: *restarts,
                all: *all,
                out,
            },
            seed,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
