//! `mfclear` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure (including
//! malformed configuration), 3 numerical failure (Riccati blow-up or fixed-point
//! divergence).

pub mod config;
pub mod output;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mfclear_core::clearing::{rate_sweep, ClearingConfig, WassersteinConfig};
use mfclear_core::multipop::{build_multipop_scenarios, multipop_clearing_sweep, solve_multipop_lq, validate_multipop};
use mfclear_core::stochastics::{derive_seed, ScenarioSet};
use mfclear_core::{
    build_scenarios, solve_affine, solve_lq, solve_nonlinear_deterministic, validate_model, wasserstein_diag,
    EquilibriumSolution, ScenarioOptions, SolverConfig, TerminalMode,
};

use config::{parse_config, ConfigError, ModelConfig};
use output::{GridInfo, OutDir, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mfclear", version, about = "Mean-field market-clearing price laboratory")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "MFCLEAR_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the model assumptions and print the monotonicity constants.
    Validate(ValidateArgs),
    /// Solve for the equilibrium price on simulated scenarios.
    Solve(SolveArgs),
    /// Measure the net order flow of N agents against the limit price.
    Clearing(ClearingArgs),
    /// Dump the Riccati and affine coefficient paths.
    Riccati(RiccatiArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Lq,
    Nonlinear,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub config: PathBuf,
    /// Accept models whose monotonicity constant is not positive.
    #[arg(long)]
    pub allow_short_t: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub config: PathBuf,
    /// Solver route; defaults to `lq` for the identity price map and `nonlinear` otherwise.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Common-noise paths.
    #[arg(short = 'M', long = "common-paths")]
    pub common_paths: Option<usize>,
    /// Conditional copies per common path.
    #[arg(short = 'K', long = "copies", default_value_t = 64)]
    pub copies: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the number of time steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub allow_short_t: bool,
    /// Fixed-point tolerance (nonlinear mode).
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0.5)]
    pub damping: f64,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Also write the scenario paths (paths.csv).
    #[arg(long)]
    pub dump_paths: bool,
    /// Also write per-copy X, Y, alpha (solution.csv).
    #[arg(long)]
    pub dump_solution: bool,
}

#[derive(Debug, Args)]
pub struct ClearingArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Agent counts, strictly increasing, at least three.
    #[arg(long, value_delimiter = ',', default_value = "16,64,256,1024,4096")]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub reps: usize,
    /// Moment order q of the Gamma estimate.
    #[arg(long, default_value_t = 6.0)]
    pub moment: f64,
    /// Also run the Wasserstein diagnostic (n = 1 only).
    #[arg(long)]
    pub wasserstein: bool,
}

#[derive(Debug, Args)]
pub struct RiccatiArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<mfclear_core::Error> for CliError {
    fn from(e: mfclear_core::Error) -> Self {
        let code = if e.is_numerical() {
            EXIT_NUMERICAL
        } else if e.is_validation() {
            EXIT_VALIDATION
        } else {
            EXIT_USAGE
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(format!("i/o error: {e}"))
    }
}

type CliResult<T> = Result<T, CliError>;

struct Loaded {
    model: ModelConfig,
    sha256: String,
    path: String,
}

fn load(path: &Path, steps: Option<usize>) -> CliResult<Loaded> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let mut model = parse_config(&text)?;
    if let Some(s) = steps {
        model.set_steps(s);
    }
    Ok(Loaded {
        model,
        sha256: output::sha256_hex(text.as_bytes()),
        path: path.display().to_string(),
    })
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let workers = match cli.workers {
        Some(0) => {
            eprintln!("error: --workers must be at least 1");
            return EXIT_USAGE;
        }
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_USAGE;
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Validate(a) => cmd_validate(a),
        Command::Solve(a) => cmd_solve(a, workers),
        Command::Clearing(a) => cmd_clearing(a, workers),
        Command::Riccati(a) => cmd_riccati(a, workers),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn cmd_validate(args: &ValidateArgs) -> CliResult<()> {
    let loaded = load(&args.config, None)?;
    let (text, solvable) = match &loaded.model {
        ModelConfig::Single(spec) => {
            let r = validate_model(spec)?;
            (r.render(), r.is_general_t())
        }
        ModelConfig::Multi(spec) => {
            let r = validate_multipop(spec)?;
            (r.render(), r.populations.iter().all(|p| p.is_general_t()))
        }
    };
    print!("{text}");
    if solvable {
        Ok(())
    } else if args.allow_short_t {
        eprintln!("warning: monotonicity constant is not positive; proceeding under the short-T override");
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_VALIDATION,
            message: "monotonicity constant is not positive (pass --allow-short-t to override)".into(),
        })
    }
}

struct Solved {
    solution: EquilibriumSolution,
    scenarios: ScenarioSet,
    mode: ModeArg,
}

fn solve_model(loaded: &Loaded, run: &RunArgs, default_paths: usize) -> CliResult<Solved> {
    let m = run.common_paths.unwrap_or(default_paths);
    let options = ScenarioOptions::default();
    match &loaded.model {
        ModelConfig::Single(spec) => {
            let mode = run
                .mode
                .unwrap_or(if spec.psi.is_identity() { ModeArg::Lq } else { ModeArg::Nonlinear });
            let grid = spec.grid()?;
            let scenarios = build_scenarios(spec, &grid, m, run.copies, run.seed, options)?;
            let solution = match mode {
                ModeArg::Lq => solve_lq(spec, &scenarios, run.allow_short_t)?,
                ModeArg::Nonlinear => {
                    validate_model(spec)?.require_solvable(run.allow_short_t)?;
                    let cfg = SolverConfig {
                        tol: run.tol,
                        max_iter: run.max_iter,
                        damping: run.damping,
                        ..SolverConfig::default()
                    };
                    solve_nonlinear_deterministic(spec, &scenarios, &cfg)?
                }
            };
            Ok(Solved {
                solution,
                scenarios,
                mode,
            })
        }
        ModelConfig::Multi(spec) => {
            if run.mode == Some(ModeArg::Nonlinear) {
                return Err(CliError::usage("multi-population models are solved in lq mode only"));
            }
            let grid = spec.grid()?;
            let scenarios = build_multipop_scenarios(spec, &grid, m, run.copies, run.seed, options)?;
            let solution = solve_multipop_lq(spec, &scenarios, run.allow_short_t)?;
            Ok(Solved {
                solution,
                scenarios,
                mode: ModeArg::Lq,
            })
        }
    }
}

fn mode_label(model: &ModelConfig, mode: ModeArg) -> String {
    match (model, mode) {
        (ModelConfig::Multi(_), _) => "multipop-lq".into(),
        (_, ModeArg::Lq) => "lq".into(),
        (_, ModeArg::Nonlinear) => "nonlinear".into(),
    }
}

fn terminal_mode(model: &ModelConfig) -> TerminalMode {
    match model {
        ModelConfig::Single(s) => s.mode,
        ModelConfig::Multi(s) => s.mode,
    }
}

/// Largest `|φ_T − c⁰_T|` over common paths.
fn futures_pin_gap(sol: &EquilibriumSolution, scenarios: &ScenarioSet) -> f64 {
    let n = sol.n;
    let s = sol.grid.steps;
    (0..sol.common_paths)
        .flat_map(|m| {
            let phi = sol.price_at(m, s);
            let c0 = &scenarios.common[m].c0[s * n..(s + 1) * n];
            phi.iter().zip(c0).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

#[allow(clippy::too_many_arguments)]
fn manifest(
    command: &str,
    loaded: &Loaded,
    seed: u64,
    mode: String,
    workers: usize,
    arguments: BTreeMap<String, String>,
    out: &OutDir,
    timings_ms: BTreeMap<String, f64>,
) -> RunManifest {
    RunManifest {
        tool: "mfclear".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config: loaded.path.clone(),
        config_sha256: loaded.sha256.clone(),
        seed,
        grid: GridInfo {
            horizon: loaded.model.horizon(),
            steps: loaded.model.steps(),
        },
        mode,
        workers,
        arguments,
        outputs: out.checksums.clone(),
        timings_ms,
    }
}

fn run_arguments(run: &RunArgs, m: usize) -> BTreeMap<String, String> {
    let mut a = BTreeMap::new();
    a.insert("common_paths".into(), m.to_string());
    a.insert("copies".into(), run.copies.to_string());
    a.insert("allow_short_t".into(), run.allow_short_t.to_string());
    a.insert("tol".into(), run.tol.to_string());
    a.insert("max_iter".into(), run.max_iter.to_string());
    a.insert("damping".into(), run.damping.to_string());
    a
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn cmd_solve(args: &SolveArgs, workers: usize) -> CliResult<()> {
    let run = &args.run;
    let loaded = load(&run.config, run.steps)?;
    let t0 = Instant::now();
    let solved = solve_model(&loaded, run, 16)?;
    let solve_ms = elapsed_ms(t0);
    let sol = &solved.solution;
    let mut out = OutDir::create(&run.out)?;
    out.write("price.csv", &output::price_csv(sol, &solved.scenarios))?;
    let mut extra = Vec::new();
    let pin = futures_pin_gap(sol, &solved.scenarios);
    if terminal_mode(&loaded.model) == TerminalMode::Futures {
        extra.push(("futures_pin_gap", pin));
    }
    out.write("diagnostics.csv", &output::diagnostics_csv(sol, &extra))?;
    if args.dump_paths {
        out.write("paths.csv", &output::paths_csv(&solved.scenarios))?;
    }
    if args.dump_solution {
        out.write("solution.csv", &output::solution_csv(sol))?;
    }
    let mut arguments = run_arguments(run, sol.common_paths);
    arguments.insert("dump_paths".into(), args.dump_paths.to_string());
    arguments.insert("dump_solution".into(), args.dump_solution.to_string());
    let mode = mode_label(&loaded.model, solved.mode);
    let mut timings = BTreeMap::new();
    timings.insert("solve".into(), solve_ms);
    timings.insert("total".into(), elapsed_ms(t0));
    out.write_manifest(&manifest("solve", &loaded, run.seed, mode.clone(), workers, arguments, &out, timings))?;
    println!("mode                {mode}");
    println!("common paths        {}", sol.common_paths);
    println!("copies per path     {}", sol.copies_per_path);
    println!("iterations          {}", sol.diagnostics.iterations);
    println!("in-sample imbalance {:.3e}", sol.in_sample_imbalance());
    if terminal_mode(&loaded.model) == TerminalMode::Futures {
        println!("futures pin gap     {pin:.3e}");
    }
    println!("wrote {}", run.out.display());
    Ok(())
}

pub fn cmd_clearing(args: &ClearingArgs, workers: usize) -> CliResult<()> {
    let run = &args.run;
    let loaded = load(&run.config, run.steps)?;
    let mut cfg = ClearingConfig::new(args.n_list.clone(), args.reps, run.seed);
    cfg.moment = args.moment;
    cfg.check()?;
    let t0 = Instant::now();
    let solved = solve_model(&loaded, run, 64)?;
    let solve_ms = elapsed_ms(t0);
    let sol = &solved.solution;
    let t1 = Instant::now();
    let report = match loaded.model {
        ModelConfig::Single(_) => rate_sweep(sol, &cfg)?,
        ModelConfig::Multi(_) => multipop_clearing_sweep(sol, &cfg)?,
    };
    let sweep_ms = elapsed_ms(t1);
    let mut out = OutDir::create(&run.out)?;
    out.write("clearing.csv", &output::clearing_csv(&report))?;
    print!("{}", report.render());
    let mut timings = BTreeMap::new();
    timings.insert("solve".into(), solve_ms);
    timings.insert("sweep".into(), sweep_ms);
    if args.wasserstein {
        let t2 = Instant::now();
        let s = sol.grid.steps;
        let mut nodes: Vec<usize> = [s / 4, s / 2, 3 * s / 4, s].into_iter().filter(|k| *k > 0).collect();
        nodes.dedup();
        let wcfg = WassersteinConfig::new(args.n_list.clone(), nodes, derive_seed(run.seed, u64::MAX - 1));
        let w = wasserstein_diag(sol, &wcfg)?;
        out.write("wasserstein.csv", &output::wasserstein_csv(&w))?;
        println!(
            "wasserstein checks  {}/{} (mean gap <= W1 <= W2)",
            w.checks_passed, w.checks_total
        );
        if let Some(f) = w.w2_sq_fit {
            println!("E[W2^2] slope       {:.4}", f.slope);
        }
        timings.insert("wasserstein".into(), elapsed_ms(t2));
    }
    timings.insert("total".into(), elapsed_ms(t0));
    let mut arguments = run_arguments(run, sol.common_paths);
    arguments.insert(
        "n_list".into(),
        args.n_list.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
    );
    arguments.insert("reps".into(), args.reps.to_string());
    arguments.insert("moment".into(), args.moment.to_string());
    arguments.insert("wasserstein".into(), args.wasserstein.to_string());
    let mode = mode_label(&loaded.model, solved.mode);
    out.write_manifest(&manifest("clearing", &loaded, run.seed, mode, workers, arguments, &out, timings))?;
    println!("wrote {}", run.out.display());
    Ok(())
}

pub fn cmd_riccati(args: &RiccatiArgs, workers: usize) -> CliResult<()> {
    let loaded = load(&args.config, args.steps)?;
    let ModelConfig::Single(spec) = &loaded.model else {
        return Err(CliError::usage(
            "riccati dumps single-population models only; the stacked multi-population system is solved by `solve`",
        ));
    };
    let t0 = Instant::now();
    let sol = solve_affine(spec, &spec.grid()?)?;
    let mut out = OutDir::create(&args.out)?;
    out.write("riccati.csv", &output::riccati_csv(&sol))?;
    let mut timings = BTreeMap::new();
    timings.insert("total".into(), elapsed_ms(t0));
    out.write_manifest(&manifest("riccati", &loaded, 0, "lq".into(), workers, BTreeMap::new(), &out, timings))?;
    println!("wrote {}", args.out.display());
    Ok(())
}
