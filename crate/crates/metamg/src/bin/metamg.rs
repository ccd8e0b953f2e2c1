//! Command-line front end: solve single problems, train models, run
//! benchmark suites, compare smoothers, and export stencils.
//!
//! Exit codes: 0 on success, 1 on non-convergence or runtime failure,
//! 2 on usage or configuration errors.

use clap::{Args, Parser, Subcommand};
use metamg::bench::{run_case, write_csv, BenchCase, BenchRow, SolverSpec};
use metamg::config::Config;
use metamg::discretize::PdeSpec;
use metamg::multigrid::Hierarchy;
use metamg::train::{train, AdamConfig, ModelKind, TrainConfig};
use metamg::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "metamg", version, about = "Structured-grid multigrid solvers with trainable smoothers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem instance with a chosen solver.
    Solve(SolveArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Run a benchmark suite from a config file and write CSV.
    Bench(BenchArgs),
    /// Run several solvers on one problem and tabulate iterations.
    CompareSmoothers(CompareArgs),
    /// Print a level's operator stencil.
    ExportStencil(StencilArgs),
}

#[derive(Args)]
struct ProblemArgs {
    /// Problem family: aniso2d | aniso3d
    #[arg(long, default_value = "aniso2d")]
    family: String,
    /// Diffusion strength (2D); ratio eps1 in 3D
    #[arg(long, default_value_t = 1.0)]
    eps: f64,
    /// Rotation angle in radians (2D); ratio eps2 in 3D
    #[arg(long, default_value_t = 0.0)]
    theta: f64,
    /// Mesh cells per axis (power of two)
    #[arg(long, default_value_t = 256)]
    n: usize,
    /// Number of grid levels
    #[arg(long, default_value_t = 5)]
    levels: usize,
    /// Smoothing steps per level, finest first (comma-separated)
    #[arg(long, default_value = "2,1,1,1,1", value_delimiter = ',')]
    nu: Vec<usize>,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
}

impl ProblemArgs {
    fn spec(&self) -> Result<PdeSpec, Error> {
        let spec = match self.family.as_str() {
            "aniso2d" => PdeSpec::Aniso2d {
                eps: self.eps,
                theta: self.theta,
                n: self.n,
            },
            "aniso3d" => PdeSpec::Aniso3d {
                eps: [1.0, self.eps, self.theta],
                n: self.n,
            },
            f => {
                return Err(Error::InvalidArgument(format!(
                    "unknown family '{}' (expected aniso2d|aniso3d)",
                    f
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Solver: jacobi[:w] | gs | line-gs[:axis] | krylov[:k] | pde-mgnet:CKPT | meta-sc:CKPT | meta-direct:CKPT
    #[arg(long, default_value = "gs")]
    solver: String,
    /// Right-hand-side sampling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Model: pde-mgnet | meta-sc | meta-direct
    #[arg(long, default_value = "meta-sc")]
    model: String,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    levels: usize,
    #[arg(long, default_value = "2,1,1", value_delimiter = ',')]
    nu: Vec<usize>,
    /// Range of lg(1/eps), as lo,hi
    #[arg(long, default_value = "0,5", value_delimiter = ',')]
    lg_inv_eps: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    theta: f64,
    /// Problem-parameter draws
    #[arg(long, default_value_t = 20)]
    mp: usize,
    /// Right-hand sides per draw
    #[arg(long, default_value_t = 100)]
    mm: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Optional loss-history CSV path
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark suite config file
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Comma-separated solver list
    #[arg(long, default_value = "jacobi,gs,krylov", value_delimiter = ',')]
    solvers: Vec<String>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV output path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StencilArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Level whose operator stencil to print (0 = finest)
    #[arg(long, default_value_t = 0)]
    level: usize,
}

fn check_threads_env() {
    if let Ok(v) = std::env::var("METAMG_THREADS") {
        match v.parse::<usize>() {
            Ok(0) => eprintln!("warning: METAMG_THREADS=0 ignored; running on 1 thread"),
            Ok(n) if n > 1 => {
                eprintln!("warning: METAMG_THREADS={} requested; execution is single-threaded", n)
            }
            Ok(_) => {}
            Err(_) => eprintln!("warning: METAMG_THREADS='{}' is not an integer; ignored", v),
        }
    }
}

fn main() -> ExitCode {
    check_threads_env();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::InvalidArgument(_) | Error::Config(_) | Error::ShapeMismatch(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Train(args) => cmd_train(args),
        Command::Bench(args) => cmd_bench(args),
        Command::CompareSmoothers(args) => cmd_compare(args),
        Command::ExportStencil(args) => cmd_stencil(args),
    }
}

fn cmd_solve(args: SolveArgs) -> Result<ExitCode, Error> {
    let spec = args.problem.spec()?;
    let solver: SolverSpec = args.solver.parse()?;
    let case = BenchCase {
        spec,
        solver,
        levels: args.problem.levels,
        nu: args.problem.nu.clone(),
        repeats: 1,
        tol: args.problem.tol,
        max_iters: args.problem.max_iters,
    };
    let row = run_case(&case, args.seed)?;
    println!(
        "solver={} n={} iters={} converged={}",
        row.solver, row.n, row.iters_mean, row.converged
    );
    Ok(if row.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, Error> {
    let model: ModelKind = args.model.parse()?;
    if args.lg_inv_eps.len() != 2 {
        return Err(Error::InvalidArgument("--lg-inv-eps needs exactly lo,hi".into()));
    }
    let cfg = TrainConfig {
        model,
        n: args.n,
        levels: args.levels,
        nu: args.nu.clone(),
        lg_inv_eps: (args.lg_inv_eps[0], args.lg_inv_eps[1]),
        theta: args.theta,
        m_p: args.mp,
        m_m: args.mm,
        epochs: args.epochs,
        batch: args.batch,
        adam: AdamConfig {
            lr: args.lr,
            ..Default::default()
        },
        seed: args.seed,
        taps: 7,
    };
    let outcome = train(&cfg)?;
    let mut params = outcome.params;
    match model {
        ModelKind::PdeMgnet => {
            metamg::bench::attach_model_meta(&mut params, model, 2, cfg.taps, None, None)?
        }
        ModelKind::MetaSc => {
            let mcfg = metamg::train::meta_nn_config(&cfg);
            metamg::bench::attach_model_meta(&mut params, model, 2, cfg.taps, Some(&mcfg), None)?
        }
        ModelKind::MetaDirect => {
            let mcfg = metamg::train::meta_direct_config(&cfg);
            metamg::bench::attach_model_meta(&mut params, model, 2, cfg.taps, None, Some(&mcfg))?
        }
    }
    metamg::checkpoint::save(&params, &args.out)?;
    if let Some(path) = &args.loss_csv {
        metamg::train::save_loss_csv(&outcome.loss_history, path)?;
    }
    let last = outcome.loss_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained model={} steps={} final_loss={:.6e} checkpoint={}",
        args.model,
        outcome.loss_history.len(),
        last,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn bench_case_from_config(cfg: &Config, section: &str) -> Result<BenchCase, Error> {
    let pick = |key: &str| -> Option<&str> {
        cfg.get(section, key).or_else(|| cfg.get("defaults", key))
    };
    let family = pick("family").unwrap_or("aniso2d");
    let n = match pick("n") {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("[{}] bad n '{}'", section, v)))?,
        None => 256,
    };
    let fnum = |key: &str, default: f64| -> Result<f64, Error> {
        match pick(key) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("[{}] bad {} '{}'", section, key, v))),
            None => Ok(default),
        }
    };
    let spec = match family {
        "aniso2d" => PdeSpec::Aniso2d {
            eps: fnum("eps", 1.0)?,
            theta: fnum("theta", 0.0)?,
            n,
        },
        "aniso3d" => PdeSpec::Aniso3d {
            eps: [1.0, fnum("eps", 1.0)?, fnum("theta", 1.0)?],
            n,
        },
        f => return Err(Error::Config(format!("[{}] unknown family '{}'", section, f))),
    };
    spec.validate()?;
    let solver: SolverSpec = pick("solver")
        .ok_or_else(|| Error::Config(format!("[{}] missing solver", section)))?
        .parse()?;
    let levels = match pick("levels") {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("[{}] bad levels '{}'", section, v)))?,
        None => 5,
    };
    let nu = match pick("nu") {
        Some(v) => v
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("[{}] bad nu '{}'", section, v)))
            })
            .collect::<Result<Vec<usize>, Error>>()?,
        None => vec![2, 1, 1, 1, 1],
    };
    let repeats = match pick("repeats") {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("[{}] bad repeats '{}'", section, v)))?,
        None => 5,
    };
    Ok(BenchCase {
        spec,
        solver,
        levels,
        nu,
        repeats,
        tol: fnum("tol", 1e-6)?,
        max_iters: match pick("max_iters") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("[{}] bad max_iters '{}'", section, v)))?,
            None => 10_000,
        },
    })
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode, Error> {
    let cfg = Config::load(&args.config)?;
    let sections = cfg.sections();
    let cases: Vec<&str> = sections
        .iter()
        .copied()
        .filter(|s| *s != "defaults")
        .collect();
    if cases.is_empty() {
        return Err(Error::Config("no benchmark case sections in config".into()));
    }
    let mut rows = Vec::new();
    for section in cases {
        let case = bench_case_from_config(&cfg, section)?;
        rows.push(run_case(&case, args.seed)?);
    }
    emit_rows(&rows, args.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(args: CompareArgs) -> Result<ExitCode, Error> {
    let spec = args.problem.spec()?;
    let mut rows = Vec::new();
    for s in &args.solvers {
        let solver: SolverSpec = s.parse()?;
        let case = BenchCase {
            spec: spec.clone(),
            solver,
            levels: args.problem.levels,
            nu: args.problem.nu.clone(),
            repeats: args.repeats,
            tol: args.problem.tol,
            max_iters: args.problem.max_iters,
        };
        rows.push(run_case(&case, args.seed)?);
    }
    for r in &rows {
        println!(
            "{:<24} iters {:>8.1} +- {:<6.1} time {:>9.4}s converged={}",
            r.solver, r.iters_mean, r.iters_std, r.time_mean, r.converged
        );
    }
    if args.out.is_some() {
        emit_rows(&rows, args.out.as_deref())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn emit_rows(rows: &[BenchRow], out: Option<&std::path::Path>) -> Result<(), Error> {
    match out {
        Some(path) => {
            let mut f = std::fs::File::create(path)?;
            write_csv(rows, &mut f)?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_csv(rows, &mut lock)?;
        }
    }
    Ok(())
}

fn cmd_stencil(args: StencilArgs) -> Result<ExitCode, Error> {
    let spec = args.problem.spec()?;
    let h = Hierarchy::build(&spec, args.problem.levels)?;
    if args.level >= h.num_levels() {
        return Err(Error::InvalidArgument(format!(
            "level {} out of range (hierarchy has {} levels)",
            args.level,
            h.num_levels()
        )));
    }
    print!("{}", h.levels[args.level].stencil.render());
    Ok(ExitCode::SUCCESS)
}
