use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use idmr::constrained::{idc_fit_constrained, ConstraintSpec};
use idmr::exec::{Executor, ExecutorConfig};
use idmr::idc::{default_iterations, idc_fit, BaseUpdate, IdcSettings};
use idmr::inference::{bootstrap, wald_test, BootstrapSettings};
use idmr::init::InitKind;
use idmr::io::{self, BootstrapRecord, CsvOptions, FitDocument, LoadedData, WaldRecord};
use idmr::sim::{self, BenchSpec, DgpKind, DgpSpec, Estimator, SizePowerSpec, TableSpec};
use idmr::{IdmrError, Result};

/// Multinomial logistic regression for large choice sets by iterated
/// parallel Poisson fits.
#[derive(Parser, Debug)]
#[command(name = "idmr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to count and covariate files.
    Fit(FitArgs),
    /// Write a simulated dataset and its true parameter as CSV.
    Simulate(SimulateArgs),
    /// Bootstrap standard errors and a Wald test for a saved fit.
    Bootstrap(BootstrapArgs),
    /// Time fits across numbers of choices.
    Bench(BenchArgs),
    /// Reproduce one of the simulation tables.
    Table(TableArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Counts CSV, one observation per line and one column per choice.
    #[arg(long)]
    counts: PathBuf,
    /// Covariates CSV; the first column must be constant 1.
    #[arg(long)]
    covariates: PathBuf,
    /// Skip the first line of each CSV file.
    #[arg(long)]
    header: bool,
    /// Prepend a column of ones to the covariates.
    #[arg(long)]
    add_intercept: bool,
    /// Input column (0-based) to use as the base choice.
    #[arg(long)]
    base: Option<usize>,
}

impl DataArgs {
    fn load(&self) -> Result<LoadedData> {
        io::load_dataset(
            &self.counts,
            &self.covariates,
            CsvOptions {
                header: self.header,
                add_intercept: self.add_intercept,
                base: self.base,
            },
        )
    }
}

#[derive(Args, Debug)]
struct ExecArgs {
    /// Worker threads; falls back to IDMR_THREADS, then to the core count.
    #[arg(long)]
    threads: Option<usize>,
}

impl ExecArgs {
    fn executor(&self) -> Result<Executor> {
        let config = match self.threads {
            Some(0) => return Err(IdmrError::InvalidInput("--threads must be positive".into())),
            Some(t) => ExecutorConfig::with_workers(t),
            None => ExecutorConfig::default().from_env_or()?,
        };
        Executor::new(config)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Binomial,
    Taddy,
    Poisson,
    Zeros,
    File,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "binomial")]
    init: InitArg,
    /// Fit document whose theta starts the iterations (with --init file).
    #[arg(long)]
    init_file: Option<PathBuf>,
    /// Number of iterations; ceil(ln n) by default.
    #[arg(long)]
    iterations: Option<usize>,
    /// Stop once an iteration moves theta by less than this (sup norm).
    #[arg(long, default_value_t = 1e-8)]
    early_stop_tol: f64,
    /// Run every iteration regardless of the step size.
    #[arg(long, conflicts_with = "early_stop_tol")]
    no_early_stop: bool,
    /// Gradient tolerance of the inner Newton solves.
    #[arg(long)]
    grad_tol: Option<f64>,
    /// Hold the base row at zero instead of refitting and renormalizing it.
    #[arg(long)]
    pinned_base: bool,
    /// Equality constraints, one `within` or `across` line each.
    #[arg(long)]
    constraints: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Recorded in the output for provenance.
    #[arg(long)]
    seed: Option<u64>,
    /// Record per-iteration wall times instead of zeros.
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DgpArg {
    A,
    B,
    C,
}

impl From<DgpArg> for DgpKind {
    fn from(d: DgpArg) -> Self {
        match d {
            DgpArg::A => DgpKind::A,
            DgpArg::B => DgpKind::B,
            DgpArg::C => DgpKind::C,
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    dgp: DgpArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    /// Covariates including the constant column.
    #[arg(long, default_value_t = 5)]
    p: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving counts.csv, covariates.csv and theta.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct BootstrapArgs {
    /// Fit document produced by `fit` on the same data.
    #[arg(long)]
    fit: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 200)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Iterations of each refit; defaults to those of the saved fit.
    #[arg(long)]
    iterations: Option<usize>,
    /// Restart each refit from this initializer instead of the estimate.
    #[arg(long, value_enum)]
    reinit: Option<InitArg>,
    /// Coefficient `k:j` to test (0-based choice and covariate).
    #[arg(long)]
    target: Option<String>,
    #[arg(long = "null", default_value_t = 0.0)]
    null_value: f64,
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    /// Output fit document; defaults to overwriting --fit.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "10,20,40,80")]
    d_list: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    p: usize,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    /// Timed fits per d; the median is reported.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args, Debug)]
struct TableArgs {
    /// Table number, 1 to 5.
    #[arg(value_parser = clap::value_parser!(u8).range(1..=5))]
    which: u8,
    /// Monte-Carlo replications per cell.
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, value_delimiter = ',')]
    d_list: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    /// Data design for table 4.
    #[arg(long, value_enum, default_value = "a")]
    dgp: DgpArg,
    /// Bootstrap replicates for table 5.
    #[arg(long, default_value_t = 200)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output; a readable table is printed to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report mean seconds per fit instead of zeros.
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    exec: ExecArgs,
}

fn init_kind(arg: InitArg, file: Option<&Path>) -> Result<InitKind> {
    Ok(match arg {
        InitArg::Binomial => InitKind::Binomial,
        InitArg::Taddy => InitKind::Taddy,
        InitArg::Poisson => InitKind::Poisson,
        InitArg::Zeros => InitKind::Zeros,
        InitArg::File => {
            let path = file
                .ok_or_else(|| IdmrError::InvalidInput("--init file needs --init-file".into()))?;
            InitKind::User(io::read_document(path)?.theta()?)
        }
    })
}

/// Rewrites constraint choice indices from input columns to model rows.
fn remap_constraints(spec: ConstraintSpec, kept_choices: &[usize]) -> Result<ConstraintSpec> {
    let row = |c: usize| {
        kept_choices.iter().position(|&k| k == c).ok_or_else(|| {
            IdmrError::InvalidInput(format!(
                "constraint refers to choice {c}, which is absent or never chosen"
            ))
        })
    };
    let mut out = spec;
    for tie in &mut out.within {
        tie.choice = row(tie.choice)?;
    }
    for tie in &mut out.across {
        tie.choices = tie.choices.iter().map(|&c| row(c)).collect::<Result<_>>()?;
    }
    Ok(out)
}

fn is_identity(map: &[usize]) -> bool {
    map.iter().enumerate().all(|(i, &k)| i == k)
}

fn run_fit(args: FitArgs) -> Result<()> {
    let exec = args.exec.executor()?;
    let loaded = args.data.load()?;
    let data = &loaded.data;
    let mut settings = IdcSettings {
        iterations: args
            .iterations
            .unwrap_or_else(|| default_iterations(data.n())),
        early_stop_tol: (!args.no_early_stop).then_some(args.early_stop_tol),
        ..IdcSettings::fixed(0)
    };
    if let Some(tol) = args.grad_tol {
        settings.glm.grad_tol = tol;
    }
    if args.pinned_base {
        settings.base = BaseUpdate::Pinned;
    }
    let init = init_kind(args.init, args.init_file.as_deref())?;
    let mut fit = match &args.constraints {
        Some(path) => {
            let spec = remap_constraints(io::load_constraints(path)?, &loaded.kept_choices)?;
            idc_fit_constrained(data, &spec, &init, &settings, &exec)?
        }
        None => idc_fit(data, &init, &settings, &exec)?,
    };
    if !args.timing {
        fit.wall_times.iter_mut().for_each(|t| *t = 0.0);
    }
    log::info!(
        "{} iterations, final step {:e}",
        fit.iterations_run,
        fit.step_norms.last().copied().unwrap_or(0.0)
    );
    let mut doc = FitDocument::from_fit(&fit, args.seed);
    doc.dropped_rows = loaded.dropped_rows();
    let mut dropped = loaded.dropped_choices();
    dropped.extend(fit.dropped_choices.iter().map(|&k| loaded.kept_choices[k]));
    dropped.sort_unstable();
    doc.dropped_choices = dropped;
    if !is_identity(&loaded.kept_choices) {
        doc.choice_map = Some(loaded.kept_choices.clone());
    }
    io::write_document(&doc, &args.out)
}

fn parse_target(raw: &str) -> Result<(usize, usize)> {
    let bad = || IdmrError::InvalidInput(format!("--target expects k:j, got {raw:?}"));
    let (k, j) = raw.split_once(':').ok_or_else(bad)?;
    Ok((
        k.trim().parse().map_err(|_| bad())?,
        j.trim().parse().map_err(|_| bad())?,
    ))
}

fn run_bootstrap(args: BootstrapArgs) -> Result<()> {
    let exec = args.exec.executor()?;
    let mut doc = io::read_document(&args.fit)?;
    let loaded = args.data.load()?;
    let data = &loaded.data;
    let expected = doc
        .choice_map
        .clone()
        .unwrap_or_else(|| (0..doc.d).collect());
    if expected != loaded.kept_choices || doc.p != data.p() {
        return Err(IdmrError::DimensionMismatch(format!(
            "the fit has {} choices and {} covariates but the data give {} and {}",
            doc.d,
            doc.p,
            data.d(),
            data.p()
        )));
    }
    let theta = doc.theta()?;
    let iterations = args.iterations.unwrap_or(doc.iterations_run);
    let mut settings =
        BootstrapSettings::new(args.replicates, IdcSettings::fixed(iterations), args.seed);
    settings.reinitialize = args.reinit.map(|r| init_kind(r, None)).transpose()?;
    let boot = bootstrap(data, &theta, &settings, &exec)?;
    let test = match &args.target {
        Some(raw) => {
            let target = parse_target(raw)?;
            let row = expected
                .iter()
                .position(|&k| k == target.0)
                .ok_or_else(|| {
                    IdmrError::InvalidInput(format!("choice {} is not in the fit", target.0))
                })?;
            let w = wald_test(
                &theta,
                &boot,
                data.n(),
                (row, target.1),
                args.null_value,
                args.level,
            )?;
            println!(
                "theta[{}][{}] = {}  se = {}  statistic = {}  critical = {}  reject = {}",
                target.0,
                target.1,
                theta.get(row, target.1),
                boot.se[[row, target.1]],
                w.statistic,
                w.critical_value,
                w.reject
            );
            Some(WaldRecord {
                choice: target.0,
                coord: target.1,
                null_value: args.null_value,
                level: args.level,
                statistic: w.statistic,
                critical_value: w.critical_value,
                reject: w.reject,
            })
        }
        None => None,
    };
    doc.bootstrap = Some(BootstrapRecord {
        replicates: args.replicates,
        replicates_used: boot.replicates_used,
        failures: boot.failures,
        seed: args.seed,
        se: boot.se.iter().copied().collect(),
        test,
    });
    io::write_document(&doc, args.out.as_deref().unwrap_or(&args.fit))
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let spec = DgpSpec {
        kind: args.dgp.into(),
        n: args.n,
        d: args.d,
        p: args.p,
        seed: args.seed,
    };
    spec.validate()?;
    let draw = sim::draw_dgp(&spec, &mut spec.rng())?;
    let dir = &args.out_dir;
    io::write_text(
        &dir.join("counts.csv"),
        &io::matrix_csv(draw.data.counts().counts()),
    )?;
    io::write_text(
        &dir.join("covariates.csv"),
        &io::matrix_csv(draw.data.covariates().values()),
    )?;
    io::write_text(
        &dir.join("theta.csv"),
        &io::matrix_csv(draw.theta_star.values()),
    )
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let exec = args.exec.executor()?;
    let spec = BenchSpec {
        dgp: DgpKind::A,
        n: args.n,
        p: args.p,
        d_values: args.d_list,
        iterations: args.iterations,
        repeats: args.repeats,
        seed: args.seed,
    };
    let points = sim::run_bench(&spec, &exec)?;
    let mut csv = String::from("d,seconds\n");
    for p in &points {
        csv.push_str(&format!("{},{}\n", p.d, p.seconds));
    }
    print!("{csv}");
    let slope = sim::bench_slope(&points);
    let ratio = points
        .last()
        .map_or(f64::NAN, |l| l.seconds / points[0].seconds);
    println!(
        "# workers {}, slope {slope:.6} s per choice, ratio last/first {ratio:.3}",
        exec.worker_count()
    );
    match &args.out {
        Some(path) => io::write_text(path, &csv),
        None => Ok(()),
    }
}

fn run_table(args: TableArgs) -> Result<()> {
    let exec = args.exec.executor()?;
    let n_default = if args.which == 5 {
        vec![250, 500, 1000]
    } else {
        vec![500, 1000, 2000]
    };
    let n_values = args.n_list.clone().unwrap_or(n_default);
    let d_default = match args.which {
        4 => vec![20],
        5 => vec![20],
        _ => vec![10, 20],
    };
    let d_values = args.d_list.clone().unwrap_or(d_default);
    if args.which == 5 {
        let mut csv = String::new();
        for &d in &d_values {
            for &n in &n_values {
                let spec = SizePowerSpec {
                    d,
                    n,
                    p: 5,
                    iterations: 10,
                    replicates: args.replicates,
                    mc_reps: args.reps,
                    deviations: vec![-0.2, -0.1, -0.05, 0.0, 0.05, 0.1, 0.2],
                    level: 0.05,
                    seed: args.seed,
                };
                let rows = sim::run_size_power(&spec, &exec)?;
                let body = sim::rejection_csv(&rows);
                let mut lines = body.lines();
                if csv.is_empty() {
                    csv.push_str("d,n,");
                    csv.push_str(lines.next().unwrap_or_default());
                    csv.push('\n');
                } else {
                    lines.next();
                }
                for line in lines {
                    csv.push_str(&format!("{d},{n},{line}\n"));
                }
            }
        }
        print!("{csv}");
        return match &args.out {
            Some(path) => io::write_text(path, &csv),
            None => Ok(()),
        };
    }
    let idc = |init: InitKind, iterations| Estimator::Idc { init, iterations };
    let (dgp, estimators) = match args.which {
        1 => (
            DgpKind::A,
            vec![idc(InitKind::Binomial, 10), idc(InitKind::Binomial, 40)],
        ),
        2 => (DgpKind::A, vec![Estimator::Mle]),
        3 => (
            DgpKind::A,
            vec![
                idc(InitKind::Taddy, 10),
                idc(InitKind::Taddy, 40),
                idc(InitKind::Poisson, 10),
                idc(InitKind::Poisson, 40),
            ],
        ),
        _ => (
            args.dgp.into(),
            vec![
                Estimator::Mle,
                idc(InitKind::Binomial, 20),
                idc(InitKind::Poisson, 20),
                idc(InitKind::Taddy, 20),
            ],
        ),
    };
    let spec = TableSpec {
        dgp,
        p: 5,
        estimators,
        d_values,
        n_values,
        reps: args.reps,
        seed: args.seed,
    };
    let cells = sim::run_table(&spec, &exec)?;
    print!("{}", sim::table_pretty(&cells, args.timing));
    match &args.out {
        Some(path) => io::write_text(path, &sim::table_csv(&cells, args.timing)),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Bootstrap(a) => run_bootstrap(a),
        Command::Bench(a) => run_bench(a),
        Command::Table(a) => run_table(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
