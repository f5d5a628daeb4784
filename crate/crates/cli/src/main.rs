//! `didcont`: estimate continuous-dose DiD effects from CSV files and run the
//! Monte Carlo harness.

mod io;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use didcont::simulation::{
    data_seed, gen_panel_dgp, gen_rcs_dgp, monte_carlo, Design, McMethod, McSpec, McSummaryRow,
};
use didcont::{
    derive_seed, estimate_panel, estimate_rcs, multiplier_bootstrap, validate_panel, validate_rcs, DensityFamily,
    EstimandSpec, EstimationConfig, KernelFamily, MultiplierLaw,
};

use report::{BootstrapCi, GroupTrim, RunReport, SCHEMA_VERSION};

const THREADS_VAR: &str = "DIDCONT_THREADS";
const BOOTSTRAP_STREAM: u64 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Malformed data or arguments (exit 1).
    Input(String),
    /// Estimation failed on valid input (exit 2).
    Estimation(String),
}

impl From<didcont::Error> for CliError {
    fn from(e: didcont::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Estimation(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "didcont", version, about = "Difference-in-differences for continuous treatment doses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the ATET of dose d versus d' from a CSV file.
    Estimate(EstimateArgs),
    /// Run Monte Carlo replications on the simulation designs.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DesignArg {
    Rcs,
    Panel,
}

impl From<DesignArg> for Design {
    fn from(d: DesignArg) -> Self {
        match d {
            DesignArg::Rcs => Design::Rcs,
            DesignArg::Panel => Design::Panel,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KernelArg {
    Epanechnikov,
    Gaussian,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PsModelArg {
    Linear,
    Loglinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutFormat {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Lasso,
    Lnorm,
    Under,
    #[value(name = "ln_under")]
    LnUnder,
}

impl From<MethodArg> for McMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Lasso => McMethod::Lasso,
            MethodArg::Lnorm => McMethod::Lnorm,
            MethodArg::Under => McMethod::Under,
            MethodArg::LnUnder => McMethod::LnUnder,
        }
    }
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    design: DesignArg,
    /// Treatment dose.
    #[arg(long, allow_negative_numbers = true)]
    d: f64,
    /// Comparison dose.
    #[arg(long, allow_negative_numbers = true)]
    dprime: f64,
    /// Outcome period; defaults to the latest period (rcs) or 1 (panel).
    #[arg(long, allow_negative_numbers = true)]
    t: Option<i64>,
    /// Periods between dose and outcome.
    #[arg(long, default_value_t = 0)]
    lag: u32,
    /// Explicit bandwidth, overriding the rule of thumb.
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Divisor applied to the rule-of-thumb bandwidth.
    #[arg(long, default_value_t = 1.0)]
    undersmooth: f64,
    #[arg(long, value_enum, default_value = "epanechnikov")]
    kernel: KernelArg,
    /// Cross-fitting folds.
    #[arg(long, default_value_t = 3)]
    folds: usize,
    /// Trimming threshold on normalized kernel weights.
    #[arg(long, default_value_t = 0.1)]
    trim: f64,
    /// Conditional dose density family.
    #[arg(long, value_enum, default_value = "linear")]
    ps_model: PsModelArg,
    /// Multiplier-bootstrap draws (at least 100).
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Miscoverage level of the confidence intervals.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "table")]
    out: OutFormat,
    /// Include wall-clock time in the output.
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    design: DesignArg,
    /// Observations per replication.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Number of covariates.
    #[arg(long, default_value_t = 100)]
    p: usize,
    /// Replications per method (at least 2); may be omitted with --emit-data.
    #[arg(long)]
    reps: Option<usize>,
    /// Estimator variants, repeated or comma separated.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "lasso")]
    method: Vec<MethodArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "table")]
    out: OutFormat,
    /// Write the dataset of replication 0 to this CSV file.
    #[arg(long)]
    emit_data: Option<PathBuf>,
    /// Multiplier-bootstrap draws per replication.
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Include wall-clock time in the output.
    #[arg(long)]
    timing: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = threads_from_env().and_then(|threads| {
        if threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .map_err(|e| CliError::Input(format!("thread pool: {e}")))?;
        }
        match cli.command {
            Command::Estimate(args) => cmd_estimate(&args).map(|r| render_report(&r, args.out)),
            Command::Simulate(args) => cmd_simulate(&args, threads),
        }
    });
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Estimation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var(THREADS_VAR) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| CliError::Input(format!("{THREADS_VAR} must be a non-negative integer, got `{v}`"))),
        _ => Ok(0),
    }
}

fn render_report(report: &RunReport, out: OutFormat) -> String {
    match out {
        OutFormat::Table => report.to_table(),
        OutFormat::Json => report.to_json() + "\n",
        OutFormat::Csv => report.to_csv(),
    }
}

fn estimation_config(args: &EstimateArgs) -> EstimationConfig {
    EstimationConfig {
        folds: args.folds,
        kernel: match args.kernel {
            KernelArg::Epanechnikov => KernelFamily::Epanechnikov,
            KernelArg::Gaussian => KernelFamily::Gaussian,
        },
        bandwidth: args.bandwidth,
        undersmooth_factor: args.undersmooth,
        trim_threshold: args.trim,
        ps_family: match args.ps_model {
            PsModelArg::Linear => DensityFamily::LinearNormal,
            PsModelArg::Loglinear => DensityFamily::LoglinearNormal,
        },
        alpha: args.alpha,
        seed: args.seed,
        ..EstimationConfig::default()
    }
}

fn cmd_estimate(args: &EstimateArgs) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let config = estimation_config(args);
    config.validate()?;
    if let Some(b) = args.bootstrap {
        if b < 100 {
            return Err(CliError::Input(format!("--bootstrap needs at least 100 draws, got {b}")));
        }
    }
    let raw = io::read_table(&args.data)?;
    let design = Design::from(args.design);
    let (estimand, fit, n) = match design {
        Design::Rcs => {
            let sample = validate_rcs(&raw)?;
            let t = args.t.unwrap_or_else(|| *sample.periods().last().expect("validated samples have two periods"));
            let estimand = EstimandSpec::new(args.d, args.dprime, t, args.lag)?;
            (estimand, estimate_rcs(&sample, &estimand, &config)?, sample.n())
        }
        Design::Panel => {
            let sample = validate_panel(&raw)?;
            let estimand = EstimandSpec::new(args.d, args.dprime, args.t.unwrap_or(1), args.lag)?;
            (estimand, estimate_panel(&sample, &estimand, &config)?, sample.n())
        }
    };
    let bootstrap = match args.bootstrap {
        Some(reps) => {
            let seed = derive_seed(config.seed, &[BOOTSTRAP_STREAM]);
            let (ci_low, ci_high) =
                multiplier_bootstrap(&fit.scores, reps, config.alpha, seed, MultiplierLaw::Exponential)?;
            Some(BootstrapCi { reps, ci_low, ci_high })
        }
        None => None,
    };
    let groups = fit
        .weights
        .groups
        .iter()
        .zip(&fit.estimate.n_trimmed_per_group)
        .map(|(g, &n_trimmed)| GroupTrim { name: g.name.clone(), n_trimmed })
        .collect();
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        design,
        n,
        estimand,
        config,
        estimate: fit.estimate,
        groups,
        bootstrap,
        duration_seconds: args.timing.then(|| start.elapsed().as_secs_f64()),
    })
}

fn cmd_simulate(args: &SimulateArgs, threads: usize) -> Result<String, CliError> {
    let design = Design::from(args.design);
    if args.n == 0 || args.p == 0 {
        return Err(CliError::Input("--n and --p must be positive".into()));
    }
    if let Some(reps) = args.reps {
        if reps < 2 {
            return Err(CliError::Input(format!("reps must be >= 2, got {reps}")));
        }
    } else if args.emit_data.is_none() {
        return Err(CliError::Input("--reps is required unless --emit-data is given".into()));
    }
    if let Some(b) = args.bootstrap {
        if b < 100 {
            return Err(CliError::Input(format!("--bootstrap needs at least 100 draws, got {b}")));
        }
    }
    if let Some(path) = &args.emit_data {
        let seed = data_seed(args.seed, 0);
        let table = match design {
            Design::Rcs => gen_rcs_dgp(args.n, args.p, seed).to_raw_table(),
            Design::Panel => gen_panel_dgp(args.n, args.p, seed).to_raw_table(),
        };
        io::write_table(&table, path)?;
    }
    let Some(reps) = args.reps else {
        return Ok(String::new());
    };
    let config = EstimationConfig { seed: args.seed, ..EstimationConfig::default() };
    let mut rows: Vec<McSummaryRow> = Vec::new();
    let mut seconds = 0.0;
    for &method in &args.method {
        let spec = McSpec { design, n: args.n, p: args.p, reps, method: method.into(), bootstrap: args.bootstrap, threads };
        let report = monte_carlo(&spec, &config)?;
        seconds += report.seconds;
        rows.push(report.row);
    }
    let mut text = match args.out {
        OutFormat::Table => report::summary_table(&rows),
        OutFormat::Json => report::summary_json(&rows),
        OutFormat::Csv => report::summary_csv(&rows),
    };
    if args.timing {
        if args.out == OutFormat::Json {
            text.push_str(&format!("{{\"seconds\":{seconds}}}\n"));
        } else {
            text.push_str(&format!("# seconds: {seconds:.3}\n"));
        }
    }
    Ok(text)
}
