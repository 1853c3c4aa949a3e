use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use epicalib::acquisition::AcquisitionKind;
use epicalib::calibrate::run_two_stage;
use epicalib::data::GroundTruth;
use epicalib::experiment::{run_batch, two_stage_counts, verify_outputs, write_simulation, write_two_stage, Profile, RunConfig};
use epicalib::ode::RateSpec;
use epicalib::Error;

#[derive(Parser)]
#[command(name = "epicalib", version, about = "Graybox Bayesian-optimization calibration of SIQR models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method, seed) pair of a scenario config.
    Run(RunArgs),
    /// Write a ground-truth or custom-rate trajectory as CSV.
    Simulate(SimulateArgs),
    /// Two-stage calibration on real or synthetic infectious counts.
    Twostage(RunArgs),
    /// Recompute aggregates from per-run logs and compare with the stored ones.
    Verify {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replaces the seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    profile: Option<String>,
    /// Comma-separated method names (EI, KG, KG-CF, KG-FN, DG-CF).
    #[arg(long, value_delimiter = ',')]
    method: Vec<String>,
    /// BO iterations after the initial design.
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Truth {
    Linear,
    Nonlinear,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "linear")]
    truth: Truth,
    /// Linear rate coefficients x1,x2,x3,x4; overrides --truth.
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    #[arg(long, default_value_t = 30.0)]
    horizon: f64,
    #[arg(long)]
    emit_lambda: bool,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::InvalidArgument(_) | Error::MissingCountry(_) | Error::GapInSeries(_) | Error::MalformedRow { .. } => {
                Failure::Config(e.to_string())
            }
            e => Failure::Run(e.to_string()),
        }
    }
}

fn config_failure(field: &str, reason: impl std::fmt::Display) -> Failure {
    Failure::Config(Error::Config { field: field.into(), reason: reason.to_string() }.to_string())
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    if !args.config.exists() {
        return Err(config_failure("config", format!("{} does not exist", args.config.display())));
    }
    let mut c = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        c.seeds = vec![s];
        c.twostage.seed = s;
    }
    if let Some(o) = &args.out {
        c.output_dir = o.clone();
    }
    if let Some(p) = &args.profile {
        c.profile = Profile::parse(p)?;
    }
    if !args.method.is_empty() {
        c.methods = args.method.iter().map(|m| AcquisitionKind::parse(m)).collect::<Result<_, _>>().map_err(|e| config_failure("method", e))?;
    }
    if let Some(n) = args.iters {
        c.iterations = n;
        c.twostage.bo.iterations = n;
    }
    Ok(c)
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let config = load_config(args)?;
    config.validate()?;
    let outcome = run_batch(&config)?;
    println!("{} runs written to {}", outcome.summaries.len(), config.output_dir.display());
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        let lines: Vec<String> = outcome.failures.iter().map(|(k, s, e)| format!("{k} seed {s}: {e}")).collect();
        Err(Failure::Run(lines.join("\n")))
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    if !(args.horizon >= 1.0 && args.horizon.fract() == 0.0) {
        return Err(config_failure("horizon", "must be a positive whole number of days"));
    }
    let spec = match &args.rates {
        Some(x) if x.iter().any(|v| !v.is_finite()) => return Err(config_failure("rates", "coefficients must be finite")),
        Some(x) => RateSpec::linear(x).map_err(|e| config_failure("rates", e))?,
        None => match args.truth {
            Truth::Linear => GroundTruth::Linear.rate_spec(),
            Truth::Nonlinear => GroundTruth::Nonlinear.rate_spec(),
        },
    };
    match &args.out {
        Some(p) => write_simulation(&spec, args.horizon, args.emit_lambda, std::fs::File::create(p).map_err(|e| Failure::Run(e.to_string()))?)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_simulation(&spec, args.horizon, args.emit_lambda, &mut lock)?;
            lock.flush().map_err(|e| Failure::Run(e.to_string()))?;
        }
    }
    Ok(())
}

fn cmd_twostage(args: &RunArgs) -> Result<(), Failure> {
    let config = load_config(args)?;
    let counts = two_stage_counts(&config)?;
    let result = run_two_stage(&config.twostage, &counts)?;
    write_two_stage(&result, &config.output_dir)?;
    println!("stage-1 MSE {:e}", result.stage1_mse());
    match result.stage2_mse() {
        Some(m) => println!("stage-2 MSE {m:e}"),
        None => println!("stage 2 diverged; stage-1 result kept"),
    }
    Ok(())
}

fn cmd_verify(out: &Path) -> Result<(), Failure> {
    let bad = verify_outputs(out)?;
    if bad.is_empty() {
        println!("aggregate.csv matches the per-run logs");
        Ok(())
    } else {
        Err(Failure::Run(format!("aggregate.csv differs at lines {bad:?}")))
    }
}

fn init_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("EPICALIB_THREADS") {
        let n: usize = v.parse().map_err(|_| config_failure("EPICALIB_THREADS", format!("{v:?} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Run(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Twostage(a) => cmd_twostage(a),
        Command::Verify { out } => cmd_verify(out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
