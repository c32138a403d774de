use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kfpo_cli::config::{read_document, ExperimentConfig, Mode, Overrides};
use kfpo_cli::{presets, run_experiment, CliError};

#[derive(Parser)]
#[command(name = "kfpo", version, about = "Kalman gain learning by policy optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the standing assumptions on the model and noise.
    Validate(RunArgs),
    /// Write simulated state/observation trajectories, one file per seed.
    Simulate(RunArgs),
    /// Optimal gains and error covariances from the Riccati recursion.
    Riccati(RunArgs),
    /// Compare the closed-form gradient with finite differences.
    CheckGradient(RunArgs),
    /// Bound and step-size constants at zero gains.
    Constants(RunArgs),
    /// Gradient, stacked-representation and dual Monte Carlo cross-checks.
    OracleCompare(RunArgs),
    /// Exact gradient descent from zero gains.
    Gd(RunArgs),
    /// Stochastic gradient descent on sampled trajectories.
    Sgd(RunArgs),
    /// Run whatever `mode` the document names.
    Run(RunArgs),
    /// List the built-in presets.
    Presets,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment document (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment document.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    /// Iteration count V.
    #[arg(long)]
    iters: Option<usize>,
    /// Trajectories per batch L.
    #[arg(long)]
    samples: Option<usize>,
    /// Seed list, comma separated.
    #[arg(long = "seed", alias = "seeds", value_delimiter = ',', num_args = 1..)]
    seeds: Option<Vec<u64>>,
    /// Output directory [default: $KFPO_OUT_DIR/<name> or kfpo-out/<name>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record wall-clock seconds in traces (breaks byte reproducibility).
    #[arg(long)]
    timing: bool,
    /// Draw a fresh SGD batch every iteration.
    #[arg(long)]
    resample: bool,
    /// Samples for the dual Monte Carlo check.
    #[arg(long)]
    dual_samples: Option<usize>,
}

fn resolve(args: RunArgs, mode: Option<Mode>) -> Result<ExperimentConfig, CliError> {
    let (name, doc) = match (&args.preset, &args.config) {
        (Some(p), _) => (p.clone(), presets::load(p)?),
        (None, Some(path)) => {
            let name = path
                .file_stem()
                .map_or("config".into(), |s| s.to_string_lossy().into_owned());
            (name, read_document(path)?)
        }
        (None, None) => return Err(CliError::Config("need --config or --preset".into())),
    };
    let over = Overrides {
        mode,
        eta: args.eta,
        iters: args.iters,
        samples: args.samples,
        seeds: args.seeds,
        out: args.out,
        resample_each_iter: args.resample,
        timing: args.timing,
        dual_samples: args.dual_samples,
    };
    ExperimentConfig::resolve(&name, &doc, &over)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, mode) = match cli.command {
        Command::Validate(a) => (a, Some(Mode::Validate)),
        Command::Simulate(a) => (a, Some(Mode::Simulate)),
        Command::Riccati(a) => (a, Some(Mode::Riccati)),
        Command::CheckGradient(a) => (a, Some(Mode::CheckGradient)),
        Command::Constants(a) => (a, Some(Mode::Constants)),
        Command::OracleCompare(a) => (a, Some(Mode::OracleCompare)),
        Command::Gd(a) => (a, Some(Mode::Gd)),
        Command::Sgd(a) => (a, Some(Mode::Sgd)),
        Command::Run(a) => (a, None),
        Command::Presets => {
            let mut stdout = std::io::stdout().lock();
            for name in presets::names() {
                let _ = writeln!(stdout, "{name}");
            }
            return ExitCode::SUCCESS;
        }
    };
    let result = resolve(args, mode).and_then(|config| run_experiment(&config));
    match result {
        Ok(report) => {
            // A closed pipe (e.g. `| head`) must not turn a finished run into a panic.
            let mut stdout = std::io::stdout().lock();
            for line in &report.summary {
                let _ = writeln!(stdout, "{line}");
            }
            for f in &report.files {
                let _ = writeln!(stdout, "wrote {}", f.display());
            }
            for seed in &report.diverged {
                eprintln!("error: divergence guard fired (seed {seed})");
            }
            for c in &report.failed_checks {
                eprintln!("error: check failed: {c}");
            }
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
