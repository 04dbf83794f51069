use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use plume_core::config::{RunConfig, Variability};
use plume_core::error::Error;
use plume_core::pipeline::{self, Stage, OUT_ENV};

/// Plume dispersion, reduced flow-map surrogate and source inversion.
#[derive(Parser, Debug)]
#[command(name = "plume", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults to the built-in case.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in case used when no config file is given.
    #[arg(long, value_parser = parse_case, default_value = "lesser")]
    case: Variability,
    /// Overrides the configuration's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; defaults to $PLUME_OUT, then ./plume-out.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the training ensemble and the synthetic test data.
    Generate(Common),
    /// Fit the state and wind PCA bases.
    Reduce(Common),
    /// Train the flow-map surrogate.
    Train(Common),
    /// Estimate the approximation-error statistics.
    Bae(Common),
    /// Compute MAP points and Laplace posteriors.
    Invert(Common),
    /// Draw posterior samples and plot them.
    Sample(Common),
    /// Composition-horizon sweep and multi-start MAP study.
    Study(Common),
    /// Collect inversion metrics for every finished case.
    Report(Common),
    /// Rerun a stage from its manifest and compare outputs byte for byte.
    Replay {
        manifest: PathBuf,
        /// Directory for the rerun outputs.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_case(s: &str) -> Result<Variability, String> {
    match s {
        "lesser" => Ok(Variability::Lesser),
        "greater" => Ok(Variability::Greater),
        _ => Err(format!("expected lesser or greater, got {s:?}")),
    }
}

fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("plume-out"))
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::for_case(common.case),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_stage(stage: Stage, common: Common) -> Result<(), Error> {
    let cfg = load_config(&common)?;
    let root = out_root(common.out);
    let manifest = pipeline::run_in_root(stage, &cfg, &root)?;
    let dir = if stage.per_case() { pipeline::case_dir(&root, &cfg) } else { root };
    println!("{}: {} outputs in {}", stage.name(), manifest.outputs.len(), dir.display());
    for (k, v) in &manifest.metrics {
        println!("  {k} = {v:.6e}");
    }
    Ok(())
}

fn run_replay(manifest: &Path, out: &Path) -> Result<bool, Error> {
    let outcome = pipeline::replay(manifest, out)?;
    println!(
        "replay {}: {} identical, {} differ",
        outcome.stage,
        outcome.matched.len(),
        outcome.mismatched.len()
    );
    for path in &outcome.mismatched {
        println!("  differs: {path}");
    }
    Ok(outcome.identical())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Io(_) | Error::Header(_) | Error::HashMismatch(_) | Error::Truncated(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate(c) => run_stage(Stage::Generate, c),
        Command::Reduce(c) => run_stage(Stage::Reduce, c),
        Command::Train(c) => run_stage(Stage::Train, c),
        Command::Bae(c) => run_stage(Stage::Bae, c),
        Command::Invert(c) => run_stage(Stage::Invert, c),
        Command::Sample(c) => run_stage(Stage::Sample, c),
        Command::Study(c) => run_stage(Stage::Study, c),
        Command::Report(c) => run_stage(Stage::Report, c),
        Command::Replay { manifest, out } => match run_replay(&manifest, &out) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(3),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
