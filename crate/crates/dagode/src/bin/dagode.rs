//! Command-line entry point for the dagode toolkit.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dagode::cli::{
    cmd_benchmark, cmd_evaluate, cmd_fit, cmd_generate, default_config_text, exit_code,
    load_config, Algorithm, ExperimentConfig,
};
use dagode::learners::ThresholdRule;
use dagode::Error;

#[derive(Parser)]
#[command(name = "dagode", version, about = "Causal structure discovery with continuous-time dynamics")]
struct CliArgs {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// INI-like experiment config; defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the base RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for multi-seed runs (0 = all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Edge threshold: a number, or `gap` for the largest-gap rule
    #[arg(long)]
    threshold: Option<String>,
    /// Learner: notears | dagode
    #[arg(long)]
    algorithm: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a graph and generate a synthetic dataset
    Generate(CommonArgs),
    /// Fit a learner to a dataset and emit graph + report artifacts
    Fit(CommonArgs),
    /// Score a predicted edge list against a ground-truth edge list
    Evaluate {
        pred: PathBuf,
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the multi-seed sample/generate/fit/score pipeline
    Benchmark(CommonArgs),
    /// Print the default configuration
    Defaults,
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &CommonArgs) -> Result<(), Error> {
    if let Some(seed) = args.seed {
        cfg.generator.seed = seed;
        cfg.learner.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.paths.out = out.clone();
    }
    if let Some(alg) = &args.algorithm {
        cfg.algorithm = match alg.as_str() {
            "notears" => Algorithm::Notears,
            "dagode" => Algorithm::DagOde,
            _ => return Err(Error::Config(format!("unknown algorithm: {alg}"))),
        };
    }
    if let Some(t) = &args.threshold {
        cfg.learner.threshold = if t == "gap" {
            ThresholdRule::LargestGap
        } else {
            ThresholdRule::Fixed(
                t.parse().map_err(|_| Error::Config(format!("bad threshold: {t}")))?,
            )
        };
    }
    if let Some(threads) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run() -> Result<i32, Error> {
    let cli = CliArgs::parse();
    match cli.cmd {
        Cmd::Defaults => {
            print!("{}", default_config_text());
            Ok(0)
        }
        Cmd::Evaluate { pred, truth, out } => {
            cmd_evaluate(&pred, &truth, out.as_deref())?;
            Ok(0)
        }
        Cmd::Generate(args) => {
            let (mut cfg, _) = load_config(args.config.as_deref())?;
            apply_overrides(&mut cfg, &args)?;
            cmd_generate(&cfg)?;
            Ok(0)
        }
        Cmd::Fit(args) => {
            let (mut cfg, text) = load_config(args.config.as_deref())?;
            apply_overrides(&mut cfg, &args)?;
            cmd_fit(&cfg, &text)?;
            Ok(0)
        }
        Cmd::Benchmark(args) => {
            let (mut cfg, text) = load_config(args.config.as_deref())?;
            apply_overrides(&mut cfg, &args)?;
            cmd_benchmark(&cfg, &text)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
