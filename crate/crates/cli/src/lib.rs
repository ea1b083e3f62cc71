//! Command-line driver for selfspike.
//!
//! Exit status: 0 on success, 1 when a gradient check fails, 2 for
//! unreadable or inconsistent input, 3 for a numerical failure during
//! training.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod trace;
pub mod train;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use selfspike::gradcheck::{gradcheck_report, GradcheckOptions};
use selfspike::neuron::{NeuronConfig, NeuronKind, ResetMode};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "selfspike",
    version,
    about = "Train and inspect spiking networks with self-prediction neurons"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write metrics, checkpoint and config echo.
    Train(RunArgs),
    /// Print the accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Compare the explicit backward pass with finite differences.
    Gradcheck(GradcheckArgs),
    /// Step a single neuron through a column of inputs.
    Trace(TraceArgs),
    /// Baseline, detached and kept runs with a shared seed.
    Ablate(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, requires = "labels", conflicts_with = "config")]
    pub images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    pub labels: Option<PathBuf>,
    /// Evaluate on the test split of a run config instead of IDX files.
    #[arg(long, required_unless_present = "images")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub seeds: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub kind: NeuronKind,
    #[arg(long)]
    pub enhanced: bool,
    #[arg(long)]
    pub detach: bool,
    #[arg(
        long,
        required_unless_present = "scenario",
        conflicts_with = "scenario"
    )]
    pub input: Option<PathBuf>,
    /// Bundled input: case1, case2, case3 or case4.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.5)]
    pub tau_p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub theta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub v_reset: f64,
    #[arg(long, default_value = "hard")]
    pub reset: ResetMode,
}

fn run_config(args: &RunArgs) -> Result<(RunConfig, String), CliError> {
    let (mut cfg, text) = RunConfig::load(&args.config)?;
    let mut overrides = Vec::new();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        overrides.push(("seed", seed.to_string()));
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
        overrides.push(("out", out.display().to_string()));
    }
    Ok((cfg, train::config_echo(&text, &overrides)))
}

fn trace_config(args: &TraceArgs) -> Result<NeuronConfig, CliError> {
    if !(args.tau > 1.0) || !(args.tau_p > 0.0 && args.tau_p < 1.0) {
        return Err(CliError::Input(format!(
            "need tau > 1 and 0 < tau_p < 1, got {} and {}",
            args.tau, args.tau_p
        )));
    }
    let mut cfg = NeuronConfig::new(args.kind)
        .enhanced(args.enhanced)
        .reset(args.reset)
        .with_tau(args.tau)
        .with_tau_p(args.tau_p);
    cfg.theta = args.theta;
    cfg.v_reset = args.v_reset;
    cfg.detach_pred_spike = args.detach;
    cfg.validate().map_err(CliError::Input)?;
    Ok(cfg)
}

/// Runs a parsed command, printing its report to stdout, and returns the
/// exit status for a command that completed.
pub fn run(cli: Cli) -> Result<i32, CliError> {
    let threads = train::threads_from_env();
    match cli.command {
        Command::Train(args) => {
            let (cfg, echo) = run_config(&args)?;
            let outcome = train::train(&cfg, &echo, threads)?;
            println!(
                "best_test_acc={:?} epoch={} checkpoint={}",
                outcome.best_test_acc,
                outcome.best_epoch,
                outcome.checkpoint.display()
            );
            Ok(0)
        }
        Command::Eval(args) => {
            let data = match (args.images, args.labels, args.config) {
                (Some(images), Some(labels), _) => train::EvalData::Idx { images, labels },
                (_, _, Some(config)) => train::EvalData::Config(config),
                _ => {
                    return Err(CliError::Input(
                        "eval needs --images and --labels, or --config".into(),
                    ))
                }
            };
            let acc = train::eval(&args.checkpoint, &data, threads)?;
            println!("accuracy={acc:?}");
            Ok(0)
        }
        Command::Gradcheck(args) => {
            if args.seeds == 0 || !(args.tol > 0.0) {
                return Err(CliError::Input(
                    "gradcheck needs --seeds >= 1 and --tol > 0".into(),
                ));
            }
            let report = gradcheck_report(
                args.seeds,
                args.tol,
                GradcheckOptions {
                    threads,
                    drop_pred_spike_path: false,
                },
            );
            print!("{report}");
            Ok(if report.all_pass() { 0 } else { 1 })
        }
        Command::Trace(args) => {
            let cfg = trace_config(&args)?;
            let text = match (&args.input, &args.scenario) {
                (Some(path), _) => std::fs::read_to_string(path)
                    .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?,
                (None, Some(name)) => trace::scenario(name)
                    .ok_or_else(|| CliError::Input(format!("unknown scenario `{name}`")))?
                    .to_string(),
                (None, None) => {
                    return Err(CliError::Input("trace needs --input or --scenario".into()))
                }
            };
            let inputs = trace::parse_inputs(&text).map_err(CliError::Input)?;
            let csv = trace::to_csv(&trace::run_trace(&cfg, &inputs));
            std::fs::write(&args.out, csv).map_err(|e| CliError::Write {
                path: args.out.clone(),
                source: e,
            })?;
            Ok(0)
        }
        Command::Ablate(args) => {
            let (cfg, echo) = run_config(&args)?;
            let rows = train::ablate(&cfg, &echo, threads)?;
            println!("{}", train::SUMMARY_HEADER);
            for r in rows {
                println!(
                    "{},{:?},{:?}",
                    r.variant.name(),
                    r.outcome.best_test_acc,
                    r.outcome.final_train_acc
                );
            }
            Ok(0)
        }
    }
}
