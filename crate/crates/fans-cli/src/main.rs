//! `fans` — drive verification-aware answer-selection runs from the shell.
//!
//! Commands map onto the pipeline stages: `run` executes everything in
//! order, `stage <name>` advances one stage (so GPU-heavy stages can run on
//! different machines at different times against the same run directory),
//! `report` rebuilds the report files, and `validate-config` checks a config
//! without touching any backend.
//!
//! Exit codes are fixed for scripting: 0 = complete, 2 = partial (transient
//! failures left work pending; rerun to retry), 3 = configuration or
//! invocation error, 4 = protocol failures (a backend or mock script returned
//! junk; rerunning will not help until it is fixed). Progress goes to stdout,
//! diagnostics to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand};
use fans_core::config::{resolved_roles, RunConfig};
use fans_core::pipeline::{Pipeline, RunStatus, StageName, StageOutcome};

#[derive(Parser)]
#[command(
    name = "fans",
    version,
    about = "Sample, formalize, prove, verify, and select answers to math problems"
)]
struct Cli {
    /// Path to the run's TOML config file; relative paths inside the config
    /// resolve against this file's directory.
    #[arg(short, long, global = true, default_value = "fans.toml")]
    config: PathBuf,

    /// Override one config value by dotted path, e.g. --set n_samples=4 or
    /// --set roles.prover.model_name=other. Repeatable; applied after file
    /// and environment values.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage in order and write the report.
    Run,
    /// Run one stage (sample, translate, check, prove, verify, select,
    /// report) and stop.
    Stage { name: String },
    /// Rebuild and write the report files from the records already on disk.
    Report,
    /// Parse and validate the config, then print the resolved roles and the
    /// config fingerprint.
    ValidateConfig,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("fans: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<u8> {
    let base_dir = match cli.config.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let config = RunConfig::load(&cli.config, &cli.set)?;
    match cli.command {
        Command::ValidateConfig => {
            config.validate()?;
            println!("ok: {}", cli.config.display());
            println!("run id: {}", config.run_id);
            println!("fingerprint: {}", config.fingerprint());
            for (name, role) in resolved_roles(&config) {
                println!(
                    "role {name}: model {} at {}",
                    role.model_name, role.endpoint_url
                );
            }
            Ok(0)
        }
        Command::Run => {
            let mut pipeline = Pipeline::open(config, &base_dir)?;
            let outcome = pipeline.run_all()?;
            for stage in &outcome.stages {
                print_outcome(stage);
            }
            println!("run {}", status_word(outcome.status));
            Ok(exit_code(outcome.status))
        }
        Command::Stage { name } => {
            let stage: StageName = name.parse().map_err(|m: String| anyhow!(m))?;
            run_one_stage(config, &base_dir, stage)
        }
        Command::Report => run_one_stage(config, &base_dir, StageName::Report),
    }
}

fn run_one_stage(config: RunConfig, base_dir: &Path, stage: StageName) -> anyhow::Result<u8> {
    let mut pipeline = Pipeline::open(config, base_dir)?;
    let outcome = pipeline.run_stage(stage)?;
    print_outcome(&outcome);
    Ok(exit_code(outcome.status()))
}

fn print_outcome(outcome: &StageOutcome) {
    let mut line = format!(
        "stage {}: {} pending, {} completed",
        outcome.stage, outcome.pending, outcome.completed
    );
    if outcome.retryable_failures > 0 {
        line.push_str(&format!(
            ", {} retryable failure(s)",
            outcome.retryable_failures
        ));
    }
    if outcome.protocol_failures > 0 {
        line.push_str(&format!(
            ", {} protocol failure(s)",
            outcome.protocol_failures
        ));
    }
    println!("{line}");
    for message in &outcome.failures {
        println!("  failure: {message}");
    }
    for file in &outcome.files {
        println!("  wrote {}", file.display());
    }
}

fn status_word(status: RunStatus) -> &'static str {
    match status {
        RunStatus::Complete => "complete",
        RunStatus::Partial => "partial — rerun to retry pending items",
        RunStatus::Protocol => "hit protocol failures — fix the backend or scripts, then rerun",
    }
}

fn exit_code(status: RunStatus) -> u8 {
    status.exit_code() as u8
}
