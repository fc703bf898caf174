//! Command-line entry point: runs one pipeline stage or all of them.
//!
//! Exit status is 0 on success, 2 for invalid configuration and 1 for
//! runtime failures; failures print a JSON object to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use field_dissector::pipeline::{Pipeline, PipelineConfig};
use field_dissector::Error;

#[derive(Parser, Debug)]
#[command(name = "field-dissector", version, about = "Splits a volumetric radiance field into per-category sub-fields and meshes")]
struct Cli {
    #[command(subcommand)]
    stage: Stage,

    /// JSON config file; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Config override `dotted.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Stage {
    /// Build fields and reference masks.
    Scene,
    /// Mine concept embeddings and the toy denoiser.
    Mine,
    /// Train the category field.
    Dissect,
    /// Extract one mesh per category.
    Mesh,
    /// Push category meshes apart.
    Refine,
    /// Write turntable renders.
    Render,
    /// Write evaluation metrics.
    Eval,
    /// Run every enabled stage in order.
    All,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Scene => "scene",
            Stage::Mine => "mine",
            Stage::Dissect => "dissect",
            Stage::Mesh => "mesh",
            Stage::Refine => "refine",
            Stage::Render => "render",
            Stage::Eval => "eval",
            Stage::All => "all",
        }
    }
}

/// Failure class deciding the exit status.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn classify(err: anyhow::Error) -> Failure {
    let is_config = matches!(
        err.downcast_ref::<Error>(),
        Some(Error::InvalidConfig(_) | Error::InvalidScene(_))
    );
    if is_config {
        Failure::Config(err)
    } else {
        Failure::Runtime(err)
    }
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))
            .map_err(|e| match e.downcast_ref::<Error>() {
                Some(Error::Io { .. }) => Failure::Config(e),
                _ => classify(e),
            })?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    config
        .with_overrides(&cli.overrides)
        .context("applying --set overrides")
        .map_err(Failure::Config)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("FIELD_DISSECTOR_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(anyhow::anyhow!("FIELD_DISSECTOR_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the thread pool")
        .map_err(Failure::Runtime)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    configure_threads()?;
    let config = build_config(cli)?;
    let pipeline = Pipeline::new(config)
        .context("preparing the run")
        .map_err(classify)?;
    pipeline
        .run(cli.stage.name())
        .with_context(|| format!("stage {}", cli.stage.name()))
        .map_err(classify)
}

fn report(kind: &str, stage: Option<&str>, err: &anyhow::Error) {
    let causes: Vec<String> = err.chain().map(|c| c.to_string()).collect();
    let body = serde_json::json!({
        "error": kind,
        "stage": stage,
        "message": format!("{err:#}"),
        "causes": causes,
    });
    eprintln!("{body}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("config", None, &anyhow::anyhow!(e.to_string().trim().to_string()));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            report("config", Some(cli.stage.name()), &e);
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            report("runtime", Some(cli.stage.name()), &e);
            ExitCode::from(1)
        }
    }
}
