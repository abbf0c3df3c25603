//! Command-line entry point: wires configuration, pipeline stages, and
//! report emission into reproducible commands.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 partial success
//! (some cases rejected or unevaluable), 4 run failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cxr_consensus::pipeline::{
    self, load_config, PipelineError, RunConfig, RunMode, RunOptions,
};

#[derive(Parser)]
#[command(
    name = "cxr-consensus",
    about = "Multi-model consensus pipeline for chest-radiograph diagnosis",
    version
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Path to the run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the run mode (unimodal | multimodal).
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Override the consensus threshold.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Override the note-generation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Seeded subsampling as COUNT,SEED (e.g. --sample 50,42).
    #[arg(long, global = true)]
    sample: Option<String>,
    /// Restrict the run to these backend ids (repeatable).
    #[arg(long = "backend", global = true)]
    backends: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Load the dataset index and export normalized JPEGs plus a manifest.
    Ingest,
    /// Generate synthetic clinical notes for every case.
    Notegen {
        /// Re-extract labels from each emitted note and abort on mismatch.
        #[arg(long)]
        audit: bool,
    },
    /// Dispatch all cases to the configured backends and persist outcomes.
    Run {
        /// Skip cases whose outputs are already persisted.
        #[arg(long)]
        resume: bool,
        /// Dispatch at most N pending cases.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Compute the evaluation summary and report tables from a finished run.
    Evaluate,
    /// Recompute the threshold sensitivity table from persisted outcomes.
    Sweep,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;
const EXIT_FAILURE: u8 = 4;

fn fail(code: u8, kind: &str, message: &str) -> ExitCode {
    // Machine-readable error record on stderr.
    eprintln!(
        "{}",
        serde_json::json!({ "error": kind, "message": message, "exit_code": code })
    );
    ExitCode::from(code)
}

fn error_exit(err: &PipelineError) -> ExitCode {
    let (code, kind) = match err {
        PipelineError::Config { .. }
        | PipelineError::ConfigRead { .. }
        | PipelineError::ConfigParse { .. }
        | PipelineError::OutputsExist { .. } => (EXIT_CONFIG, "config_error"),
        PipelineError::Ingest(cxr_consensus::ingest::IngestError::Schema { .. })
        | PipelineError::Ingest(cxr_consensus::ingest::IngestError::SampleTooLarge { .. }) => {
            (EXIT_CONFIG, "config_error")
        }
        PipelineError::RunIncomplete { .. } => (EXIT_FAILURE, "run_incomplete"),
        _ => (EXIT_FAILURE, "run_error"),
    };
    fail(code, kind, &err.to_string())
}

fn apply_overrides(config: &mut RunConfig, overrides: &Overrides) -> Result<(), String> {
    if let Some(out) = &overrides.out {
        config.output_dir = out.clone();
    }
    if let Some(mode) = &overrides.mode {
        config.mode = match mode.as_str() {
            "unimodal" => RunMode::Unimodal,
            "multimodal" => RunMode::Multimodal,
            other => return Err(format!("unknown mode {other} (unimodal | multimodal)")),
        };
    }
    if let Some(threshold) = overrides.threshold {
        config.consensus.threshold = threshold;
    }
    if let Some(seed) = overrides.seed {
        config.notegen_seed = Some(seed);
    }
    if let Some(sample) = &overrides.sample {
        let (count, seed) = sample
            .split_once(',')
            .ok_or_else(|| format!("--sample expects COUNT,SEED, got {sample}"))?;
        let count: usize =
            count.trim().parse().map_err(|_| format!("bad sample count {count}"))?;
        let seed: u64 = seed.trim().parse().map_err(|_| format!("bad sample seed {seed}"))?;
        config.sampling = Some(cxr_consensus::ingest::SamplingSpec { count, seed });
    }
    config.select_backends(&overrides.backends).map_err(|e| e.to_string())?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();

    let Some(config_path) = &cli.overrides.config else {
        return fail(EXIT_CONFIG, "config_error", "--config is required");
    };
    let mut config = match load_config(config_path) {
        Ok(config) => config,
        Err(err) => return error_exit(&err),
    };
    if let Err(message) = apply_overrides(&mut config, &cli.overrides) {
        return fail(EXIT_CONFIG, "config_error", &message);
    }

    match cli.command {
        Command::Ingest => match pipeline::cmd_ingest(&config) {
            Ok(report) => {
                println!(
                    "ingest: {} rows read, {} cases accepted, {} images exported, {} rejections, {} image failures",
                    report.rows_read,
                    report.cases_accepted,
                    report.images_exported,
                    report.rejections.len(),
                    report.image_failures.len()
                );
                if report.is_partial() {
                    ExitCode::from(EXIT_PARTIAL)
                } else {
                    ExitCode::SUCCESS
                }
            }
            Err(err) => error_exit(&err),
        },
        Command::Notegen { audit } => match pipeline::cmd_notegen(&config, audit) {
            Ok(report) => {
                println!("notegen: {} notes written, {} skipped", report.written, report.skipped.len());
                if report.skipped.is_empty() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(EXIT_PARTIAL)
                }
            }
            Err(err) => error_exit(&err),
        },
        Command::Run { resume, limit } => {
            let runtime = match tokio::runtime::Runtime::new() {
                Ok(runtime) => runtime,
                Err(err) => return fail(EXIT_FAILURE, "run_error", &err.to_string()),
            };
            match runtime.block_on(pipeline::cmd_run(&config, RunOptions { resume, limit })) {
                Ok(report) => {
                    println!(
                        "run: {} cases ({} dispatched, {} resumed, {} remaining); {} consensus, {} flagged, {} unevaluable",
                        report.total_cases,
                        report.dispatched,
                        report.resumed,
                        report.remaining,
                        report.consensus,
                        report.flagged,
                        report.unevaluable
                    );
                    if report.unevaluable > 0 {
                        ExitCode::from(EXIT_PARTIAL)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(err) => error_exit(&err),
            }
        }
        Command::Evaluate => match pipeline::cmd_evaluate(&config) {
            Ok(summary) => {
                let consensus = summary
                    .consensus_accuracy
                    .map(|a| format!("{:.1}%", a * 100.0))
                    .unwrap_or_else(|| "n/a".into());
                println!(
                    "evaluate: {} evaluable cases, agreement {}/{}, consensus accuracy {}",
                    summary.run.evaluable_cases,
                    summary.agreement.agreement_count,
                    summary.agreement.total_cases,
                    consensus
                );
                println!("reports written under {}", config.output_dir.join("eval").display());
                ExitCode::SUCCESS
            }
            Err(err) => error_exit(&err),
        },
        Command::Sweep => match pipeline::cmd_sweep(&config) {
            Ok(table) => {
                for row in &table.rows {
                    let acc = row
                        .consensus_accuracy
                        .map(|a| format!("{:.1}%", a * 100.0))
                        .unwrap_or_else(|| "n/a".into());
                    println!("threshold {:>5}: count {:>4}, accuracy {}", row.threshold, row.consensus_count, acc);
                }
                ExitCode::SUCCESS
            }
            Err(err) => error_exit(&err),
        },
    }
}
