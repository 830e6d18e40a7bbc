use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use recon_cli::pipeline::{self, PipelineError};
use recon_cli::selftest;

/// Reconstruction probing pipeline for a toy masked language model.
///
/// A typical run chains the subcommands in order: gen-corpus, train, probe,
/// aggregate, report. All outputs land under --out; relative data paths in
/// the config are resolved against it.
#[derive(Parser)]
#[command(name = "recon-probe", version, about, max_term_width = 100)]
struct Cli {
    /// Run configuration (JSON). Omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for probing. Other stages are single-threaded.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a corpus with gold parses and write sentences, trees and vocab.
    GenCorpus {
        /// Number of sentences; overrides the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the masked language model and save the weight container.
    Train,
    /// Collect reconstruction probabilities under the configured conditions.
    Probe,
    /// Join comparisons, annotate pairs with syntax and compute group stats.
    Aggregate,
    /// Render SVG charts and a CSV table from the aggregates.
    Report,
    /// Run the end-to-end invariant suite on a throwaway model.
    Selftest,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 1; --help and --version exit 0.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };

    let result = pipeline::load_config(cli.config.as_deref(), cli.seed, cli.jobs).and_then(
        |config| match cli.command {
            Command::GenCorpus { count } => pipeline::gen_corpus(&config, &cli.out, count),
            Command::Train => pipeline::train_model(&config, &cli.out),
            Command::Probe => pipeline::probe(&config, &cli.out),
            Command::Aggregate => pipeline::aggregate_cmd(&config, &cli.out),
            Command::Report => pipeline::report(&config, &cli.out),
            Command::Selftest => selftest::run(config.seed).map_err(PipelineError::Runtime),
        },
    );

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(PipelineError::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(PipelineError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
