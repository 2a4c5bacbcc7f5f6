// SPDX-License-Identifier: MIT OR Apache-2.0

//! `langsteer`: extract hidden states, fit steering packs, steer generation
//! and score language confusion.
//!
//! Exit codes: 0 success, 1 other failure, 2 missing input, 3 unknown model,
//! 4 insufficient samples, 5 pack/model mismatch, 6 invalid configuration,
//! 7 corrupt or unsupported pack, 8 too many malformed records, 9 detector
//! failure.

mod commands;
mod config;
mod exit;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Flags, RunConfig};

#[derive(Parser)]
#[command(name = "langsteer", version, about = "Inference-time language steering toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Pool hidden states for every corpus sentence into JSONL.
    Extract,
    /// Fit LDA, the probe and language vectors; write a steering pack.
    Fit,
    /// Steered generation over a prompt set; writes response JSONL.
    Generate,
    /// Score responses for language confusion (LPR / WPR / LCPR).
    Eval,
    /// Language identification macro-F1 per layer (KNN or linear probe).
    Probe,
    /// Cross-lingual alignment of parallel sentence states.
    Align,
    /// Strategy x alpha grid of steered generation scores.
    Sweep,
    /// Write a parallel corpus in the two synthetic token-range languages.
    Synth {
        /// Sentences per language.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        len: usize,
        #[arg(long, default_value_t = 0.0)]
        switch_prob: f64,
    },
    /// Train the tiny model on the synthetic languages and save its weights.
    TrainTiny {
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&cli.flags)?;
    match cli.command {
        Command::Extract => commands::extract(&cfg),
        Command::Fit => commands::fit(&cfg),
        Command::Generate => commands::generate(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Probe => commands::probe(&cfg),
        Command::Align => commands::align(&cfg),
        Command::Sweep => commands::sweep(&cfg),
        Command::Synth { n, len, switch_prob } => commands::synth(&cfg, n, len, switch_prob),
        Command::TrainTiny { steps } => commands::train_tiny(&cfg, steps),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::INVALID_CONFIG } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
