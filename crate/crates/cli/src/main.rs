//! `nartts`: corpus generation, training, synthesis, gradient checks and
//! decoder benchmarks.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
//! 3 a check that ran and failed.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "nartts", version, about = "Non-autoregressive TTS acoustic model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic corpus.
    Gen {
        /// Corpus spec file (`key = value` lines); defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of utterances.
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a corpus.
    Train {
        /// Run config file (`key = value` lines); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory written by `gen`, or a corpus file.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = ["novae", "global", "fine"])]
        variant: Option<String>,
        #[arg(long, value_parser = ["lconv", "transformer"])]
        decoder: Option<String>,
        #[arg(long, value_enum)]
        iterative_loss: Option<OnOff>,
        /// Extra `key=value` overrides, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Synthesize a mel-spectrogram from phoneme symbols.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        /// Whitespace-separated phoneme symbols.
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 0)]
        speaker: usize,
        /// Run config; defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Symbol inventory; defaults to inventory.txt next to the
        /// checkpoint, then the built-in one.
        #[arg(long)]
        inventory: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Time decoder-only forward passes and count their multiply-adds.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "lconv,transformer,ar-sim")]
        decoder: Vec<nartts::bench::BenchDecoder>,
        #[arg(long, value_delimiter = ',', default_value = "200,400,800,1600")]
        frames: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Decoder channel width.
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        /// Also write the CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Suite name, or `all`.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Check every parameter entry instead of a sample of 8.
        #[arg(long)]
        full: bool,
        /// Scale the first parameter's analytic gradient (self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Cmd::Gen { spec, count, out, force } => commands::gen(spec.as_deref(), count, &out, force),
        Cmd::Train {
            config,
            corpus,
            variant,
            decoder,
            iterative_loss,
            overrides,
            resume,
            out,
            force,
        } => {
            let mut sets = Vec::new();
            if let Some(v) = variant {
                sets.push(format!("variant={v}"));
            }
            if let Some(d) = decoder {
                sets.push(format!("decoder={d}"));
            }
            if let Some(flag) = iterative_loss {
                sets.push(format!("iterative_loss={}", if flag == OnOff::On { "on" } else { "off" }));
            }
            sets.extend(overrides);
            commands::train(&commands::TrainArgs {
                config: config.as_deref(),
                corpus: &corpus,
                overrides: &sets,
                resume: resume.as_deref(),
                out: &out,
                force,
            })
        }
        Cmd::Synth {
            ckpt,
            text,
            speaker,
            config,
            inventory,
            out,
            force,
        } => commands::synth(&commands::SynthArgs {
            ckpt: &ckpt,
            text: &text,
            speaker,
            config: config.as_deref(),
            inventory: inventory.as_deref(),
            out: &out,
            force,
        }),
        Cmd::Bench {
            decoder,
            frames,
            repeats,
            dim,
            blocks,
            out,
        } => commands::bench(&decoder, &frames, repeats, dim, blocks, out.as_deref()),
        Cmd::Gradcheck {
            module,
            seed,
            full,
            inject_fault,
        } => commands::gradcheck(&module, seed, full, inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
