//! `scaar`: simulate traces, train and run the attack model, and produce
//! leakage assessments as JSON and CSV.

mod commands;
mod failure;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::{Failure, Kind};

#[derive(Parser, Debug)]
#[command(
    name = "scaar",
    version,
    about = "EM side-channel attribute extraction on simulated traces"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Overrides SCAAR_SEED and the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single-threaded reference mode.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labelled trace set.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Session number; sessions differ only in noise.
        #[arg(long, default_value_t = 0)]
        session: u64,
    },
    /// Split a trace set and train the attack model on the profiling part.
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
        /// Where to write the raw attack split [default: <model-out>.attack.scar].
        #[arg(long)]
        attack_out: Option<PathBuf>,
    },
    /// Predict the attribute of every trace and score against the labels.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, split, train and attack, repeated over `repeats` seeds.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pointwise Welch t-test between two groups of traces.
    Tvla {
        #[arg(long)]
        data: PathBuf,
        /// `class<K>-vs-rest`, `class<K>-vs-class<J>` or `halves`.
        #[arg(long, default_value = "class0-vs-rest")]
        group: String,
        #[arg(long, default_value_t = 4.5)]
        threshold: f64,
        /// Cut every trace to the shortest length (variable-length sets).
        #[arg(long)]
        truncate: bool,
        /// JSON report; the `(index, t)` CSV goes beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Grad-CAM relevance of one trace.
    Gradcam {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV of `(index, relevance)`; a JSON summary goes beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Target class [default: the predicted class].
        #[arg(long)]
        class: Option<usize>,
        /// Conv block to tap [default: the last].
        #[arg(long)]
        layer: Option<usize>,
        /// Relevance mass of the reported peak window.
        #[arg(long, default_value_t = 0.9)]
        fraction: f64,
    },
    /// Accuracy as a function of trace count or shift ratio.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated sweep values [default: the config's sweep].
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// JSON report; the CSV goes beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Variable-length traces of simulated token generation.
    Llm {
        #[arg(long)]
        config: Option<PathBuf>,
        /// A comma-separated token sequence; repeat for more sequences.
        /// Sequence `i` is labelled `i`.
        #[arg(long = "tokens", required = true, value_parser = parse_tokens)]
        tokens: Vec<Vec<u32>>,
        /// Traces per sequence.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    NTraces,
    ShiftRatio,
}

fn parse_tokens(s: &str) -> Result<Vec<u32>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|e| format!("token {t:?}: {e}")))
        .collect()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            eprintln!("{}", Failure::msg(Kind::Usage, e.kind()).to_json());
            return ExitCode::from(Kind::Usage.code() as u8);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.kind.code() as u8)
        }
    }
}
