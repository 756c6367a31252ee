use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "freetumor", version, about = "Adversarial tumor synthesis and segmentation on organ-labeled volumes")]
pub struct Cli {
    /// TOML or JSON config; unknown keys are rejected.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set seg.epochs=5`. Repeatable;
    /// applied after the file and `FREETUMOR__*` variables.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Labeled,
    Unlabeled,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom data set split into labeled, unlabeled and test cases.
    PhantomGen {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmentation discriminator on the labeled split.
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator and classifier against a frozen segmenter.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        segmenter: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export gated synthetic cases from the unlabeled split.
    Synthesize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        segmenter: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a segmenter; with a generator and segmenter it mixes in
    /// online synthesis from the unlabeled split.
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "segmenter")]
        generator: Option<PathBuf>,
        #[arg(long, requires = "generator")]
        segmenter: Option<PathBuf>,
    },
    /// Sliding-window inference; writes `<id>.tumor` label maps.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every `<id>.tumor` in PRED against the same id in GT.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Assemble a blinded real-vs-synthetic case set with rendered slices.
    TuringBuild {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        segmenter: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the reader-study HTTP API.
    TuringServe {
        #[arg(long)]
        port: u16,
        #[arg(long)]
        cases: PathBuf,
        /// Session logs; defaults to `<cases>/sessions`.
        #[arg(long)]
        sessions: Option<PathBuf>,
    },
    /// Tabulate closed reader sessions.
    TuringReport {
        #[arg(long, value_enum, default_value = "csv")]
        out: ReportFormat,
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        sessions: Option<PathBuf>,
        /// Write here instead of stdout.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Print the resolved config and its hash.
    Config,
}
