use std::path::{Path, PathBuf};

use autodial::train::TrainMode;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "autodial", version, about = "Shared frozen encoder with parallel task decoders", arg_required_else_help = true)]
pub struct Cli {
    /// Manifest path; defaults to `<out>.manifest.json`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Write a seeded synthetic corpus as JSON lines.
    GenData(GenData),
    /// Train one or more decoders and write a checkpoint.
    Train(Train),
    /// Add a decoder to an existing checkpoint without touching the others.
    Attach(Attach),
    /// Score decoders on a corpus against their baselines.
    Eval(Eval),
    /// Time each decoder over a set of contexts.
    Bench(Bench),
    /// Print the parameter report.
    Inspect(Inspect),
    /// Re-run the command recorded in a manifest.
    Replay(Replay),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Tiny,
    Small,
    BartLargeLike,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tiny => "tiny",
            Self::Small => "small",
            Self::BartLargeLike => "bart-large-like",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Classification,
    Generative,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    TrainMode::parse(s).ok_or_else(|| "expected one of autodial, generative, simpletod, pre-finetune".into())
}

fn parse_positive_f32(s: &str) -> Result<f32, String> {
    match s.parse::<f32>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err("expected a positive number".into()),
    }
}

fn parse_unit(s: &str) -> Result<f32, String> {
    match s.parse::<f32>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err("expected a number in [0, 1]".into()),
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenData {
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_dialogues: u64,
    /// Extra dialogues generated after the first `n_dialogues`, written to `--test-out`.
    #[arg(long, default_value_t = 0, requires = "test_out")]
    pub n_test: u64,
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct Train {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "tiny")]
    pub preset: Preset,
    #[arg(long, value_parser = parse_mode, default_value = "autodial")]
    pub mode: TrainMode,
    /// Decoders to train, comma separated or repeated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub task: Vec<String>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    #[arg(long, allow_hyphen_values = true, value_parser = parse_positive_f32)]
    pub lr: Option<f32>,
    #[arg(long, allow_hyphen_values = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(3..))]
    pub max_seq_len: Option<u64>,
    #[arg(long)]
    pub warmup_updates: Option<u64>,
    #[arg(long, allow_hyphen_values = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_steps: Option<u64>,
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    /// Train classification decoders concurrently (autodial mode).
    #[arg(long)]
    pub parallel_decoders: bool,
    /// Precompute frozen encoder states once per run.
    #[arg(long)]
    pub cache_encoder: bool,
    /// Also write just the trained decoders to this file.
    #[arg(long)]
    pub decoders_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct Attach {
    #[arg(long)]
    pub init: PathBuf,
    /// Decoder file written by `train --decoders-out`; attaches all of its decoders.
    #[arg(long, conflicts_with_all = ["task", "kind", "source", "layers"])]
    pub from: Option<PathBuf>,
    /// Name of the new decoder.
    #[arg(long, required_unless_present = "from")]
    pub task: Option<String>,
    #[arg(long, value_enum)]
    pub kind: Option<Kind>,
    /// Dialogue task the new decoder predicts; defaults to `--task`.
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long, allow_hyphen_values = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub layers: Option<u64>,
    /// Corpus supplying the label space of a classification decoder.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct Eval {
    #[arg(long)]
    pub init: PathBuf,
    /// Test corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Corpus for the majority-label baseline; defaults to `--corpus`.
    #[arg(long)]
    pub train_corpus: Option<PathBuf>,
    /// Decoders to score; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub task: Vec<String>,
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true, value_parser = parse_unit)]
    pub threshold: f32,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub gen_max_len: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct Bench {
    /// Checkpoint to time; a fresh model is built from `--preset` when omitted.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "tiny")]
    pub preset: Preset,
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',')]
    pub task: Vec<String>,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub repetitions: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub gen_max_len: u64,
    /// Number of user-turn contexts to time over.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub contexts: u64,
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true, value_parser = parse_unit)]
    pub threshold: f32,
    /// Generate exactly `--gen-max-len` tokens.
    #[arg(long)]
    pub ignore_eos: bool,
    /// Line-delimited JSON report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct Inspect {
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tiny")]
    pub preset: Preset,
    /// Corpus giving vocabulary and label counts for a fresh model.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// JSON copy of the report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct Replay {
    pub manifest_path: PathBuf,
    /// Redirect the primary output; other outputs move alongside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GenData(_) => "gen-data",
            Self::Train(_) => "train",
            Self::Attach(_) => "attach",
            Self::Eval(_) => "eval",
            Self::Bench(_) => "bench",
            Self::Inspect(_) => "inspect",
            Self::Replay(_) => "replay",
        }
    }

    pub fn out(&self) -> Option<&Path> {
        match self {
            Self::GenData(a) => Some(&a.out),
            Self::Train(a) => Some(&a.out),
            Self::Attach(a) => Some(&a.out),
            Self::Eval(a) => Some(&a.out),
            Self::Bench(a) => Some(&a.out),
            Self::Inspect(a) => a.out.as_deref(),
            Self::Replay(a) => a.out.as_deref(),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Self::GenData(a) => Some(a.seed),
            Self::Train(a) => Some(a.seed),
            Self::Attach(a) => Some(a.seed),
            Self::Bench(a) => Some(a.seed),
            _ => None,
        }
    }

    /// Points the primary output at `out`; secondary outputs keep their
    /// file names and move to the same directory.
    pub fn redirect(&mut self, out: &Path) {
        let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
        let beside = |p: &mut PathBuf| {
            if let Some(name) = p.file_name() {
                *p = dir.join(name);
            }
        };
        match self {
            Self::GenData(a) => {
                a.out = out.into();
                a.test_out.as_mut().map(beside);
            }
            Self::Train(a) => {
                a.out = out.into();
                a.decoders_out.as_mut().map(beside);
            }
            Self::Attach(a) => a.out = out.into(),
            Self::Eval(a) => a.out = out.into(),
            Self::Bench(a) => a.out = out.into(),
            Self::Inspect(a) => a.out = Some(out.into()),
            Self::Replay(a) => a.out = Some(out.into()),
        }
    }
}
