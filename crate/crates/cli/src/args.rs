//! Flags of every subcommand. Every field is also a config-file key; input
//! paths left unset default to the standard file names inside `out_dir`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(
    name = "pmech",
    version,
    about = "Transcoder circuits in a small masked protein language model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with planted motifs.
    GenCorpus(GenCorpusArgs),
    /// Pretrain the masked language model.
    PretrainLm(PretrainArgs),
    /// Record MLP inputs and outputs of every corpus sequence.
    RecordTraces(RecordArgs),
    /// Train a cross-layer transcoder on recorded traces.
    TrainClt(TrainTranscoderArgs),
    /// Train per-layer transcoders on recorded traces.
    TrainPlt(TrainTranscoderArgs),
    /// Train a family classifier or cross-validated fitness probes.
    TrainProbe(ProbeArgs),
    /// Find the circuit behind a trained probe.
    Discover(DiscoverArgs),
    /// Steer a wildtype through its fitness circuits and score the variants.
    Steer(SteerArgs),
    /// Write the visualizer files for one sequence.
    ExportViz(ExportArgs),
    /// Reconstruction quality of every replacement mode.
    EvalReplacement(EvalArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus(_) => "gen-corpus",
            Command::PretrainLm(_) => "pretrain-lm",
            Command::RecordTraces(_) => "record-traces",
            Command::TrainClt(_) => "train-clt",
            Command::TrainPlt(_) => "train-plt",
            Command::TrainProbe(_) => "train-probe",
            Command::Discover(_) => "discover",
            Command::Steer(_) => "steer",
            Command::ExportViz(_) => "export-viz",
            Command::EvalReplacement(_) => "eval-replacement",
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct Common {
    /// Flat key=value file; flags on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenCorpusArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub len: usize,
    /// Comma-separated `motif:probability:family[:copies]` entries.
    #[arg(long, default_value = "HRDLKPEN:0.15:kinase:3,CPWC:0.3:trx")]
    pub motifs: String,
    #[arg(long, default_value_t = 0)]
    pub background_seed: u64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PretrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 256)]
    pub d_mlp: usize,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.15)]
    pub mask_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    pub heldout_fraction: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct RecordArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub lm: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainTranscoderArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    /// 0 means ten times the model width.
    #[arg(long, default_value_t = 0)]
    pub d_latent: usize,
    /// Weight of the auxiliary loss.
    #[arg(long, default_value_t = 0.03125)]
    pub alpha: f64,
    /// 0 means half the model width.
    #[arg(long, default_value_t = 0)]
    pub k_aux: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1000)]
    pub dead_window: usize,
    /// `magnitude` or `signed`.
    #[arg(long, default_value = "magnitude")]
    pub topk_mode: String,
    /// Share of the traces, taken from the end, used to measure FVU.
    #[arg(long, default_value_t = 0.05)]
    pub eval_fraction: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ProbeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// `family` or `fitness`.
    #[arg(long, default_value = "family")]
    pub task: String,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub lm: Option<PathBuf>,
    #[arg(long, default_value = "kinase")]
    pub family: String,
    /// Inverse L2 strength of the family classifier.
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    /// Family the fitness wildtype is drawn from; empty means any sequence.
    #[arg(long, default_value = "kinase")]
    pub wildtype_family: String,
    #[arg(long, default_value_t = 0)]
    pub wildtype_index: usize,
    /// Fitness is the number of occurrences of this motif.
    #[arg(long, default_value = "K")]
    pub rule_motif: String,
    #[arg(long, default_value_t = 300)]
    pub n_single: usize,
    #[arg(long, default_value_t = 700)]
    pub n_multi: usize,
    #[arg(long, default_value_t = 5)]
    pub max_mutations: usize,
    /// `random`, `contiguous` or `modulo`.
    #[arg(long, default_value = "random")]
    pub scheme: String,
    #[arg(long, default_value_t = 7)]
    pub kernel: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 3e-4)]
    pub max_lr: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 99)]
    pub evaluator_seed: u64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DiscoverArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// `family` or `fitness`.
    #[arg(long, default_value = "family")]
    pub task: String,
    #[arg(long)]
    pub lm: Option<PathBuf>,
    #[arg(long)]
    pub tc: Option<PathBuf>,
    /// Family probe checkpoint, or the fitness fold manifest.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub library: Option<PathBuf>,
    #[arg(long, default_value = "direct")]
    pub mode: String,
    /// Empty means the same as `mode`.
    #[arg(long, default_value = "")]
    pub attribution_mode: String,
    #[arg(long, default_value_t = 32)]
    pub step: usize,
    #[arg(long, default_value_t = 1000)]
    pub max_nodes: usize,
    #[arg(long, default_value_t = 0.7)]
    pub clean_fraction: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SteerArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub lm: Option<PathBuf>,
    #[arg(long)]
    pub tc: Option<PathBuf>,
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Fitness fold manifest written by `train-probe --task fitness`.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    #[arg(long)]
    pub circuits: Option<PathBuf>,
    /// Comma-separated latent counts.
    #[arg(long, default_value = "4,8,16")]
    pub n_latents: String,
    #[arg(long, default_value_t = 0.1)]
    pub alpha_start: f64,
    #[arg(long, default_value_t = 5.0)]
    pub alpha_end: f64,
    #[arg(long, default_value_t = 25)]
    pub alpha_steps: usize,
    /// `layer` or `latent` maximum as the clamp reference.
    #[arg(long, default_value = "layer")]
    pub scale: String,
    #[arg(long, default_value_t = 0.98)]
    pub cosine_gate: f64,
    #[arg(long, default_value_t = 5)]
    pub max_mutations: usize,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value = "direct")]
    pub mode: String,
    #[arg(long, default_value_t = 50)]
    pub top_n: usize,
    #[arg(long, default_value_t = 10)]
    pub caa_trials: usize,
    #[arg(long, default_value_t = 0.1)]
    pub caa_fraction: f64,
    /// Comma-separated contrast rules: `extremes`, `functional`.
    #[arg(long, default_value = "extremes,functional")]
    pub contrasts: String,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ExportArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub lm: Option<PathBuf>,
    #[arg(long)]
    pub tc: Option<PathBuf>,
    /// Corpus searched for top activations, and the source of the sequence
    /// when `sequence` is empty.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "")]
    pub sequence: String,
    #[arg(long, default_value_t = 0)]
    pub sequence_index: usize,
    /// Restricts nodes to the latents of this circuit.
    #[arg(long)]
    pub circuit: Option<PathBuf>,
    /// Same-length variant whose activation shifts add nodes.
    #[arg(long, default_value = "")]
    pub variant: String,
    #[arg(long, default_value_t = 5)]
    pub nodes_per_layer: usize,
    #[arg(long, default_value_t = 10)]
    pub top_hits: usize,
    #[arg(long, default_value_t = 10)]
    pub window: usize,
    /// Corpus sequences searched; 0 means all.
    #[arg(long, default_value_t = 1000)]
    pub search_limit: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub lm: Option<PathBuf>,
    #[arg(long)]
    pub tc: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Sequences taken from the end of the corpus.
    #[arg(long, default_value_t = 200)]
    pub n_eval: usize,
    #[arg(long, default_value = "direct,sequential,full,local")]
    pub modes: String,
}
