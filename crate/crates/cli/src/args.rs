use std::path::PathBuf;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{ArgGroup, Args, Parser, Subcommand};
use roundfit::tuner::{Method, OptimizerKind, TuneMode};

#[derive(Debug, Parser)]
#[command(name = "roundfit", version, about = "Weight-only quantization with signed-gradient rounding and clip tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a toy model trained on the built-in synthetic language.
    Init(InitArgs),
    /// Quantize a model and write the packed container plus a tuning report.
    Quantize(QuantizeArgs),
    /// Perplexity and per-block reconstruction error on held-out tokens.
    Eval(EvalArgs),
    /// Exhaustive rounding search against the tuner on a single weight row.
    Oracle(OracleArgs),
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Compare quantizer variants (optimizer and tuning-mode grids).
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Seeds the weights and the training stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 300)]
    pub train_steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["model", "init_seed"])))]
pub struct ModelArgs {
    /// Full-precision model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Build the toy model with this seed instead of loading one.
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// Training steps for a model built with --init-seed.
    #[arg(long, default_value_t = 300, requires = "init_seed")]
    pub train_steps: usize,
}

#[derive(Debug, Args)]
pub struct QuantArgs {
    #[arg(long, default_value_t = 4, value_parser = PossibleValuesParser::new(["2", "3", "4", "8"]).map(|s| s.parse::<u8>().unwrap()))]
    pub bits: u8,
    /// Weights per group along the input dimension; -1 for a whole row.
    #[arg(long, default_value_t = 128, allow_negative_numbers = true)]
    pub group_size: i64,
}

#[derive(Debug, Args)]
pub struct CalibArgs {
    /// Token file (one id per line) or `synth` for the built-in language.
    #[arg(long, default_value = "synth")]
    pub calib: String,
    #[arg(long, default_value_t = 64)]
    pub seqlen: usize,
    #[arg(long, default_value_t = 128)]
    pub nsamples: usize,
}

/// Tuning flags; unset values take the tuner defaults (200 steps,
/// lr 5e-3 for signsgd or 1e-2 for adam, batch 8, tune both, quantized
/// input on, clip lr scale 1).
#[derive(Debug, Args)]
pub struct TuneArgs {
    /// signsgd or adam.
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip_lr_scale: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// rounding, clip, or both.
    #[arg(long)]
    pub tune: Option<TuneMode>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub quantized_input: Option<bool>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// rtn or signround.
    #[arg(long, default_value = "signround")]
    pub method: Method,
    #[command(flatten)]
    pub tune: TuneArgs,
    #[command(flatten)]
    pub calib: CalibArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Packed model container to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON tuning report; printed to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// CSV histograms of |V|, alpha, beta per block.
    #[arg(long)]
    pub param_stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Full-precision or quantized model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Model whose blocks define the reconstruction target; defaults to
    /// --model itself.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Held-out token file; the built-in language's held-out split when
    /// omitted.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub ntokens: usize,
    /// Sequences used for per-block reconstruction error.
    #[arg(long, default_value_t = 32)]
    pub windows: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Seeds the generated 1x8 row and 8x16 inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tensor file with `w` [1, n] and `x` [n, b] instead of a generated row.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub bits: u8,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Fail when the tuned-to-optimal error ratio exceeds this.
    #[arg(long)]
    pub max_gap: Option<f64>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// Comma-separated `optimizer:lr[:mode]` items or `rtn`.
    #[arg(long, conflicts_with = "preset")]
    pub grid: Option<String>,
    /// optimizer (signsgd and adam over four learning rates), mode
    /// (rounding, clip, both, rtn), or all.
    #[arg(long, default_value = "all")]
    pub preset: String,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub clip_lr_scale: Option<f64>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub quantized_input: Option<bool>,
    #[command(flatten)]
    pub calib: CalibArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub heldout_tokens: usize,
    /// Write the JSON report here as well as printing the table.
    #[arg(long)]
    pub json: Option<PathBuf>,
}
