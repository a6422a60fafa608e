use std::path::PathBuf;
use std::str::FromStr;

use attnalign::head_filter::{Criterion, HeadId};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "attnalign",
    version,
    about = "Word timestamps from decoder cross-attention maps"
)]
pub struct Cli {
    /// key=value file supplying flag defaults; command-line flags win
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads (default: one per core)
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Align attention dumps and write predicted word segments as TSV
    Align(AlignArgs),
    /// Score predicted segments against a reference over a tolerance sweep
    Eval(EvalArgs),
    /// Find the best single head per utterance
    Oracle(OracleArgs),
    /// F1 and oracle-head hit rate when keeping the top k heads
    HitRate(HitRateArgs),
    /// Align and evaluate in one pass
    Sweep(SweepArgs),
    /// Write a synthetic corpus with planted alignment heads
    Synth(SynthArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Align(_) => "align",
            Command::Eval(_) => "eval",
            Command::Oracle(_) => "oracle",
            Command::HitRate(_) => "hit-rate",
            Command::Sweep(_) => "sweep",
            Command::Synth(_) => "synth",
        }
    }

    pub fn strategy_mut(&mut self) -> Option<&mut StrategyArgs> {
        match self {
            Command::Align(a) => Some(&mut a.strategy),
            Command::Sweep(a) => Some(&mut a.align.strategy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Inputs {
    /// ATNM files, or directories holding them
    #[arg(required = true, value_name = "DUMP")]
    pub dumps: Vec<PathBuf>,

    /// Skip dumps that fail and exit with code 3 instead of stopping
    #[arg(long)]
    pub keep_going: bool,
}

#[derive(Debug, Clone, Args)]
pub struct StrategyArgs {
    /// Head score: norm, col-norm, row-norm, entropy or coverage
    #[arg(long, default_value = "norm")]
    pub criterion: Criterion,

    /// Average the N best-scoring heads [default strategy, N = 10]
    #[arg(long, value_name = "N")]
    pub top_k: Option<usize>,

    /// Average every head in the upper half of the layers
    #[arg(long)]
    pub upper_half: bool,

    /// Average a fixed list of heads
    #[arg(long, value_delimiter = ',', value_name = "L:H,...")]
    pub fixed_heads: Option<Vec<HeadId>>,

    /// Use each utterance's best single head (needs --reference)
    #[arg(long)]
    pub oracle: bool,

    /// Tolerance used to pick the oracle head
    #[arg(long, default_value_t = 50.0, value_name = "MS")]
    pub oracle_tolerance_ms: f64,
}

impl StrategyArgs {
    pub fn any_set(&self) -> bool {
        self.top_k.is_some() || self.upper_half || self.fixed_heads.is_some() || self.oracle
    }
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[command(flatten)]
    pub inputs: Inputs,

    #[command(flatten)]
    pub strategy: StrategyArgs,

    /// Reference segments TSV (required by --oracle)
    #[arg(long, value_name = "TSV")]
    pub reference: Option<PathBuf>,

    /// Output TSV (default: stdout)
    #[arg(long, short, value_name = "TSV")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ScoringArgs {
    /// Tolerances in milliseconds
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "20,40,50,60,80,100",
        value_name = "MS,..."
    )]
    pub tolerances: Vec<f64>,

    /// Average per-utterance precision, recall and F1 instead of pooling counts
    #[arg(long = "macro")]
    pub macro_average: bool,

    /// Fail when an utterance has no reference instead of skipping it
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted segments TSV
    #[arg(long, value_name = "TSV")]
    pub predictions: PathBuf,

    /// Reference segments TSV
    #[arg(long, value_name = "TSV")]
    pub reference: PathBuf,

    #[command(flatten)]
    pub scoring: ScoringArgs,

    /// Output CSV (default: stdout)
    #[arg(long, short, value_name = "CSV")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub inputs: Inputs,

    /// Reference segments TSV
    #[arg(long, value_name = "TSV")]
    pub reference: PathBuf,

    /// Matching tolerance
    #[arg(long, default_value_t = 50.0, value_name = "MS")]
    pub tolerance_ms: f64,

    /// Head score used for --scatter
    #[arg(long, default_value = "norm")]
    pub criterion: Criterion,

    /// Oracle-head frequency CSV (layer,head,count)
    #[arg(long, value_name = "CSV")]
    pub histogram: Option<PathBuf>,

    /// Per-utterance oracle CSV (utterance_id,layer,head,f1)
    #[arg(long, value_name = "CSV")]
    pub table: Option<PathBuf>,

    /// Per-head score against single-head F1 (utterance_id,layer,head,score,f1)
    #[arg(long, value_name = "CSV")]
    pub scatter: Option<PathBuf>,

    /// Fail when a dump has no reference instead of skipping it
    #[arg(long)]
    pub strict: bool,
}

/// A k for the hit-rate table; `all` keeps every head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopK {
    Count(usize),
    All,
}

impl TopK {
    pub fn resolve(self) -> usize {
        match self {
            TopK::Count(k) => k,
            TopK::All => usize::MAX,
        }
    }
}

impl FromStr for TopK {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TopK::All);
        }
        match s.trim().parse::<usize>() {
            Ok(0) => Err("k must be at least 1".into()),
            Ok(k) => Ok(TopK::Count(k)),
            Err(_) => Err(format!("{s:?} is neither a count nor \"all\"")),
        }
    }
}

#[derive(Debug, Args)]
pub struct HitRateArgs {
    #[command(flatten)]
    pub inputs: Inputs,

    /// Reference segments TSV
    #[arg(long, value_name = "TSV")]
    pub reference: PathBuf,

    /// Values of k
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "1,2,3,5,10,20,all",
        value_name = "K,..."
    )]
    pub ks: Vec<TopK>,

    #[arg(long, default_value = "norm")]
    pub criterion: Criterion,

    /// Matching tolerance for F1 and for picking oracle heads
    #[arg(long, default_value_t = 50.0, value_name = "MS")]
    pub tolerance_ms: f64,

    /// Fail when a dump has no reference instead of skipping it
    #[arg(long)]
    pub strict: bool,

    /// Output CSV (default: stdout)
    #[arg(long, short, value_name = "CSV")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub align: SweepAlign,

    #[command(flatten)]
    pub scoring: ScoringArgs,

    /// Also write the predicted segments here
    #[arg(long, value_name = "TSV")]
    pub predictions: Option<PathBuf>,

    /// Output CSV (default: stdout)
    #[arg(long, short, value_name = "CSV")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepAlign {
    #[command(flatten)]
    pub inputs: Inputs,

    #[command(flatten)]
    pub strategy: StrategyArgs,

    /// Reference segments TSV
    #[arg(long, value_name = "TSV")]
    pub reference: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long, short, value_name = "DIR")]
    pub out: PathBuf,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Number of utterances
    #[arg(long, default_value_t = 100)]
    pub count: usize,

    #[arg(long, value_name = "N")]
    pub num_layers: Option<usize>,

    #[arg(long, value_name = "N")]
    pub heads_per_layer: Option<usize>,

    #[arg(long, value_name = "S")]
    pub ideal_sharpness: Option<f64>,

    #[arg(long, value_name = "S")]
    pub distractor_sharpness: Option<f64>,

    /// Distinct heads the planted head is drawn from
    #[arg(long, value_name = "N")]
    pub ideal_pool: Option<usize>,

    #[arg(long, value_name = "MS")]
    pub frame_ms: Option<f32>,

    /// Distractor counts; heads left over are filled with uniform ones
    #[arg(long, value_name = "N")]
    pub uniform: Option<usize>,
    #[arg(long, value_name = "N")]
    pub noise: Option<usize>,
    #[arg(long, value_name = "N")]
    pub shifted: Option<usize>,
    #[arg(long, value_name = "N")]
    pub repeated: Option<usize>,
    #[arg(long, value_name = "N")]
    pub blurry: Option<usize>,
}
