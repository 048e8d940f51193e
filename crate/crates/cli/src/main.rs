#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod bundle;
mod commands;

/// Prompt-conditioned speech recognition on a synthetic two-domain corpus.
#[derive(Parser, Debug)]
#[command(name = "promptfuse", version, about)]
struct Cli {
    /// Worker threads for utterance-level parallelism (outputs do not depend on it).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (and optionally corrupted N-best lists).
    SynthGen(SynthGenArgs),
    /// Run training phases and write a checkpoint.
    Train(TrainArgs),
    /// Beam-search a manifest into an N-best file.
    Decode(DecodeArgs),
    /// Score an N-best file with the language model under a prompt.
    Rerank(RerankArgs),
    /// WER and recall of hypotheses against a reference manifest.
    Eval(EvalArgs),
    /// Print |tanh(w1)| and |tanh(w2)| for every fused layer.
    GateReport(GateReportArgs),
    /// Check analytic gradients of the full fused loss against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthGenArgs {
    /// Output directory (must be empty unless --force).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 50)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 200)]
    pub train_recordings: usize,
    /// Held-out recordings per domain.
    #[arg(long, default_value_t = 60)]
    pub eval_recordings: usize,
    /// Text-only recordings for language-model pretraining.
    #[arg(long, default_value_t = 1000)]
    pub lm_recordings: usize,
    #[arg(long, default_value_t = 10)]
    pub utterances_per_recording: usize,
    #[arg(long, default_value_t = 0.5)]
    pub noise_std: f64,
    /// Probability that a recording carries its own domain's flavor.
    #[arg(long, default_value_t = 0.95)]
    pub domain_purity: f64,
    /// Also write corrupted N-best lists of this size for both eval splits.
    #[arg(long, value_name = "N")]
    pub nbest: Option<usize>,
    #[arg(long, default_value_t = 0.15)]
    pub nbest_substitution_rate: f64,
    #[arg(long, default_value_t = 0.03)]
    pub nbest_insertion_rate: f64,
    #[arg(long, default_value_t = 0.03)]
    pub nbest_deletion_rate: f64,
    /// Chance that a corrupted homophone becomes its partner.
    #[arg(long, default_value_t = 0.8)]
    pub nbest_homophone_bias: f64,
    /// Rank that receives the uncorrupted reference ("none" to omit it).
    #[arg(long, default_value = "3")]
    pub nbest_reference_rank: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    #[value(name = "0")]
    P0,
    #[value(name = "1")]
    P1,
    #[value(name = "2")]
    P2,
    #[value(name = "3")]
    P3,
    All,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus directory written by synth-gen.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write (sidecars .cfg and .vocab are written next to it).
    #[arg(long)]
    pub out: PathBuf,
    /// Phase to run: 0 is LM pretraining; "all" runs 0 through 3.
    #[arg(long, value_enum, default_value = "all")]
    pub phase: PhaseArg,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// `key = value` overrides of the training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the per-step loss log as CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Let phase 3 update the top LM block.
    #[arg(long)]
    pub unfreeze_last_lm_layer: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecodePromptMode {
    None,
    File,
    HistoryGt,
    HistoryHyp,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Utterances to decode; feature paths resolve against its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    /// N-best output file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    pub prompt_mode: DecodePromptMode,
    /// Prompt text for --prompt-mode file; the whole file is one prompt.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub beam: usize,
    /// Maximum words per hypothesis (defaults to the decoder's room).
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RerankPromptMode {
    None,
    HistoryGt,
    HistoryHyp,
}

#[derive(Args, Debug)]
pub struct RerankArgs {
    #[arg(long)]
    pub nbest: PathBuf,
    /// Checkpoint whose language model does the scoring.
    #[arg(long)]
    pub lm: PathBuf,
    /// N-best output with an lm_score column.
    #[arg(long)]
    pub out: PathBuf,
    /// Prompt text; the whole file is one prompt.
    #[arg(long, conflicts_with = "prompt_mode")]
    pub prompt_file: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub prompt_mode: Option<RerankPromptMode>,
    /// Manifest giving recording structure (and transcripts for history-gt).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Reference manifest.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Hypotheses: an N-best file (best lm_score, else rank 0) or a manifest.
    #[arg(long)]
    pub hyp: PathBuf,
    /// One entity word per line (default: gazetteer.txt beside the reference).
    #[arg(long)]
    pub gazetteer: Option<PathBuf>,
    /// One source-domain word per line (default: source_vocab.txt beside the reference).
    #[arg(long)]
    pub source_vocab: Option<PathBuf>,
    /// Tab-separated homophone pairs; adds a homophone_recall line.
    #[arg(long)]
    pub homophones: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GateReportArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Randomly sampled coordinates, on top of every gate scalar.
    #[arg(long, default_value_t = 600)]
    pub samples: usize,
    /// Value written into every gate so all branches carry gradient.
    #[arg(long, default_value_t = 0.4)]
    pub gate: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Training config overrides for the model shape.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Exit status for an error: 1 usage, 2 data, 3 broken contract.
fn exit_code(err: &anyhow::Error) -> u8 {
    use promptfuse::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Argument(_) => 1,
                E::Parse { .. } | E::Data(_) | E::Io { .. } => 2,
                E::Contract(_) => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<commands::Failed>() {
            return e.code;
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(promptfuse::Error::Argument("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match cli.command {
        Command::SynthGen(a) => commands::synth_gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Rerank(a) => commands::rerank(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::GateReport(a) => commands::gate_report(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already embed their source; skip repeated causes
            let mut msg = String::new();
            for cause in e.chain() {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&c);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
