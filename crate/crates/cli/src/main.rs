#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use control_llm::expansion::Strategy;
use control_llm::experiment::Method;
use control_llm::interpolators::{DivergenceKind, InterpolatorKind};
use control_llm::training::{Split, TaskKind};

#[derive(Parser, Debug)]
#[command(name = "control-llm", version, about = "Expand, fine-tune and probe small transformers with frozen and trainable branches")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Seed for model initialisation and training data order.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Flat key=value file; keys are long flag names. Flags on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Fail when a run misses its accuracy gate.
    #[arg(long, global = true)]
    pub strict: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a fresh model on one task with every tensor trainable.
    Pretrain(PretrainArgs),
    /// Add branches to a base checkpoint and check the result matches the base.
    Expand(ExpandArgs),
    /// Continue training a checkpoint on a task.
    Finetune(FinetuneArgs),
    /// Greedy-decode accuracy on both tasks.
    Eval(EvalArgs),
    /// Hidden-state alignment report for an expanded checkpoint.
    Probe(ProbeArgs),
    /// Fold lerp branches back into a plain model.
    Merge(MergeArgs),
    /// Evaluate an expanded lerp checkpoint at several blend weights.
    Sweep(SweepArgs),
    /// Fine-tune a shared base under several methods and seeds and plot forgetting curves.
    CfExperiment(CfArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// `desk` (warmup 100, peak 1e-3) or `reference` (warmup 1000, peak 5e-5).
    #[arg(long, default_value = "desk")]
    pub scale: String,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub eval_examples: usize,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value = "copy_reverse")]
    pub task: TaskKind,
    #[arg(long, default_value_t = 8)]
    pub n_layers: usize,
    /// Accuracy the run must reach under --strict.
    #[arg(long, default_value_t = 0.95)]
    pub gate: f64,
}

#[derive(Args, Debug, Clone)]
pub struct PlanArgs {
    /// Expand the last layer of every group of this many layers.
    #[arg(long, default_value_t = 4)]
    pub period: usize,
    /// Preset plan from the method roster; overrides the fields below.
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long, default_value = "concat")]
    pub strategy: Strategy,
    #[arg(long, default_value = "lerp")]
    pub interpolator: InterpolatorKind,
    #[arg(long, default_value = "none")]
    pub divergence: DivergenceKind,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long)]
    pub learnable_alpha: bool,
    /// Let dynamic interpolators train their biases.
    #[arg(long)]
    pub train_bias: bool,
}

#[derive(Args, Debug)]
pub struct ExpandArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "sort")]
    pub task: TaskKind,
    /// `control` for expanded checkpoints, `full_param` or `partial_param` for plain ones.
    #[arg(long)]
    pub mode: Option<String>,
    /// Layer period used to pick partial-param layers.
    #[arg(long, default_value_t = 4)]
    pub period: usize,
    /// Also write a checkpoint at every evaluation.
    #[arg(long)]
    pub save_checkpoints: bool,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 256)]
    pub examples: usize,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// category<TAB>sentence file; the synthetic probe set is used when absent.
    #[arg(long)]
    pub probes: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub categories: usize,
    #[arg(long, default_value_t = 4)]
    pub per_category: usize,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated blend weights.
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    pub alphas: String,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 256)]
    pub examples: usize,
}

#[derive(Args, Debug)]
pub struct CfArgs {
    /// Shared base checkpoint; pretrained on copy_reverse when absent.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Comma-separated method labels.
    #[arg(long, default_value = "full_param,partial_param,stack,concat_lerp_mse")]
    pub methods: String,
    /// Comma-separated fine-tuning seeds.
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
    #[arg(long, default_value_t = 4)]
    pub period: usize,
    /// Pretraining steps when no base is given.
    #[arg(long, default_value_t = 3000)]
    pub pretrain_steps: usize,
    #[command(flatten)]
    pub train: TrainArgs,
}

/// Usage and configuration problems exit 2, failures while running exit 3.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        match e.downcast_ref::<control_llm::Error>() {
            Some(inner) if is_usage(inner) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

fn is_usage(e: &control_llm::Error) -> bool {
    use control_llm::Error as E;
    matches!(
        e,
        E::Config(_) | E::InvalidSpec(_) | E::Plan(_) | E::Merge(_) | E::Interpolator(_) | E::Checkpoint { .. }
    )
}

/// Inserts `--key value` pairs from the config file right after the
/// subcommand name, ahead of the user's own flags so those win.
fn with_config(argv: Vec<OsString>, cli: &Cli) -> Result<Vec<OsString>, Failure> {
    let Some(path) = &cli.config else { return Ok(argv) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(anyhow::anyhow!("reading config {}: {e}", path.display())))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(anyhow::anyhow!("{}:{}: expected key=value", path.display(), n + 1)))?;
        let flag = format!("--{}", key.trim().replace('_', "-"));
        match value.trim() {
            "true" => extra.push(OsString::from(flag)),
            "false" => {}
            v => {
                extra.push(OsString::from(flag));
                extra.push(OsString::from(v));
            }
        }
    }
    let name = subcommand_name(&cli.command);
    let at = argv
        .iter()
        .position(|a| a == name)
        .ok_or_else(|| Failure::Usage(anyhow::anyhow!("subcommand not found in arguments")))?;
    let mut out = argv[..=at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[at + 1..]);
    Ok(out)
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Pretrain(_) => "pretrain",
        Command::Expand(_) => "expand",
        Command::Finetune(_) => "finetune",
        Command::Eval(_) => "eval",
        Command::Probe(_) => "probe",
        Command::Merge(_) => "merge",
        Command::Sweep(_) => "sweep",
        Command::CfExperiment(_) => "cf-experiment",
    }
}

fn parse(argv: &[OsString]) -> Cli {
    let matches = Cli::command().get_matches_from(argv);
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let first = parse(&argv);
    let cli = match with_config(argv, &first) {
        Ok(full) if first.config.is_some() => parse(&full),
        Ok(_) => first,
        Err(f) => return report(f),
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    match f {
        Failure::Usage(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Failure::Runtime(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
