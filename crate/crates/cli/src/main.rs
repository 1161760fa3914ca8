mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use frn_core::heads::HeadKind;
use frn_core::synth::GenKind;
use frn_core::{ErrorClass, FormulationChoice, Precision};

/// Few-shot heads by feature map reconstruction: data generation, training,
/// evaluation, ablations and the formulation benchmark.
#[derive(Debug, Parser)]
#[command(name = "frn", version)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write base/val/test synthetic splits.
    Gen(GenArgs),
    /// Episodic evaluation of a default or trained head.
    Eval(EvalArgs),
    /// Time the direct and Woodbury reconstruction paths.
    Bench(BenchArgs),
    /// Episodic meta-training.
    Train(TrainArgs),
    /// Non-episodic pre-training against per-class dummy feature maps.
    Pretrain(PretrainArgs),
    /// Run an ablation study over several seeds.
    Ablate(AblateArgs),
}

/// Flags shared by every command. Commands ignore the ones they have no use for.
#[derive(Debug, Clone, Args)]
struct Common {
    #[arg(long, default_value = "frn")]
    head: HeadKind,
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 1)]
    shot: usize,
    /// Queries per class (default 16 for evaluation, 15 for training).
    #[arg(long)]
    query: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Spatial locations per feature map.
    #[arg(long)]
    r: Option<usize>,
    /// Channels per location.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    formulation: Option<FormulationChoice>,
    /// Keep α (and so λ) at its initial value.
    #[arg(long)]
    fix_alpha: bool,
    /// Keep β (and so ρ) at its initial value.
    #[arg(long)]
    fix_beta: bool,
    /// Keep the temperature γ at its initial value.
    #[arg(long)]
    fix_gamma: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset file, or a directory holding base/val/test splits.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "frn-out")]
    out: PathBuf,
    /// Checkpoint to start from.
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "gaussian-prototype")]
    kind: GenKind,
    #[arg(long, default_value_t = 32)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    val_classes: usize,
    #[arg(long, default_value_t = 16)]
    test_classes: usize,
    #[arg(long, default_value_t = 30)]
    items: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Trailing channels that carry only noise.
    #[arg(long, default_value_t = 0)]
    nuisance_dims: usize,
    #[arg(long, default_value_t = 1.0)]
    nuisance_sigma: f64,
    /// Pair offset scale for equal-mean data.
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Query maps reconstructed per call.
    #[arg(long, default_value_t = 5)]
    batch: usize,
    #[arg(long, default_value_t = frn_core::bench::MIN_ITERATIONS)]
    iterations: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
}

#[derive(Debug, Clone, Args)]
struct OptimArgs {
    #[arg(long)]
    lr: Option<f64>,
    /// Steps after which the learning rate drops tenfold.
    #[arg(long = "milestone")]
    milestones: Vec<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Output width of the linear embedding (default: input width).
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Start the embedding at the identity instead of at random.
    #[arg(long)]
    identity_init: bool,
    /// Scale embedded features by 1/sqrt(d).
    #[arg(long)]
    downscale: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 50)]
    val_every: usize,
    #[arg(long, default_value_t = 100)]
    val_trials: usize,
    /// Validation shot (default: training shot).
    #[arg(long)]
    val_shot: Option<usize>,
    /// Weight of the orthogonality term (FRN default 0.03).
    #[arg(long, conflicts_with = "no_aux")]
    aux_scale: Option<f64>,
    #[arg(long)]
    no_aux: bool,
    /// Train only the head, keeping the embedding fixed.
    #[arg(long)]
    freeze_embedding: bool,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "pretrain")]
    study: frn_core::ablation::Study,
    /// Seeds `seed, seed+1, ...`.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_trials: Option<usize>,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Io => 3,
        ErrorClass::Numerical => 4,
        ErrorClass::Sampling => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Train(a) => commands::train(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
