//! `circuitfn` command line: dataset generation, labelling, training,
//! evaluation, inference and structural statistics.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

/// Environment variable that overrides every seed given on the command line
/// or in a config file.
pub const SEED_ENV: &str = "CIRCUITFN_SEED";

#[derive(Debug, Parser)]
#[command(name = "circuitfn", version, about = "Learn functional behaviour of and-inverter graphs")]
struct Cli {
    /// Render reports as aligned tables instead of JSON on stdout.
    #[arg(long, global = true)]
    pretty: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset of random circuits.
    Gen(GenArgs),
    /// Attach oracle labels to a dataset.
    Label(LabelArgs),
    /// Train a model.
    Train {
        #[arg(value_enum)]
        task: TrainTask,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Evaluate a checkpoint (or a stub) on a dataset.
    Eval {
        #[arg(value_enum)]
        task: EvalTask,
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Write per-node probability estimates as JSON lines.
    Infer(InferArgs),
    /// Padding overhead and in-degree histogram of a dataset.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Shape {
    Dag,
    Tree,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    n_circuits: usize,
    /// PI count, either `N` or an inclusive range `LO..HI`.
    #[arg(long)]
    pis: String,
    /// AND-gate count, either `N` or `LO..HI`; ignored for trees.
    #[arg(long, default_value = "8")]
    gates: String,
    #[arg(long)]
    sequential: bool,
    #[arg(long, default_value_t = 0)]
    latches: usize,
    #[arg(long, value_enum, default_value_t = Shape::Dag)]
    shape: Shape,
    #[arg(long, default_value_t = 0.3)]
    p_not: f64,
    /// Bernoulli parameter of every PI.
    #[arg(long, default_value_t = 0.5)]
    pi_p: f64,
    /// Draw each PI's parameter uniformly from `LO..HI` instead.
    #[arg(long)]
    pi_p_range: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct LabelArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of prob, shift, sim, transition.
    #[arg(long, default_value = "prob,shift")]
    tasks: String,
    #[arg(long, default_value_t = 256)]
    cycles: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also store one `(v, v)` pair per operator node.
    #[arg(long)]
    sim_identity: bool,
    #[arg(long)]
    exhaustive_max_inputs: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainTask {
    Fsl,
    Contrastive,
    Transition,
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Positive {
    Rewrite,
    Identity,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Positive pairs for contrastive training.
    #[arg(long, value_enum, default_value_t = Positive::Rewrite)]
    positive: Positive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalTask {
    Fsl,
    Retrieval,
    Transition,
    Similarity,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Report path; the report is always echoed to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Substitute stored oracle shifts for the model (fsl only).
    #[arg(long)]
    oracle_shift: bool,
    /// Candidates per query, the positive included (retrieval only).
    #[arg(long, default_value_t = 64)]
    pool: usize,
    #[arg(long, default_value = "1,5,10")]
    ks: String,
    /// Score independent random embeddings instead of a model (retrieval only).
    #[arg(long)]
    null_model: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use exact shifts from simulation instead of a model.
    #[arg(long, conflicts_with = "zero_shift")]
    oracle_shift: bool,
    /// Use zero shifts (independence propagation).
    #[arg(long)]
    zero_shift: bool,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let pretty = cli.pretty;
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Label(a) => commands::label(a),
        Command::Train { task, args } => commands::train(task, args, pretty),
        Command::Eval { task, args } => commands::eval(task, args, pretty),
        Command::Infer(a) => commands::infer(a),
        Command::Stats(a) => commands::stats(a, pretty),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
