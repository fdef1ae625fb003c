//! `vpr-augment` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vpr_augment::dataset::{ImportOptions, Split};
use vpr_augment::Error;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "vpr-augment",
    version,
    about = "Uncertainty-guided view augmentation for place recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the retrieval backbone on real data with early stopping.
    TrainVpr(RunArgs),
    /// Fit the uncertainty network on a frozen backbone checkpoint.
    TrainUe(RunArgs),
    /// Run a single augmentation round against saved checkpoints.
    Augment(RunArgs),
    /// Full loop, or a sweep when `sweep.mode` is set.
    Pipeline(RunArgs),
    /// Recall@N of a backbone checkpoint.
    Eval(RunArgs),
    /// Convert a nerfstudio-style transforms.json into a manifest.
    ImportTransforms(ImportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dotted overrides such as `--pipeline.epochs=5` or `--seed 3`.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY=VALUE"
    )]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    scene_id: String,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    /// Tag every k-th frame as a query.
    #[arg(long)]
    query_every: Option<usize>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Validation(_) | Error::Load { .. } => 2,
        Error::MissingDependency(_) => 3,
        Error::Render(_) | Error::RenderTimeout { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> vpr_augment::Result<()> {
    match cli.command {
        Command::ImportTransforms(a) => commands::import(
            &a.input,
            &a.output,
            &ImportOptions {
                scene_id: a.scene_id,
                split: a.split.into(),
                query_every: a.query_every,
            },
        ),
        Command::TrainVpr(a) => commands::train_vpr(&resolve(&a)?),
        Command::TrainUe(a) => commands::train_ue(&resolve(&a)?),
        Command::Augment(a) => commands::augment(&resolve(&a)?),
        Command::Pipeline(a) => commands::pipeline(&resolve(&a)?),
        Command::Eval(a) => commands::eval(&resolve(&a)?),
    }
}

fn resolve(args: &RunArgs) -> vpr_augment::Result<RunConfig> {
    RunConfig::resolve(args.config.as_deref(), &args.overrides)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
