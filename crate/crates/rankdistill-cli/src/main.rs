//! Command-line front end for ranking distillation: generate synthetic
//! worlds, train student heads against a frozen teacher, score retrieval
//! quality, sweep hyper-parameters, and inspect label statistics.

mod common;
mod distill;
mod eval;
mod gen_data;
mod inspect_labels;
mod overrides;
mod sweep;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "rankdistill",
    version,
    about = "Data-efficient ranking distillation in embedding space"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered world plus its manifest.
    GenData(gen_data::GenDataArgs),
    /// Train a student head to mimic the teacher's ranking.
    Distill(distill::DistillArgs),
    /// Score a trained head on the retrieval task.
    Eval(eval::EvalArgs),
    /// Run distill + eval over a grid of one hyper-parameter.
    Sweep(sweep::SweepArgs),
    /// Report positive-set statistics for a labelling configuration.
    InspectLabels(inspect_labels::InspectLabelsArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data::run(args),
        Command::Distill(args) => distill::run(args),
        Command::Eval(args) => eval::run(args),
        Command::Sweep(args) => sweep::run(args),
        Command::InspectLabels(args) => inspect_labels::run(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
