//! `morphscope` command-line tool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use morphscope::ErrorKind;

#[derive(Debug, Parser)]
#[command(name = "morphscope", version, about = "Morphing attack detection with ViT features and a linear SVM")]
pub struct Cli {
    /// JSON settings file; explicit flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for relative output paths.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Seed for the SVM solver, t-SNE and weight initialization (default 42).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode every manifest image into a feature cache file.
    Extract(commands::ExtractArgs),
    /// Train a linear SVM on cached features.
    Train(commands::TrainArgs),
    /// Score features with a model and report D-EER and BPCER@MACER.
    Eval(commands::EvalArgs),
    /// Run the cross-dataset train/test grid.
    Grid(commands::GridArgs),
    /// Mean and standard deviation of grid D-EERs.
    Stats(commands::StatsArgs),
    /// Embed features in 2-d with t-SNE.
    Tsne(commands::TsneArgs),
    /// Render a DET, boxplot or scatter SVG.
    Plot(commands::PlotArgs),
    /// Check a weights file against the encoder schema.
    ValidateWeights(commands::ValidateArgs),
    /// Write a randomly initialized weights file.
    InitWeights(commands::InitArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}
