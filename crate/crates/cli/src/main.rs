mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "camfusion",
    version,
    about = "Multiview fusion of per-view descriptors: synthetic data, training, fusion, evaluation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Seed for every random stream of this invocation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config for the subcommand (or a run manifest written earlier).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its vocabulary.
    GenSynth(commands::GenSynthArgs),
    /// Train a fusion model.
    Train(commands::TrainArgs),
    /// Fuse every instance of a dataset into one descriptor.
    Fuse(commands::FuseArgs),
    /// Score fused descriptors against ground truth.
    Eval(commands::EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(commands::GradcheckArgs),
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
    let result = match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&cli.common, a),
        Command::Train(a) => commands::train(&cli.common, a),
        Command::Fuse(a) => commands::fuse(&cli.common, a),
        Command::Eval(a) => commands::eval(&cli.common, a),
        Command::Gradcheck(a) => commands::gradcheck(&cli.common, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
