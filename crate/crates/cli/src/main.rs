//! `stner`: generate data, train, decode, evaluate, run simultaneous
//! inference, check gradients and compare variants.

mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Config;
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "stner", version, about = "Joint speech translation and named entity recognition workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Overrides {
    /// `--config FILE` and `--key value` pairs, applied in that order.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    args: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus into data_dir.
    #[command(after_help = config::keys_help())]
    GenData(Overrides),
    /// Train one variant and write a checkpoint and loss log.
    #[command(after_help = config::keys_help())]
    Train(Overrides),
    /// Beam-search a split with a checkpoint.
    #[command(after_help = config::keys_help())]
    Decode(Overrides),
    /// Score a hypothesis file against a reference file.
    #[command(after_help = config::keys_help())]
    Eval(Overrides),
    /// Wait-k quality/latency sweep with action traces.
    #[command(after_help = config::keys_help())]
    Simul(Overrides),
    /// Finite-difference gradient check of a freshly initialized model.
    #[command(after_help = config::keys_help())]
    Gradcheck(Overrides),
    /// Train and score every variant over several seeds and test against a baseline.
    #[command(after_help = config::keys_help())]
    Compare(Overrides),
}

fn run(command: Command) -> Result<String, CliError> {
    let (args, f): (_, fn(&Config) -> Result<String, CliError>) = match command {
        Command::GenData(o) => (o.args, commands::gen_data),
        Command::Train(o) => (o.args, commands::train_cmd),
        Command::Decode(o) => (o.args, commands::decode_cmd),
        Command::Eval(o) => (o.args, commands::eval_cmd),
        Command::Simul(o) => (o.args, commands::simul_cmd),
        Command::Gradcheck(o) => (o.args, commands::gradcheck_cmd),
        Command::Compare(o) => (o.args, commands::compare_cmd),
    };
    let cfg = Config::from_args(&args)?;
    f(&cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("{}", CliError::usage(e.kind().to_string()).machine_line());
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", e.machine_line());
            ExitCode::from(e.code as u8)
        }
    }
}
