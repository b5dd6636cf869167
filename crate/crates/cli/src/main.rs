use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

mod commands;
mod config;

use commands::{Failure, Kind};

#[derive(Parser)]
#[command(name = "frs", version, about = "Fourier-parameterized rotation-scale equivariant U-Nets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; nested objects or dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as --key=value, applied after the config file.
    #[arg(value_name = "--KEY=VALUE", allow_hyphen_values = true, trailing_var_arg = true, num_args = 0..)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit basis coefficients to kernels and report the round-trip error.
    FitBasis(Common),
    /// Expand a random filter bank and dump it.
    GenBank(Common),
    /// Measure equivariance errors of the group layers.
    Verify(Common),
    /// Write synthetic samples as PNG triples.
    SynthData(Common),
    /// Train a U-Net variant.
    Train(Common),
    /// Score a checkpoint on a dataset.
    Eval(Common),
    /// Count learnable parameters of a configuration.
    CountParams(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cmd = Cli::command();
    for (name, keys) in commands::help_sections() {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(keys));
    }
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::FitBasis(c) => commands::fit_basis(c.config.as_deref(), &c.overrides),
        Command::GenBank(c) => commands::gen_bank(c.config.as_deref(), &c.overrides),
        Command::Verify(c) => commands::verify(c.config.as_deref(), &c.overrides),
        Command::SynthData(c) => commands::synth_data(c.config.as_deref(), &c.overrides),
        Command::Train(c) => commands::train(c.config.as_deref(), &c.overrides),
        Command::Eval(c) => commands::eval(c.config.as_deref(), &c.overrides),
        Command::CountParams(c) => commands::count_params(c.config.as_deref(), &c.overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { kind, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(match kind {
                Kind::Validation => 1,
                Kind::Runtime => 2,
            })
        }
    }
}
