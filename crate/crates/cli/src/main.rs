//! `fedcode`: run federated code-table pre-training and prompt tuning
//! experiments from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedcode::{Error, ErrorKind};

use config::{RunConfig, Split};

#[derive(Parser, Debug)]
#[command(name = "fedcode", version, about)]
struct Cli {
    /// Run config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Prompt fusion mode; overrides `prompt.mode`.
    #[arg(long, global = true, value_enum)]
    prompt: Option<PromptArg>,
    /// Gradient encryption; overrides `enc.mode`.
    #[arg(long, global = true, value_enum)]
    encryption: Option<EncryptionArg>,
    /// Override a config key, e.g. `--set fed.rounds=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PromptArg {
    Full,
    Light,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum EncryptionArg {
    On,
    Off,
    Identity,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic two-domain dataset (interactions, id maps, encodings).
    GenSynthetic,
    /// Train the product-quantization codebook and code every item.
    CodeItems,
    /// Federated pre-training of the shared code table.
    Pretrain,
    /// Prompt tuning of every domain on top of a pre-trained checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Ranking metrics of a checkpoint, or of an untrained model.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `valid` or `test`; defaults to `eval.split`.
        #[arg(long)]
        split: Option<String>,
    },
    /// Pre-train and evaluate once per value of `t`, `epsilon` or `b`.
    Sweep {
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.prompt {
        cfg.set("prompt.mode", if matches!(p, PromptArg::Full) { "full" } else { "light" })?;
    }
    if let Some(e) = cli.encryption {
        let mode = match e {
            EncryptionArg::On => "on",
            EncryptionArg::Off => "off",
            EncryptionArg::Identity => "identity",
        };
        cfg.set("enc.mode", mode)?;
    }
    cfg.validate()?;
    let out = commands::out_dir(cli.out);
    match cli.command {
        Command::GenSynthetic => commands::gen_synthetic(&cfg, &out),
        Command::CodeItems => commands::code_items(&cfg, &out),
        Command::Pretrain => commands::pretrain(&cfg, &out),
        Command::Finetune { checkpoint } => commands::finetune_cmd(&cfg, &checkpoint, &out),
        Command::Evaluate { checkpoint, split } => {
            let split = match split {
                Some(s) => Split::parse(&s)?,
                None => cfg.split,
            };
            commands::evaluate_cmd(&cfg, checkpoint.as_deref(), split, &out)
        }
        Command::Sweep { param, values } => commands::sweep(&cfg, &param, &values, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("FEDCODE_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            })
        }
    }
}
