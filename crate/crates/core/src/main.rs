use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use advdepth::cli::{self, config::parse_overrides, ExperimentConfig};
use advdepth::Error;

/// Semi-supervised adversarial monocular depth estimation.
///
/// Any configuration key can be overridden after `--config` with
/// `--section.key value`, e.g. `--train.epochs 5 --seed 3`.
#[derive(Parser, Debug)]
#[command(name = "advdepth", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic labeled + unlabeled corpus.
    Synth(Common),
    /// Train the generator and both discriminators.
    Train(Common),
    /// Evaluate a generator checkpoint on a labeled dataset.
    Eval(Common),
    /// One run per grid value of label count, unlabeled count, loss or λ.
    Sweep(Common),
    /// Train with labeled source data and unlabeled target images.
    Adapt(Common),
}

#[derive(clap::Args, Debug)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// `--key value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn run(args: Args) -> anyhow::Result<()> {
    let (name, common) = match &args.command {
        Command::Synth(c) => ("synth", c),
        Command::Train(c) => ("train", c),
        Command::Eval(c) => ("eval", c),
        Command::Sweep(c) => ("sweep", c),
        Command::Adapt(c) => ("adapt", c),
    };
    let overrides = parse_overrides(&common.overrides)?;
    let cfg = ExperimentConfig::load(&common.config, &overrides)
        .with_context(|| format!("loading {}", common.config.display()))?;
    log::info!("{name}: output in {}", cfg.out_dir.display());
    match args.command {
        Command::Synth(_) => {
            let m = cli::cmd_synth(&cfg)?;
            println!("{} labeled, {} unlabeled -> {}", m.labeled.len(), m.unlabeled.len(), cfg.out_dir.display());
        }
        Command::Train(_) => {
            let s = cli::cmd_train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Eval(_) => {
            let r = cli::cmd_eval(&cfg)?;
            println!("{}", r.to_json()?);
        }
        Command::Sweep(_) => {
            let rows = cli::cmd_sweep(&cfg)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} grid points, {failed} failed -> {}", rows.len(), cfg.out_dir.join(cli::SWEEP_CSV).display());
        }
        Command::Adapt(_) => {
            let r = cli::cmd_adapt(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(cli::EXIT_RUNTIME, cli::exit_code);
            ExitCode::from(code)
        }
    }
}
