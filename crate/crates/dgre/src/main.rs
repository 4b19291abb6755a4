use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dgre::config::SEED_ENV;
use dgre::{CliError, Run, RunConfig};

#[derive(Parser)]
#[command(name = "dgre", version, about = "Cross-market recommendation with dual graph prototypes")]
struct Cli {
    /// Run directory; every artifact is written below it.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// TOML config with [data] [graph] [embed] [proto] [head] [eval] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Seed; falls back to [data].seed, then DGRE_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config field, e.g. `--set proto.k_proto=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.FIELD=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set head.kind=KIND`.
    #[arg(long, global = true)]
    head: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-structure dataset into data/.
    Synth,
    /// Read [data].source into data/.
    Ingest,
    /// Filter, split and build the user and item graphs.
    Graphs,
    /// Train graph embeddings.
    Embed,
    /// Extract user and market prototypes.
    Prototypes,
    /// Train the configured head.
    Train,
    /// Evaluate the trained head.
    Eval,
    /// Sweep k_proto and switch prototype sides on and off.
    Ablate,
    /// Every stage in order.
    All {
        /// Stop after eval.
        #[arg(long)]
        skip_ablate: bool,
    },
    /// Print the resolved configuration.
    Config,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides;
    if let Some(h) = cli.head {
        overrides.push(format!("head.kind={h}"));
    }
    let mut config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    config.resolve_seed(cli.seed, std::env::var(SEED_ENV).ok().as_deref())?;
    if let Command::Config = cli.command {
        config.pipeline()?;
        print!("{}", config.to_toml());
        return Ok(());
    }
    let r = Run::new(&cli.out, config, cli.threads)?;
    let lines = match cli.command {
        Command::Synth => vec![r.synth()?],
        Command::Ingest => vec![r.ingest()?],
        Command::Graphs => vec![r.graphs()?],
        Command::Embed => vec![r.embed()?],
        Command::Prototypes => vec![r.prototypes()?],
        Command::Train => vec![r.train()?],
        Command::Eval => vec![r.eval()?],
        Command::Ablate => vec![r.ablate()?],
        Command::All { skip_ablate } => r.all(!skip_ablate)?,
        Command::Config => unreachable!(),
    };
    for l in lines {
        println!("{l}");
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
