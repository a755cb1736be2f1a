use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use safenvelope::scenarios::{run_scenario, Command, ScenarioConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Shape,
    BoundLipschitz,
    BoundGp,
    Synthesize,
    Verify,
    Simulate,
    Explore,
    BaselineRobust,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Shape => Command::Shape,
            Cmd::BoundLipschitz => Command::BoundLipschitz,
            Cmd::BoundGp => Command::BoundGp,
            Cmd::Synthesize => Command::Synthesize,
            Cmd::Verify => Command::Verify,
            Cmd::Simulate => Command::Simulate,
            Cmd::Explore => Command::Explore,
            Cmd::BaselineRobust => Command::BaselineRobust,
        }
    }
}

/// Safe-set synthesis and runtime filtering from data.
#[derive(Debug, Parser)]
#[command(name = "safenvelope", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let run = ScenarioConfig::load(&cli.config).and_then(|mut cfg| {
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        run_scenario(cfg, cli.command.into(), &cli.out)
    });
    match run {
        Ok(out) => {
            print!("{}", out.report);
            if out.success {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
