use std::path::PathBuf;
use std::process::ExitCode;

use cardiorom::fom::Parameter;
use cardiorom_cli::config::RunConfig;
use cardiorom_cli::pipeline::{self, Algorithm, Summary};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(version, about = "Reduced-order models for cardiac monodomain simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Benchmark configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct Point {
    /// Repolarization rate; defaults to the center of the parameter box.
    #[arg(long)]
    gamma: Option<f64>,
    /// Second stimulus time [ms]; defaults to the center of the parameter box.
    #[arg(long = "t-s")]
    t_s: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble the operators and write them in Matrix Market form.
    Assemble {
        #[command(flatten)]
        common: Common,
    },
    /// Full-order solve at one parameter.
    Fom {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        point: Point,
        /// Also write every state vector.
        #[arg(long)]
        save_states: bool,
    },
    /// Build a reduced model with the greedy algorithm.
    Greedy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "alg1")]
        algorithm: Algorithm,
    },
    /// Reduced solve at one parameter from a stored model.
    RomEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        point: Point,
        /// Model archive; defaults to the one in the output directory.
        #[arg(long, value_name = "PATH")]
        archive: Option<PathBuf>,
    },
    /// Compare a stored model against full solves on the test set.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        archive: Option<PathBuf>,
    },
}

fn load(common: &Common) -> cardiorom::Result<RunConfig> {
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn point(cfg: &RunConfig, p: &Point) -> Option<Parameter> {
    if p.gamma.is_none() && p.t_s.is_none() {
        return None;
    }
    let d = cfg.default_parameter();
    Some(Parameter::new(p.gamma.unwrap_or(d.gamma), p.t_s.unwrap_or(d.t_s)))
}

fn run(cli: Cli) -> cardiorom::Result<Summary> {
    match cli.command {
        Command::Assemble { common } => pipeline::assemble(&load(&common)?),
        Command::Fom {
            common,
            point: p,
            save_states,
        } => {
            let cfg = load(&common)?;
            pipeline::fom(&cfg, point(&cfg, &p), save_states)
        }
        Command::Greedy { common, algorithm } => pipeline::greedy(&load(&common)?, algorithm),
        Command::RomEval {
            common,
            point: p,
            archive,
        } => {
            let cfg = load(&common)?;
            pipeline::rom_eval(&cfg, archive.as_deref(), point(&cfg, &p))
        }
        Command::Validate { common, archive } => pipeline::validate(&load(&common)?, archive.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
