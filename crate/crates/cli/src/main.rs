use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sthfl::config::{parse_config, print_config};
use sthfl::{exit_code, runner, svg};
use sthfl_core::federation::{Algorithm, ExperimentConfig, InferenceMode};
use sthfl_core::{Error, Result};

/// Federated learning simulator with prototype-based personalization.
///
/// Every flag can also be set through an environment variable with the
/// `STHFL_` prefix, e.g. `STHFL_SEEDS=0,1,2`.
#[derive(Parser)]
#[command(name = "sthfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run configs x seeds and write per-run and aggregate metric CSVs.
    Run(RunArgs),
    /// Repeat the runs recorded in a manifest.
    Rerun {
        #[arg(long, env = "STHFL_MANIFEST")]
        manifest: PathBuf,
        #[arg(long, env = "STHFL_OUT")]
        out: PathBuf,
    },
    /// Draw a metric against the round index from a metrics CSV.
    Svg {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value = "A_sel")]
        metric: String,
        #[arg(long, env = "STHFL_OUT")]
        out: PathBuf,
    },
    /// Write the client partitions of a config to a directory.
    Partitions {
        #[arg(long, env = "STHFL_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, env = "STHFL_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "STHFL_OUT")]
        out: PathBuf,
    },
    /// Print a config with all defaults filled in.
    ShowConfig {
        #[arg(long, env = "STHFL_CONFIG")]
        config: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Config file(s); defaults are used when omitted.
    #[arg(long, env = "STHFL_CONFIG", value_delimiter = ',')]
    config: Vec<PathBuf>,
    /// Comma separated seeds; overrides the seed in each config.
    #[arg(long, env = "STHFL_SEEDS", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, env = "STHFL_ALGORITHM", value_enum)]
    algorithm: Option<AlgorithmArg>,
    /// Expand each config into the full objective, lambda=0, lambda=1 and
    /// no relation terms.
    #[arg(long, env = "STHFL_ABLATION")]
    ablation: bool,
    #[arg(long, env = "STHFL_INFERENCE", value_enum)]
    inference: Option<InferenceArg>,
    #[arg(long, env = "STHFL_OUT", default_value = "results")]
    out: PathBuf,
    #[arg(long, env = "STHFL_EMIT_SVG")]
    emit_svg: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Gldp,
    Fedavg,
    Fedrep,
    Fedprox,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Gldp => Algorithm::Gldp,
            AlgorithmArg::Fedavg => Algorithm::FedAvg,
            AlgorithmArg::Fedrep => Algorithm::FedRep,
            AlgorithmArg::Fedprox => Algorithm::FedProx,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InferenceArg {
    Gp,
    Lp,
}

fn load(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => parse_config(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run_command(args: RunArgs) -> Result<()> {
    let mut configs = if args.config.is_empty() {
        vec![ExperimentConfig::default()]
    } else {
        args.config
            .iter()
            .map(|p| load(Some(p)))
            .collect::<Result<Vec<_>>>()?
    };
    for c in &mut configs {
        if let Some(a) = args.algorithm {
            c.algorithm = a.into();
        }
        if let Some(i) = args.inference {
            c.inference = match i {
                InferenceArg::Gp => InferenceMode::Gp,
                InferenceArg::Lp => InferenceMode::Lp,
            };
        }
    }
    if args.ablation {
        configs = configs.iter().flat_map(runner::ablation_variants).collect();
    }
    let manifest = runner::run(&configs, &args.seeds, &args.out, args.emit_svg)?;
    println!(
        "{} runs written to {}",
        manifest.runs.len(),
        manifest.output_dir.display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => run_command(args),
        Command::Rerun { manifest, out } => {
            let m = runner::rerun(&manifest, &out)?;
            println!(
                "{} runs written to {}",
                m.runs.len(),
                m.output_dir.display()
            );
            Ok(())
        }
        Command::Svg { csv, metric, out } => {
            let text = fs::read_to_string(&csv).map_err(Error::Io)?;
            fs::write(&out, svg::emit_svg(&text, &metric)?).map_err(Error::Io)
        }
        Command::Partitions { config, seed, out } => {
            let mut c = load(config.as_ref())?;
            if let Some(s) = seed {
                c.seed = s;
            }
            c.validate()?;
            runner::write_partitions(&c, &out)
        }
        Command::ShowConfig { config } => {
            print!("{}", print_config(&load(config.as_ref())?));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
