use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robustforge::Precision;
use robustforge_cli::commands::{self, BlackBoxSource};
use robustforge_cli::config::{default_grid, SweepParameter};
use robustforge_cli::{CliError, Overrides};

#[derive(Parser)]
#[command(name = "robustforge", version, about = "Adversarial robustness experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file path or preset name.
    #[arg(long)]
    config: String,
    /// Output directory (overrides the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
    /// Replaces the model init and training seeds.
    #[arg(long)]
    seed_override: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            workers: self.workers,
            precision: self.precision.as_deref().map(|p| if p == "64" { Precision::F64 } else { Precision::F32 }),
            seed: self.seed_override,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint and a training log.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// White-box, optional black-box and clean reports for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint to craft black-box examples on.
        #[arg(long, conflicts_with = "transfer_set")]
        source: Option<PathBuf>,
        /// Saved transfer set to evaluate on.
        #[arg(long)]
        transfer_set: Option<PathBuf>,
    },
    /// Craft and save a transfer set on a checkpoint.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Black-box accuracy of a target on examples crafted against a source.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// One model per weight; writes (weight, accuracy) rows.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Defaults to the config's [sweep] section.
        #[arg(long, value_enum)]
        parameter: Option<SweepParameter>,
        /// Comma-separated weights.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Train, attack and report for a preset (or config) end to end.
    Reproduce {
        preset: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_parser = ["32", "64"])]
        precision: Option<String>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("output serialises"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common } => {
            let cfg = commands::prepare(&common.config, &common.overrides())?;
            print_json(&commands::cmd_train(&cfg)?);
        }
        Command::Eval {
            common,
            checkpoint,
            source,
            transfer_set,
        } => {
            let cfg = commands::prepare(&common.config, &common.overrides())?;
            let bb = match (source, transfer_set) {
                (Some(s), _) => BlackBoxSource::Checkpoint(s),
                (None, Some(t)) => BlackBoxSource::TransferSet(t),
                (None, None) => BlackBoxSource::None,
            };
            print_json(&commands::cmd_eval(&cfg, &checkpoint, &bb)?);
        }
        Command::Attack { common, checkpoint } => {
            let cfg = commands::prepare(&common.config, &common.overrides())?;
            print_json(&commands::cmd_attack(&cfg, &checkpoint)?);
        }
        Command::Transfer { common, source, target } => {
            let cfg = commands::prepare(&common.config, &common.overrides())?;
            print_json(&commands::cmd_transfer(&cfg, &source, &target)?);
        }
        Command::Sweep { common, parameter, grid } => {
            let cfg = commands::prepare(&common.config, &common.overrides())?;
            let section = cfg.sweep.clone();
            let parameter = parameter.or(section.as_ref().map(|s| s.parameter)).ok_or_else(|| {
                CliError::Config("sweep.parameter: give --parameter or a [sweep] section".into())
            })?;
            let grid = grid.or(section.map(|s| s.grid)).unwrap_or_else(default_grid);
            let rows = commands::cmd_sweep(&cfg, parameter, &grid)?;
            print_json(&rows);
            if let Some(bad) = rows.iter().find(|r| r.status != "ok") {
                return Err(CliError::Numeric(format!("sweep point {} {}", bad.weight, bad.status)));
            }
        }
        Command::Reproduce {
            preset,
            out,
            workers,
            precision,
            seed_override,
        } => {
            let common = Common {
                config: preset,
                out,
                workers,
                precision,
                seed_override,
            };
            let cfg = commands::prepare(&common.config, &common.overrides())?;
            let s = commands::cmd_reproduce(&cfg)?;
            println!("model {}", s.model_id);
            let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}%", 100.0 * v));
            println!(
                "white box {}  black box {}  clean {}",
                pct(s.white_box),
                pct(s.black_box),
                pct(Some(s.clean))
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
