use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedcl::config::{CsvData, DataSource};
use fedcl::report::{self, CONFIG_FILE};
use fedcl::{Result, RunOptions, ScenarioConfig, PRESETS};

#[derive(Parser)]
#[command(name = "fedcl", version, about = "Federated continual learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its outputs.
    Run {
        /// Built-in scenario name (see `fedcl presets`).
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        preset: Option<String>,
        /// Scenario file in TOML.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the experiment seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, created if missing.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Train clients concurrently. Outputs are unchanged.
        #[arg(long)]
        parallel_clients: bool,
        /// Use a labelled CSV file instead of the configured data source.
        #[arg(long)]
        data_csv: Option<PathBuf>,
    },
    /// Compare the summaries of finished runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// List the built-in scenarios.
    Presets,
    /// Print a built-in scenario as TOML.
    ShowPreset { name: String },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            preset,
            config,
            seed,
            out,
            parallel_clients,
            data_csv,
        } => {
            let mut cfg = match (preset, config) {
                (Some(p), _) => fedcl::preset(&p)?,
                (None, Some(path)) => ScenarioConfig::load(&path)?,
                (None, None) => unreachable!("clap requires one of --preset/--config"),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(path) = data_csv {
                cfg.data = DataSource::Csv(CsvData { path });
            }
            cfg.validate()?;
            let options = RunOptions {
                parallel: parallel_clients,
            };
            let (_, summary) = report::run(&cfg, &out, options)?;
            let h = &summary.headline;
            let show = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x:.4}"));
            println!("{} seed {} -> {}", summary.scenario, summary.seed, out.display());
            println!(
                "A_gen observed {}  generalized {}  server {}",
                show(h.observed_general),
                show(h.generalized_general),
                show(h.server_general)
            );
            println!(
                "A_per observed {}  A_2 {}  F_2 {}",
                show(h.observed_personal),
                show(h.observed_task2_accuracy),
                show(h.observed_task2_forgetting)
            );
            println!("resolved config: {}", out.join(CONFIG_FILE).display());
            Ok(())
        }
        Command::Compare { dirs, csv } => {
            let cmp = report::compare(&dirs)?;
            print!("{}", cmp.to_table());
            if let Some(path) = csv {
                std::fs::write(&path, cmp.to_csv()?)
                    .map_err(|e| fedcl::Error::Io {
                        context: format!("writing {}", path.display()),
                        source: e,
                    })?;
            }
            Ok(())
        }
        Command::Presets => {
            for p in PRESETS {
                println!("{p}");
            }
            Ok(())
        }
        Command::ShowPreset { name } => {
            print!("{}", fedcl::preset(&name)?.to_toml()?);
            Ok(())
        }
    }
}
