use clap::{Parser, Subcommand};
use phtccp::metrics;
use phtccp::presets::{self, PresetName};
use phtccp::scenario::{ProtocolMode, Scenario};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "phtccp",
    about = "Hop-by-hop congestion control simulator for prioritized heterogeneous sensor traffic"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write timeseries.csv / summary.csv
    Run {
        scenario: PathBuf,
        /// overrides the scenario's seed (default from PHTCCP_SEED)
        #[arg(long)]
        seed: Option<u64>,
        /// protocol mode override: phtccp | ccf_lite | none
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a canned experiment sweep
    Preset {
        name: String,
        /// comma-separated seed list
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
        seeds: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the analytical queue-memory table
    MemoryTable {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario file without running it
    Validate { scenario: PathBuf },
}

fn parse_mode(s: &str) -> Result<ProtocolMode, String> {
    match s {
        "phtccp" => Ok(ProtocolMode::Phtccp),
        "ccf_lite" => Ok(ProtocolMode::CcfLite),
        "none" => Ok(ProtocolMode::None),
        other => Err(format!("unknown mode '{other}'; expected phtccp, ccf_lite or none")),
    }
}

fn env_seed() -> Option<u64> {
    std::env::var("PHTCCP_SEED").ok()?.parse().ok()
}

fn load_scenario(path: &PathBuf) -> Result<Scenario, String> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Scenario::from_json(&text).map_err(|e| e.to_string())
}

fn real_main() -> Result<(), String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            seed,
            mode,
            out,
        } => {
            let mut s = load_scenario(&scenario)?;
            if let Some(seed) = seed.or_else(env_seed) {
                s.seed = seed;
            }
            if let Some(mode) = mode {
                s.mode = parse_mode(&mode)?;
            }
            let log = phtccp::run(&s).map_err(|e| e.to_string())?;
            metrics::write_run_outputs(&log, &out).map_err(|e| e.to_string())?;
            println!(
                "run complete: generated={} delivered={} buffer_drops={} mac_drops={} -> {}",
                log.totals.generated,
                log.totals.delivered,
                log.totals.buffer_drops,
                log.totals.mac_drops,
                out.display()
            );
            Ok(())
        }
        Command::Preset { name, seeds, out } => {
            let name = PresetName::from_str(&name)?;
            let base = Scenario::default();
            presets::run_preset(name, &base, &seeds, &out).map_err(|e| e.to_string())?;
            println!("preset {} written to {}", name.as_str(), out.display());
            Ok(())
        }
        Command::MemoryTable { out } => {
            let csv = metrics::memory_table_csv();
            match out {
                Some(path) => {
                    fs::write(&path, &csv).map_err(|e| e.to_string())?;
                    println!("memory table written to {}", path.display());
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Validate { scenario } => {
            load_scenario(&scenario)?;
            println!("{}: ok", scenario.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
