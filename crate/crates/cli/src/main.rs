mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rgvix_core::params::Family;
use rgvix_core::vix::ErrorSpec;

use commands::{CliError, Classify, Outputs};
use config::{MarketVrp, RunConfig};

#[derive(Parser)]
#[command(name = "rgvix", version, about = "Realized GARCH VIX pricing, volatility risk premium and model comparison")]
struct Cli {
    /// TOML run configuration; `rgvix config init` prints every key with its default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides both the estimation and the simulation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model family; repeat to select several. Overrides `models.families`.
    #[arg(long = "model", global = true, value_parser = parse_family)]
    models: Vec<Family>,
    #[arg(long, global = true, value_parser = parse_error_spec)]
    error_spec: Option<ErrorSpec>,
    /// Market VRP used for evaluation.
    #[arg(long, global = true, value_enum)]
    market_vrp: Option<MarketVrp>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full-sample joint estimation; writes fit JSON and a parameter table.
    Estimate,
    /// Rolling-window out-of-sample forecasts and their evaluation.
    Backtest,
    /// Model VIX for every date with fixed parameters.
    Vix,
    /// Market and model volatility risk premium series.
    Vrp,
    /// Simulated skewness, kurtosis and density of cumulative returns.
    Simulate,
    /// Closed-form log-variance moments and the log-VRP decomposition.
    Moments,
    /// Diebold-Mariano comparison of forecast files.
    Dm,
    /// Synthetic market data from the first configured model.
    Synth,
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Prints the default configuration, or writes it to PATH.
    Init { path: Option<PathBuf> },
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: rgvix_core::Error| e.to_string())
}

fn parse_error_spec(s: &str) -> Result<ErrorSpec, String> {
    s.parse().map_err(|e: rgvix_core::Error| e.to_string())
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).config_err()?,
        None => RunConfig::default(),
    };
    if !cli.models.is_empty() {
        cfg.models.families = cli.models.clone();
    }
    if let Some(s) = cli.seed {
        cfg.estimation.seed = s;
        cfg.simulation.seed = s;
    }
    if let Some(e) = cli.error_spec {
        cfg.models.error_spec = e;
    }
    if let Some(m) = cli.market_vrp {
        cfg.evaluation.market_vrp = m;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.validate().config_err()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Config {
        action: ConfigAction::Init { path },
    } = &cli.command
    {
        let text = RunConfig::default().to_toml();
        return match path {
            Some(p) => std::fs::write(p, text).config_err(),
            None => {
                print!("{text}");
                Ok(())
            }
        };
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config(anyhow::anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().config_err()?;
    }
    let cfg = resolve_config(&cli)?;
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let mut out = Outputs::new(&dir)?;
    let name = match cli.command {
        Command::Estimate => {
            commands::cmd_estimate(&cfg, &mut out)?;
            "estimate"
        }
        Command::Backtest => {
            commands::cmd_backtest(&cfg, &mut out)?;
            "backtest"
        }
        Command::Vix => {
            commands::cmd_vix(&cfg, &mut out)?;
            "vix"
        }
        Command::Vrp => {
            commands::cmd_vrp(&cfg, &mut out)?;
            "vrp"
        }
        Command::Simulate => {
            commands::cmd_simulate(&cfg, &mut out)?;
            "simulate"
        }
        Command::Moments => {
            commands::cmd_moments(&cfg, &mut out)?;
            "moments"
        }
        Command::Dm => {
            commands::cmd_dm(&cfg, &mut out)?;
            "dm"
        }
        Command::Synth => {
            commands::cmd_synth(&cfg, &mut out)?;
            "synth"
        }
        Command::Config { .. } => unreachable!("handled above"),
    };
    out.finish(name, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
