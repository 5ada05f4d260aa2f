//! `peakprob`: fit scenario engines, simulate, predict coincident peaks and
//! backtest alert strategies from a TOML run configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use peakprob::{Error, ErrorKind};

use crate::commands::{Ctx, SynthArgs};
use crate::config::{data_base, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "peakprob",
    version,
    about = "Coincident-peak probabilities from load scenarios"
)]
struct Cli {
    /// Worker threads for scenario simulation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Base directory for relative data paths in the config.
    #[arg(long, global = true, env = "PEAKPROB_DATA_DIR")]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory (overrides `output`).
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scenarios per day (overrides `scenarios`).
    #[arg(short = 'k', long)]
    scenarios: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit and save an engine on all eligible days before the cutoff.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cutoff: NaiveDate,
    },
    /// Simulate one day's scenarios and fan-chart quantiles.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        date: NaiveDate,
        /// Saved engine; trained on days before `date` when omitted.
        #[arg(long)]
        engine: Option<PathBuf>,
        /// Also write the binary scenario file.
        #[arg(long)]
        binary: bool,
    },
    /// Peak-day and peak-hour probabilities for one day.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        date: NaiveDate,
        #[arg(long)]
        engine: Option<PathBuf>,
        /// Comma-separated strategy names (overrides `strategies`).
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<String>>,
    },
    /// Expanding-window backtest of alert strategies.
    Backtest {
        #[command(flatten)]
        common: Common,
        /// Test years, e.g. `2014-2023` or `2014,2016`.
        #[arg(long, value_parser = parse_years)]
        years: Option<Years>,
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<String>>,
    },
    /// Print the summary table of a saved backtest and rewrite its CSVs.
    Report {
        /// `report.json` written by `backtest`.
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic data set with a matching config.
    Synth {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2011)]
        first_year: i32,
        #[arg(long, default_value_t = 2015)]
        last_year: i32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Add a child zone and configure a two-zone run.
        #[arg(long)]
        child: bool,
    },
}

#[derive(Debug, Clone)]
struct Years(Vec<i32>);

fn parse_years(s: &str) -> Result<Years, String> {
    let bad = || format!("`{s}` is not a year list or range");
    if let Some((a, b)) = s.split_once('-') {
        let a: i32 = a.trim().parse().map_err(|_| bad())?;
        let b: i32 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok(Years((a..=b).collect()));
    }
    s.split(',')
        .map(|y| y.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()
        .map(Years)
}

fn context(cli: &Cli, common: &Common, extra: Overrides) -> peakprob::Result<Ctx> {
    let mut config = RunConfig::load(&common.config)?;
    config.apply(&Overrides {
        scenarios: common.scenarios,
        seed: common.seed,
        output: common.output.clone(),
        ..extra
    });
    Ok(Ctx {
        base: data_base(cli.data_dir.as_deref(), &common.config),
        config_path: common.config.clone(),
        config,
        workers: cli.workers,
    })
}

fn run(cli: &Cli) -> peakprob::Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::Fit { common, cutoff } => {
            commands::fit(&context(cli, common, Overrides::default())?, *cutoff)
        }
        Command::Simulate {
            common,
            date,
            engine,
            binary,
        } => commands::simulate(
            &context(cli, common, Overrides::default())?,
            *date,
            engine.as_deref(),
            *binary,
        ),
        Command::Predict {
            common,
            date,
            engine,
            strategies,
        } => {
            let o = Overrides {
                strategies: strategies.clone(),
                ..Overrides::default()
            };
            commands::predict(&context(cli, common, o)?, *date, engine.as_deref())
        }
        Command::Backtest {
            common,
            years,
            strategies,
        } => {
            let o = Overrides {
                strategies: strategies.clone(),
                years: years.as_ref().map(|y| y.0.clone()),
                ..Overrides::default()
            };
            commands::backtest(&context(cli, common, o)?)
        }
        Command::Report { input, output } => commands::report(input, output.as_deref()),
        Command::Synth {
            out,
            first_year,
            last_year,
            seed,
            child,
        } => commands::synth(&SynthArgs {
            out: out.clone(),
            first_year: *first_year,
            last_year: *last_year,
            seed: *seed,
            child: *child,
        }),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn year_lists() {
        assert_eq!(parse_years("2014-2016").unwrap().0, vec![2014, 2015, 2016]);
        assert_eq!(parse_years("2014, 2018").unwrap().0, vec![2014, 2018]);
        assert!(parse_years("2016-2014").is_err());
        assert!(parse_years("x").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Coverage("x".into())), 3);
        assert_eq!(exit_code(&Error::Singular("x".into())), 4);
        assert_eq!(exit_code(&Error::Singular("x".into()).at("hour 3")), 4);
    }

    #[test]
    fn cli_definition_is_valid() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
