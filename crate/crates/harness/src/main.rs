//! Command-line front end: simulate datasets, replay them through the
//! moving-horizon estimator or the IEKF, sweep settings and tabulate runs.
//!
//! Exit codes: 0 success, 1 I/O or dataset error, 2 configuration error,
//! 3 estimator failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mhe_harness::config::{Config, SensorSet};
use mhe_harness::error::{HarnessError, Result};
use mhe_harness::report::{self, Format, Summary, TableRow, CONFIG_FILE, SUMMARY_FILE};
use mhe_harness::runner::{self, EstimatorKind};
use mhe_harness::sim::{self, Dataset};

#[derive(Parser)]
#[command(name = "mhe-harness", version, about = "Moving-horizon estimation benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    Mhe,
    Iekf,
}

impl From<Estimator> for EstimatorKind {
    fn from(e: Estimator) -> Self {
        match e {
            Estimator::Mhe => EstimatorKind::Mhe,
            Estimator::Iekf => EstimatorKind::Iekf,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    #[value(name = "batch_size", alias = "batch-size")]
    BatchSize,
    Threads,
    Sensors,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Csv,
    Json,
}

impl From<TableFormat> for Format {
    fn from(f: TableFormat) -> Self {
        match f {
            TableFormat::Csv => Format::Csv,
            TableFormat::Json => Format::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset: truth.csv, measurements.ndjson, landmarks.json.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a dataset through an estimator and write logs and a summary.
    Run {
        #[arg(long, value_enum, default_value = "mhe")]
        estimator: Estimator,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; simulated from the configuration when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run once per value of one setting; writes one run directory per value
    /// and sweep.csv / sweep.json tables.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values; sensor sets are `+`-joined names.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_enum, default_value = "mhe")]
        estimator: Estimator,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory reused for every value; not allowed for sensor sweeps.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate run summaries, one row per input.
    Report {
        #[arg(long, value_enum)]
        format: TableFormat,
        /// Run directories or summary.json files.
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn dataset(config: &Config, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(dir) => sim::read_dataset(dir),
        None => sim::simulate(&config.sim),
    }
}

fn run_one(kind: EstimatorKind, config: &Config, data: &Dataset, out: &Path) -> Result<Summary> {
    let (run, metrics) = runner::evaluate(kind, config, data)?;
    let summary = Summary::new(kind, config, metrics);
    report::write_run(out, &run, &summary)?;
    report::write_json(&out.join(CONFIG_FILE), config)?;
    Ok(summary)
}

fn print_summary(s: &Summary) {
    let m = &s.metrics;
    println!(
        "{} N={} sensors={}: rms position {:.4} m, rms heading {:.4} rad, consistency {:.4} m, median solve {:.3} ms",
        s.estimator,
        s.batch_size,
        s.sensors,
        m.rms_position_error,
        m.rms_heading_error,
        m.consistency_rms,
        m.timing.median_ms
    );
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out } => {
            let config = load_config(config.as_deref())?;
            let data = sim::simulate(&config.sim)?;
            sim::write_dataset(&data, &out)?;
            report::write_json(&out.join(CONFIG_FILE), &config)?;
            println!(
                "{} measurements ({} updates) over {} s written to {}",
                data.measurements.len(),
                data.update_count(),
                config.sim.duration,
                out.display()
            );
        }
        Command::Run {
            estimator,
            config,
            data,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            let data = dataset(&config, data.as_deref())?;
            print_summary(&run_one(estimator.into(), &config, &data, &out)?);
        }
        Command::Sweep {
            param,
            values,
            estimator,
            config,
            data,
            out,
        } => {
            let base = load_config(config.as_deref())?;
            if matches!(param, SweepParam::Sensors) && data.is_some() {
                return Err(HarnessError::Config(
                    "a sensor sweep simulates each sensor set; omit --data".into(),
                ));
            }
            let shared = match param {
                SweepParam::Sensors => None,
                _ => Some(dataset(&base, data.as_deref())?),
            };
            let mut rows = Vec::new();
            for value in &values {
                let mut config = base.clone();
                let label = match param {
                    SweepParam::BatchSize => {
                        config.estimator.batch_size = parse_count("batch_size", value)?;
                        format!("batch_size={value}")
                    }
                    SweepParam::Threads => {
                        config.estimator.threads = parse_count("threads", value)?;
                        format!("threads={value}")
                    }
                    SweepParam::Sensors => {
                        config.sim.sensors = value.parse::<SensorSet>()?;
                        format!("sensors={value}")
                    }
                };
                config.validate()?;
                let data = match &shared {
                    Some(d) => d.clone(),
                    None => sim::simulate(&config.sim)?,
                };
                let summary = run_one(estimator.into(), &config, &data, &out.join(&label))?;
                print_summary(&summary);
                rows.push(TableRow::new(label, &summary));
            }
            report::write_table(&out.join("sweep.csv"), &rows, Format::Csv)?;
            report::write_table(&out.join("sweep.json"), &rows, Format::Json)?;
        }
        Command::Report { format, input, out } => {
            let mut rows = Vec::new();
            for path in &input {
                let file = if path.is_dir() { path.join(SUMMARY_FILE) } else { path.clone() };
                let summary = report::read_summary(&file)?;
                rows.push(TableRow::new(path.display().to_string(), &summary));
            }
            match out {
                Some(path) => report::write_table(&path, &rows, format.into())?,
                None => print!("{}", report::render_table(&rows, format.into())?),
            }
        }
    }
    Ok(())
}

fn parse_count(name: &str, value: &str) -> Result<usize> {
    value
        .trim()
        .parse()
        .map_err(|_| HarnessError::Config(format!("{name} value `{value}` is not a non-negative integer")))
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
