//! Command-line front end.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};
use serde::Serialize;

use crate::algorithms::AlgorithmVariant;
use crate::metrics::{write_csv, MetricsRecord};
use crate::scenario::{compare, write_compare_csv, DecisionScenario, Overrides, Scenario, ScenarioError, DECISION_SCHEMA, SCENARIO_SCHEMA};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_INCORRECT: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "migrasim", version, about = "Simulate operator migration in a stream processing pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Args, Debug, Clone)]
pub struct OutputArgs {
    /// Directory for result files; defaults to the scenario's output.dir, else stdout.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one scenario and export its metrics.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<AlgorithmVariant>,
        /// Also write the full event logs as JSON.
        #[arg(long)]
        trace: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run several variants on the same workload.
    Compare {
        scenario: PathBuf,
        /// Variants to compare; all of them when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<AlgorithmVariant>,
        /// Workload seeds; the scenario's seed when omitted.
        #[arg(long = "seed", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Evaluate a decision scenario check by check.
    Decide {
        scenario: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Check a scenario or decision scenario without running it.
    Validate { scenario: PathBuf },
}

/// Installs the logger; `MIGRASIM_LOG` takes env_logger filter syntax.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("MIGRASIM_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_SCHEMA } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(CliError::Scenario(e)) if e.is_invalid_input() => {
            eprintln!("error: {e}");
            EXIT_SCHEMA
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("writing {path}: {source}")]
    Write { path: String, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Where results go: a directory, or stdout when none is set.
struct Sink {
    dir: Option<PathBuf>,
}

impl Sink {
    fn new(flag: &Option<PathBuf>, scenario_dir: Option<&str>, base: &Path) -> Result<Self, CliError> {
        let dir = flag.clone().or_else(|| scenario_dir.map(|d| base.parent().unwrap_or(Path::new(".")).join(d)));
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|source| CliError::Write { path: d.display().to_string(), source })?;
        }
        Ok(Sink { dir })
    }

    fn write(&self, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<(), CliError>) -> Result<(), CliError> {
        match &self.dir {
            Some(d) => {
                let path = d.join(name);
                let file = File::create(&path).map_err(|source| CliError::Write { path: path.display().to_string(), source })?;
                let mut w = BufWriter::new(file);
                f(&mut w)?;
                w.flush().map_err(|source| CliError::Write { path: path.display().to_string(), source })?;
                info!("wrote {}", path.display());
                Ok(())
            }
            None => {
                let stdout = io::stdout();
                let mut lock = stdout.lock();
                f(&mut lock)
            }
        }
    }
}

fn json_to(w: &mut dyn Write, value: &impl Serialize) -> Result<(), CliError> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    writeln!(w).map_err(|source| CliError::Write { path: "output".into(), source })
}

#[derive(Serialize)]
struct RunSummary<'a> {
    scenario: &'a str,
    variant: Option<&'a str>,
    status: String,
    correct: bool,
    expected_outputs: Option<u64>,
    missing_outputs: Option<u64>,
    unexpected_outputs: Option<u64>,
    metrics: Option<&'a MetricsRecord>,
    decisions: &'a [String],
}

fn execute(cmd: Command) -> Result<i32, CliError> {
    match cmd {
        Command::Run { scenario, seed, variant, trace, output } => {
            let s = Scenario::load(&scenario)?.with_overrides(&Overrides { seed, variant });
            let sink = Sink::new(&output.out_dir, s.output.dir.as_deref(), &scenario)?;
            info!("running {}", scenario.display());
            let result = s.run()?;
            let correct = result.is_correct();
            let report = result.report.as_ref();
            match output.format {
                Format::Csv => {
                    let rows: Vec<MetricsRecord> = report.iter().map(|r| r.metrics.clone()).collect();
                    sink.write("metrics.csv", |w| Ok(write_csv(w, &rows)?))?;
                }
                Format::Json => {
                    let summary = RunSummary {
                        scenario: &s.name,
                        variant: s.migration.as_ref().map(|m| m.variant.name()),
                        status: report.map_or("none".into(), |r| format!("{:?}", r.status).to_lowercase()),
                        correct,
                        expected_outputs: report.and_then(|r| r.outputs.as_ref()).map(|o| o.expected),
                        missing_outputs: report.and_then(|r| r.outputs.as_ref()).map(|o| o.missing),
                        unexpected_outputs: report.and_then(|r| r.outputs.as_ref()).map(|o| o.unexpected),
                        metrics: report.map(|r| &r.metrics),
                        decisions: &result.decision_log,
                    };
                    sink.write("metrics.json", |w| json_to(w, &summary))?;
                }
            }
            if trace {
                if let Some(r) = report {
                    sink.write("trace.json", |w| json_to(w, &r.run.log))?;
                    if let Some(b) = &r.baseline {
                        sink.write("baseline_trace.json", |w| json_to(w, &b.log))?;
                    }
                }
            }
            if !correct {
                if let Some(r) = report {
                    error!("correctness check failed: status {:?}, outputs {:?}", r.status, r.outputs);
                }
                return Ok(EXIT_INCORRECT);
            }
            Ok(EXIT_OK)
        }
        Command::Compare { scenario, variants, seeds, output } => {
            let s = Scenario::load(&scenario)?;
            let sink = Sink::new(&output.out_dir, s.output.dir.as_deref(), &scenario)?;
            let variants = if variants.is_empty() { AlgorithmVariant::ALL.to_vec() } else { variants };
            let seeds = if seeds.is_empty() { vec![s.seed.unwrap_or(s.workload.seed)] } else { seeds };
            let rows = compare(&s, &variants, &seeds)?;
            match output.format {
                Format::Csv => sink.write("compare.csv", |w| Ok(write_compare_csv(w, &rows)?))?,
                Format::Json => {
                    #[derive(Serialize)]
                    struct Row<'a> {
                        seed: u64,
                        variant: &'a str,
                        correct: bool,
                        metrics: &'a MetricsRecord,
                    }
                    let out: Vec<Row> = rows.iter().map(|r| Row { seed: r.seed, variant: r.variant.name(), correct: r.correct, metrics: &r.metrics }).collect();
                    sink.write("compare.json", |w| json_to(w, &out))?;
                }
            }
            Ok(if rows.iter().all(|r| r.correct) { EXIT_OK } else { EXIT_INCORRECT })
        }
        Command::Decide { scenario, output } => {
            let d = DecisionScenario::load(&scenario)?;
            let table = d.decide()?;
            let sink = Sink::new(&output.out_dir, None, &scenario)?;
            match output.format {
                Format::Csv => sink.write("decisions.csv", |w| Ok(table.write_csv(w)?))?,
                Format::Json => sink.write("decisions.json", |w| json_to(w, &table))?,
            }
            Ok(EXIT_OK)
        }
        Command::Validate { scenario } => {
            let text = fs::read_to_string(&scenario)
                .map_err(|source| ScenarioError::Io { path: scenario.display().to_string(), source })?;
            let schema = serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .and_then(|v| v.get("schema").and_then(|s| s.as_str()).map(str::to_string));
            match schema.as_deref() {
                Some(DECISION_SCHEMA) => {
                    DecisionScenario::parse(&text)?;
                }
                _ => {
                    Scenario::parse(&text)?;
                }
            }
            println!("{}: ok ({})", scenario.display(), schema.as_deref().unwrap_or(SCENARIO_SCHEMA));
            Ok(EXIT_OK)
        }
    }
}
