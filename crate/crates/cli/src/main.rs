//! `biooss` command-line front end.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::learn::{LearnConfig, Mode};
use config::{load, CommandConfig, Overrides};
use error::{CliError, CliResult};
use output::{resolve_out, Run};

#[derive(Parser)]
#[command(name = "biooss", version, about = "Oscillatory wave-grid simulation, analysis and training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Sequential,
    Scan,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; all keys are optional.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set grid.height=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (default: $BIOOSS_OUT, then ./biooss_out).
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    /// Refuse to run with parameters that fail the stability check.
    #[arg(long)]
    strict: bool,
    /// Cap on worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Single worker, canonical reduction order.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the grid and write field snapshots.
    Simulate(Common),
    /// Per-cell eigenvalues, frequency heatmap and stability report.
    EigenReport(Common),
    /// Four-quadrant frequency-selectivity experiment and band sweep.
    Quadrant(Common),
    /// Train a model end to end (full mode by default).
    Train(Common),
    /// Ridge readout on fixed dynamics (ridge mode by default).
    Classify(Common),
    /// Wall time against sequence length and grid size; scan work count.
    Bench(Common),
    /// Write the synthetic tone-discrimination task as a dataset directory.
    MakeDataset(Common),
}

fn load_cfg<C: CommandConfig>(c: &Common) -> CliResult<C> {
    let engine = c.engine.map(|e| match e {
        EngineArg::Sequential => "sequential",
        EngineArg::Scan => "scan",
    });
    load(c.config.as_deref(), &Overrides { seed: c.seed, engine, set: &c.set })
}

fn setup_threads(c: &Common) -> CliResult<()> {
    let n = if c.deterministic { Some(1) } else { c.threads };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn learn(c: &Common, name: &'static str, default: Mode) -> CliResult<PathBuf> {
    let mut cfg: LearnConfig = load_cfg(c)?;
    cfg.mode.get_or_insert(default);
    if cfg.run_id == LearnConfig::default().run_id {
        cfg.run_id = name.into();
    }
    let mut run = Run::new(resolve_out(c.out.as_deref()), name)?;
    let summary = commands::learn::run(&cfg, &mut run)?;
    run.finish(&cfg, summary)
}

fn execute(cmd: Command) -> CliResult<PathBuf> {
    let c = match &cmd {
        Command::Simulate(c)
        | Command::EigenReport(c)
        | Command::Quadrant(c)
        | Command::Train(c)
        | Command::Classify(c)
        | Command::Bench(c)
        | Command::MakeDataset(c) => c.clone(),
    };
    setup_threads(&c)?;
    let out = resolve_out(c.out.as_deref());
    match cmd {
        Command::Simulate(_) => {
            let cfg: commands::simulate::SimulateConfig = load_cfg(&c)?;
            let mut run = Run::new(out, "simulate")?;
            let s = commands::simulate::run(&cfg, &mut run, c.strict)?;
            run.finish(&cfg, s)
        }
        Command::EigenReport(_) => {
            let cfg: commands::eigen::EigenConfig = load_cfg(&c)?;
            let mut run = Run::new(out, "eigen-report")?;
            let s = commands::eigen::run(&cfg, &mut run, c.strict)?;
            run.finish(&cfg, s)
        }
        Command::Quadrant(_) => {
            let cfg: commands::quadrant::QuadrantFile = load_cfg(&c)?;
            let mut run = Run::new(out, "quadrant")?;
            let s = commands::quadrant::run(&cfg, &mut run)?;
            run.finish(&cfg, s)
        }
        Command::Train(_) => learn(&c, "train", Mode::Full),
        Command::Classify(_) => learn(&c, "classify", Mode::Ridge),
        Command::Bench(_) => {
            let cfg: commands::bench::BenchConfig = load_cfg(&c)?;
            let mut run = Run::new(out, "bench")?;
            let s = commands::bench::run(&cfg, &mut run)?;
            run.finish(&cfg, s)
        }
        Command::MakeDataset(_) => {
            let cfg: commands::dataset::MakeDatasetConfig = load_cfg(&c)?;
            let mut run = Run::new(out, "make-dataset")?;
            let s = commands::dataset::run_make(&cfg, &mut run)?;
            run.finish(&cfg, s)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
