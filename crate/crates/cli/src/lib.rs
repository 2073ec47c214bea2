//! Experiment runner behind the `misspec-lab` binary.
//!
//! Every subcommand reads one TOML file with a `[design]`, `[bandit]`, `[rl]`,
//! `[query]` or `[hardness]` section, writes CSV tables (and SVG plots unless
//! disabled) into `<out>/<subcommand>/`, and echoes the resolved configuration
//! to `config.resolved.toml` in the same directory.
//!
//! Random streams are ChaCha8 generators keyed by `(root seed, stream id)`;
//! each subcommand documents which stream ids it uses, so outputs do not
//! depend on `--jobs`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandit;
pub mod config;
pub mod design;
pub mod hardness;
pub mod output;
pub mod plot;
pub mod query;
pub mod rl;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::ConfigFile;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub(crate) fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Validation(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "misspec-lab", version, about = "Experiments with misspecified linear features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Near G-optimal design of a feature matrix.
    #[command(after_long_help = design::HELP)]
    Design(RunArgs),
    /// Regret sweeps for phased elimination and LinUCB.
    #[command(after_long_help = bandit::HELP)]
    Bandit(RunArgs),
    /// Approximate policy iteration on a core set.
    #[command(after_long_help = rl::HELP)]
    Rl(RunArgs),
    /// Query-game tables: needle search, extrapolation factors, estimator errors.
    #[command(after_long_help = query::HELP)]
    Query(RunArgs),
    /// Sizes of near-orthogonal hard instances.
    #[command(after_long_help = hardness::HELP)]
    Hardness(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Design(_) => "design",
            Command::Bandit(_) => "bandit",
            Command::Rl(_) => "rl",
            Command::Query(_) => "query",
            Command::Hardness(_) => "hardness",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Design(a) | Command::Bandit(a) | Command::Rl(a) | Command::Query(a) | Command::Hardness(a) => a,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Root seed; overrides `seed` in the file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output root; results go to `<out>/<subcommand>/`.
    #[arg(long, env = "MISSPEC_LAB_OUT", default_value = "misspec-lab-out")]
    pub out: PathBuf,
    /// Skip SVG plots.
    #[arg(long)]
    pub no_plots: bool,
}

/// Settings shared by every subcommand after command-line overrides.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub seed: u64,
    pub plots: bool,
    pub dir: PathBuf,
    /// Directory of the config file, for resolving relative paths.
    pub base: PathBuf,
}

impl RunContext {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub(crate) fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

/// Runs one subcommand and returns its output directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let args = cli.command.args();
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", args.config.display())))?;
    let file = ConfigFile::parse(&text)?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    if seed > i64::MAX as u64 {
        return invalid(format!("seed {seed} does not fit a TOML integer"));
    }
    if args.jobs == Some(0) {
        return invalid("--jobs must be at least 1");
    }
    let base = args
        .config
        .parent()
        .map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p })
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let ctx = RunContext {
        seed,
        plots: !args.no_plots && file.plots.unwrap_or(true),
        dir: args.out.join(cli.command.name()),
        base,
    };

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = args.jobs {
        builder = builder.num_threads(jobs);
    }
    let pool = builder.build().map_err(CliError::runtime)?;

    // Validate before creating anything on disk.
    let name = cli.command.name();
    let section = match &cli.command {
        Command::Design(_) => config::section_value(&file.design.clone().unwrap_or_default().resolved(&ctx)?)?,
        Command::Bandit(_) => config::section_value(&file.bandit.clone().unwrap_or_default().resolved()?)?,
        Command::Rl(_) => config::section_value(&file.rl.clone().unwrap_or_default().resolved(&ctx)?)?,
        Command::Query(_) => config::section_value(&file.query.clone().unwrap_or_default().resolved()?)?,
        Command::Hardness(_) => config::section_value(&file.hardness.clone().unwrap_or_default().resolved()?)?,
    };
    std::fs::create_dir_all(&ctx.dir)?;
    config::write_resolved(&ctx.path("config.resolved.toml"), ctx.seed, ctx.plots, name, section)?;

    pool.install(|| match &cli.command {
        Command::Design(_) => design::run(&file.design.clone().unwrap_or_default().resolved(&ctx)?, &ctx),
        Command::Bandit(_) => bandit::run(&file.bandit.clone().unwrap_or_default().resolved()?, &ctx),
        Command::Rl(_) => rl::run(&file.rl.clone().unwrap_or_default().resolved(&ctx)?, &ctx),
        Command::Query(_) => query::run(&file.query.clone().unwrap_or_default().resolved()?, &ctx),
        Command::Hardness(_) => hardness::run(&file.hardness.clone().unwrap_or_default().resolved()?, &ctx),
    })?;
    Ok(ctx.dir)
}
