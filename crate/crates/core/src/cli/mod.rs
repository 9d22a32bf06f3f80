//! The `ddic` command-line tool.
//!
//! Every command reads a TOML configuration (`--config`), applies flag
//! overrides (flags win over file values), writes its outputs under `--out`
//! and finishes with a `manifest.json` describing the run.

mod commands;
mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{
    EvaluateSection, Method, MethodDir, PhantomSection, PreprocessSection, RunConfig, TrainSection, TranslateSection,
};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "ddic", version, about = "Unpaired image translation with diffusion bridges")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed (overrides the configuration).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-item parallelism. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter, align, resample and normalize an annotated dataset.
    Preprocess {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train an ε-prediction denoiser on one image domain.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed steps, as if interrupted.
        #[arg(long, hide = true)]
        halt_after: Option<usize>,
    },
    /// Translate source-domain images with two trained denoisers.
    Translate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        method: Option<Method>,
        /// DDIC gradient step size.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score translated images against their sources.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Render synthetic two-domain phantoms.
    PhantomGen {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of phantoms (overrides the configuration).
        #[arg(long)]
        count: Option<usize>,
    },
}

/// Configuration after flag overrides, plus the common flags.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub jobs: usize,
    pub force: bool,
}

impl Context {
    fn new(common: &CommonArgs) -> Result<Context> {
        let mut config = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        if let Some(out) = &common.out {
            config.out = Some(out.clone());
        }
        let out = config
            .out
            .clone()
            .ok_or_else(|| Error::Config("no output directory: set `out` or pass --out".into()))?;
        if common.jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        Ok(Context {
            config,
            out,
            jobs: common.jobs,
            force: common.force,
        })
    }

    /// Creates the output directory, refusing to reuse a non-empty one unless
    /// forced or explicitly resuming.
    fn prepare_out(&self, reuse: bool) -> Result<()> {
        if self.out.exists() {
            let non_empty = std::fs::read_dir(&self.out)
                .map_err(|e| Error::io(&self.out, e))?
                .next()
                .is_some();
            if non_empty && !self.force && !reuse {
                return Err(Error::Config(format!(
                    "output directory {} is not empty; pass --force to overwrite",
                    self.out.display()
                )));
            }
        }
        create_dir(&self.out)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", self.jobs)))
    }
}

pub(crate) fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Runs one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { common } => commands::preprocess(&Context::new(&common)?),
        Command::Train {
            common,
            resume,
            halt_after,
        } => commands::train(&Context::new(&common)?, resume, halt_after),
        Command::Translate { common, method, lr } => {
            let mut ctx = Context::new(&common)?;
            let section = ctx.config.translate.get_or_insert_with(Default::default);
            if let Some(m) = method {
                section.method = m;
            }
            if let Some(lr) = lr {
                section.ddic.lr = lr;
            }
            commands::translate(&ctx)
        }
        Command::Evaluate { common } => commands::evaluate(&Context::new(&common)?),
        Command::PhantomGen { common, count } => {
            let mut ctx = Context::new(&common)?;
            let section = ctx.config.phantom.get_or_insert_with(Default::default);
            if let Some(n) = count {
                section.count = n;
            }
            commands::phantom_gen(&ctx)
        }
    }
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses the process arguments, runs, and returns the exit status.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
