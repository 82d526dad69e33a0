//! `stylebridge` command-line driver.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod config;
mod data;
mod error;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stylebridge::engine::{StVariant, TrainConfig};
use stylebridge::stream::DomainSpec;

use crate::config::{load_toml, under_root, RunConfig};
use crate::error::CliResult;

/// Continual test-time adaptation experiments on procedural glyph streams.
///
/// Relative paths resolve against $STYLEBRIDGE_OUT_ROOT (default: the
/// working directory). Exit codes: 0 success, 2 usage, 3 runtime abort,
/// 4 I/O.
#[derive(Parser)]
#[command(name = "stylebridge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural class-exemplar knowledge base as PPM files.
    GenKb {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 2)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "kb")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Materialize a corrupted target stream to disk.
    GenData {
        /// Comma-separated `kind@severity` list; default all kinds at 5.
        #[arg(long, value_delimiter = ',')]
        domains: Vec<DomainSpec>,
        #[arg(long, default_value_t = 20)]
        batches_per_domain: usize,
        #[arg(long, default_value_t = 50)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        mixed: bool,
        #[arg(long, default_value = "stream")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the source model on clean glyphs.
    TrainSource {
        /// TOML training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "source")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run one online adaptation episode.
    Adapt {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        force: bool,
    },
    /// Run the component grid over shared seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Exemplars per class; one grid per size.
        #[arg(long, value_delimiter = ',')]
        kb_size: Vec<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Aggregate finished runs into per-domain and loss-trace tables.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

/// Run config file plus flag overrides.
#[derive(Args)]
struct RunArgs {
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source checkpoint directory.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = commands::st_variant_from)]
    st_variant: Option<StVariant>,
    #[arg(long)]
    mixed: bool,
    #[arg(long, value_delimiter = ',')]
    domains: Option<Vec<DomainSpec>>,
    #[arg(long)]
    batches_per_domain: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Materialized stream directory from gen-data.
    #[arg(long)]
    stream: Option<PathBuf>,
    /// Exemplar directory from gen-kb.
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    per_class: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> CliResult<RunConfig> {
        let mut cfg: RunConfig = load_toml(self.config.as_deref())?;
        if let Some(v) = &self.source {
            cfg.source = v.clone();
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.adapt.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.adapt.lr = v;
        }
        if let Some(v) = self.st_variant {
            cfg.adapt.st_variant = v;
        }
        if self.mixed {
            cfg.stream.mixed = true;
        }
        if let Some(v) = &self.domains {
            cfg.stream.domains = v.iter().map(ToString::to_string).collect();
        }
        if let Some(v) = self.batches_per_domain {
            cfg.stream.batches_per_domain = v;
        }
        if let Some(v) = self.batch_size {
            cfg.adapt.batch_size = v;
        }
        if let Some(v) = &self.stream {
            cfg.stream.path = Some(v.clone());
        }
        if let Some(v) = &self.kb {
            cfg.kb.path = Some(v.clone());
        }
        if let Some(v) = self.per_class {
            cfg.kb.per_class = v;
        }
        Ok(cfg)
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenKb {
            classes,
            per_class,
            seed,
            out,
            force,
        } => commands::gen_kb(classes, per_class, seed, &under_root(&out), force),
        Command::GenData {
            domains,
            batches_per_domain,
            batch_size,
            seed,
            mixed,
            out,
            force,
        } => {
            let domains = if domains.is_empty() {
                DomainSpec::all_at(5)?
            } else {
                domains
            };
            let args = commands::DataArgs {
                domains,
                batches_per_domain,
                batch_size,
                seed,
                mixed,
            };
            commands::gen_data(&args, &under_root(&out), force)
        }
        Command::TrainSource {
            config,
            epochs,
            lr,
            samples,
            seed,
            out,
            force,
        } => {
            let mut cfg: TrainConfig = load_toml(config.as_deref())?;
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.lr = lr.unwrap_or(cfg.lr);
            cfg.samples = samples.unwrap_or(cfg.samples);
            cfg.seed = seed.unwrap_or(cfg.seed);
            commands::train(&cfg, &under_root(&out), force)
        }
        Command::Adapt { run, force } => commands::adapt(&run.config()?, force),
        Command::Ablate {
            run,
            seeds,
            kb_size,
            force,
        } => {
            let cfg = run.config()?;
            let sizes = if kb_size.is_empty() {
                vec![cfg.kb.per_class]
            } else {
                kb_size
            };
            commands::ablate(&cfg, &seeds, &sizes, force).map(|_| ())
        }
        Command::Report { runs, out, force } => {
            let out = under_root(&out);
            config::prepare_out_dir(&out, force)?;
            let runs: Vec<PathBuf> = runs.iter().map(|r| under_root(r)).collect();
            report::write_reports(&runs, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
