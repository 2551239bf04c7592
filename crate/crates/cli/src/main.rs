use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pae_core::harness::config::RunConfig;
use pae_core::harness::pipeline::{
    stage_metrics, stage_refine_prior, stage_report, stage_sample, stage_sweep, stage_train_generator,
    stage_train_tokenizer,
};
use pae_core::harness::run_dir::RunDir;
use pae_core::harness::sweep::SweepKnob;

#[derive(Parser)]
#[command(name = "pae", version, about = "Prior-aligned latent tokenizer pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config. Overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in config when no --config is given.
    #[arg(long, global = true, default_value = "toy")]
    preset: String,
    /// Root seed; replaces the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = "PAE_RUN_DIR", default_value = "runs/default")]
    run_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Refine backbone features into per-image priors.
    RefinePrior,
    /// Train the tokenizer and dump held-out latents.
    TrainTokenizer,
    /// Train the flow-matching generator on tokenizer latents.
    TrainGenerator,
    /// Sample latents, decode them and write images.
    Sample,
    /// Geometry metrics over a latent dump.
    Metrics(MetricsArgs),
    /// Train one tokenizer per knob value and correlate metrics with outcomes.
    Sweep(SweepArgs),
    /// Collect every report of the run into one summary.
    Report,
    /// Print the resolved config as TOML.
    Config,
}

#[derive(Args)]
struct MetricsArgs {
    /// Directory with latents.paet and optional labels.paet, masks.paet.
    /// Defaults to the run's held-out dump.
    #[arg(long)]
    latents: Option<PathBuf>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    #[arg(long)]
    subsets: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// dim, lambda-ssr, lambda-mcr or lambda-scr
    #[arg(long)]
    knob: SweepKnob,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::preset(&c.preset)?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let run = RunDir::open(&cli.common.run_dir, &cfg)?;
    match cli.command {
        Command::RefinePrior => print(&stage_refine_prior(&run, &cfg)?),
        Command::TrainTokenizer => print(&stage_train_tokenizer(&run, &cfg)?),
        Command::TrainGenerator => {
            let log = stage_train_generator(&run, &cfg)?;
            let (first, last) = (log.losses.first(), log.losses.last());
            println!("flow loss {:?} -> {:?} over {} steps", first, last, log.losses.len());
            Ok(())
        }
        Command::Sample => print(&stage_sample(&run, &cfg)?),
        Command::Metrics(a) => {
            let mut m = cfg.metrics.clone();
            if let Some(s) = a.sigma {
                m.sigma = s;
            }
            if let Some(s) = a.scales {
                m.lpc_scales = s;
            }
            if let Some(s) = a.subsets {
                m.gsq_subsets = s;
            }
            let seed = cli.common.seed.unwrap_or(cfg.seed);
            print(&stage_metrics(&run, &cfg, &m, a.latents, seed)?)
        }
        Command::Sweep(a) => {
            if a.values.is_empty() {
                bail!("--values needs at least one value");
            }
            print(&stage_sweep(&run, &cfg, a.knob, &a.values)?)
        }
        Command::Report => print(&stage_report(&run)?),
        Command::Config => unreachable!(),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
