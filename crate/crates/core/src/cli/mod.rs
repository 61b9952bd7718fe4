//! Command-line surface: argument parsing, configuration, file formats,
//! plots and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod io;
pub mod plot;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::embed::EmbedMethod;
use crate::env::EnvId;
use crate::error::{config_err, Result};
use commands::{cmd_ablate, cmd_analyze, cmd_embed, cmd_repro, cmd_train, AblateOptions, EmbedOptions};
use config::{worker_threads, RunConfig, TracePolicy};

#[derive(Debug, Parser)]
#[command(name = "ablscope", version, about = "Train DDPG agents, ablate actor units and analyse the effects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML run configuration; command-line flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an agent and write checkpoints, learning curve and manifest.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        env: Option<EnvId>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep sliding-window ablations over one actor layer.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        layer: u8,
        /// Comma-separated fractions; `0` alone runs the baseline only.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// all | first | baseline | none
        #[arg(long)]
        traces: Option<TracePolicy>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn a sweep directory into report figures and statistics.
    Analyze {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed an activation trace in 2-D and label behavioral phases.
    Embed {
        #[command(flatten)]
        config: ConfigArg,
        /// A `*_layerN.csv` trace.
        #[arg(long)]
        trace: PathBuf,
        /// Second trace fitted jointly with the first for overlay plots.
        #[arg(long)]
        ablated_trace: Option<PathBuf>,
        /// pca | neighbor
        #[arg(long)]
        method: Option<EmbedMethod>,
        /// Environment for phase labels when the trace has no metadata.
        #[arg(long)]
        env: Option<EnvId>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train several seeds, keep the best, sweep both layers and analyze.
    Repro {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration as TOML.
    Defaults,
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    match flag.or_else(|| cfg.out.clone()) {
        Some(p) => Ok(p),
        None => config_err("no output directory: pass --out or set `out` in the config"),
    }
}

fn log(line: &str) {
    eprintln!("{line}");
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, env, steps, seed, out } => {
            let cfg = load_config(&config)?;
            let mut train = cfg.train.clone();
            if let Some(e) = env {
                train.env = e;
            }
            if let Some(s) = steps {
                train.total_steps = s;
            }
            if let Some(s) = seed {
                train.seed = s;
            }
            let out = out_dir(out, &cfg)?;
            let r = cmd_train(&train, &out, &log)?;
            println!(
                "checkpoint {} (sha256 {}), best eval return {}",
                out.join(commands::CHECKPOINT_FILE).display(),
                r.manifest.checkpoint_hash,
                r.manifest.best_eval_return.map_or("n/a".to_owned(), |v| format!("{v:.3}"))
            );
        }
        Command::Ablate {
            config,
            ckpt,
            layer,
            fractions,
            stride,
            episodes,
            seed,
            traces,
            threads,
            out,
        } => {
            let cfg = load_config(&config)?;
            let mut opts = AblateOptions::from_config(&cfg, layer as usize);
            if let Some(f) = fractions {
                opts.fractions = f;
            }
            if let Some(s) = stride {
                opts.stride = s;
            }
            if let Some(e) = episodes {
                opts.episodes = e;
            }
            if let Some(s) = seed {
                opts.seed = s;
            }
            if let Some(t) = traces {
                opts.traces = t;
            }
            if threads.is_some() {
                opts.threads = worker_threads(threads);
            }
            let out = out_dir(out, &cfg)?;
            let summary = cmd_ablate(&Checkpoint::load(&ckpt)?, &opts, &out, &log)?;
            println!(
                "{} rows ({} failed), baseline return {:.3}, summary {}",
                summary.rows.len(),
                summary.failed.len(),
                summary.r_base,
                out.join(commands::SWEEP_SUMMARY_FILE).display()
            );
        }
        Command::Analyze { sweep, out } => {
            let r = cmd_analyze(&sweep, &out)?;
            println!(
                "{} layer {}: {} fractions, spearman(fraction, median) = {}",
                r.env,
                r.layer,
                r.fractions.len(),
                r.spearman_fraction_vs_median.map_or("n/a".to_owned(), |v| format!("{v:.3}"))
            );
        }
        Command::Embed {
            config,
            trace,
            ablated_trace,
            method,
            env,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let mut opts = EmbedOptions::from(&cfg.embed);
            if let Some(m) = method {
                opts.method = m;
            }
            if let Some(s) = seed {
                opts.seed = s;
            }
            opts.env = env;
            let r = cmd_embed(&trace, ablated_trace.as_deref(), &opts, &out)?;
            println!("{} rows embedded with {}", r.rows + r.ablated_rows.unwrap_or(0), r.method);
        }
        Command::Repro { config, out } => {
            let cfg = load_config(&config)?;
            let out = out_dir(out, &cfg)?;
            let r = cmd_repro(&cfg, &out, &log)?;
            for e in &r.envs {
                println!(
                    "{}: seed {} eval return {}",
                    e.env,
                    e.chosen_seed,
                    e.chosen_return.map_or("n/a".to_owned(), |v| format!("{v:.3}"))
                );
            }
            println!("report {}", Path::new(&out).join("report.json").display());
        }
        Command::Defaults => print!("{}", RunConfig::defaults_toml()),
    }
    Ok(())
}
