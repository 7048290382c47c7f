use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use gapcast::commands;
use gapcast::config::{RunConfig, SweepAxis};
use gapcast_core::bench::ImputerKind;
use gapcast_core::forecast::Resampling;
use gapcast_core::missing::Mechanism;

/// Probabilistic forecasting of wind power series with missing values.
#[derive(Parser, Debug)]
#[command(name = "gapcast", version)]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags override the matching config keys.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML config file; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Seed for masks, training and forecasts.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Input CSV (`timestamp,<site>...`). Without it the synthetic AR(2)
    /// series is used.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// 0/1 mask CSV aligned with --data (1 = missing).
    #[arg(long, global = true)]
    mask: Option<PathBuf>,
    #[arg(long, global = true)]
    target: Option<String>,
    /// Comma-separated auxiliary sites.
    #[arg(long, global = true, value_delimiter = ',')]
    aux: Option<Vec<String>>,
    #[arg(long, global = true)]
    h: Option<usize>,
    #[arg(long, global = true)]
    lead: Option<usize>,
    #[arg(long, global = true)]
    mechanism: Option<Mechanism>,
    #[arg(long, global = true)]
    missing_rate: Option<f64>,
    #[arg(long, global = true)]
    aux_missing_rate: Option<f64>,
    /// Importance samples per window in the training bound.
    #[arg(short = 'k', long = "k", global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    latent_dim: Option<usize>,
    #[arg(long, global = true)]
    n_flows: Option<usize>,
    /// Proposals per forecast.
    #[arg(short = 'L', long = "l", global = true)]
    l: Option<usize>,
    /// Samples kept per forecast.
    #[arg(short = 'M', long = "m", global = true)]
    m: Option<usize>,
    #[arg(long, global = true)]
    resampling: Option<Resampling>,
    #[arg(long, global = true)]
    imputer: Option<ImputerKind>,
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic AR(2) series as CSV.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply simulated gaps; writes masked.csv and mask.csv.
    Simulate,
    /// Train the model; writes model.json and trace.csv.
    Train {
        /// Continue from a checkpoint up to --epochs in total.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Forecast every test origin; writes forecasts.csv and quantiles.csv.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score sample files; writes report.json, reliability.csv, sharpness.csv.
    Evaluate {
        /// Sample files written by `forecast`.
        #[arg(long = "forecasts", required = true, num_args = 1..)]
        forecasts: Vec<PathBuf>,
        /// Model names, one per file (default: file stem).
        #[arg(long = "name")]
        names: Vec<String>,
    },
    /// Train the model, run the baselines and score all of them.
    Benchmark {
        /// Use this trained model instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Repeat the whole cycle over one parameter.
    Sweep {
        #[arg(long)]
        axis: Option<SweepAxis>,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Also run the baselines at every point.
        #[arg(long)]
        baselines: bool,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.missing.seed = s;
            cfg.forecast.seed = s;
            cfg.bench.gauss.seed = s;
        }
        set(&mut cfg.output_dir, &self.output_dir);
        if self.data.is_some() {
            cfg.data.path = self.data.clone();
        }
        if self.mask.is_some() {
            cfg.data.mask_path = self.mask.clone();
        }
        set(&mut cfg.data.target, &self.target);
        set(&mut cfg.data.aux, &self.aux);
        set(&mut cfg.data.h, &self.h);
        set(&mut cfg.data.lead, &self.lead);
        set(&mut cfg.missing.mechanism, &self.mechanism);
        set(&mut cfg.missing.rate, &self.missing_rate);
        if self.aux_missing_rate.is_some() {
            cfg.missing.aux_rate = self.aux_missing_rate;
        }
        set(&mut cfg.train.k, &self.k);
        set(&mut cfg.train.epochs, &self.epochs);
        set(&mut cfg.train.lr, &self.lr);
        set(&mut cfg.train.batch_size, &self.batch_size);
        set(&mut cfg.model.latent_dim, &self.latent_dim);
        set(&mut cfg.model.n_flows, &self.n_flows);
        set(&mut cfg.forecast.l, &self.l);
        set(&mut cfg.forecast.m, &self.m);
        set(&mut cfg.forecast.resampling, &self.resampling);
        set(&mut cfg.bench.imputer, &self.imputer);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cli.opts.apply(&mut cfg);
    if let Command::Sweep {
        axis,
        values,
        baselines,
        jobs,
    } = &cli.command
    {
        if let Some(a) = axis {
            cfg.sweep.axis = *a;
        }
        if let Some(v) = values {
            cfg.sweep.values = v.clone();
        }
        cfg.sweep.baselines |= *baselines;
        if let Some(j) = jobs {
            cfg.sweep.jobs = *j;
        }
    }
    cfg.validate()?;
    log::debug!("config {}:\n{}", cfg.hash(), cfg.canonical());
    match &cli.command {
        Command::Synth { out } => commands::synth(&cfg, out.as_deref()).map(drop),
        Command::Simulate => commands::simulate(&cfg),
        Command::Train { resume } => commands::train(&cfg, resume.as_deref()).map(drop),
        Command::Forecast { checkpoint } => commands::forecast(&cfg, checkpoint),
        Command::Evaluate { forecasts, names } => commands::evaluate(&cfg, forecasts, names).map(drop),
        Command::Benchmark { checkpoint } => commands::benchmark(&cfg, checkpoint.as_deref()).map(drop),
        Command::Sweep { .. } => commands::sweep(&cfg).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.opts.log)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .filter_map(|c| c.downcast_ref::<gapcast_core::Error>())
                .any(gapcast_core::Error::is_numerical);
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
