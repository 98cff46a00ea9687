//! Argument parsing and dispatch for the `ffbench` binary.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use collab_ff::analysis::LayerSet;
use collab_ff::data::DatasetName;
use collab_ff::ff::{GammaMode, Schedule};

use crate::commands::{self, EvalRequest, SweepMode};
use crate::config::{ConfigOverrides, Method};
use crate::fetch;

#[derive(Debug, Parser)]
#[command(name = "ffbench", version, about = "Forward-forward training benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Verb,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Download and verify a dataset.
    Fetch {
        #[arg(long)]
        dataset: DatasetName,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
    },
    /// Train one model (or one per seed).
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated seeds; writes one run per seed plus mean and std.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the dataset in the run's config.json.
        #[arg(long)]
        dataset: Option<DatasetName>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Comma-separated one-based layer sets, e.g. `1,2,1+2`.
        #[arg(long, value_delimiter = ',')]
        subsets: Option<Vec<LayerSet>>,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 2000)]
        entropy_eval_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one run per (method, θ) pair.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        thetas: Vec<f64>,
        /// Comma-separated; defaults to the configured method.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        /// Run up to this many child processes at once.
        #[arg(long)]
        parallel: Option<usize>,
    },
}

/// Flags mirroring the run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML or JSON file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<DatasetName>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub gamma_mode: Option<GammaMode>,
    #[arg(long)]
    pub schedule: Option<Schedule>,
    #[arg(long, allow_negative_numbers = true)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub layer_dims: Option<Vec<usize>>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub entropy_eval_n: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub train_subset: Option<usize>,
    #[arg(long)]
    pub negatives_per_positive: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub inference_layers: Option<Vec<usize>>,
    #[arg(long)]
    pub classic_normalize: Option<bool>,
}

impl RunArgs {
    fn flag_overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            dataset: self.dataset,
            data_dir: self.data_dir.clone(),
            method: self.method,
            gamma_mode: self.gamma_mode,
            schedule: self.schedule,
            theta: self.theta,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            layer_dims: self.layer_dims.clone(),
            output_dir: self.output_dir.clone(),
            entropy_eval_n: self.entropy_eval_n,
            eval_every: self.eval_every,
            train_subset: self.train_subset,
            negatives_per_positive: self.negatives_per_positive,
            inference_layers: self.inference_layers.clone(),
            classic_normalize: self.classic_normalize,
        }
    }

    /// Flags over the config file over the defaults.
    pub fn overrides(&self) -> Result<ConfigOverrides> {
        let file = match &self.config {
            Some(path) => ConfigOverrides::from_file(path)?,
            None => ConfigOverrides::default(),
        };
        Ok(file.merged_with(&self.flag_overrides()))
    }
}

/// Flattens an error chain onto a single line.
pub fn one_line(e: &anyhow::Error) -> String {
    format!("{e:#}").replace('\n', " ")
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Verb::Fetch { dataset, data_dir } => {
            let (dir, report) = fetch::fetch_dataset(&data_dir, dataset)?;
            println!(
                "{dataset}: {} downloaded, {} already verified in {}",
                report.downloaded.len(),
                report.cached.len(),
                dir.display()
            );
        }
        Verb::Train { run, seeds } => {
            let cfg = run.overrides()?.resolve()?;
            match seeds {
                Some(seeds) => {
                    let s = commands::train_seeds(&cfg, &seeds)?;
                    println!("test error {:.4} ± {:.4} over {} seeds", s.mean, s.std, s.runs.len());
                }
                None => {
                    let s = commands::train(&cfg)?;
                    println!("test error {:.4} ({})", s.final_test_error, cfg.output_dir.display());
                }
            }
        }
        Verb::Eval { checkpoint, dataset, data_dir, subsets, output_dir, entropy_eval_n, seed } => {
            let s = commands::eval(&EvalRequest {
                checkpoint,
                dataset,
                data_dir,
                subsets,
                output_dir,
                entropy_eval_n,
                seed,
            })?;
            println!("test error {:.4} on {} samples", s.test_error, s.sample_count);
        }
        Verb::Sweep { run, thetas, methods, parallel } => {
            let cfg = run.overrides()?.resolve()?;
            let methods = methods.unwrap_or_else(|| vec![cfg.method]);
            let mode = match parallel {
                Some(jobs) => SweepMode::Processes { exe: std::env::current_exe()?, jobs },
                None => SweepMode::InProcess,
            };
            for row in commands::sweep(&cfg, &methods, &thetas, &mode)? {
                println!("{} theta {}: {:.4}", row.method, row.theta, row.final_test_error);
            }
        }
    }
    Ok(())
}
