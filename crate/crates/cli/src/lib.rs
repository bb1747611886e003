//! Command-line front end: data generation, training, evaluation, ablation
//! and reporting, all driven by one TOML config.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use anyhow::Result;
use aspo_core::margin::RewardLevel;
use aspo_core::trainer::LossMode;
use aspo_core::Execution;
use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "aspo",
    version,
    about = "Sentence-reweighted preference optimization on a toy model"
)]
pub struct Cli {
    /// TOML config; flags override it.
    #[arg(long, global = true, env = "ASPO_CONFIG")]
    pub config: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Reward level: response, sentence or token.
    #[arg(long, global = true)]
    pub level: Option<RewardLevel>,
    /// dpo or aspo.
    #[arg(long = "loss-mode", global = true)]
    pub loss_mode: Option<LossMode>,
    /// Similarity share of the sentence weight, in [0, 1].
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Diffusion step used to corrupt features, in [0, 1000].
    #[arg(long = "noise-step", global = true)]
    pub noise_step: Option<u32>,
    /// Disable data parallelism inside each run.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a preference dataset into a run directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset, holding out its tail for evaluation.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained run on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only the held-out tail used by `train`.
        #[arg(long)]
        heldout_only: bool,
    },
    /// DPO and the reweighted loss at each reward level from one init.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run the arms concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Loss curves of finished runs, plus an α sweep when given data.
    Report {
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run the sweep points concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

impl Cli {
    pub fn resolved_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        cfg.apply(&Overrides {
            seed: self.seed,
            level: self.level,
            loss_mode: self.loss_mode,
            alpha: self.alpha,
            noise_step: self.noise_step,
        });
        if self.sequential {
            cfg.training.execution = Execution::Sequential;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Execute a parsed command line; returns a one-line summary.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = cli.resolved_config()?;
    Ok(match &cli.command {
        Command::GenData { out } => {
            let s = commands::gen_data(&cfg, out)?;
            format!(
                "gen-data: kept {} of {} pairs, {} filtered -> {}",
                s.kept,
                s.prompts,
                s.filtered,
                out.display()
            )
        }
        Command::Train { data, out } => {
            let s = commands::train_cmd(&cfg, data, out)?;
            format!(
                "train: {} steps, final loss {:.6}, held-out accuracy {} -> {}",
                s.steps,
                s.final_train_loss,
                fmt_acc(s.heldout_before),
                fmt_acc(s.heldout_after)
            )
        }
        Command::Eval {
            data,
            run,
            out,
            heldout_only,
        } => {
            let s = commands::eval_cmd(&cfg, data, run, out, *heldout_only)?;
            format!(
                "eval: accuracy {:.4}, mean margin {:.6} over {} pairs",
                s.reward_accuracy, s.mean_margin, s.pairs
            )
        }
        Command::Ablate {
            data,
            out,
            parallel,
        } => {
            let rows = commands::ablate_cmd(&cfg, data, out, *parallel)?;
            let parts: Vec<String> = rows
                .iter()
                .map(|r| format!("{} {:.4}", r.mode, r.heldout_accuracy))
                .collect();
            format!("ablate: held-out accuracy {}", parts.join(", "))
        }
        Command::Report {
            runs,
            data,
            out,
            parallel,
        } => {
            let s = commands::report_cmd(&cfg, runs, data.as_deref(), out, *parallel)?;
            format!(
                "report: {} curves, {} sweep rows -> {}",
                s.curves.len(),
                s.alpha_sweep.len(),
                out.display()
            )
        }
    })
}

fn fmt_acc(e: Option<commands::EvalSummary>) -> String {
    e.map_or_else(
        || "n/a".to_string(),
        |e| format!("{:.4}", e.reward_accuracy),
    )
}
