//! `alst` command-line tool.
//!
//! Exit status: 0 on success, 1 on a configuration, data or validation
//! error, 2 when a numeric failure aborts the run.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use alst::analysis::SegmentPolicy;
use alst::metrics::TIE_EPSILON;
use alst::model::Branch;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "alst", version, about = "Longitudinal speech transformer for ALSFRS-R speech scores")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration with optional [synth], [train], [train.model]
    /// and [baseline] sections. Falls back to $ALST_CONFIG when unset.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every section of the configuration, overriding the file.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Output directory. Required by every subcommand except validate.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for sweep cells. Training itself is always serial.
    #[arg(long, global = true, value_name = "INT", default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic cohort: features, manifest, split and stats.
    Synth,
    /// Load a manifest with every check and report all offending records.
    Validate {
        /// Manifest (JSON lines) to check.
        manifest: PathBuf,
    },
    /// Train a model and write its checkpoint and run log.
    Train {
        /// Training cohort manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Held-out manifest for periodic evaluation (see train.eval_every).
        #[arg(long)]
        eval_manifest: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a cohort.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Readout to score: regression or classification.
        #[arg(long, default_value = "regression", value_parser = parse_branch)]
        branch: Branch,
        /// Predicted changes within this band count as no change.
        #[arg(long, default_value_t = TIE_EPSILON)]
        tie_epsilon: f64,
    },
    /// Run a sweep specification, reusing finished cells under --out.
    Sweep {
        /// Sweep specification (TOML). Relative paths resolve against its directory.
        #[arg(long)]
        spec: PathBuf,
    },
    /// Macro F1 with all frames but one phoneme's segment masked out.
    PhonemeImportance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Segment kept when a phoneme repeats: first, longest,
        /// all_separately_averaged or keep_all.
        #[arg(long, default_value = "first", value_parser = parse_policy)]
        policy: SegmentPolicy,
        #[arg(long, default_value = "regression", value_parser = parse_branch)]
        branch: Branch,
        #[arg(long, default_value_t = TIE_EPSILON)]
        tie_epsilon: f64,
    },
    /// Utterance-level linear classifier on mean-pooled features.
    Baseline {
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        test_manifest: PathBuf,
    },
    /// Merge metric reports into one comparison table.
    Report {
        /// report.json files; each row is labeled by its directory name.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn parse_branch(s: &str) -> Result<Branch, String> {
    match s {
        "regression" => Ok(Branch::Regression),
        "classification" => Ok(Branch::Classification),
        _ => Err(format!("expected regression or classification, got {s:?}")),
    }
}

fn parse_policy(s: &str) -> Result<SegmentPolicy, String> {
    s.parse().map_err(|e: alst::Error| e.to_string())
}

/// Exit status for an error: 2 when a numeric failure is anywhere in the
/// chain, 1 otherwise.
fn exit_status(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        matches!(e.downcast_ref::<alst::Error>(), Some(alst::Error::Numeric { .. }))
            || e.downcast_ref::<numcore::NumError>().is_some()
    });
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_status(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn numeric_errors_map_to_two() {
        let num = numcore::NumError::NonFinite { op: "matmul" };
        let wrapped = alst::Error::numeric("epoch 0, batch 0", num);
        assert_eq!(exit_status(&anyhow::Error::new(wrapped)), 2);
        assert_eq!(exit_status(&anyhow::anyhow!("bad config")), 1);
    }
}
