use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use layersep::denoiser::PromptInit;
use layersep::scorer::ScorerKind;

use crate::config::VaeVariant;

/// Reflection removal on synthetic layered scenes: data generation, training,
/// sampling and evaluation inside one run directory.
#[derive(Debug, Parser)]
#[command(name = "layersep", version, propagate_version = true)]
pub struct Cli {
    /// Run directory holding data, checkpoints, logs, outputs and reports.
    #[arg(long, global = true, env = "LAYERSEP_RUN_DIR", default_value = "run")]
    pub run_dir: PathBuf,

    /// TOML file layered over the run's persisted configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train and test corpora.
    GenData(GenDataArgs),
    /// Train one model.
    Train {
        #[command(subcommand)]
        target: TrainTarget,
    },
    /// Restore a single image.
    Sample(SampleArgs),
    /// Score restorations of the test split against clean backgrounds.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Training samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Test samples.
    #[arg(long)]
    pub test_n: Option<usize>,
    /// Data seed; each split derives its own corpus seed from it.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainOpts {
    /// Total optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Initialization and batch-order seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Samples per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Continue from the existing checkpoint instead of starting over.
    #[arg(long)]
    pub resume: bool,
    /// Steps between checkpoint saves.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum TrainTarget {
    /// Autoencoder; equivariance-regularized unless --no-equiv.
    Vae {
        #[command(flatten)]
        opts: TrainOpts,
        /// Reconstruction loss only.
        #[arg(long)]
        no_equiv: bool,
    },
    /// Latent flow denoiser on top of a trained autoencoder.
    Denoiser {
        #[command(flatten)]
        opts: TrainOpts,
        /// Task embedding mode: fix, learned or random.
        #[arg(long, value_parser = parse_prompt)]
        prompt: Option<PromptInit>,
        /// Autoencoder to train on.
        #[arg(long, value_enum)]
        vae: Option<VaeVariant>,
    },
    /// Monocular depth regressor.
    Depth {
        #[command(flatten)]
        opts: TrainOpts,
    },
}

impl TrainTarget {
    pub fn opts(&self) -> &TrainOpts {
        match self {
            Self::Vae { opts, .. } | Self::Denoiser { opts, .. } | Self::Depth { opts } => opts,
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Observed image (PNG).
    #[arg(long, conflicts_with = "index")]
    pub input: Option<PathBuf>,
    /// Sample of the generated corpus instead of a file.
    #[arg(long)]
    pub index: Option<usize>,
    /// Corpus split for --index.
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    pub split: String,
    /// Branch count; 1 samples without branching.
    #[arg(long)]
    pub k: Option<usize>,
    /// Euler steps per trajectory.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Branch scorer: depth, oracle or random.
    #[arg(long, value_parser = parse_scorer)]
    pub scorer: Option<ScorerKind>,
    /// Base seed for the starting noise.
    #[arg(long, visible_alias = "base-seed")]
    pub seed: Option<u64>,
    /// plain, debs or full-search; chosen from --k when absent.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Which trained denoiser to use, by task embedding mode.
    #[arg(long, value_parser = parse_prompt)]
    pub prompt: Option<PromptInit>,
    /// Which trained autoencoder to use.
    #[arg(long, value_enum)]
    pub vae: Option<VaeVariant>,
    /// Output directory name under outputs/.
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Test samples to use; 0 for all.
    #[arg(long)]
    pub n: Option<usize>,
    /// Branch count; 1 samples without branching.
    #[arg(long)]
    pub k: Option<usize>,
    /// Euler steps per trajectory.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Branch scorer: depth, oracle or random.
    #[arg(long, value_parser = parse_scorer)]
    pub scorer: Option<ScorerKind>,
    /// Base seed for the starting noise.
    #[arg(long, visible_alias = "base-seed")]
    pub seed: Option<u64>,
    /// plain, debs or full-search; chosen from --k when absent.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Which trained denoiser to use, by task embedding mode.
    #[arg(long, value_parser = parse_prompt)]
    pub prompt: Option<PromptInit>,
    /// Which trained autoencoder to use.
    #[arg(long, value_enum)]
    pub vae: Option<VaeVariant>,
    /// One row per branch count, e.g. 1,4,8,16.
    #[arg(long, value_delimiter = ',', conflicts_with = "ablate_prompt")]
    pub ablate_k: Vec<usize>,
    /// One row per prompt mode, e.g. fix,learned,random.
    #[arg(long, value_delimiter = ',', value_parser = parse_prompt)]
    pub ablate_prompt: Vec<PromptInit>,
    /// Also write per-sample CSV files.
    #[arg(long)]
    pub csv: bool,
}

fn parse_prompt(s: &str) -> Result<PromptInit, String> {
    s.parse().map_err(|e: layersep::Error| e.to_string())
}

fn parse_scorer(s: &str) -> Result<ScorerKind, String> {
    s.parse().map_err(|e: layersep::Error| e.to_string())
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::*;

    fn undocumented(cmd: &clap::Command, path: &str, out: &mut Vec<String>) {
        for a in cmd.get_arguments() {
            if a.get_help().is_none() && a.get_long_help().is_none() {
                out.push(format!("{path} --{}", a.get_id()));
            }
        }
        for sub in cmd.get_subcommands() {
            undocumented(sub, &format!("{path} {}", sub.get_name()), out);
        }
    }

    #[test]
    fn every_flag_has_help() {
        let mut missing = Vec::new();
        undocumented(&Cli::command(), "layersep", &mut missing);
        assert!(missing.is_empty(), "{missing:?}");
        Cli::command().debug_assert();
    }
}
