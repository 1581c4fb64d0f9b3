use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pathmoe_core::{Expert, RunConfig};

use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(
    name = "pathmoe",
    version,
    about = "Path reasoning over knowledge graphs with length and pruning experts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, writing checkpoints and metrics to the output directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint with filtered ranking metrics.
    Eval(EvalArgs),
    /// Precompute personalized PageRank vectors for every query entity.
    Ppr(PprArgs),
    /// Compare analytic gradients with finite differences on a toy graph.
    Gradcheck(GradcheckArgs),
    /// Dump per-query gate decisions and frontier sizes as TSV.
    Inspect(InspectArgs),
}

/// Settings shared by every command that builds a model configuration.
/// Flags win over `--set`, which wins over `--config`.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// A key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra key=value settings, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Dataset directory with train.txt, valid.txt and test.txt.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable pruning: every reached entity is kept.
    #[arg(long)]
    pub no_prune: bool,
    /// Disable the length gate: only the last layer scores.
    #[arg(long)]
    pub no_length_moe: bool,
    /// Use one pruning expert (Sco, Att or Sem) instead of the gate.
    #[arg(long)]
    pub single_expert: Option<Expert>,
    /// Run each batch on a PPR-selected subgraph.
    #[arg(long)]
    pub enable_ppr: bool,
    #[arg(long)]
    pub ppr_budget: Option<usize>,
    /// Precomputed PPR cache; vectors missing from it are computed on demand.
    #[arg(long)]
    pub ppr_cache: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn apply(&self, config: &mut RunConfig) -> CliResult<()> {
        if let Some(path) = &self.config {
            config.apply_file(path)?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                crate::error::CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`"))
            })?;
            config.set(k.trim(), v.trim())?;
        }
        if let Some(d) = &self.data {
            config.data_dir = d.clone();
        }
        if let Some(s) = self.seed {
            config.train.seed = s;
        }
        if self.no_prune {
            config.model.enable_prune = false;
        }
        if self.no_length_moe {
            config.model.enable_length_moe = false;
        }
        if self.single_expert.is_some() {
            config.model.single_expert = self.single_expert;
        }
        if self.enable_ppr {
            config.enable_ppr = true;
        }
        if let Some(b) = self.ppr_budget {
            config.ppr_budget = b;
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Wall-clock limit in seconds for the whole run; 0 means none.
    #[arg(long)]
    pub time_budget: Option<f64>,
    /// Skip the test-split evaluation of the best checkpoint.
    #[arg(long)]
    pub skip_test: bool,
}

impl TrainArgs {
    pub fn config(&self) -> CliResult<RunConfig> {
        let mut c = RunConfig::default();
        self.common.apply(&mut c)?;
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.lr {
            c.train.lr = v;
        }
        if let Some(v) = self.lambda1 {
            c.train.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            c.train.lambda2 = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.dim {
            c.model.dim = v;
        }
        if let Some(v) = self.time_budget {
            c.train.time_budget = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub common: ConfigArgs,
    /// train, valid or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Write metrics.json and ranks.tsv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Disable the early-stop rule: every selected length runs.
    #[arg(long)]
    pub force_gate_open: bool,
    /// Evaluate at most this many queries; 0 means all.
    #[arg(long, default_value_t = 0)]
    pub limit: usize,
}

#[derive(Debug, Args)]
pub struct PprArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Cache file to write; defaults to ppr.bin in the dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated splits whose query entities get a vector.
    #[arg(long, default_value = "train,valid,test")]
    pub splits: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub draws: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Corrupt the analytic gradients to check that the comparison fails.
    #[arg(long, value_enum)]
    pub inject_fault: Option<Fault>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum Fault {
    /// Flip the sign of the attention-weight gradients.
    AttentionSign,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// TSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub limit: usize,
}
