//! Run-configuration resolution shared by distill, sweep, and
//! inspect-labels: start from a config file (or the built-in defaults) and
//! apply any command-line overrides on top.

use std::path::PathBuf;

use anyhow::{Context, Result, bail};
use clap::{Args, ValueEnum};
use rankdistill::config::{HeadConfig, RunConfig};

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    Mlp,
}

/// Flags that override the base configuration. Precedence: flag, then the
/// `RD_SEED` environment variable (seed only), then the config file, then
/// the built-in default.
#[derive(Args, Debug, Clone)]
pub struct ConfigOverrides {
    /// JSON file with the base run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Teacher-similarity threshold for positive pairs.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Mixing rounds per batch.
    #[arg(long)]
    pub r_iters: Option<usize>,
    /// Samples per training batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Beta concentration the mixing coefficient is drawn from.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Histogram bins of the quantized AP loss.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight decay.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// 1-based epochs whose weights are averaged into the final head.
    #[arg(long, value_delimiter = ',')]
    pub snapshot_epochs: Option<Vec<usize>>,
    /// RNG seed.
    #[arg(long, env = "RD_SEED")]
    pub seed: Option<u64>,
    /// Truncate the training set to this many samples.
    #[arg(long)]
    pub d_size: Option<usize>,
    /// Student embedding dimensionality.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Student head architecture.
    #[arg(long, value_enum)]
    pub head: Option<HeadKind>,
    /// Hidden width of the mlp head.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Score original batches only, without mixed samples.
    #[arg(long)]
    pub no_aug: bool,
    /// Skip propagating label sets through mixing partners.
    #[arg(long)]
    pub no_ml: bool,
    /// Backpropagate through mixed representations too.
    #[arg(long)]
    pub all_grad: bool,
}

impl ConfigOverrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_json_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.r_iters {
            cfg.r_iters = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.bins {
            cfg.bins = v;
        }
        if let Some(v) = self.lr {
            cfg.base_lr = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = &self.snapshot_epochs {
            cfg.snapshot_epochs = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.d_size {
            cfg.d_size = Some(v);
        }
        if let Some(v) = self.embed_dim {
            cfg.embed_dim = v;
        }
        match (self.head, self.hidden) {
            (Some(HeadKind::Linear), Some(_)) => bail!("--hidden only applies to --head mlp"),
            (Some(HeadKind::Linear), None) => cfg.head = HeadConfig::Linear,
            (Some(HeadKind::Mlp), Some(hidden)) => cfg.head = HeadConfig::Mlp { hidden },
            (Some(HeadKind::Mlp), None) => {
                if !matches!(cfg.head, HeadConfig::Mlp { .. }) {
                    bail!("--head mlp needs --hidden (no width in the base config)");
                }
            }
            (None, Some(hidden)) => match cfg.head {
                HeadConfig::Mlp { .. } => cfg.head = HeadConfig::Mlp { hidden },
                HeadConfig::Linear => bail!("--hidden only applies to an mlp head"),
            },
            (None, None) => {}
        }
        if self.no_aug {
            cfg.no_aug = true;
        }
        if self.no_ml {
            cfg.no_ml = true;
        }
        if self.all_grad {
            cfg.all_grad = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
