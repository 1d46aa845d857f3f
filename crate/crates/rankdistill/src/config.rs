//! Run configuration: defaults, validation, file loading, canonical hash.
//!
//! A [`RunConfig`] fully determines a distillation run given the data. The
//! same struct round-trips through JSON for config files and output-dir
//! echoes, and its SHA-256 hash ties checkpoints to the settings that
//! produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Student head architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadConfig {
    /// Single affine map from raw input to embedding space.
    Linear,
    /// Affine, ReLU, affine.
    Mlp { hidden: usize },
}

/// Hyper-parameters of one distillation run.
///
/// All fields have defaults matching the reference recipe; a config file may
/// set any subset and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Teacher-similarity threshold for positive pairs.
    pub tau: f64,
    /// Mixing rounds per batch; each round re-draws coefficient and
    /// partners.
    pub r_iters: usize,
    /// Samples per training batch.
    pub batch_size: usize,
    /// Concentration of the Beta distribution the mixing coefficient is
    /// drawn from.
    pub alpha: f64,
    /// Histogram bins of the quantized AP loss.
    pub bins: usize,
    /// Initial learning rate; decays as `base_lr * exp(-0.01 * epoch)`.
    pub base_lr: f64,
    /// Decoupled weight decay factor.
    pub weight_decay: f64,
    pub epochs: usize,
    /// 1-based epochs whose weights enter the final average.
    pub snapshot_epochs: Vec<usize>,
    pub seed: u64,
    /// Use only the first `d_size` training samples when set.
    pub d_size: Option<usize>,
    /// Student embedding dimensionality.
    pub embed_dim: usize,
    pub head: HeadConfig,
    /// Train on plain batches without virtual samples.
    pub no_aug: bool,
    /// Keep similarity labels but skip the inheritance step for virtual
    /// samples.
    pub no_ml: bool,
    /// Differentiate through mixed columns instead of stopping gradients.
    pub all_grad: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau: 0.75,
            r_iters: 10,
            batch_size: 1000,
            alpha: 1.0,
            bins: 20,
            base_lr: 1e-4,
            weight_decay: 1e-6,
            epochs: 30,
            snapshot_epochs: vec![20, 30],
            seed: 0,
            d_size: None,
            embed_dim: 32,
            head: HeadConfig::Linear,
            no_aug: false,
            no_ml: false,
            all_grad: false,
        }
    }
}

impl RunConfig {
    /// Checks every field and reports all violations at once, one per line.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.tau) {
            problems.push(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if self.r_iters == 0 {
            problems.push("r_iters must be at least 1".to_string());
        }
        if self.batch_size < 2 {
            problems.push(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            problems.push(format!(
                "alpha must be positive and finite, got {}",
                self.alpha
            ));
        }
        if self.bins < 2 {
            problems.push(format!("bins must be at least 2, got {}", self.bins));
        }
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            problems.push(format!(
                "base_lr must be positive and finite, got {}",
                self.base_lr
            ));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            problems.push(format!(
                "weight_decay must be non-negative and finite, got {}",
                self.weight_decay
            ));
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.snapshot_epochs.is_empty() {
            problems.push("snapshot_epochs must name at least one epoch".to_string());
        }
        if self.snapshot_epochs.contains(&0) {
            problems.push("snapshot_epochs are 1-based; 0 is not a valid epoch".to_string());
        }
        if let Some(d) = self.d_size
            && d < 2
        {
            problems.push(format!("d_size must be at least 2, got {d}"));
        }
        if self.embed_dim == 0 {
            problems.push("embed_dim must be at least 1".to_string());
        }
        if let HeadConfig::Mlp { hidden } = self.head
            && hidden == 0
        {
            problems.push("mlp hidden width must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("\n")))
        }
    }

    /// Parses a JSON config file; absent fields keep their defaults,
    /// unknown keys are errors.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Canonical JSON rendering (field order is fixed by the struct).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON, lowercase hex. Identifies the exact
    /// settings in checkpoint metadata.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        let digest = Sha256::digest(json.as_bytes());
        Ok(digest.iter().fold(String::new(), |mut acc, byte| {
            use std::fmt::Write;
            let _ = write!(acc, "{byte:02x}");
            acc
        }))
    }

    /// Snapshot epochs sorted and deduplicated.
    pub fn normalized_snapshot_epochs(&self) -> Vec<usize> {
        let mut epochs = self.snapshot_epochs.clone();
        epochs.sort_unstable();
        epochs.dedup();
        epochs
    }
}
