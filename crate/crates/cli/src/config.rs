//! Run configuration shared by `train` and the other subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use countpp::filtering::DEFAULT_SIGMA;
use countpp::model::ModelConfig;
use countpp::nn::AdamConfig;
use countpp::training::{LossWeights, TrainConfig};

/// Every key can also be given as a `--kebab-case` flag; flags win over
/// the config file, which wins over these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub enhancer_blocks: usize,
    pub decoder_blocks: usize,
    /// Query budget K.
    pub num_queries: usize,
    pub sigma: f64,
    pub lambda_loc: f64,
    pub lambda_giou: f64,
    pub lambda_cls: f64,
    /// Training dataset directory.
    pub data: Option<PathBuf>,
    /// Validation dataset directory.
    pub val: Option<PathBuf>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub exemplar_prob: f64,
    pub unprompted_prob: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossWeights::default();
        Self {
            seed: 0,
            d_model: 32,
            heads: 4,
            ffn_mult: 2,
            enhancer_blocks: 2,
            decoder_blocks: 2,
            num_queries: 32,
            sigma: DEFAULT_SIGMA,
            lambda_loc: loss.lambda_loc,
            lambda_giou: loss.lambda_giou,
            lambda_cls: loss.lambda_cls,
            data: None,
            val: None,
            epochs: 10,
            lr: 1e-3,
            batch_size: 8,
            exemplar_prob: 0.5,
            unprompted_prob: 0.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(format!("sigma must lie in (0, 1), got {}", self.sigma));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return Err("lr must be positive".into());
        }
        Ok(())
    }

    pub fn train_config(&self, vocabulary: Vec<String>) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                d_model: self.d_model,
                heads: self.heads,
                ffn_mult: self.ffn_mult,
                enhancer_blocks: self.enhancer_blocks,
                decoder_blocks: self.decoder_blocks,
                num_queries: self.num_queries,
                init_seed: self.seed,
                ..Default::default()
            },
            optimizer: AdamConfig { lr: self.lr, warmup_steps: 20, ..Default::default() },
            loss: LossWeights {
                lambda_loc: self.lambda_loc,
                lambda_giou: self.lambda_giou,
                lambda_cls: self.lambda_cls,
                ..Default::default()
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            vocabulary,
            exemplar_prob: self.exemplar_prob,
            unprompted_prob: self.unprompted_prob,
            sigma: self.sigma,
            ..Default::default()
        }
    }
}
