//! Ranking losses, negative sampling and the encoder training loops.

mod loops;
mod losses;
mod negatives;
mod optim;

pub use loops::{
    train_biencoder, train_biencoder_resampled, train_crossencoder, MetricRecord, TrainOutcome,
};
pub use losses::{
    ce_loss_and_grad, ce_loss_from_scores, margin_loss_and_grad, CeGrad, MarginGrad, SparseGrad,
};
pub use negatives::{
    clipped_window, mine_hard_negatives, sample_random_negatives, MinedNegatives, NegativeMiner,
    PoolDoc, TrainPair,
};
pub use optim::Optimizer;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("no eligible negatives for user {user_id}")]
    EmptyPool { user_id: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}; examples {example_ids:?}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        example_ids: Vec<String>,
    },
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
}

/// One query with its positive document and sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query_id: String,
    pub query_text: String,
    pub positive_text: String,
    pub negative_texts: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moment estimation with lazily allocated per-row state.
    Adam,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub margin: f64,
    pub n_negatives: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Inclusive 1-based rank window for hard negatives.
    pub hard_negative_rank_range: (usize, usize),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 5,
            margin: 1.0,
            n_negatives: 4,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            hard_negative_rank_range: (100, 300),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad("margin must be >= 0");
        }
        if self.n_negatives == 0 {
            return bad("n_negatives must be >= 1");
        }
        let (lo, hi) = self.hard_negative_rank_range;
        if lo == 0 || lo >= hi {
            return bad("hard_negative_rank_range needs 1 <= lo < hi");
        }
        Ok(())
    }
}
