use super::losses::{ce_loss_and_grad, margin_loss_and_grad, SparseGrad};
use super::negatives::{sample_random_negatives, PoolDoc, TrainPair};
use super::optim::Optimizer;
use super::{TrainConfig, TrainError, TrainingExample};
use crate::encoder::{CrossEncoderModel, EncoderConfig, EncoderModel};
use crate::hashing::{derive_seed, derive_seed_str};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

const SHUFFLE_TAG: u64 = 0x5348_5546;
const NEGATIVE_TAG: u64 = 0x4e45_4753;
const DROPOUT_TAG: u64 = 0x4452_4f50;

/// One line of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    /// Mean example loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Per-step records.
    pub metrics: Vec<MetricRecord>,
    /// Examples whose loss hit a zero-distance subgradient.
    pub degenerate_examples: usize,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SHUFFLE_TAG, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

fn non_finite(epoch: usize, batch: usize, data: &[TrainingExample], chunk: &[usize]) -> TrainError {
    TrainError::NonFinite {
        epoch,
        batch,
        example_ids: chunk.iter().map(|&i| data[i].query_id.clone()).collect(),
    }
}

fn run_bi<F>(mut model: EncoderModel, cfg: &TrainConfig, mut epoch_data: F) -> Result<TrainOutcome<EncoderModel>, TrainError>
where
    F: FnMut(usize) -> Result<Vec<TrainingExample>, TrainError>,
{
    cfg.validate()?;
    let start = Instant::now();
    let dim = model.dim();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut epoch_losses = Vec::new();
    let mut metrics = Vec::new();
    let mut degenerate_examples = 0;
    for epoch in 0..cfg.epochs {
        let data = epoch_data(epoch)?;
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let grads: Vec<_> = chunk
                .par_iter()
                .map(|&i| margin_loss_and_grad(&model, &data[i], cfg.margin))
                .collect();
            let loss_sum: f64 = grads.iter().map(|g| g.loss).sum();
            if !loss_sum.is_finite() {
                return Err(non_finite(epoch, b, &data, chunk));
            }
            degenerate_examples += grads.iter().filter(|g| g.degenerate).count();
            let scale = 1.0 / chunk.len() as f64;
            let mut total = SparseGrad::default();
            for g in &grads {
                total.add_scaled(&g.table, scale);
            }
            opt.begin_step();
            opt.apply_sparse(model.table_mut(), dim, &total);
            epoch_loss += loss_sum;
            metrics.push(MetricRecord {
                step: opt.steps(),
                epoch,
                mean_loss: loss_sum * scale,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
        let mean = epoch_loss / data.len() as f64;
        log::info!("bi-encoder epoch {epoch}: mean loss {mean:.5}");
        epoch_losses.push(mean);
    }
    if !model.is_finite() {
        return Err(TrainError::NonFinite {
            epoch: cfg.epochs,
            batch: 0,
            example_ids: Vec::new(),
        });
    }
    model.round_to_f32();
    Ok(TrainOutcome {
        model,
        epoch_losses,
        metrics,
        degenerate_examples,
    })
}

fn bi_init(enc: EncoderConfig, cfg: &TrainConfig) -> Result<EncoderModel, TrainError> {
    Ok(EncoderModel::new(enc, derive_seed_str(cfg.seed, "biencoder-init"))?)
}

/// Trains a fresh bi-encoder on examples with fixed single negatives.
pub fn train_biencoder(
    dataset: &[TrainingExample],
    enc: EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<EncoderModel>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if dataset.iter().any(|e| e.negative_texts.len() != 1) {
        return Err(TrainError::InvalidConfig("bi-encoder examples need exactly one negative".into()));
    }
    run_bi(bi_init(enc, cfg)?, cfg, |_| Ok(dataset.to_vec()))
}

/// Trains a fresh bi-encoder, drawing one random negative per pair anew each
/// epoch from `pool`.
pub fn train_biencoder_resampled(
    pairs: &[TrainPair],
    pool: &[PoolDoc],
    enc: EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<EncoderModel>, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    run_bi(bi_init(enc, cfg)?, cfg, |epoch| {
        sample_random_negatives(pairs, pool, derive_seed(cfg.seed, &[NEGATIVE_TAG, epoch as u64]))
    })
}

/// Trains a freshly initialized cross-encoder with softmax cross-entropy.
pub fn train_crossencoder(
    dataset: &[TrainingExample],
    enc: EncoderConfig,
    hidden: usize,
    dropout_rate: f64,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<CrossEncoderModel>, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if dataset.iter().any(|e| e.negative_texts.is_empty()) {
        return Err(TrainError::InvalidConfig("cross-encoder examples need negatives".into()));
    }
    let short = dataset.iter().filter(|e| e.negative_texts.len() < cfg.n_negatives).count();
    if short > 0 {
        log::warn!("{short} examples carry fewer than {} negatives", cfg.n_negatives);
    }
    let mut model = CrossEncoderModel::new(enc, hidden, dropout_rate, derive_seed_str(cfg.seed, "crossencoder-init"))?;
    let start = Instant::now();
    let dim = model.base.dim();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut epoch_losses = Vec::new();
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(dataset.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = opt.steps() + 1;
            let grads: Vec<_> = chunk
                .par_iter()
                .map(|&i| {
                    let seed = derive_seed(cfg.seed, &[DROPOUT_TAG, step, i as u64]);
                    ce_loss_and_grad(&model, &dataset[i], seed)
                })
                .collect();
            let loss_sum: f64 = grads.iter().map(|g| g.loss).sum();
            if !loss_sum.is_finite() {
                return Err(non_finite(epoch, b, dataset, chunk));
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut table = SparseGrad::default();
            let mut proj = vec![0.0; model.proj().len()];
            let mut out = vec![0.0; model.out().len()];
            for g in &grads {
                table.add_scaled(&g.table, scale);
                proj.iter_mut().zip(&g.proj).for_each(|(a, v)| *a += scale * v);
                out.iter_mut().zip(&g.out).for_each(|(a, v)| *a += scale * v);
            }
            opt.begin_step();
            let (base, w_proj, w_out) = model.head_mut();
            opt.apply_sparse(base.table_mut(), dim, &table);
            opt.apply_dense(0, w_proj, &proj);
            opt.apply_dense(1, w_out, &out);
            epoch_loss += loss_sum;
            metrics.push(MetricRecord {
                step: opt.steps(),
                epoch,
                mean_loss: loss_sum * scale,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
        let mean = epoch_loss / dataset.len() as f64;
        log::info!("cross-encoder epoch {epoch}: mean loss {mean:.5}");
        epoch_losses.push(mean);
    }
    if !model.is_finite() {
        return Err(TrainError::NonFinite {
            epoch: cfg.epochs,
            batch: 0,
            example_ids: Vec::new(),
        });
    }
    model.round_to_f32();
    Ok(TrainOutcome {
        model,
        epoch_losses,
        metrics,
        degenerate_examples: 0,
    })
}
