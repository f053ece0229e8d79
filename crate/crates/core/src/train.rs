//! Training loop for the predicate classifier.
//!
//! Batches of image graphs are built from each record's objects; the
//! per-batch gradient is the mean of per-image loss gradients, applied with
//! Adam. A held-out validation split tracks predicate recall@5 per epoch.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamState, Array, AutodiffError, PoolMode, Tape};
use crate::graph::{build_graph, GraphStructure, ImageGraph, ImageRecord};
use crate::model::{forward, loss, recall_at_k, ModelDims, ModelError, ModelParams, VisualSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Optimizer and architecture settings. Defaults are the full-scale values;
/// desk-scale runs typically override `hidden_dim` down to 32-64.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub pooling: PoolMode,
    pub hidden_dim: usize,
    pub conv_kernels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            epochs: 18,
            batch_size: 128,
            seed: 0,
            validation_fraction: 0.15,
            pooling: PoolMode::Max,
            hidden_dim: 1024,
            conv_kernels: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(TrainError::InvalidConfig(
                "validation_fraction must be in [0, 0.5]".into(),
            ));
        }
        if self.learning_rate < 0.0 {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be non-negative".into(),
            ));
        }
        if self.epochs < 1 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.hidden_dim < 1 {
            return Err(TrainError::InvalidConfig("hidden_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean recall@5 over the validation split; absent when the split is
    /// empty.
    pub val_recall_at_5: Option<f64>,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<TrainLogEntry>,
}

/// Trains a classifier on the given records.
///
/// Graphs are fully connected over each record's objects. Shuffling, the
/// train/validation split and parameter initialization all derive from
/// `config.seed`, so identical inputs produce identical parameters. A zero
/// learning rate runs the full loop without updating parameters.
pub fn train(
    records: &[ImageRecord],
    num_predicates: usize,
    num_classes: usize,
    visual: VisualSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let dims = ModelDims {
        hidden: config.hidden_dim,
        conv_kernels: config.conv_kernels,
        num_predicates,
        num_classes,
        visual,
        pooling: config.pooling,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(dims, &mut rng);

    // Graphs are immutable across epochs; build them once.
    let graphs: Vec<ImageGraph> = records
        .iter()
        .map(|r| build_graph(&r.objects, r.width, r.height, &GraphStructure::FullyConnected))
        .collect();

    // Validation split.
    let mut indices: Vec<usize> = (0..records.len()).collect();
    indices.shuffle(&mut rng);
    let val_count = (config.validation_fraction * records.len() as f64).round() as usize;
    let (val_idx, train_idx) = indices.split_at(val_count);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    if train_idx.is_empty() {
        return Err(TrainError::InvalidConfig(
            "validation split leaves no training images".into(),
        ));
    }

    let mut state = AdamState::new(params.tensors.arrays());
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            let mut grad_acc: Vec<Array> = params
                .tensors
                .arrays()
                .iter()
                .map(|a| Array::zeros(a.shape().to_vec()))
                .collect();
            for &idx in batch {
                let record = &records[idx];
                let mut tape = Tape::new();
                let pass = forward(&params, &graphs[idx], &mut tape)?;
                let l = loss(&mut tape, pass.probs, &record.predicate_labels)?;
                epoch_loss += tape.value(l).item();
                let mut grads = tape.backward(l)?;
                for (acc, leaf) in grad_acc.iter_mut().zip(&pass.param_leaves) {
                    acc.add_assign(&grads.take(*leaf));
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grad_acc {
                g.scale(scale);
            }
            if config.learning_rate > 0.0 {
                adam_step(
                    params.tensors.arrays_mut(),
                    &grad_acc,
                    &mut state,
                    config.learning_rate,
                    config.weight_decay,
                )?;
            }
        }
        let mean_loss = epoch_loss / train_idx.len() as f64;

        let val_recall_at_5 = if val_idx.is_empty() {
            None
        } else {
            let mut total = 0.0;
            for &idx in &val_idx {
                let mut tape = Tape::new();
                let pass = forward(&params, &graphs[idx], &mut tape)?;
                let scores = tape.value(pass.probs).data();
                total += recall_at_k(scores, &records[idx].predicate_labels, 5);
            }
            Some(total / val_idx.len() as f64)
        };

        log.push(TrainLogEntry {
            epoch,
            mean_loss,
            val_recall_at_5,
        });
    }

    Ok(TrainOutcome { params, log })
}
