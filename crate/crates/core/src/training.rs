//! Full-parameter training of the base model on the answer position.

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discovery::{self, EvalMode};
use crate::model::{Model, ModelError};
use crate::seed;
use crate::tasks::TaskDataset;
use crate::tensor::{Adam, AdamConfig, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] discovery::DiscoveryError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("the model is frozen; base training updates every weight")]
    Frozen,
    #[error("non-finite loss {loss} at epoch {epoch} step {step}")]
    NonFinite {
        epoch: usize,
        step: usize,
        loss: f64,
        /// Weights at the end of the last epoch whose losses were all finite.
        last_good: Box<Model>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop once the whole training split is answered correctly with mean
    /// loss below this value. `None` always runs every epoch.
    pub stop_loss: Option<f64>,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            stop_loss: Some(1e-3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs_run: usize,
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub final_accuracy: f64,
    pub final_loss: f64,
}

/// Trains every weight with Adam on shuffled minibatches drawn from the
/// `base-train` stream of `config.seed`.
pub fn train_base(model: &mut Model, data: &TaskDataset, config: &BaseTrainConfig) -> Result<TrainHistory, TrainError> {
    if model.is_frozen() {
        return Err(TrainError::Frozen);
    }
    if config.epochs == 0 || config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(TrainError::InvalidConfig(
            "epochs and batch_size must be positive and learning_rate > 0".into(),
        ));
    }
    if data.is_empty() {
        return Err(TrainError::Eval(discovery::DiscoveryError::EmptyData));
    }
    let mut rng = seed::stream(config.seed, "base-train");
    let mut opt = Adam::new(AdamConfig::with_lr(config.learning_rate));
    let mut params = model.params();
    let mut index: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::new();
    let mut last_good = model.clone();
    let mut eval = discovery::evaluate(model, None, data, EvalMode::Full)?;

    for epoch in 0..config.epochs {
        index.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in index.chunks(config.batch_size).enumerate() {
            let batch = data.subset(chunk);
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let logits = model.answer_logits(&bound, &batch.tokens, &batch.positions, &mut crate::model::NoHook)?;
            let loss = logits.softmax_cross_entropy(&batch.targets)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    loss: value,
                    last_good: Box::new(last_good),
                });
            }
            let grads = tape.backward(loss)?;
            for (p, v) in params.iter_mut().zip(&bound.vars) {
                p.grad = grads.get(*v).cloned();
            }
            opt.step(&mut params)?;
            model.assign_params(&params)?;
            sum += value;
            steps += 1;
        }
        epoch_loss.push(sum / steps as f64);
        last_good = model.clone();
        eval = discovery::evaluate(model, None, data, EvalMode::Full)?;
        debug!(
            "epoch {epoch}: loss {:.6} train acc {:.4}",
            sum / steps as f64,
            eval.accuracy
        );
        if let Some(stop) = config.stop_loss {
            if eval.accuracy == 1.0 && eval.loss < stop {
                info!("converged after {} epochs (loss {:.2e})", epoch + 1, eval.loss);
                break;
            }
        }
    }
    Ok(TrainHistory {
        epochs_run: epoch_loss.len(),
        epoch_loss,
        final_accuracy: eval.accuracy,
        final_loss: eval.loss,
    })
}
