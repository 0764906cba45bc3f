use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::engine::{backward, sgd_step};
use super::params::ModelParams;
use crate::data::RoundBatch;
use crate::error::{Error, Result};
use crate::losses::LossSpec;

/// Local optimisation settings shared by every client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 10,
            dropout: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("train.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Summed loss of every mini-batch of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// `epochs` passes of mini-batch SGD over `data`.
///
/// Each epoch shuffles the examples with the seeded generator and cuts them
/// into chunks of `batch_size`; a short final chunk is kept. Teachers in
/// `loss` must be row-aligned with `data`.
pub fn train_local(
    params: &ModelParams,
    data: &RoundBatch,
    cfg: &TrainConfig,
    loss: &LossSpec,
) -> Result<ModelParams> {
    train_local_traced(params, data, cfg, loss).map(|o| o.params)
}

pub fn train_local_traced(
    params: &ModelParams,
    data: &RoundBatch,
    cfg: &TrainConfig,
    loss: &LossSpec,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    loss.validate()?;
    for (name, t) in [("client", &loss.teacher_client), ("server", &loss.teacher_server)] {
        if let Some(t) = t {
            if t.batch_len() != data.len() {
                return Err(Error::ShapeMismatch {
                    layer: format!("{name} teacher logits"),
                    expected: format!("{} rows", data.len()),
                    got: format!("{} rows", t.batch_len()),
                });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = params.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(chunk);
            let batch_loss = loss.select_rows(chunk);
            let (value, grads) =
                backward(&current, batch.features(), batch.labels(), &batch_loss, &mut rng)?;
            current = sgd_step(&current, &grads, cfg.learning_rate)?;
            epoch_loss += value;
        }
        if !current.is_finite() {
            return Err(Error::InvalidArgument(
                "training diverged to non-finite parameters".into(),
            ));
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainOutcome {
        params: current,
        epoch_losses,
    })
}
