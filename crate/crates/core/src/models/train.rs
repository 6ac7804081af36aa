use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{multi_task_loss, weighted_bce, ClassWeights, LossWeighting};
use super::lstm::{Batch, HeadWeights, LstmModel, DEFAULT_ALPHA, DEFAULT_DROPOUT};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::norm::{apply_normalization, NormStats};
use crate::numeric::{AdamConfig, AdamState, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub seed: u64,
    pub loss_weighting: LossWeighting,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            loss_weighting: LossWeighting::Weighted,
            alpha: DEFAULT_ALPHA,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.patience == 0 || !(self.alpha > 0.0) {
            return Err(Error::Invalid(
                "learning_rate, batch_size, patience and alpha must be positive".into(),
            ));
        }
        if self.max_epochs > 0 && self.patience > self.max_epochs {
            return Err(Error::Invalid(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Normalized sequences with their labels and routing flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceSet {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub is_local: Vec<bool>,
}

impl SequenceSet {
    pub fn from_dataset(ds: &Dataset, stats: &NormStats) -> Result<Self> {
        Ok(Self {
            inputs: ds
                .series
                .iter()
                .map(|s| apply_normalization(s, stats))
                .collect::<Result<_>>()?,
            labels: ds.labels(),
            is_local: ds.points.iter().map(|p| p.is_local).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_refs(&self) -> Vec<&[f64]> {
        self.inputs.iter().map(Vec::as_slice).collect()
    }

    fn batch(&self, idx: &[usize]) -> Batch<'_> {
        Batch {
            inputs: idx.iter().map(|&i| self.inputs[i].as_slice()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            is_local: idx.iter().map(|&i| self.is_local[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: LstmModel,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub weights: HeadWeights,
}

/// Per-head class weights from the training labels each head sees.
pub fn head_weights(train: &SequenceSet, multi_head: bool, weighting: LossWeighting) -> Result<HeadWeights> {
    if weighting == LossWeighting::Plain {
        return Ok(HeadWeights::UNIT);
    }
    if !multi_head {
        return Ok(HeadWeights {
            local: ClassWeights::from_labels(&train.labels)?,
            global: ClassWeights::UNIT,
        });
    }
    let pick = |local: bool| -> Vec<u8> {
        train
            .labels
            .iter()
            .zip(&train.is_local)
            .filter(|(_, &l)| l == local)
            .map(|(&y, _)| y)
            .collect()
    };
    Ok(HeadWeights {
        local: ClassWeights::from_labels(&pick(true))?,
        global: ClassWeights::from_labels(&pick(false))?,
    })
}

/// Validation loss over the whole set (one batch, dropout off) and F1 of
/// the routed predictions at 0.5.
pub fn validation_metrics(model: &LstmModel, val: &SequenceSet, weights: &HeadWeights) -> Result<(f64, f64)> {
    let probs = model.predict_routed(&val.input_refs(), &val.is_local)?;
    let loss = if model.is_multi_head() {
        let split = |local: bool| -> (Vec<f64>, Vec<u8>) {
            (0..val.len())
                .filter(|&i| val.is_local[i] == local)
                .map(|i| (probs[i], val.labels[i]))
                .unzip()
        };
        let (pl, yl) = split(true);
        let (pg, yg) = split(false);
        multi_task_loss(&pl, &yl, &pg, &yg, model.alpha, weights.local, weights.global)?
    } else {
        weighted_bce(&probs, &val.labels, weights.local)
    };
    let confusion = eval::confusion_at_threshold(&probs, &val.labels, eval::DEFAULT_THRESHOLD)?;
    let f1 = eval::metrics_from_confusion(&confusion)?.f1;
    Ok((loss, f1))
}

/// Builds a freshly initialised model for `train` and fits it.
pub fn train_lstm(
    train: &SequenceSet,
    val: &SequenceSet,
    multi_head: bool,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let k = train
        .inputs
        .first()
        .map(|x| x.len() / crate::data::N_STEPS)
        .ok_or_else(|| Error::Training("empty training set".into()))?;
    let model = LstmModel::new(k, multi_head, config.alpha, config.dropout, config.seed)?;
    fit(model, train, val, config)
}

/// Mini-batch Adam with per-epoch shuffling and early stopping on
/// validation loss; returns the best-epoch parameters.
pub fn fit(mut model: LstmModel, train: &SequenceSet, val: &SequenceSet, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Training("empty validation set".into()));
    }
    let multi = model.is_multi_head();
    if multi && (train.is_local.iter().all(|&l| l) || train.is_local.iter().all(|&l| !l)) {
        return Err(Error::Training(
            "a two-head model needs both local and non-local training samples".into(),
        ));
    }
    let weights = head_weights(train, multi, config.loss_weighting)?;
    let mut history = Vec::new();
    if config.max_epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history,
            best_epoch: None,
            weights,
        });
    }

    let adam_config = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_config, &model.params.values().collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, std::collections::BTreeMap<String, Tensor>)> = None;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for idx in order.chunks(config.batch_size) {
            let batch = train.batch(idx);
            let mask = (model.dropout > 0.0).then(|| model.sample_dropout_mask(batch.len(), &mut rng));
            let (loss, grads) = model.loss_and_grads(&batch, &weights, mask.as_deref())?;
            let mut params: Vec<&mut Tensor> = model.params.values_mut().collect();
            let grads: Vec<&Tensor> = grads.values().collect();
            adam.step(&mut params, &grads)?;
            loss_sum += loss;
            n_batches += 1;
        }
        let (val_loss, val_f1) = validation_metrics(&model, val, &weights)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!(
                "validation loss is {val_loss} at epoch {epoch}"
            )));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_loss,
            val_f1,
        });
        log::info!(
            "epoch {epoch}: train {:.5} val {val_loss:.5} f1 {val_f1:.4}",
            loss_sum / n_batches as f64
        );
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, model.params.clone()));
        } else if epoch - best.as_ref().unwrap().1 >= config.patience {
            log::info!("early stop at epoch {epoch}");
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: Some(best_epoch),
        weights,
    })
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    for r in history {
        w.serialize(r)?;
    }
    if history.is_empty() {
        w.write_record(["epoch", "train_loss", "val_loss", "val_f1"])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
