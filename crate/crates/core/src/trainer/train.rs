use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::early_stop::EarlyStopState;
use super::optim::{clip_gradients, lr_at, AdamWConfig, OptimizerState};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{best_threshold, micro_scores, PredictionSet, TrainFactIndex};
use crate::model::{DocReModel, PreparedDocument};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub max_grad_norm: f64,
    pub max_tolerance: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 1e-3,
            warmup_ratio: 0.06,
            max_grad_norm: 1.0,
            max_tolerance: 5,
            epochs: 30,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 || self.max_tolerance == 0 {
            return bad("batch size, epochs and max tolerance must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup ratio must lie in [0, 1), got {}", self.warmup_ratio));
        }
        if !(self.max_grad_norm > 0.0) {
            return bad(format!("max grad norm must be positive, got {}", self.max_grad_norm));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, documents: usize) -> usize {
        documents.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training batch loss.
    pub loss: f64,
    pub dev_f1: f64,
    pub dev_threshold: f64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    pub tolerance: usize,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub stopped_early: bool,
    pub steps: usize,
}

/// Dev F1 at the dev-optimal threshold.
pub fn dev_f1<S: Scalar>(model: &DocReModel<S>, dev: &[PreparedDocument], jobs: usize) -> Result<(f64, f64)> {
    let scores = model.predict(dev, jobs)?;
    let set = PredictionSet::from_scores(&scores, dev, model.schema())?;
    let theta = best_threshold(&set)?;
    Ok((micro_scores(&set, theta, &TrainFactIndex::default()).f1, theta))
}

/// Mini-batch AdamW training with per-epoch validation. The model is left
/// holding the parameters of the best validation epoch.
pub fn train<S: Scalar>(
    model: &mut DocReModel<S>,
    train: &[PreparedDocument],
    dev: &[PreparedDocument],
    cfg: &TrainConfig,
    jobs: usize,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Training("training and development splits must be non-empty".into()));
    }
    if dev.iter().all(|d| d.gold.targets.iter().all(|&y| y == 0.0)) {
        return Err(Error::Training("development split has no gold labels".into()));
    }
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let mut dropout = stream(cfg.seed, Stream::Dropout);
    let mut rel_dropout = stream(cfg.seed, Stream::RelationDropout);
    let mut opt = OptimizerState::new(
        model.store(),
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let total = cfg.epochs * cfg.steps_per_epoch(train.len());
    let mut stop = EarlyStopState::new(cfg.max_tolerance);
    let mut best_values: Option<Vec<Tensor<S>>> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut batches, mut lr) = (0.0, 0usize, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedDocument> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            lr = lr_at(step + 1, total, cfg.learning_rate, cfg.warmup_ratio);
            step += 1;
            let Some(loss) = model.batch_loss(&mut g, &batch, Some(&mut dropout), Some(&mut rel_dropout))? else {
                continue;
            };
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
            }
            g.backward(loss, model.store_mut())?;
            clip_gradients(model.store_mut(), cfg.max_grad_norm);
            opt.step(model.store_mut(), lr)?;
            loss_sum += value;
            batches += 1;
        }
        let (f1, theta) = dev_f1(model, dev, jobs)?;
        let decision = stop.observe(epoch, f1);
        if decision.new_best {
            best_values = Some(model.store().iter().map(|p| p.value.clone()).collect());
        }
        let record = EpochRecord {
            epoch,
            loss: if batches == 0 { 0.0 } else { loss_sum / batches as f64 },
            dev_f1: f1,
            dev_threshold: theta,
            lr,
            tolerance: stop.counter,
            best: decision.new_best,
        };
        on_epoch(&record);
        history.push(record);
        if decision.stop {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }
    if let Some(values) = best_values {
        for (p, v) in model.store_mut().iter_mut().zip(values) {
            p.value = v;
        }
    }
    Ok(TrainOutcome {
        best_epoch: stop.best_epoch.unwrap_or(0),
        best_dev_f1: stop.best.unwrap_or(0.0),
        stopped_early,
        steps: step,
        history,
    })
}
