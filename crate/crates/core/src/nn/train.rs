use std::path::Path;

use rand::seq::SliceRandom;

use super::model::{descend_on_batch, Batch, NetworkModel, RegType, Regularization};
use crate::dataset::{DatasetStream, Example, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub reg_type: RegType,
    pub reg_weight: f64,
    pub seed: u64,
    /// Record the minibatch loss every `log_every` steps.
    pub log_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 32,
            steps: 0,
            reg_type: RegType::None,
            reg_weight: 0.0,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainingConfig {
    pub fn regularization(&self) -> Regularization {
        Regularization {
            kind: self.reg_type,
            weight: self.reg_weight,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.reg_weight >= 0.0) {
            return Err(Error::invalid("regularization weight must be >= 0"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log interval must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub reg_term: f64,
}

/// Anything that hands out training examples a batch at a time.
pub trait ExampleSource {
    fn next_batch(&mut self, size: usize) -> Result<Vec<Example>>;
}

impl ExampleSource for DatasetStream<'_> {
    fn next_batch(&mut self, size: usize) -> Result<Vec<Example>> {
        DatasetStream::next_batch(self, size)
    }
}

/// Cycles through a materialized dataset in a fresh seeded order each epoch.
pub struct ShuffledDataset<'a> {
    dataset: &'a LabeledDataset,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl<'a> ShuffledDataset<'a> {
    pub fn new(dataset: &'a LabeledDataset, seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::invalid("cannot train on an empty dataset"));
        }
        let mut s = Self {
            dataset,
            order: (0..dataset.len()).collect(),
            pos: 0,
            epoch: 0,
            seed,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        let mut r = rng::rng(rng::derive_seed(self.seed, &[self.epoch]));
        self.order.sort_unstable();
        self.order.shuffle(&mut r);
        self.pos = 0;
    }
}

impl ExampleSource for ShuffledDataset<'_> {
    fn next_batch(&mut self, size: usize) -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.dataset.examples[self.order[self.pos]].clone());
            self.pos += 1;
        }
        Ok(out)
    }
}

/// Minibatch SGD for `config.steps` steps. The loss of step `s` is recorded
/// when `s % log_every == 0` (before that step's update).
pub fn train<S: ExampleSource + ?Sized>(
    model: NetworkModel,
    source: &mut S,
    config: &TrainingConfig,
) -> Result<(NetworkModel, Vec<LossRecord>)> {
    train_with_callback(model, source, config, |_| {})
}

/// Like [`train`], calling `on_record` for every recorded loss.
pub fn train_with_callback<S: ExampleSource + ?Sized>(
    mut model: NetworkModel,
    source: &mut S,
    config: &TrainingConfig,
    mut on_record: impl FnMut(&LossRecord),
) -> Result<(NetworkModel, Vec<LossRecord>)> {
    config.validate()?;
    let reg = config.regularization();
    let mut history = Vec::with_capacity(config.steps / config.log_every + 1);
    for step in 0..config.steps {
        let wrap = |e: Error| Error::Training {
            step,
            source: Box::new(e),
        };
        let examples = source.next_batch(config.batch_size).map_err(wrap)?;
        if examples.len() < config.batch_size {
            return Err(wrap(Error::invalid("example source exhausted")));
        }
        let batch = Batch::from_examples(&model, &examples).map_err(wrap)?;
        let loss =
            descend_on_batch(&mut model, &batch, &reg, config.learning_rate).map_err(wrap)?;
        if step % config.log_every == 0 {
            let rec = LossRecord {
                step,
                loss: loss.total,
                reg_term: loss.reg,
            };
            on_record(&rec);
            history.push(rec);
        }
    }
    Ok((model, history))
}

/// Loss history as CSV: `step,loss,reg_term`.
pub fn write_loss_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "reg_term"])?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            format!("{:e}", r.loss),
            format!("{:e}", r.reg_term),
        ])?;
    }
    w.flush()?;
    Ok(())
}
