use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CtrModel;
use crate::autodiff::{sigmoid, Adam, AdamConfig, Graph, LOGIT_CLAMP};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::metrics::{auc, logloss, records};

const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds the example order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 32, learning_rate: 1e-3, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    /// Loss of the first mini-batch, before any update.
    pub first_batch_loss: f64,
    /// Mean training loss per epoch, accumulated while training.
    pub epoch_loss: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub auc: f64,
    pub logloss: f64,
    pub n: usize,
}

/// Minimizes the mean binary cross-entropy over `train` with Adam, updating
/// every trainable parameter of the model (decoder included).
pub fn train_integrated(model: &mut CtrModel, train: &[Example], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut first_batch_loss = None;
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<f64> = batch.iter().map(|ex| f64::from(u8::from(ex.label))).collect();
            let weights = vec![1.0 / batch.len() as f64; batch.len()];
            let grads = {
                let mut g = Graph::new(model.store());
                let logits = model.forward(&mut g, &batch, false)?;
                let loss = g.bce_with_logits(logits, &labels, &weights)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Config(format!("training diverged: loss {value}")));
                }
                first_batch_loss.get_or_insert(value);
                sum += value * batch.len() as f64;
                g.backward(loss)?
            };
            adam.step(model.store_mut(), &grads)?;
        }
        epoch_loss.push(sum / train.len() as f64);
    }
    Ok(TrainReport { steps: adam.steps(), first_batch_loss: first_batch_loss.expect("non-empty"), epoch_loss })
}

/// Click probabilities, with logits clamped to the same range as the loss.
pub fn predict(model: &CtrModel, examples: &[Example]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let mut g = Graph::new(model.store());
        let logits = model.forward(&mut g, &batch, false)?;
        out.extend(g.value(logits).data().iter().map(|&z| sigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))));
    }
    Ok(out)
}

pub fn evaluate(model: &CtrModel, examples: &[Example]) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let scores = predict(model, examples)?;
    let labels: Vec<bool> = examples.iter().map(|ex| ex.label).collect();
    let recs = records(&scores, &labels);
    Ok(EvalMetrics { auc: auc(&recs)?, logloss: logloss(&recs)?, n: examples.len() })
}
