//! Fixed-seed training loop.

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::corpus::Sample;
use super::features::make_batches;
use super::optim::{Adam, AdamConfig, AdamState};
use crate::error::Result;
use crate::model::HourglassModel;
use crate::numerics::rng::mix_seed;
use crate::numerics::Graph;
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Validation interval in steps; 0 validates only at the end.
    pub eval_every: usize,
    /// Seeds model initialization and batch order.
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 4,
            eval_every: 50,
            seed: 1,
            optimizer: AdamConfig::default(),
        }
    }
}

/// One line of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub ce: f64,
    pub ctc: f64,
    pub va_align: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    /// Weights after the last step.
    pub model: HourglassModel,
    pub optimizer: AdamState,
    /// Lowest-validation-loss checkpoint (the final one without validation
    /// data).
    pub best: Checkpoint,
    pub best_valid_loss: Option<f64>,
    pub metrics: Vec<MetricRecord>,
}

/// Mean joint loss over `samples`, without gradients.
pub fn validation_loss(model: &HourglassModel, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let batches = make_batches(samples, batch_size, model.config().vocab_size, None, 0)?;
    let mut sum = 0.0;
    for batch in &batches {
        let mut g = Graph::with_params(model.store());
        sum += model.loss(&mut g, batch)?.1.total * batch.size() as f64;
    }
    Ok(sum / samples.len() as f64)
}

/// Trains `model` for `config.steps` steps, calling `on_record` after each.
/// `resume` continues from stored optimizer moments.
pub fn train(
    mut model: HourglassModel,
    train_set: &[Sample],
    valid_set: &[Sample],
    config: &TrainConfig,
    resume: Option<AdamState>,
    mut on_record: impl FnMut(&MetricRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut adam = match resume {
        Some(s) => Adam::with_state(config.optimizer.clone(), model.store(), s)?,
        None => Adam::new(config.optimizer.clone(), model.store()),
    };
    let vocab = model.config().vocab_size;
    let per_epoch = train_set.len().div_ceil(config.batch_size.max(1));
    let mut epoch_batches = Vec::new();
    let mut metrics = Vec::with_capacity(config.steps);
    let mut best: Option<(f64, Checkpoint)> = None;

    for step in 1..=config.steps {
        let epoch = (step - 1) / per_epoch;
        let within = (step - 1) % per_epoch;
        if within == 0 {
            let seed = mix_seed(config.seed, epoch as u64);
            epoch_batches = make_batches(train_set, config.batch_size, vocab, Some(seed), epoch * per_epoch)?;
        }
        let batch = &epoch_batches[within];
        let non_finite = |detail: String| Error::NonFiniteLoss {
            step,
            batch_id: batch.batch_id,
            detail,
        };
        let (bundle, grads) = {
            let mut g = Graph::with_params(model.store());
            let (loss, bundle) = model.loss(&mut g, batch).map_err(|e| match e {
                Error::NonFinite(d) => non_finite(d),
                other => other,
            })?;
            (bundle, g.backward(loss)?.param_grads())
        };
        if let Some((id, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
            return Err(non_finite(format!("gradient of `{}`", model.store().name(*id))));
        }
        let lr = adam.step(model.store_mut(), &grads);
        let record = MetricRecord {
            step,
            ce: bundle.ce,
            ctc: bundle.ctc,
            va_align: bundle.va_align,
            total: bundle.total,
            lr,
        };
        on_record(&record)?;
        metrics.push(record);

        let validate = step == config.steps || (config.eval_every > 0 && step % config.eval_every == 0);
        if validate && !valid_set.is_empty() {
            let v = validation_loss(&model, valid_set, config.batch_size)?;
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, Checkpoint::from_model(&model, step as u64, Some(&adam.state))));
            }
        }
    }
    let (best_valid_loss, best) = match best {
        Some((v, ck)) => (Some(v), ck),
        None => (None, Checkpoint::from_model(&model, config.steps as u64, Some(&adam.state))),
    };
    Ok(TrainOutcome {
        model,
        optimizer: adam.state,
        best,
        best_valid_loss,
        metrics,
    })
}
