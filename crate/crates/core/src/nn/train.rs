use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, loss_and_gradients, Model, SequenceSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Share of sequences held out for validation accuracy.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            clip_norm: Some(5.0),
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("train.validation_fraction", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean regularized loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
    pub train_sequences: usize,
    pub validation_sequences: usize,
}

/// Fraction of timesteps whose most probable class is the label.
pub fn accuracy(model: &Model, samples: &[SequenceSample]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in samples {
        for (b, &y) in model.forward(&s.inputs)?.iter().zip(&s.labels) {
            total += 1;
            if argmax(&b.probs) == y {
                correct += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Mini-batch SGD with momentum. Deterministic for a fixed seed.
pub fn train(model: &mut Model, samples: &[SequenceSample], params: &TrainParams) -> Result<TrainReport> {
    params.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("no training sequences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64) * params.validation_fraction).floor() as usize;
    let n_val = n_val.min(samples.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_set: Vec<SequenceSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let val_set: Vec<SequenceSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();

    let mut velocity: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
    let mut epoch_losses = Vec::with_capacity(params.epochs);
    let mut perm: Vec<usize> = (0..train_set.len()).collect();
    let mut batch = Vec::with_capacity(params.batch_size);

    for epoch in 0..params.epochs {
        perm.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in perm.chunks(params.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            let (loss, mut grads) = loss_and_gradients(model, &batch)?;
            let l = loss.total_loss();
            if !l.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += l;
            batches += 1;
            if let Some(cap) = params.clip_norm {
                let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > cap {
                    let s = cap / norm;
                    grads.iter_mut().flatten().for_each(|g| *g *= s);
                }
            }
            for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grads) {
                for ((w, vel), gw) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vel = params.momentum * *vel - params.learning_rate * gw;
                    *w += *vel;
                }
            }
        }
        let mean = loss_sum / batches as f64;
        if !mean.is_finite() || model.params.iter().flat_map(|p| &p.data).any(|w| !w.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        log::debug!("epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }

    Ok(TrainReport {
        epoch_losses,
        train_accuracy: accuracy(model, &train_set)?,
        validation_accuracy: if val_set.is_empty() { None } else { Some(accuracy(model, &val_set)?) },
        train_sequences: train_set.len(),
        validation_sequences: val_set.len(),
    })
}
