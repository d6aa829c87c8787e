//! Training loop: deterministic case-level splitting, mini-batch Adam on
//! weighted cross-entropy, and early stopping with best-weight restoration.

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::Family;
use crate::error::{Error, Result};
use crate::nn::adam::Adam;
use crate::nn::loss::{weighted_ce_grad, weighted_ce_sum};
use crate::nn::model::{Grads, Model, Workspace};
use crate::sampling::TrainingSample;
use crate::volume::Case;

pub use crate::nn::loss::weighted_loss;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Desk-scale cap: deterministically subsample the training stream to
    /// at most this many samples per epoch (None = use all).
    pub max_samples_per_epoch: Option<usize>,
    /// Per-layer learning-rate cap: layers whose fan-in exceeds this get
    /// their step scaled by cap/fan_in. Keeps the very wide 3D
    /// valid-convolution stacks stable under Adam (None = plain Adam).
    pub fan_in_lr_cap: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 20,
            patience: 2,
            val_fraction: 0.2,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            max_samples_per_epoch: None,
            fan_in_lr_cap: None,
        }
    }
}

impl TrainConfig {
    /// Family-appropriate defaults: valid-convolution patches are small
    /// and batch wide (and get the fan-in step cap, which their deep wide
    /// 3D stacks need for stability), u-shaped patches are large and
    /// batch narrow.
    pub fn default_for(family: Family) -> Self {
        TrainConfig {
            batch_size: if family.is_u_shaped() { 8 } else { 32 },
            fan_in_lr_cap: if family.is_u_shaped() { None } else { Some(1024) },
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub train_loss_curve: Vec<f64>,
    pub val_loss_curve: Vec<f64>,
    pub stopped_early: bool,
    /// 1-based epoch with the best validation loss.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Split cases into train/validation at case granularity; deterministic
/// per seed. Validation gets `max(1, round(val_fraction * n))` cases,
/// capped so training keeps at least one.
pub fn split_dataset<'a>(
    cases: &'a [Case],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<&'a Case>, Vec<&'a Case>)> {
    if cases.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "splitting requires >= 2 cases, got {}",
            cases.len()
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(
            "val_fraction must lie in (0, 1)".into(),
        ));
    }
    let n = cases.len();
    let val_n = ((val_fraction * n as f64).round() as usize)
        .max(1)
        .min(n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let val: Vec<&Case> = idx[..val_n].iter().map(|&i| &cases[i]).collect();
    let train: Vec<&Case> = idx[val_n..].iter().map(|&i| &cases[i]).collect();
    Ok((train, val))
}

/// Early-stopping policy: stop once the validation loss has gone
/// `patience` consecutive epochs without strictly improving on the best.
#[derive(Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    epochs_since_best: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            epochs_since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        match self.best {
            Some(best) if val_loss >= best => {
                self.epochs_since_best += 1;
                if self.epochs_since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some(val_loss);
                self.best_epoch = epoch;
                self.epochs_since_best = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best
    }
}

/// Mean weighted cross-entropy of a model over a sample set (forward only).
pub fn evaluate_samples_loss(model: &Model, samples: &[TrainingSample]) -> Result<f64> {
    let partials: Vec<Result<(f64, usize)>> = samples
        .par_iter()
        .map(|s| {
            let mut ws = Workspace::default();
            model.forward_into(&s.input, &mut ws)?;
            let logits = ws.outputs.last().unwrap().as_ref().unwrap();
            Ok(weighted_ce_sum(logits, &s.target, &s.weights))
        })
        .collect();
    let mut sum = 0f64;
    let mut count = 0usize;
    for p in partials {
        let (s, c) = p?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::DegenerateInput(
            "no weighted voxels in the sample set".into(),
        ));
    }
    Ok(sum / count as f64)
}

fn batch_step(
    model: &Model,
    samples: &[&TrainingSample],
) -> Result<Option<(Grads, f64, usize)>> {
    let total: usize = samples
        .iter()
        .map(|s| s.weights.iter().filter(|&&w| w > 0.0).count())
        .sum();
    if total == 0 {
        return Ok(None); // skip-batch signal: nothing to learn from
    }
    let partials: Vec<Result<(Grads, f64)>> = samples
        .par_iter()
        .map(|s| {
            let mut ws = Workspace::default();
            model.forward_into(&s.input, &mut ws)?;
            let logits: &Array4<f32> = ws.outputs.last().unwrap().as_ref().unwrap();
            let (loss_sum, _) = weighted_ce_sum(logits, &s.target, &s.weights);
            let dlogits = weighted_ce_grad(logits, &s.target, &s.weights, 1.0);
            let mut grads = Grads::zeros_like(model);
            model.backward_from_logits(&s.input, &ws, dlogits, &mut grads);
            Ok((grads, loss_sum))
        })
        .collect();
    let mut acc: Option<Grads> = None;
    let mut loss_sum = 0f64;
    for p in partials {
        let (g, l) = p?;
        loss_sum += l;
        match &mut acc {
            Some(a) => a.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
    let mut grads = acc.expect("non-empty batch");
    grads.scale(1.0 / total as f32);
    Ok(Some((grads, loss_sum, total)))
}

/// Train with mini-batch Adam, monitoring validation loss each epoch and
/// stopping early per the patience policy; the best-epoch weights are
/// restored before returning. Non-finite losses abort with a diagnostic.
pub fn train_model(
    model: &mut Model,
    train_samples: &[TrainingSample],
    val_samples: &[TrainingSample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation sample sets must be non-empty".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::with_fan_in_cap(model, config.learning_rate, config.fan_in_lr_cap);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_snapshot = model.snapshot();
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut stopped_early = false;
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut rng);
        if let Some(cap) = config.max_samples_per_epoch {
            order.truncate(cap.max(1));
        }
        let mut epoch_loss = 0f64;
        let mut epoch_count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &train_samples[i]).collect();
            if let Some((grads, loss_sum, count)) = batch_step(model, &batch)? {
                adam.step(model, &grads);
                epoch_loss += loss_sum;
                epoch_count += count;
            }
        }
        let train_loss = if epoch_count > 0 {
            epoch_loss / epoch_count as f64
        } else {
            f64::NAN
        };
        let val_loss = evaluate_samples_loss(model, val_samples)?;
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                message: format!("train loss {train_loss}, val loss {val_loss}"),
            });
        }
        train_curve.push(train_loss);
        val_curve.push(val_loss);
        epochs_run = epoch;
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => {
                best_snapshot = model.snapshot();
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    model.restore(&best_snapshot);
    Ok(TrainReport {
        epochs_run,
        train_loss_curve: train_curve,
        val_loss_curve: val_curve,
        stopped_early,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best_loss().unwrap_or(f64::NAN),
    })
}
