//! Minibatch Adam training of [`RegNet`] on simulated cases.

use cardioreg_tensor::{adam_step, AdamConfig, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::metrics::{delta_r, delta_t};
use crate::motion::SamplePair;
use crate::regnet::RegNet;
use crate::seed::{derive_seed, rng_from};
use crate::{CoreError, Modality, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Save a rolling checkpoint every this many epochs; 0 disables it.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 5e-5,
            lr_decay: 0.99,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
            batch_size: 4,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 60,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(CoreError::Config(format!(
                "need lr > 0 and decay in (0, 1], got {} and {}",
                self.lr, self.lr_decay
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(CoreError::Config("Adam betas must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    /// Learning rate used during epoch `k` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dt_mm: f64,
    pub val_dr_deg: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss.
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Mean L1 loss, ΔT and ΔR of `model` over `cases`.
pub fn evaluate_cases(model: &RegNet<f32>, cases: &[&SamplePair], batch: usize) -> Result<(f64, f64, f64)> {
    if cases.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let (mut loss, mut dt, mut dr) = (0.0, 0.0, 0.0);
    for chunk in cases.chunks(batch.max(1)) {
        let pairs: Vec<_> = chunk.iter().map(|c| (&c.mu_moved, &c.spect)).collect();
        let preds = model.predict(&pairs)?;
        for (c, p) in chunk.iter().zip(preds) {
            let a = p.to_array();
            let b = c.truth.to_array();
            loss += a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 6.0;
            dt += delta_t(p, c.truth, c.mu_moved.spacing_mm()[0]);
            dr += delta_r(p, c.truth);
        }
    }
    let n = cases.len() as f64;
    Ok((loss / n, dt / n, dr / n))
}

fn target_tensor(cases: &[&SamplePair]) -> Result<Tensor<f32>> {
    let data = cases
        .iter()
        .flat_map(|c| c.truth.to_array())
        .map(|v| v as f32)
        .collect();
    Ok(Tensor::new(vec![cases.len(), 6], data)?)
}

/// One forward/backward/Adam step; returns the batch loss.
pub fn train_step(
    model: &mut RegNet<f32>,
    batch: &[&SamplePair],
    adam: &AdamConfig,
) -> Result<f64> {
    let mus: Vec<_> = batch.iter().map(|c| &c.mu_moved).collect();
    let spects: Vec<_> = batch.iter().map(|c| &c.spect).collect();
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape);
    let mu = tape.constant(model.batch_input(&mus, Modality::MuMap)?);
    let spect = tape.constant(model.batch_input(&spects, Modality::Spect)?);
    let target = tape.constant(target_tensor(batch)?);
    let pred = model.forward(&mut tape, &bound, mu, spect)?;
    let loss = tape.l1_loss(pred, target)?;
    let value = tape.value(loss).item()? as f64;
    if !value.is_finite() {
        return Err(CoreError::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            cases: batch.iter().map(|c| c.case_id.clone()).collect(),
        });
    }
    let mut grads = tape.backward(loss)?;
    let g = model.store().collect_grads(&bound, &mut grads);
    adam_step(model.store_mut(), &g, adam)?;
    Ok(value)
}

/// Trains `model` in place and returns the best-on-validation weights.
/// `on_epoch` sees each log line and the current model, e.g. to write
/// logs or rolling checkpoints.
pub fn train(
    model: &mut RegNet<f32>,
    train_set: &[&SamplePair],
    val_set: &[&SamplePair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &RegNet<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CoreError::Config(format!(
            "training needs non-empty train and validation splits ({} / {})",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let adam = AdamConfig {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        };
        let mut rng = rng_from(derive_seed(cfg.seed, &format!("shuffle-{epoch}")));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SamplePair> = idx.iter().map(|&i| train_set[i]).collect();
            let loss = train_step(model, &batch, &adam).map_err(|e| match e {
                CoreError::NonFiniteLoss { cases, .. } => CoreError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    cases,
                },
                other => other,
            })?;
            total += loss * batch.len() as f64;
        }
        let (val_loss, val_dt_mm, val_dr_deg) = evaluate_cases(model, val_set, cfg.batch_size)?;
        let log = EpochLog {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss,
            val_dt_mm,
            val_dr_deg,
            lr,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} dT {:.2} mm dR {:.2} deg",
            log.train_loss,
            val_loss,
            val_dt_mm,
            val_dr_deg
        );
        if best.as_ref().map_or(true, |b| val_loss < b.0) {
            best = Some((val_loss, epoch, model.store().clone()));
        }
        on_epoch(&log, model)?;
        history.push(log);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}
