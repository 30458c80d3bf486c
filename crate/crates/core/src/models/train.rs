use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ceae_mask, vae_loss, BnLayer, Model, ModelKind};
use crate::error::{Error, Result};
use crate::synth::{Label, SampleRecord};
use crate::tensor::{AdamConfig, AdamState, BnMode, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Replaces `epochs` for shortened runs without touching the nominal value.
    pub epoch_override: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            epoch_override: None,
        }
    }
}

impl TrainConfig {
    pub fn effective_epochs(&self) -> usize {
        self.epoch_override.unwrap_or(self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.effective_epochs() == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 8 {
            return Err(Error::Config(format!(
                "batch size must be at least 8, got {}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Sample-weighted mean training objective of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Sample-weighted mean reconstruction MSE of each epoch, measured on the
    /// training forward passes.
    pub epoch_mse: Vec<f64>,
    pub steps: u64,
    pub adam: AdamState,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Trains on normal records only; a single abnormal record aborts before any
/// parameter is touched.
pub fn train(model: &mut Model, data: &[SampleRecord], cfg: &TrainConfig) -> Result<TrainReport> {
    train_observed(model, data, cfg, |_, _| {})
}

/// [`train`] with a per-epoch callback receiving `(epoch, mean_loss)`.
pub fn train_observed(
    model: &mut Model,
    data: &[SampleRecord],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if let Some(bad) = data.iter().find(|r| r.label != Label::Normal) {
        return Err(Error::Contamination {
            record: bad.id.clone(),
        });
    }
    if data.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "need at least 2 training images, got {}",
            data.len()
        )));
    }
    let side = model.spec.input_size;
    let images: Vec<Tensor> = data
        .iter()
        .map(|r| r.image_tensor())
        .collect::<Result<_>>()?;
    if let Some(img) = images.iter().find(|t| t.shape() != [1, 1, side, side]) {
        return Err(Error::dim("train input", img.shape(), &[1, 1, side, side]));
    }
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params.iter().map(|p| &p.tensor),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.effective_epochs());
    let mut epoch_mse = Vec::with_capacity(cfg.effective_epochs());
    let min_batch = 8.min(images.len());
    for epoch in 0..cfg.effective_epochs() {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut total_mse = 0.0;
        let mut seen = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < min_batch {
                continue;
            }
            let parts: Vec<Tensor> = idx.iter().map(|&i| images[i].clone()).collect();
            let batch = Tensor::concat_first(&parts)?;
            let (loss, mse) = step(model, &mut adam, batch, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Optimization(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            total += loss * idx.len() as f64;
            total_mse += mse * idx.len() as f64;
            seen += idx.len();
        }
        let mean = total / seen as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
        epoch_mse.push(total_mse / seen as f64);
    }
    Ok(TrainReport {
        epoch_losses,
        epoch_mse,
        steps: adam.t,
        adam,
    })
}

/// Training-mode objective of one batch and its parameter gradients.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    /// Plain reconstruction MSE against the target.
    pub mse: f64,
    /// Per parameter, in `model.params` order; `None` when the loss does not
    /// reach it.
    pub grads: Vec<Option<Vec<f64>>>,
}

/// Evaluates the training objective with batch-statistics normalization.
/// Running statistics are left untouched.
pub fn training_objective(model: &Model, input: &Tensor, target: &Tensor, noise: Option<Tensor>) -> Result<Objective> {
    let mut bn = model.bn.clone();
    objective(model, input.clone(), target, noise, &mut bn)
}

fn objective(model: &Model, input: Tensor, target: &Tensor, noise: Option<Tensor>, bn: &mut [BnLayer]) -> Result<Objective> {
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let target_var = tape.constant(target.clone());
    let rec = model.record(&mut tape, x, BnMode::Train, true, noise, bn)?;
    let loss = match model.kind {
        ModelKind::Ae | ModelKind::CeAe => tape.mse_loss(rec.recon, target_var)?,
        ModelKind::Vae => {
            let (mu, lv) = rec.vae.expect("vae heads recorded");
            vae_loss(&mut tape, rec.recon, target_var, mu, lv, model.variant.vae_beta)?
        }
        ModelKind::MemAe => {
            let mse = tape.mse_loss(rec.recon, target_var)?;
            let (w, _) = rec.memory_weights.as_ref().expect("memory recorded");
            let ent = tape.row_entropy(*w)?;
            let reg = tape.scale(ent, model.variant.entropy_weight);
            tape.add(mse, reg)?
        }
    };
    let value = tape.value(loss).item();
    let recon = tape.value(rec.recon).data();
    let mse = recon.iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / recon.len() as f64;
    let mut grads = tape.backward(loss)?;
    Ok(Objective {
        loss: value,
        mse,
        grads: rec.params.iter().map(|v| grads.take(*v)).collect(),
    })
}

/// One optimizer step; returns the objective and the reconstruction MSE.
fn step(model: &mut Model, adam: &mut AdamState, batch: Tensor, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let n = batch.shape()[0];
    let input = if model.kind == ModelKind::CeAe {
        ceae_mask(&batch, rng, &model.variant.mask)?.0
    } else {
        batch.clone()
    };
    let noise = model.sample_noise(n, rng);
    let mut bn = std::mem::take(&mut model.bn);
    let result = objective(model, input, &batch, noise, &mut bn);
    model.bn = bn;
    let obj = result?;
    for (p, g) in model.params.iter_mut().zip(obj.grads) {
        p.tensor.grad = g;
    }
    adam.step(model.params.iter_mut().map(|p| &mut p.tensor))?;
    Ok((obj.loss, obj.mse))
}
