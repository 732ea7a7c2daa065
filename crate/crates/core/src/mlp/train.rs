//! Mini-batch Adam training with an exponential learning-rate schedule and
//! early stopping on a held-out split.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_gradients, Layer, MlpModel};
use crate::data::{Features, FieldSample};
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Batch losses above this abort training.
const DIVERGENCE_LIMIT: f64 = 1e6;
/// The schedule holds the initial rate for epochs 1..=9.
const WARM_EPOCHS: i32 = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub rng_seed: u64,
    /// Retrain on all rows for the best epoch count after early stopping.
    pub use_validation_in_final_fit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            decay_factor: 0.995,
            batch_size: 4096,
            max_epochs: 1000,
            patience: 100,
            validation_fraction: 0.2,
            rng_seed: 0,
            use_validation_in_final_fit: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch: constant for the first nine epochs,
/// then `l0 * gamma^(epoch - 9)`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let epoch = epoch as i32;
    if epoch <= WARM_EPOCHS {
        config.initial_lr
    } else {
        config.initial_lr * config.decay_factor.powf(f64::from(epoch - WARM_EPOCHS))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Mean training loss per epoch, as seen by the optimizer.
    pub train_loss: Vec<f64>,
    /// Validation loss per epoch; empty when training without a split.
    pub validation_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
    /// 1-based epoch whose weights were returned (0 if none ran).
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Epochs of the optional final refit on all rows.
    pub refit_epochs: usize,
}

struct Adam {
    step: i32,
    first: Vec<Layer>,
    second: Vec<Layer>,
}

impl Adam {
    fn new(model: &MlpModel) -> Self {
        let zeros: Vec<Layer> = model.layers()[model.frozen_prefix()..]
            .iter()
            .map(|l| Layer::zeros(l.inputs(), l.outputs()))
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    fn update(&mut self, model: &mut MlpModel, grads: &super::Gradients, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        let frozen = model.frozen_prefix();
        for g in &grads.layers {
            let slot = g.layer - frozen;
            let layer = &mut model.layers_mut()[g.layer];
            adam_step(
                layer.weights.iter_mut(),
                g.weights.iter(),
                self.first[slot].weights.iter_mut(),
                self.second[slot].weights.iter_mut(),
                lr,
                c1,
                c2,
            );
            adam_step(
                layer.bias.iter_mut(),
                g.bias.iter(),
                self.first[slot].bias.iter_mut(),
                self.second[slot].bias.iter_mut(),
                lr,
                c1,
                c2,
            );
        }
    }
}

fn adam_step<'a>(
    params: impl Iterator<Item = &'a mut f64>,
    grads: impl Iterator<Item = &'a f64>,
    first: impl Iterator<Item = &'a mut f64>,
    second: impl Iterator<Item = &'a mut f64>,
    lr: f64,
    c1: f64,
    c2: f64,
) {
    for (((p, &g), m), v) in params.zip(grads).zip(first).zip(second) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Trains on field samples. The model's scaler is used as is.
pub fn train(
    model: &MlpModel,
    data: &[FieldSample],
    config: &TrainConfig,
) -> Result<(MlpModel, TrainingHistory)> {
    let features: Vec<Features> = data.iter().map(FieldSample::features).collect();
    let targets: Vec<f64> = data.iter().map(|s| s.cp).collect();
    train_rows(model, &features, &targets, config)
}

/// Trains on raw feature rows and cp targets.
///
/// Returns the weights of the epoch with the lowest validation loss. Without
/// a validation split every epoch runs and the final weights are returned.
/// Frozen layers are never written.
pub fn train_rows(
    model: &MlpModel,
    features: &[Features],
    targets: &[f64],
    config: &TrainConfig,
) -> Result<(MlpModel, TrainingHistory)> {
    config.validate()?;
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if features.len() != targets.len() {
        return Err(Error::LengthMismatch {
            expected: features.len(),
            actual: targets.len(),
        });
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("non-finite training target".into()));
    }
    let x = model.scale_inputs(features);
    let y = Array1::from(targets.to_vec());

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((config.validation_fraction * features.len() as f64).round() as usize)
        .min(features.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let (trained, history) = run_epochs(model, &x, &y, train_idx, val_idx, config, &mut rng, None)?;
    if !(config.use_validation_in_final_fit && n_val > 0 && history.best_epoch > 0) {
        return Ok((trained, history));
    }

    let all: Vec<usize> = (0..features.len()).collect();
    let mut refit_rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let (refit, _) = run_epochs(
        model,
        &x,
        &y,
        &all,
        &[],
        config,
        &mut refit_rng,
        Some(history.best_epoch),
    )?;
    let history = TrainingHistory {
        refit_epochs: history.best_epoch,
        ..history
    };
    Ok((refit, history))
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    start: &MlpModel,
    x: &Array2<f64>,
    y: &Array1<f64>,
    train_idx: &[usize],
    val_idx: &[usize],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    epoch_budget: Option<usize>,
) -> Result<(MlpModel, TrainingHistory)> {
    let mut model = start.clone();
    let mut history = TrainingHistory::default();
    if model.frozen_prefix() == model.num_layers() {
        return Ok((model, history));
    }
    let max_epochs = epoch_budget.unwrap_or(config.max_epochs);
    let batch_size = config.batch_size.min(train_idx.len());
    let x_val = x.select(Axis(0), val_idx);
    let y_val = y.select(Axis(0), val_idx);

    let mut adam = Adam::new(&model);
    let mut order = train_idx.to_vec();
    let mut best: Option<(f64, Vec<Layer>)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=max_epochs {
        let lr = lr_at_epoch(config, epoch);
        order.shuffle(rng);
        let mut epoch_loss = CompensatedSum::new();
        for batch in order.chunks(batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb = y.select(Axis(0), batch);
            let (loss, grads) = loss_and_gradients(&model, xb.view(), yb.view())
                .map_err(|e| with_epoch(e, epoch))?;
            if !(loss <= DIVERGENCE_LIMIT) {
                return Err(Error::Divergence { epoch, loss });
            }
            epoch_loss.add(loss * batch.len() as f64);
            adam.update(&mut model, &grads, lr);
        }
        let train_loss = epoch_loss.total() / order.len() as f64;
        history.train_loss.push(train_loss);
        history.learning_rate.push(lr);

        if val_idx.is_empty() {
            history.best_epoch = epoch;
            continue;
        }
        let val_loss = mean_squared_error(&model, &x_val, &y_val);
        if !(val_loss <= DIVERGENCE_LIMIT) {
            return Err(Error::Divergence {
                epoch,
                loss: val_loss,
            });
        }
        history.validation_loss.push(val_loss);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.layers().to_vec()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stopped_early = true;
                log::debug!(
                    "early stop at epoch {epoch}, best epoch {}",
                    history.best_epoch
                );
                break;
            }
        }
    }

    if let Some((_, layers)) = best {
        model = MlpModel::from_layers(layers, model.scaler().clone(), model.frozen_prefix())?;
    }
    Ok((model, history))
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Divergence { loss, .. } => Error::Divergence { epoch, loss },
        other => other,
    }
}

/// Compensated mean squared error over already-scaled inputs.
pub(crate) fn mean_squared_error(model: &MlpModel, x: &Array2<f64>, y: &Array1<f64>) -> f64 {
    const CHUNK: usize = 8192;
    let mut acc = CompensatedSum::new();
    for (xc, yc) in x
        .axis_chunks_iter(Axis(0), CHUNK)
        .zip(y.axis_chunks_iter(Axis(0), CHUNK))
    {
        let out = model.forward_scaled(xc);
        for (p, t) in out.column(0).iter().zip(yc) {
            acc.add((p - t) * (p - t));
        }
    }
    acc.total() / y.len() as f64
}
