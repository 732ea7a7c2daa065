//! Fine-tuning a pre-trained network on sparse measurements with its
//! leading layers frozen.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{features, Features, FlowCondition, SparseDataset, SurfacePoint};
use crate::error::{Error, Result};
use crate::mlp::{train_rows, MlpModel, TrainConfig, TrainingHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Strategy {
    /// Fine-tune and predict at the same single condition.
    #[serde(rename = "sp")]
    SinglePoint,
    /// Fine-tune once on all measured conditions, predict anywhere.
    #[default]
    #[serde(rename = "mp")]
    MultiPoint,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sp" => Ok(Strategy::SinglePoint),
            "mp" => Ok(Strategy::MultiPoint),
            other => Err(Error::InvalidInput(format!(
                "unknown strategy {other:?}, expected sp or mp"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub frozen_prefix: usize,
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub strategy: Strategy,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    /// Below this many rows the validation split is dropped and training
    /// runs for `fixed_epochs` instead of stopping early.
    pub min_rows_for_validation: usize,
    pub fixed_epochs: usize,
    pub rng_seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            frozen_prefix: 2,
            initial_lr: 3e-5,
            decay_factor: 0.998,
            patience: 30,
            strategy: Strategy::MultiPoint,
            batch_size: 32,
            max_epochs: 1000,
            validation_fraction: 0.2,
            min_rows_for_validation: 50,
            fixed_epochs: 2000,
            rng_seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// Training settings for a measurement set of `rows` rows.
    pub fn train_config(&self, rows: usize) -> TrainConfig {
        let small = rows < self.min_rows_for_validation;
        TrainConfig {
            initial_lr: self.initial_lr,
            decay_factor: self.decay_factor,
            batch_size: self.batch_size,
            max_epochs: if small {
                self.fixed_epochs
            } else {
                self.max_epochs
            },
            patience: self.patience,
            validation_fraction: if small { 0.0 } else { self.validation_fraction },
            rng_seed: self.rng_seed,
            use_validation_in_final_fit: false,
        }
    }
}

/// Retrains the trailing layers of `base` on every measurement row. The
/// scaler and the first `frozen_prefix` layers are carried over unchanged.
pub fn finetune(
    base: &MlpModel,
    measurements: &SparseDataset,
    config: &FinetuneConfig,
) -> Result<(MlpModel, TrainingHistory)> {
    if measurements.is_empty() {
        return Err(Error::EmptyMeasurements);
    }
    if config.strategy == Strategy::SinglePoint && measurements.num_conditions() != 1 {
        return Err(Error::InvalidInput(format!(
            "single-point fine-tuning needs exactly one condition, got {}",
            measurements.num_conditions()
        )));
    }
    let mut model = base.clone();
    model.set_frozen_prefix(config.frozen_prefix)?;
    let (rows, targets): (Vec<Features>, Vec<f64>) =
        measurements.samples().map(|s| (s.features(), s.cp)).unzip();
    train_rows(&model, &rows, &targets, &config.train_config(rows.len()))
}

/// Dense prediction for one evaluation condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPrediction {
    pub condition: FlowCondition,
    pub cp: Vec<f64>,
}

/// Evaluates `model` at every grid point for one condition.
pub fn predict_field(
    model: &MlpModel,
    condition: &FlowCondition,
    grid: &[SurfacePoint],
) -> Vec<f64> {
    let rows: Vec<Features> = grid.iter().map(|p| features(condition, p)).collect();
    model.predict_batch(&rows)
}

/// Runs one fusion strategy and predicts the dense field at each evaluation
/// condition.
///
/// SinglePoint fine-tunes a fresh copy of `base` per condition on that
/// condition's readings alone; MultiPoint fine-tunes once on everything.
pub fn run_strategy(
    base: &MlpModel,
    measurements: &SparseDataset,
    eval_conditions: &[FlowCondition],
    grid: &[SurfacePoint],
    config: &FinetuneConfig,
) -> Result<Vec<ConditionPrediction>> {
    match config.strategy {
        Strategy::MultiPoint => {
            let (model, _) = finetune(base, measurements, config)?;
            Ok(eval_conditions
                .iter()
                .map(|c| ConditionPrediction {
                    condition: *c,
                    cp: predict_field(&model, c, grid),
                })
                .collect())
        }
        Strategy::SinglePoint => {
            let indices = eval_conditions
                .iter()
                .map(|c| {
                    measurements.condition_index(c).ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "no measurements at M={}, alpha={} for single-point fine-tuning",
                            c.mach, c.alpha
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            indices
                .into_iter()
                .zip(eval_conditions)
                .map(|(k, c)| {
                    let (model, _) = finetune(base, &measurements.select_conditions(&[k]), config)?;
                    Ok(ConditionPrediction {
                        condition: *c,
                        cp: predict_field(&model, c, grid),
                    })
                })
                .collect()
        }
    }
}

pub const PREDICTION_HEADER: &str = "mach,alpha,x,y,z,cp_pred";

pub fn write_prediction_csv(
    prediction: &ConditionPrediction,
    grid: &[SurfacePoint],
    path: &Path,
) -> Result<()> {
    if grid.len() != prediction.cp.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            actual: prediction.cp.len(),
        });
    }
    let FlowCondition { mach, alpha } = prediction.condition;
    let mut out = String::with_capacity(grid.len() * 80);
    out.push_str(PREDICTION_HEADER);
    out.push('\n');
    for (p, cp) in grid.iter().zip(&prediction.cp) {
        let [x, y, z] = p.position;
        out.push_str(&format!("{mach},{alpha},{x},{y},{z},{cp}\n"));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
