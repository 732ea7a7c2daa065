//! JSON checkpoints. Doubles are written in shortest round-trip form and read
//! back with exact parsing, so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Layer, MlpModel};
use crate::data::{MinMaxScaler, NUM_FEATURES};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScalerRecord {
    min: Vec<f64>,
    max: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    format_version: u32,
    input_dim: usize,
    hidden_dim: usize,
    num_hidden_layers: usize,
    frozen_prefix: usize,
    scaler: ScalerRecord,
    layers: Vec<LayerRecord>,
}

impl MlpModel {
    pub fn to_json(&self) -> Result<String> {
        let record = CheckpointRecord {
            format_version: CHECKPOINT_VERSION,
            input_dim: NUM_FEATURES,
            hidden_dim: self.hidden_dim,
            num_hidden_layers: self.num_hidden_layers,
            frozen_prefix: self.frozen_prefix,
            scaler: ScalerRecord {
                min: self.scaler.min.to_vec(),
                max: self.scaler.max.to_vec(),
            },
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    weights: l.weights.outer_iter().map(|r| r.to_vec()).collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&record)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let version: Version = serde_json::from_str(text).map_err(malformed)?;
        if version.format_version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let record: CheckpointRecord = serde_json::from_str(text).map_err(malformed)?;
        if record.input_dim != NUM_FEATURES {
            return Err(Error::ShapeInconsistency(format!(
                "input_dim {} (expected {NUM_FEATURES})",
                record.input_dim
            )));
        }
        if record.scaler.min.len() != NUM_FEATURES || record.scaler.max.len() != NUM_FEATURES {
            return Err(Error::ShapeInconsistency(
                "scaler must have 8 features".into(),
            ));
        }
        if record.layers.len() != record.num_hidden_layers + 1 {
            return Err(Error::ShapeInconsistency(format!(
                "{} layers stored for {} hidden layers",
                record.layers.len(),
                record.num_hidden_layers
            )));
        }
        let mut layers = Vec::with_capacity(record.layers.len());
        for (l, lr) in record.layers.into_iter().enumerate() {
            let rows = lr.weights.len();
            let cols = lr.weights.first().map_or(0, Vec::len);
            if lr.weights.iter().any(|r| r.len() != cols) {
                return Err(Error::ShapeInconsistency(format!(
                    "layer {l} has ragged rows"
                )));
            }
            let flat: Vec<f64> = lr.weights.into_iter().flatten().collect();
            let weights = Array2::from_shape_vec((rows, cols), flat)
                .map_err(|e| Error::ShapeInconsistency(format!("layer {l}: {e}")))?;
            layers.push(Layer {
                weights,
                bias: Array1::from(lr.bias),
            });
        }
        let scaler = MinMaxScaler {
            min: record.scaler.min.try_into().expect("length checked"),
            max: record.scaler.max.try_into().expect("length checked"),
        };
        let model = MlpModel::from_layers(layers, scaler, record.frozen_prefix)?;
        if model.hidden_dim != record.hidden_dim {
            return Err(Error::ShapeInconsistency(format!(
                "hidden_dim {} does not match stored layers ({})",
                record.hidden_dim, model.hidden_dim
            )));
        }
        Ok(model)
    }
}

fn malformed(e: serde_json::Error) -> Error {
    Error::TruncatedCheckpoint(e.to_string())
}

pub fn save_checkpoint(model: &MlpModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MlpModel::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Features;

    fn model() -> MlpModel {
        let scaler = MinMaxScaler {
            min: [0.5, 0.0, -0.1, 0.0, 0.0, 0.0, 0.0, -1.0],
            max: [0.9, 10.0, 1.6, 1.0, 0.0, 0.0, 0.0, 1.0],
        };
        let mut m = MlpModel::new(8, 3, scaler, 77).unwrap();
        m.set_frozen_prefix(2).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        for (a, b) in m.layers().iter().zip(back.layers()) {
            assert!(a
                .weights
                .iter()
                .zip(&b.weights)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let rows: Vec<Features> = (0..100)
            .map(|i| std::array::from_fn(|j| ((i * 13 + j * 7) as f64).cos()))
            .collect();
        let pa = m.predict_batch(&rows);
        let pb = back.predict_batch(&rows);
        assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn version_mismatch() {
        let text =
            model()
                .to_json()
                .unwrap()
                .replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert!(matches!(
            MlpModel::from_json(&text),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
    }

    #[test]
    fn truncated_file() {
        let text = model().to_json().unwrap();
        let cut = &text[..text.len() / 2];
        assert!(matches!(
            MlpModel::from_json(cut),
            Err(Error::TruncatedCheckpoint(_))
        ));
    }

    #[test]
    fn tampered_shape_metadata() {
        let text = model().to_json().unwrap();
        let tampered = text.replacen("\"hidden_dim\":8", "\"hidden_dim\":9", 1);
        assert!(matches!(
            MlpModel::from_json(&tampered),
            Err(Error::ShapeInconsistency(_))
        ));
        let tampered = text.replacen("\"num_hidden_layers\":3", "\"num_hidden_layers\":4", 1);
        assert!(matches!(
            MlpModel::from_json(&tampered),
            Err(Error::ShapeInconsistency(_))
        ));
    }
}
