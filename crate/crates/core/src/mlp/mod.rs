//! Fully connected network with ELU hidden layers and a linear output.
//!
//! Inputs are the eight raw features of [`crate::data::features`]; the model
//! owns the min-max scaler that maps them into the normalised space seen by
//! the first layer.

mod checkpoint;
mod grad;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use grad::{loss_and_gradients, Gradients, LayerGradient};
pub use train::{lr_at_epoch, train, train_rows, TrainConfig, TrainingHistory};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Features, MinMaxScaler, NUM_FEATURES};
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN_DIM: usize = 64;
pub const DEFAULT_NUM_HIDDEN_LAYERS: usize = 9;

/// Exponential linear unit with unit scale.
#[inline]
pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Derivative of [`elu`] expressed through its output.
#[inline]
fn elu_grad_from_output(a: f64) -> f64 {
    if a >= 0.0 {
        1.0
    } else {
        a + 1.0
    }
}

/// One affine layer; `weights` has shape (outputs, inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
    hidden_dim: usize,
    num_hidden_layers: usize,
    scaler: MinMaxScaler,
    frozen_prefix: usize,
}

impl MlpModel {
    /// Glorot-uniform weights and zero biases, drawn from a seeded stream.
    pub fn new(
        hidden_dim: usize,
        num_hidden_layers: usize,
        scaler: MinMaxScaler,
        seed: u64,
    ) -> Result<Self> {
        if hidden_dim == 0 || num_hidden_layers == 0 {
            return Err(Error::InvalidInput(
                "hidden_dim and num_hidden_layers must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims(hidden_dim, num_hidden_layers)
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    rng.random_range(-limit..limit)
                });
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            layers,
            hidden_dim,
            num_hidden_layers,
            scaler,
            frozen_prefix: 0,
        })
    }

    /// Assembles a model from explicit layers, checking the shape chain
    /// `8 -> hidden -> ... -> hidden -> 1`.
    pub fn from_layers(
        layers: Vec<Layer>,
        scaler: MinMaxScaler,
        frozen_prefix: usize,
    ) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::ShapeInconsistency(
                "a model needs at least one hidden layer and the output layer".into(),
            ));
        }
        let hidden_dim = layers[0].outputs();
        let num_hidden_layers = layers.len() - 1;
        for (l, ((fan_in, fan_out), layer)) in layer_dims(hidden_dim, num_hidden_layers)
            .zip(&layers)
            .enumerate()
        {
            if layer.inputs() != fan_in || layer.outputs() != fan_out || layer.bias.len() != fan_out
            {
                return Err(Error::ShapeInconsistency(format!(
                    "layer {l} has shape {}x{} with bias {}, expected {fan_out}x{fan_in}",
                    layer.outputs(),
                    layer.inputs(),
                    layer.bias.len()
                )));
            }
        }
        if frozen_prefix > layers.len() {
            return Err(Error::ShapeInconsistency(format!(
                "frozen prefix {frozen_prefix} exceeds layer count {}",
                layers.len()
            )));
        }
        scaler.validate()?;
        Ok(Self {
            layers,
            hidden_dim,
            num_hidden_layers,
            scaler,
            frozen_prefix,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_hidden_layers(&self) -> usize {
        self.num_hidden_layers
    }

    /// Hidden layers plus the output layer.
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn scaler(&self) -> &MinMaxScaler {
        &self.scaler
    }

    pub fn frozen_prefix(&self) -> usize {
        self.frozen_prefix
    }

    pub fn set_frozen_prefix(&mut self, frozen_prefix: usize) -> Result<()> {
        if frozen_prefix > self.layers.len() {
            return Err(Error::InvalidInput(format!(
                "frozen prefix {frozen_prefix} exceeds layer count {}",
                self.layers.len()
            )));
        }
        self.frozen_prefix = frozen_prefix;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(Layer::num_parameters).sum()
    }

    pub fn num_trainable_parameters(&self) -> usize {
        self.layers[self.frozen_prefix..]
            .iter()
            .map(Layer::num_parameters)
            .sum()
    }

    /// Scales raw feature rows into a (rows x 8) matrix.
    pub fn scale_inputs(&self, rows: &[Features]) -> Array2<f64> {
        let mut x = Array2::zeros((rows.len(), NUM_FEATURES));
        for (mut dst, raw) in x.axis_iter_mut(Axis(0)).zip(rows) {
            for (d, v) in dst.iter_mut().zip(self.scaler.transform(raw)) {
                *d = v;
            }
        }
        x
    }

    /// Predicted cp at one raw feature vector.
    pub fn predict(&self, raw: &Features) -> f64 {
        self.predict_batch(std::slice::from_ref(raw))[0]
    }

    /// Like [`predict`](Self::predict) for an unchecked slice.
    pub fn predict_slice(&self, raw: &[f64]) -> Result<f64> {
        let features: Features = raw.try_into().map_err(|_| Error::LengthMismatch {
            expected: NUM_FEATURES,
            actual: raw.len(),
        })?;
        Ok(self.predict(&features))
    }

    pub fn predict_batch(&self, rows: &[Features]) -> Vec<f64> {
        const CHUNK: usize = 8192;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(CHUNK) {
            let x = self.scale_inputs(chunk);
            out.extend(self.forward_scaled(x.view()).column(0).iter());
        }
        out
    }

    /// Network output for already-scaled inputs, shape (rows x 1).
    pub fn forward_scaled(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut a = affine(&self.layers[0], x);
        if last > 0 {
            a.mapv_inplace(elu);
        }
        for (l, layer) in self.layers.iter().enumerate().skip(1) {
            a = affine(layer, a.view());
            if l < last {
                a.mapv_inplace(elu);
            }
        }
        a
    }

    /// Activations of every layer, input first and network output last.
    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = affine(layer, acts[l].view());
            if l < last {
                a.mapv_inplace(elu);
            }
            acts.push(a);
        }
        acts
    }
}

fn affine(layer: &Layer, x: ArrayView2<f64>) -> Array2<f64> {
    let mut z = x.dot(&layer.weights.t());
    z += &layer.bias;
    z
}

/// (fan_in, fan_out) of each layer in order.
fn layer_dims(hidden_dim: usize, num_hidden_layers: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..=num_hidden_layers).map(move |l| {
        let fan_in = if l == 0 { NUM_FEATURES } else { hidden_dim };
        let fan_out = if l == num_hidden_layers {
            1
        } else {
            hidden_dim
        };
        (fan_in, fan_out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn elu_values() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu(2.0), 2.0);
        assert!((elu(-1.0) - (-0.6321205588285577)).abs() < 1e-15);
    }

    #[test]
    fn default_architecture_parameter_counts() {
        let m = MlpModel::new(64, 9, MinMaxScaler::unit(), 0).unwrap();
        assert_eq!(m.num_layers(), 10);
        assert_eq!(m.num_parameters(), 33921);
        let mut m = m;
        m.set_frozen_prefix(2).unwrap();
        assert_eq!(m.num_trainable_parameters(), 29185);
        assert!(m.set_frozen_prefix(11).is_err());
    }

    #[test]
    fn zero_model_outputs_zero() {
        let layers = vec![Layer::zeros(8, 4), Layer::zeros(4, 4), Layer::zeros(4, 1)];
        let m = MlpModel::from_layers(layers, MinMaxScaler::unit(), 0).unwrap();
        assert_eq!(m.predict(&[0.3, -0.2, 0.1, 0.0, 0.4, 0.0, 0.0, 1.0]), 0.0);
    }

    #[test]
    fn hand_computed_two_unit_network() {
        // hidden: h = elu(W1 x + b1) with W1 picking features 0 and 1;
        // output: y = 2 h0 - h1 + 0.5
        let mut w1 = Array2::zeros((2, 8));
        w1[[0, 0]] = 1.0;
        w1[[1, 1]] = 1.0;
        let l1 = Layer {
            weights: w1,
            bias: array![0.0, 0.0],
        };
        let l2 = Layer {
            weights: array![[2.0, -1.0]],
            bias: array![0.5],
        };
        let m = MlpModel::from_layers(vec![l1, l2], MinMaxScaler::unit(), 0).unwrap();
        let y = m.predict(&[0.25, 0.125, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(y, 2.0 * 0.25 - 0.125 + 0.5);
    }

    #[test]
    fn batch_equals_single_calls() {
        let m = MlpModel::new(16, 3, MinMaxScaler::unit(), 3).unwrap();
        let rows: Vec<Features> = (0..37)
            .map(|i| std::array::from_fn(|j| ((i * 8 + j) as f64 * 0.37).sin() * 0.5))
            .collect();
        let batch = m.predict_batch(&rows);
        for (r, b) in rows.iter().zip(&batch) {
            assert_eq!(m.predict(r).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn shape_checks() {
        let layers = vec![Layer::zeros(8, 4), Layer::zeros(5, 1)];
        assert!(matches!(
            MlpModel::from_layers(layers, MinMaxScaler::unit(), 0),
            Err(Error::ShapeInconsistency(_))
        ));
        let m = MlpModel::new(4, 1, MinMaxScaler::unit(), 0).unwrap();
        assert!(m.predict_slice(&[0.0; 7]).is_err());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = MlpModel::new(8, 2, MinMaxScaler::unit(), 11).unwrap();
        let b = MlpModel::new(8, 2, MinMaxScaler::unit(), 11).unwrap();
        let c = MlpModel::new(8, 2, MinMaxScaler::unit(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
