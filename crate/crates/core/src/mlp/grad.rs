use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{elu_grad_from_output, MlpModel};
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    /// Index of the layer in the model.
    pub layer: usize,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients for the trainable (non-frozen) layers only, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

/// Mean squared error over the batch and its gradient by reverse-mode
/// accumulation. `inputs` must already be scaled.
pub fn loss_and_gradients(
    model: &MlpModel,
    inputs: ArrayView2<f64>,
    targets: ArrayView1<f64>,
) -> Result<(f64, Gradients)> {
    let batch = inputs.nrows();
    if batch == 0 {
        return Err(Error::EmptyDataset);
    }
    if targets.len() != batch {
        return Err(Error::LengthMismatch {
            expected: batch,
            actual: targets.len(),
        });
    }
    if inputs.ncols() != model.layers()[0].inputs() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} input columns, got {}",
            model.layers()[0].inputs(),
            inputs.ncols()
        )));
    }

    let acts = model.forward_cached(inputs);
    let output = acts.last().expect("output activation");
    let mut loss = CompensatedSum::new();
    let scale = 2.0 / batch as f64;
    let mut delta = Array2::zeros((batch, 1));
    for ((d, &y), &t) in delta.iter_mut().zip(output.column(0)).zip(targets) {
        let r = y - t;
        loss.add(r * r);
        *d = scale * r;
    }
    let loss = loss.total() / batch as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence { epoch: 0, loss });
    }

    let frozen = model.frozen_prefix();
    let layers = model.layers();
    let mut grads = Vec::with_capacity(layers.len() - frozen);
    for l in (frozen..layers.len()).rev() {
        let a_in = &acts[l];
        grads.push(LayerGradient {
            layer: l,
            weights: delta.t().dot(a_in),
            bias: delta.sum_axis(Axis(0)),
        });
        if l > frozen {
            let mut back = delta.dot(&layers[l].weights);
            back.zip_mut_with(a_in, |g, &a| *g *= elu_grad_from_output(a));
            delta = back;
        }
    }
    grads.reverse();
    Ok((loss, Gradients { layers: grads }))
}
