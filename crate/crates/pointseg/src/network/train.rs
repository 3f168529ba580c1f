//! Adagrad training over single-sample tapes.
//!
//! Batches are emulated by averaging per-sample gradients: each frame gets
//! its own forward/backward tape and the named gradients are pooled before
//! one optimizer step. This keeps peak memory at one tape regardless of
//! batch size and makes the update independent of sample order up to f32
//! rounding of the fixed summation order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{build_forward, ModelParams};
use crate::projection::SphericalFrame;
use crate::tensor::Tensor;

/// One training frame: input channels plus per-pixel labels.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub channels: Tensor,
    pub labels: Vec<u8>,
}

impl TrainSample {
    /// Extracts a sample from a labeled frame.
    pub fn from_frame(frame: &SphericalFrame) -> Result<Self> {
        let labels = frame
            .labels
            .clone()
            .ok_or_else(|| Error::data("training", "frame has no labels"))?;
        Ok(TrainSample {
            channels: frame.channels.clone(),
            labels,
        })
    }
}

/// Adagrad state: per-parameter accumulated squared gradients.
#[derive(Clone, Debug)]
pub struct Adagrad {
    pub lr: f32,
    pub eps: f32,
    accum: BTreeMap<String, Vec<f32>>,
}

impl Adagrad {
    pub fn new(lr: f32) -> Self {
        Adagrad {
            lr,
            eps: 1e-7,
            accum: BTreeMap::new(),
        }
    }

    /// One update: `acc += g^2; theta -= lr * g / (sqrt(acc) + eps)`.
    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, g) in grads {
            let theta = params.tensors.get(name).ok_or_else(|| {
                Error::Config(format!("gradient for unknown parameter {name}"))
            })?;
            if theta.shape() != g.shape() {
                return Err(Error::shape(
                    "adagrad",
                    format!(
                        "gradient for {name} has shape {:?}, parameter is {:?}",
                        g.shape(),
                        theta.shape()
                    ),
                ));
            }
            let acc = self
                .accum
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; theta.len()]);
            let mut data = theta.data().to_vec();
            for ((t, &gv), a) in data.iter_mut().zip(g.data().iter()).zip(acc.iter_mut()) {
                *a += gv * gv;
                *t -= self.lr * gv / (a.sqrt() + self.eps);
            }
            let updated = Tensor::new(theta.shape().to_vec(), data)?;
            params.tensors.insert(name.clone(), updated);
        }
        Ok(())
    }
}

/// One optimizer step over a batch: per-sample forward/backward passes,
/// gradients averaged, then a single Adagrad update. Returns the mean
/// batch loss. A non-finite loss aborts the step before any update and
/// names the first graph node that went non-finite.
pub fn train_step(
    params: &mut ModelParams,
    batch: &[TrainSample],
    class_weights: &[f32],
    opt: &mut Adagrad,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::data("training", "empty batch"));
    }
    let scale = 1.0 / batch.len() as f32;
    let mut pooled: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut total_loss = 0.0f64;

    for sample in batch {
        let mut g = build_forward(params, &sample.channels)?;
        let loss_id = g
            .tape
            .weighted_nll_mean(g.probs, &sample.labels, class_weights)?;
        g.tape.set_label(loss_id, "loss");
        let loss_value = g.tape.value(loss_id).item()?;
        if !loss_value.is_finite() {
            let culprit = g
                .tape
                .first_non_finite()
                .unwrap_or_else(|| "loss".to_string());
            return Err(Error::Numeric(format!(
                "non-finite loss {loss_value}; first non-finite node: {culprit}"
            )));
        }
        total_loss += loss_value as f64;

        let grads = g.tape.backward(loss_id)?;
        for (name, grad) in grads.collect(&g.tape, &g.param_ids) {
            let slot = pooled
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for (s, &v) in slot.iter_mut().zip(grad.data().iter()) {
                *s += v * scale;
            }
            shapes.entry(name).or_insert_with(|| grad.shape().to_vec());
        }
    }

    let mut averaged = BTreeMap::new();
    for (name, data) in pooled {
        averaged.insert(name.clone(), Tensor::new(shapes[&name].clone(), data)?);
    }
    opt.apply(params, &averaged)?;
    Ok((total_loss / batch.len() as f64) as f32)
}
