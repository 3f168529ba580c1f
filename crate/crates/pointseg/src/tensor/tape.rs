//! Reverse-mode automatic differentiation over the forward kernels.
//!
//! A `Tape` records one single-sample forward pass as a sequence of nodes;
//! op inputs always refer to earlier nodes, so tape order is already a
//! topological order and `backward` is a single reverse sweep. One tape per
//! training step; tapes are not shared across threads.

use std::collections::BTreeMap;

use super::{kernels, ConvSpec, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ValueId(usize);

enum Op {
    Leaf,
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        spec: ConvSpec,
    },
    Deconv2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        spec: ConvSpec,
    },
    MaxPool {
        x: ValueId,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: ValueId,
    },
    Dense {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    Relu {
        x: ValueId,
    },
    Sigmoid {
        x: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    ScaleChannels {
        x: ValueId,
        gate: ValueId,
    },
    ConcatChannels {
        xs: Vec<ValueId>,
        parts: Vec<usize>,
    },
    SoftmaxChannels {
        x: ValueId,
    },
    Sum {
        x: ValueId,
    },
    WeightedNllMean {
        probs: ValueId,
        labels: Vec<u8>,
        weights: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    label: Option<String>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> ValueId {
        self.nodes.push(Node {
            value,
            op,
            label: None,
        });
        ValueId(self.nodes.len() - 1)
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Attaches a diagnostic name used when reporting non-finite values.
    pub fn set_label(&mut self, id: ValueId, label: impl Into<String>) {
        self.nodes[id.0].label = Some(label.into());
    }

    /// First node holding a non-finite value, reported by its label (or
    /// node index when unlabeled). Used to attribute numerical failures.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.all_finite() {
                None
            } else {
                Some(n.label.clone().unwrap_or_else(|| format!("node {i}")))
            }
        })
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        spec: &ConvSpec,
    ) -> Result<ValueId> {
        let y = kernels::conv2d(self.value(x), self.value(w), self.value(b), spec)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, spec: *spec }))
    }

    pub fn deconv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        spec: &ConvSpec,
    ) -> Result<ValueId> {
        let y = kernels::deconv2d(self.value(x), self.value(w), self.value(b), spec)?;
        Ok(self.push(y, Op::Deconv2d { x, w, b, spec: *spec }))
    }

    pub fn maxpool2d(
        &mut self,
        x: ValueId,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<ValueId> {
        let (y, argmax) = kernels::maxpool2d_with_argmax(self.value(x), kernel, stride)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let y = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x }))
    }

    pub fn dense(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let y = kernels::dense(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Dense { x, w, b }))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let y = kernels::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let y = kernels::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let y = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn scale_channels(&mut self, x: ValueId, gate: ValueId) -> Result<ValueId> {
        let y = kernels::scale_channels(self.value(x), self.value(gate))?;
        Ok(self.push(y, Op::ScaleChannels { x, gate }))
    }

    pub fn concat_channels(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        let tensors: Vec<&Tensor> = xs.iter().map(|&id| self.value(id)).collect();
        let parts: Vec<usize> = tensors
            .iter()
            .map(|t| t.dims3().map(|(_, _, c)| c))
            .collect::<Result<_>>()?;
        let y = kernels::concat_channels(&tensors)?;
        Ok(self.push(
            y,
            Op::ConcatChannels {
                xs: xs.to_vec(),
                parts,
            },
        ))
    }

    pub fn softmax_channels(&mut self, x: ValueId) -> Result<ValueId> {
        let y = kernels::softmax_channels(self.value(x))?;
        Ok(self.push(y, Op::SoftmaxChannels { x }))
    }

    /// Scalar sum of all elements (test and diagnostic loss head).
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let y = Tensor::scalar(kernels::sum_all(self.value(x)));
        self.push(y, Op::Sum { x })
    }

    /// Scalar weighted negative-log-likelihood over all pixels.
    pub fn weighted_nll_mean(
        &mut self,
        probs: ValueId,
        labels: &[u8],
        weights: &[f32],
    ) -> Result<ValueId> {
        let l = kernels::weighted_nll_mean(self.value(probs), labels, weights)?;
        Ok(self.push(
            Tensor::scalar(l),
            Op::WeightedNllMean {
                probs,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar loss node. Every recorded node gets a
    /// gradient slot; nodes the loss does not depend on keep `None`, which
    /// `Gradients::wrt` reads back as zeros.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        let loss_val = self.value(loss);
        if loss_val.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_val.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(loss_val.shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g); // keep: leaves are what callers read
                    continue;
                }
                Op::Conv2d { x, w, b, spec } => {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(self.value(*x), self.value(*w), spec, &g)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Deconv2d { x, w, b, spec } => {
                    let (dx, dw, db) =
                        kernels::deconv2d_backward(self.value(*x), self.value(*w), spec, &g)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::MaxPool { x, argmax } => {
                    let dx =
                        kernels::maxpool2d_backward(self.value(*x).shape(), argmax, &g)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::GlobalAvgPool { x } => {
                    let dx = kernels::global_avg_pool_backward(self.value(*x).shape(), &g)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) =
                        kernels::dense_backward(self.value(*x), self.value(*w), &g)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[i].value;
                    let data = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yv, &gv)| gv * yv * (1.0 - yv))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), data)?)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::ScaleChannels { x, gate } => {
                    let xv = self.value(*x);
                    let gatev = self.value(*gate);
                    let (h, w, c) = xv.dims3()?;
                    let gd = gatev.data();
                    let mut dx = vec![0.0f32; h * w * c];
                    let mut dgate = vec![0.0f32; c];
                    for px in 0..h * w {
                        for ci in 0..c {
                            let gv = g.data()[px * c + ci];
                            dx[px * c + ci] = gv * gd[ci];
                            dgate[ci] += gv * xv.data()[px * c + ci];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![h, w, c], dx)?)?;
                    accumulate(&mut grads, *gate, Tensor::new(vec![1, 1, c], dgate)?)?;
                }
                Op::ConcatChannels { xs, parts } => {
                    let split = kernels::concat_channels_backward(parts, &g)?;
                    for (&x, dx) in xs.iter().zip(split) {
                        accumulate(&mut grads, x, dx)?;
                    }
                }
                Op::SoftmaxChannels { x } => {
                    let dx = kernels::softmax_channels_backward(&self.nodes[i].value, &g)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Sum { x } => {
                    let scale = g.item()?;
                    let xv = self.value(*x);
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::filled(xv.shape().to_vec(), scale),
                    )?;
                }
                Op::WeightedNllMean {
                    probs,
                    labels,
                    weights,
                } => {
                    let dp = kernels::weighted_nll_mean_backward(
                        self.value(*probs),
                        labels,
                        weights,
                        g.item()?,
                    )?;
                    accumulate(&mut grads, *probs, dp)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: ValueId, delta: Tensor) -> Result<()> {
    grads[id.0] = Some(match grads[id.0].take() {
        None => delta,
        Some(existing) => kernels::add(&existing, &delta)?,
    });
    Ok(())
}

/// Gradient buffers produced by `Tape::backward`, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a node; zeros when the loss does not
    /// depend on it.
    pub fn wrt(&self, tape: &Tape, id: ValueId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros_like(tape.value(id)),
        }
    }

    /// Collects gradients for a set of named leaves.
    pub fn collect(
        &self,
        tape: &Tape,
        ids: &BTreeMap<String, ValueId>,
    ) -> BTreeMap<String, Tensor> {
        ids.iter()
            .map(|(name, &id)| (name.clone(), self.wrt(tape, id)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3, 1], vec![1.0, -2.0, 0.5, 3.0, 0.0, 9.0]).unwrap());
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(&tape, x).data(), [1.0; 6]);
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(vec![1, 1, 2], 1.0));
        let unused = tape.leaf(Tensor::filled(vec![3, 3, 4], 5.0));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(&tape, unused), Tensor::zeros(vec![3, 3, 4]));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(vec![2, 2, 1], 1.0));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn relu_blocks_negative_side() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 4, 1], vec![-1.0, 0.0, 0.5, 2.0]).unwrap());
        let y = tape.relu(x);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        // Subgradient at exactly zero is taken as zero.
        assert_eq!(grads.wrt(&tape, x).data(), [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn add_fans_gradient_to_both_inputs() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::filled(vec![2, 2, 1], 1.0));
        let b = tape.leaf(Tensor::filled(vec![2, 2, 1], 2.0));
        let y = tape.add(a, b).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(&tape, a).data(), [1.0; 4]);
        assert_eq!(grads.wrt(&tape, b).data(), [1.0; 4]);
    }

    #[test]
    fn reused_node_accumulates_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(vec![1, 1, 1], 3.0));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(&tape, x).data(), [2.0]);
    }

    #[test]
    fn non_finite_reporting_names_label() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(vec![1, 1, 1], f32::NAN));
        tape.set_label(x, "fire3.squeeze");
        assert_eq!(tape.first_non_finite().as_deref(), Some("fire3.squeeze"));
    }
}
