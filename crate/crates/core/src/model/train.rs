//! Plain minibatch SGD with cross-entropy for the reference CNN.

use rand::seq::SliceRandom;

use super::{Layer, Network};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 8, lr: 0.05, batch_size: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Trains the reference architecture from a seeded initialization.
/// Images are `[N, C, H, W]` in `[0, 1]`; labels are class ids below `num_classes`.
pub fn train_reference_cnn(
    images: &Tensor,
    labels: &[usize],
    num_classes: usize,
    config: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    if images.ndim() != 4 {
        return Err(Error::dim("train", format!("images must be [N,C,H,W], got {:?}", images.shape())));
    }
    if labels.len() != images.batch() {
        return Err(Error::dim("train", format!("{} labels for {} images", labels.len(), images.batch())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::contract(format!("label {bad} outside 0..{num_classes}")));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let [_, c, h, w] = images.shape()[..] else { unreachable!() };
    let mut net = Network::reference([c, h, w], num_classes, &mut rng::stream(config.seed, "train/init"))?;
    let mut order_rng = rng::stream(config.seed, "train/order");
    let mut order: Vec<usize> = (0..images.batch()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = images.select(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = sgd_step(&mut net, &x, &y, config.lr)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += loss * chunk.len() as f64;
        }
        epoch_losses.push(total / images.batch() as f64);
    }
    let train_accuracy = accuracy(&net, images, labels)?;
    Ok((net, TrainReport { epoch_losses, train_accuracy }))
}

pub(crate) fn accuracy(net: &Network, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..images.batch()).collect();
    for chunk in idx.chunks(256) {
        let pred = net.predict(&images.select(chunk)?)?.predictions;
        correct += chunk.iter().zip(pred).filter(|(&i, p)| labels[i] == *p).count();
    }
    Ok(correct as f64 / images.batch() as f64)
}

enum Grad {
    Conv(Tensor, Vec<f32>),
    Dense(Tensor, Vec<f32>),
    None,
}

/// One SGD step on a minibatch; returns the mean cross-entropy before the update.
fn sgd_step(net: &mut Network, x: &Tensor, labels: &[usize], lr: f32) -> Result<f64> {
    let layers = net.layers();
    let end = if matches!(layers.last(), Some(Layer::Softmax)) { layers.len() - 1 } else { layers.len() };
    let mut inputs = Vec::with_capacity(end);
    let mut cur = x.clone();
    for layer in &layers[..end] {
        let next = layer.forward(&cur)?;
        inputs.push(cur);
        cur = next;
    }
    let probs = tensor::softmax(&cur)?;
    let k = probs.item_len();
    let n = labels.len();
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, (&y, row)) in labels.iter().zip(cur.data().chunks_exact(k)).enumerate() {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = f64::from(m) + row.iter().map(|&v| f64::from(v - m).exp()).sum::<f64>().ln();
        loss += lse - f64::from(row[y]);
        grad.data_mut()[i * k + y] -= 1.0;
    }
    let scale = 1.0 / n as f32;
    grad.data_mut().iter_mut().for_each(|g| *g *= scale);

    let mut grads: Vec<Grad> = Vec::with_capacity(end);
    for (layer, input) in layers[..end].iter().zip(&inputs).rev() {
        let (gin, g) = match layer {
            Layer::Conv2d { kernel, stride, padding, .. } => {
                let (gx, gk, gb) = tensor::conv2d_backward(input, kernel, &grad, *stride, *padding)?;
                (gx, Grad::Conv(gk, gb))
            }
            Layer::Dense { weights, .. } => {
                let (gx, gw, gb) = tensor::dense_backward(input, weights, &grad)?;
                (gx, Grad::Dense(gw, gb))
            }
            Layer::Relu => (tensor::relu_backward(input, &grad), Grad::None),
            Layer::MaxPool2d { window, stride } => {
                (tensor::maxpool2d_backward(input, &grad, *window, *stride)?, Grad::None)
            }
            Layer::Flatten => (grad.clone().reshape(input.shape().to_vec())?, Grad::None),
            Layer::Softmax => return Err(Error::contract("softmax is only supported as the final layer")),
        };
        grads.push(g);
        grad = gin;
    }
    grads.reverse();

    for (layer, g) in net.layers_mut()[..end].iter_mut().zip(grads) {
        match (layer, g) {
            (Layer::Conv2d { kernel: w, bias, .. }, Grad::Conv(gw, gb))
            | (Layer::Dense { weights: w, bias, .. }, Grad::Dense(gw, gb)) => {
                for (p, g) in w.data_mut().iter_mut().zip(gw.data()) {
                    *p -= lr * g;
                }
                for (p, g) in bias.iter_mut().zip(&gb) {
                    *p -= lr * g;
                }
            }
            _ => {}
        }
    }
    Ok(loss / n as f64)
}
