//! The classifier: a sequential layer graph with a tapped forward pass that
//! records the tensor entering every ReLU.

mod train;

use std::path::Path;

use rand::Rng;

use crate::container::{Container, Manifest};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub use train::{train_reference_cnn, TrainConfig, TrainReport};

const NETWORK_MAGIC: &[u8; 4] = b"XNET";

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d { kernel: Tensor, bias: Vec<f32>, stride: usize, padding: usize },
    Dense { weights: Tensor, bias: Vec<f32> },
    Relu,
    MaxPool2d { window: usize, stride: usize },
    Flatten,
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::Dense { .. } => "dense",
            Layer::Relu => "relu",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::Flatten => "flatten",
            Layer::Softmax => "softmax",
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d { kernel, bias, stride, padding } => tensor::conv2d(x, kernel, bias, *stride, *padding),
            Layer::Dense { weights, bias } => tensor::dense(x, weights, bias),
            Layer::Relu => Ok(tensor::relu(x)),
            Layer::MaxPool2d { window, stride } => tensor::maxpool2d(x, *window, *stride),
            Layer::Flatten => {
                let n = x.batch();
                x.clone().reshape(vec![n, x.item_len()])
            }
            Layer::Softmax => tensor::softmax(x),
        }
    }

    /// Output shape for one item (batch axis excluded).
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut probe_shape = vec![1];
        probe_shape.extend_from_slice(input);
        let probe = Tensor::zeros(probe_shape)?;
        Ok(self.forward(&probe)?.shape()[1..].to_vec())
    }
}

/// A sequential classifier with `r` ReLU activation layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    num_classes: usize,
    activation_indices: Vec<usize>,
}

/// The tensors fed into each activation layer during one forward pass,
/// plus the final logits and probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TapTrace {
    pub taps: Vec<Tensor>,
    pub logits: Tensor,
    pub probabilities: Tensor,
}

impl TapTrace {
    pub fn num_layers(&self) -> usize {
        self.taps.len()
    }

    pub fn batch(&self) -> usize {
        self.logits.batch()
    }

    /// Values entering activation layer `layer` for image `image`.
    pub fn tap(&self, layer: usize, image: usize) -> &[f32] {
        self.taps[layer].item(image)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub predictions: Vec<usize>,
    pub probabilities: Tensor,
}

impl Network {
    /// Builds a network for inputs of per-item shape `input_shape` (e.g. `[C, H, W]`),
    /// checking that consecutive layers are shape-compatible and that the
    /// output is `[N, K]`.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dim("network", "no layers"));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::dim("network", format!("layer {i} ({}): {e}", layer.kind())))?;
        }
        if shape.len() != 1 {
            return Err(Error::dim("network", format!("final layer produces {shape:?}, expected [K]")));
        }
        let activation_indices =
            layers.iter().enumerate().filter(|(_, l)| matches!(l, Layer::Relu)).map(|(i, _)| i).collect();
        Ok(Self { input_shape, num_classes: shape[0], layers, activation_indices })
    }

    /// conv(8,3×3)-relu-maxpool(2)-conv(16,3×3)-relu-maxpool(2)-flatten-dense(64)-relu-dense(K)-softmax,
    /// initialized uniform(−s, s) with s = sqrt(1/fan_in) and zero biases.
    pub fn reference(input_shape: [usize; 3], num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let [c, h, w] = input_shape;
        let mut uniform = |shape: Vec<usize>, fan_in: usize| {
            let s = (1.0 / fan_in as f64).sqrt() as f32;
            let len = shape.iter().product();
            Tensor::new(shape, (0..len).map(|_| rng.gen_range(-s..s)).collect())
        };
        let conv = |h: usize| h.checked_sub(2);
        let pool = |h: usize| if h >= 2 { Some((h - 2) / 2 + 1) } else { None };
        let side = |h: usize| conv(h).and_then(pool).and_then(conv).and_then(pool);
        let (fh, fw) = side(h)
            .zip(side(w))
            .filter(|&(a, b)| a > 0 && b > 0)
            .ok_or_else(|| Error::dim("network", format!("input {h}x{w} too small for the reference CNN")))?;
        let flat = 16 * fh * fw;
        let layers = vec![
            Layer::Conv2d { kernel: uniform(vec![8, c, 3, 3], c * 9)?, bias: vec![0.0; 8], stride: 1, padding: 0 },
            Layer::Relu,
            Layer::MaxPool2d { window: 2, stride: 2 },
            Layer::Conv2d { kernel: uniform(vec![16, 8, 3, 3], 72)?, bias: vec![0.0; 16], stride: 1, padding: 0 },
            Layer::Relu,
            Layer::MaxPool2d { window: 2, stride: 2 },
            Layer::Flatten,
            Layer::Dense { weights: uniform(vec![flat, 64], flat)?, bias: vec![0.0; 64] },
            Layer::Relu,
            Layer::Dense { weights: uniform(vec![64, num_classes], 64)?, bias: vec![0.0; num_classes] },
            Layer::Softmax,
        ];
        Self::new(input_shape.to_vec(), layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn activation_indices(&self) -> &[usize] {
        &self.activation_indices
    }

    /// Number of activation layers `r`.
    pub fn num_activations(&self) -> usize {
        self.activation_indices.len()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(
                "forward",
                format!("batch item shape {:?}, network expects {:?}", &batch.shape()[1..], self.input_shape),
            ));
        }
        Ok(())
    }

    /// Runs the layers, calling `on_tap` with the input of every ReLU. Returns the logits.
    fn run(&self, batch: &Tensor, mut on_tap: impl FnMut(&Tensor)) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        let end = match self.layers.last() {
            Some(Layer::Softmax) => self.layers.len() - 1,
            _ => self.layers.len(),
        };
        for layer in &self.layers[..end] {
            if matches!(layer, Layer::Relu) {
                on_tap(&x);
            }
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.run(batch, |_| {})
    }

    /// Untapped forward pass: class predictions and softmax probabilities.
    pub fn predict(&self, batch: &Tensor) -> Result<Prediction> {
        let logits = self.logits(batch)?;
        Ok(Prediction { predictions: argmax_rows(&logits), probabilities: tensor::softmax(&logits)? })
    }

    /// Forward pass recording the pre-activation input of every ReLU.
    pub fn forward_with_taps(&self, batch: &Tensor) -> Result<(Vec<usize>, Tensor, TapTrace)> {
        let mut taps = Vec::with_capacity(self.activation_indices.len());
        let logits = self.run(batch, |x| taps.push(x.clone()))?;
        let probabilities = tensor::softmax(&logits)?;
        let predictions = argmax_rows(&logits);
        Ok((predictions, probabilities.clone(), TapTrace { taps, logits, probabilities }))
    }

    pub fn to_container(&self) -> Container {
        let mut m = Manifest::new();
        m.set("format", "xood-network");
        m.set("input_shape", join(&self.input_shape));
        m.set("num_classes", self.num_classes);
        m.set("layers", self.layers.len());
        let mut blobs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("layer.{i}");
            m.set(format!("{p}.kind"), layer.kind());
            match layer {
                Layer::Conv2d { kernel, bias, stride, padding } => {
                    m.set(format!("{p}.stride"), stride);
                    m.set(format!("{p}.padding"), padding);
                    blobs.push((format!("{p}.kernel"), kernel.clone()));
                    blobs.push((format!("{p}.bias"), Tensor::from_vec(bias.clone()).expect("non-empty bias")));
                }
                Layer::Dense { weights, bias } => {
                    blobs.push((format!("{p}.weights"), weights.clone()));
                    blobs.push((format!("{p}.bias"), Tensor::from_vec(bias.clone()).expect("non-empty bias")));
                }
                Layer::MaxPool2d { window, stride } => {
                    m.set(format!("{p}.window"), window);
                    m.set(format!("{p}.stride"), stride);
                }
                Layer::Relu | Layer::Flatten | Layer::Softmax => {}
            }
        }
        Container { manifest: m, blobs }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let m = &c.manifest;
        if m.get("format") != Some("xood-network") {
            return Err(Error::format(0, "not a network file"));
        }
        let input_shape = m
            .require("input_shape")?
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| Error::format(0, "bad input_shape"))?;
        let count: usize = m.parse("layers")?;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let p = format!("layer.{i}");
            let bias = |name: &str| -> Result<Vec<f32>> { Ok(c.blob(&format!("{p}.{name}"))?.data().to_vec()) };
            let layer = match m.require(&format!("{p}.kind"))? {
                "conv2d" => Layer::Conv2d {
                    kernel: c.blob(&format!("{p}.kernel"))?.clone(),
                    bias: bias("bias")?,
                    stride: m.parse(&format!("{p}.stride"))?,
                    padding: m.parse(&format!("{p}.padding"))?,
                },
                "dense" => Layer::Dense { weights: c.blob(&format!("{p}.weights"))?.clone(), bias: bias("bias")? },
                "relu" => Layer::Relu,
                "maxpool2d" => {
                    Layer::MaxPool2d { window: m.parse(&format!("{p}.window"))?, stride: m.parse(&format!("{p}.stride"))? }
                }
                "flatten" => Layer::Flatten,
                "softmax" => Layer::Softmax,
                other => return Err(Error::format(0, format!("unknown layer kind `{other}`"))),
            };
            layers.push(layer);
        }
        let net = Self::new(input_shape, layers).map_err(|e| Error::format(0, e.to_string()))?;
        let declared: usize = m.parse("num_classes")?;
        if declared != net.num_classes {
            return Err(Error::format(0, format!("num_classes {declared} disagrees with layers ({})", net.num_classes)));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path, NETWORK_MAGIC)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path, NETWORK_MAGIC)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes(NETWORK_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes, NETWORK_MAGIC)?)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.item_len();
    t.data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
