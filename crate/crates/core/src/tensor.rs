//! Dense row-major f32 tensors and the handful of layer primitives the
//! reference CNN needs, forward and backward.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const XTEN_MAGIC: &[u8; 4] = b"XTEN";
const XTEN_VERSION: u8 = 0x01;
const XTEN_DTYPE_F32: u8 = 0x00;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim("tensor", format!("invalid shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Size of the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Number of values per item of the leading axis.
    pub fn item_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Copies the listed items of the leading axis into a new tensor.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::dim("select", "no items selected"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            if i >= self.batch() {
                return Err(Error::dim("select", format!("index {i} out of {}", self.batch())));
            }
            data.extend_from_slice(self.item(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(shape, data)
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no tensors"))?;
        let tail = &first.shape[1..];
        let mut batch = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::dim(
                    "concat",
                    format!("trailing axes {:?} vs {:?}", &p.shape[1..], tail),
                ));
            }
            batch += p.batch();
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Self::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn to_xten_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(XTEN_MAGIC);
        out.push(XTEN_VERSION);
        out.push(XTEN_DTYPE_F32);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses one XTEN tensor from the front of `bytes`, returning it with the
    /// number of bytes consumed. `base` is added to reported error offsets.
    pub fn from_xten_bytes(bytes: &[u8], base: usize) -> Result<(Self, usize)> {
        let need = |at: usize, n: usize| {
            if bytes.len() < at + n {
                Err(Error::format(base + bytes.len(), format!("truncated: need {n} bytes at {}", base + at)))
            } else {
                Ok(())
            }
        };
        need(0, 7)?;
        if &bytes[..4] != XTEN_MAGIC {
            return Err(Error::format(base, "bad XTEN magic"));
        }
        if bytes[4] != XTEN_VERSION {
            return Err(Error::format(base + 4, format!("unsupported XTEN version {}", bytes[4])));
        }
        if bytes[5] != XTEN_DTYPE_F32 {
            return Err(Error::format(base + 5, format!("unsupported dtype {}", bytes[5])));
        }
        let ndim = bytes[6] as usize;
        if ndim == 0 {
            return Err(Error::format(base + 6, "zero-dimensional tensor"));
        }
        let mut at = 7;
        need(at, 4 * ndim)?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
            if d == 0 {
                return Err(Error::format(base + at, "zero-sized dimension"));
            }
            shape.push(d);
            at += 4;
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(base + 7, "shape overflows"))?;
        need(at, 4 * len)?;
        let data = bytes[at..at + 4 * len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        at += 4 * len;
        Ok((Self { shape, data }, at))
    }

    pub fn write_xten(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_xten_bytes())?;
        Ok(())
    }

    pub fn read_xten(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let (t, used) = Self::from_xten_bytes(&bytes, 0)?;
        if used != bytes.len() {
            return Err(Error::format(used, "trailing bytes after tensor"));
        }
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_xten_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::read_xten(std::fs::File::open(path)?)
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::dim(op, format!("expected rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}

/// Output extent of a strided window; `None` when the window does not fit.
fn out_extent(size: usize, pad: usize, window: usize, stride: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < window {
        return None;
    }
    Some((padded - window) / stride + 1)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_geometry(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    expect_rank("conv2d", input, 4)?;
    expect_rank("conv2d", kernel, 4)?;
    let [n, c, h, w] = input.shape()[..] else { unreachable!() };
    let [f, kc, kh, kw] = kernel.shape()[..] else { unreachable!() };
    if kc != c {
        return Err(Error::dim(
            "conv2d",
            format!("channel axis: input has {c}, kernel expects {kc}"),
        ));
    }
    let oh = out_extent(h, padding, kh, stride)
        .ok_or_else(|| Error::dim("conv2d", format!("height axis: {h} (+2*{padding}) < kernel {kh}")))?;
    let ow = out_extent(w, padding, kw, stride)
        .ok_or_else(|| Error::dim("conv2d", format!("width axis: {w} (+2*{padding}) < kernel {kw}")))?;
    Ok(ConvGeom { n, c, h, w, f, kh, kw, oh, ow, stride, pad: padding })
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &[f32], stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geometry(input, kernel, stride, padding)?;
    if bias.len() != g.f {
        return Err(Error::dim("conv2d", format!("bias has {} entries, kernel has {} filters", bias.len(), g.f)));
    }
    let x = input.data();
    let k = kernel.data();
    let mut out = Vec::with_capacity(g.n * g.f * g.oh * g.ow);
    let mut o = vec![0f64; g.oh * g.ow];
    for n in 0..g.n {
        for f in 0..g.f {
            o.fill(0.0);
            for c in 0..g.c {
                let xin = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let kv = f64::from(k[((f * g.c + c) * g.kh + ki) * g.kw + kj]);
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let row = &xin[iy as usize * g.w..][..g.w];
                            let orow = &mut o[oy * g.ow..][..g.ow];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    *ov += f64::from(row[ix as usize]) * kv;
                                }
                            }
                        }
                    }
                }
            }
            let b = f64::from(bias[f]);
            out.extend(o.iter().map(|&v| (v + b) as f32));
        }
    }
    Tensor::new(vec![g.n, g.f, g.oh, g.ow], out)
}

/// Gradients of a conv2d with respect to its input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Vec<f32>)> {
    let g = conv_geometry(input, kernel, stride, padding)?;
    if grad_out.shape() != [g.n, g.f, g.oh, g.ow] {
        return Err(Error::dim("conv2d_backward", format!("gradient shape {:?}", grad_out.shape())));
    }
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![0f32; x.len()];
    let mut gk = vec![0f32; k.len()];
    let mut gb = vec![0f32; g.f];
    for n in 0..g.n {
        for f in 0..g.f {
            let gof = &go[(n * g.f + f) * g.oh * g.ow..][..g.oh * g.ow];
            gb[f] += gof.iter().sum::<f32>();
            for c in 0..g.c {
                let base = (n * g.c + c) * g.h * g.w;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let kidx = ((f * g.c + c) * g.kh + ki) * g.kw + kj;
                        let kv = k[kidx];
                        let mut acc = 0f32;
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let rbase = base + iy as usize * g.w;
                            for ox in 0..g.ow {
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    let gv = gof[oy * g.ow + ox];
                                    let xi = rbase + ix as usize;
                                    acc += x[xi] * gv;
                                    gx[xi] += kv * gv;
                                }
                            }
                        }
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        gb,
    ))
}

/// Row-wise affine map `input · weights + bias`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &[f32]) -> Result<Tensor> {
    expect_rank("dense", input, 2)?;
    expect_rank("dense", weights, 2)?;
    let [n, d] = input.shape()[..] else { unreachable!() };
    let [wd, k] = weights.shape()[..] else { unreachable!() };
    if wd != d {
        return Err(Error::dim("dense", format!("inner axis: input has {d}, weights have {wd}")));
    }
    if bias.len() != k {
        return Err(Error::dim("dense", format!("bias has {} entries, expected {k}", bias.len())));
    }
    let x = input.data();
    let w = weights.data();
    let mut out = Vec::with_capacity(n * k);
    let mut orow = vec![0f64; k];
    for r in 0..n {
        orow.fill(0.0);
        for (i, &xv) in x[r * d..][..d].iter().enumerate() {
            let xv = f64::from(xv);
            for (o, &wv) in orow.iter_mut().zip(&w[i * k..][..k]) {
                *o += xv * f64::from(wv);
            }
        }
        out.extend(orow.iter().zip(bias).map(|(&o, &b)| (o + f64::from(b)) as f32));
    }
    Tensor::new(vec![n, k], out)
}

/// Gradients of `dense` with respect to input, weights and bias.
pub fn dense_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Vec<f32>)> {
    let [n, d] = input.shape()[..] else {
        return Err(Error::dim("dense_backward", "input must be rank 2"));
    };
    let k = weights.shape()[1];
    if grad_out.shape() != [n, k] {
        return Err(Error::dim("dense_backward", format!("gradient shape {:?}", grad_out.shape())));
    }
    let x = input.data();
    let w = weights.data();
    let go = grad_out.data();
    let mut gx = vec![0f32; n * d];
    let mut gw = vec![0f32; d * k];
    let mut gb = vec![0f32; k];
    for r in 0..n {
        let gr = &go[r * k..][..k];
        for (b, &g) in gb.iter_mut().zip(gr) {
            *b += g;
        }
        for i in 0..d {
            let xv = x[r * d + i];
            let wrow = &w[i * k..][..k];
            let gwrow = &mut gw[i * k..][..k];
            let mut acc = 0f32;
            for j in 0..k {
                gwrow[j] += xv * gr[j];
                acc += wrow[j] * gr[j];
            }
            gx[r * d + i] = acc;
        }
    }
    Ok((Tensor::new(vec![n, d], gx)?, Tensor::new(vec![d, k], gw)?, gb))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor { shape: input.shape().to_vec(), data }
}

fn pool_geometry(input: &Tensor, window: usize, stride: usize) -> Result<[usize; 6]> {
    expect_rank("maxpool2d", input, 4)?;
    let [n, c, h, w] = input.shape()[..] else { unreachable!() };
    if window == 0 || stride == 0 {
        return Err(Error::dim("maxpool2d", "window and stride must be positive"));
    }
    let oh = out_extent(h, 0, window, stride)
        .ok_or_else(|| Error::dim("maxpool2d", format!("height axis: {h} < window {window}")))?;
    let ow = out_extent(w, 0, window, stride)
        .ok_or_else(|| Error::dim("maxpool2d", format!("width axis: {w} < window {window}")))?;
    Ok([n * c, h, w, oh, ow, 0])
}

/// Per-window maximum; returns the flat index of each winner (first maximum in row-major window order).
fn maxpool_indices(input: &Tensor, window: usize, stride: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let [planes, h, w, oh, ow, _] = pool_geometry(input, window, stride)?;
    let x = input.data();
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape[2] = oh;
    shape[3] = ow;
    Ok((idx, shape))
}

pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (idx, shape) = maxpool_indices(input, window, stride)?;
    let x = input.data();
    Tensor::new(shape, idx.iter().map(|&i| x[i]).collect())
}

pub fn maxpool2d_backward(input: &Tensor, grad_out: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (idx, shape) = maxpool_indices(input, window, stride)?;
    if grad_out.shape() != shape.as_slice() {
        return Err(Error::dim("maxpool2d_backward", format!("gradient shape {:?}", grad_out.shape())));
    }
    let mut gx = vec![0f32; input.len()];
    for (&i, &g) in idx.iter().zip(grad_out.data()) {
        gx[i] += g;
    }
    Tensor::new(input.shape().to_vec(), gx)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    expect_rank("softmax", input, 2)?;
    let k = input.shape()[1];
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks_exact(k) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| f64::from(v - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| (e / total) as f32));
    }
    Tensor::new(input.shape().to_vec(), out)
}
