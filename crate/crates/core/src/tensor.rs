//! Dense channels-first tensors and the forward kernels of the supported layer kinds.
//!
//! All kernels accumulate dot products in `f64` and round to `f32` once per
//! output element. The accumulation order is part of the contract so that
//! naive-loop oracles reproduce results bit for bit:
//!
//! * conv2d: input channels outermost, then kernel rows, then kernel columns;
//!   the bias is added last. Taps that fall into the zero padding are skipped.
//! * linear: input features in index order, bias added last.
//! * avg-pool: window rows, then columns, divided by the window size.
//! * max-pool: window rows, then columns; ties keep the first (row-major) cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Shape(format!(
                "tensor rank must be 1..=4, got shape {shape:?}"
            )));
        }
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Tensor::new(shape, vec![0.0; len])
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::Shape(format!(
                "expected rank-3 (c, h, w) tensor, got {other:?}"
            ))),
        }
    }

    /// Element of a rank-3 tensor. Panics on out-of-range indices.
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    /// Sum over channels of a rank-3 tensor, giving an `h * w` row-major map.
    pub fn channel_sum(&self) -> Result<Vec<f64>> {
        let (c, h, w) = self.chw()?;
        let mut out = vec![0.0f64; h * w];
        for ch in 0..c {
            let plane = &self.data[ch * h * w..(ch + 1) * h * w];
            for (o, &v) in out.iter_mut().zip(plane) {
                *o += v as f64;
            }
        }
        Ok(out)
    }
}

/// Output extent of a sliding window: `floor((n + 2p - k) / s) + 1`.
pub fn window_output_extent(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || n + 2 * padding < kernel {
        return None;
    }
    Some((n + 2 * padding - kernel) / stride + 1)
}

pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (oc, ic, kh, kw) = match weights.shape() {
        &[oc, ic, kh, kw] => (oc, ic, kh, kw),
        other => {
            return Err(Error::Shape(format!(
                "conv2d weights must be rank-4 (out, in, kh, kw), got {other:?}"
            )))
        }
    };
    if ic != c {
        return Err(Error::Shape(format!(
            "conv2d input {:?} does not match kernel {:?}",
            input.shape(),
            weights.shape()
        )));
    }
    if bias.shape() != [oc] {
        return Err(Error::Shape(format!(
            "conv2d bias {:?} does not match kernel {:?}",
            bias.shape(),
            weights.shape()
        )));
    }
    let (oh, ow) = match (
        window_output_extent(h, kh, stride, padding),
        window_output_extent(w, kw, stride, padding),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d kernel {:?} (stride {stride}, padding {padding}) does not fit input {:?}",
                weights.shape(),
                input.shape()
            )))
        }
    };

    let x = input.data();
    let k = weights.data();
    let mut out = vec![0.0f32; oc * oh * ow];
    for o in 0..oc {
        let kbase = o * ic * kh * kw;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ci in 0..ic {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = (ci * h + iy as usize) * w;
                        let krow = kbase + (ci * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[row + ix as usize] as f64 * k[krow + kx] as f64;
                        }
                    }
                }
                acc += bias.data()[o] as f64;
                out[(o * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    Tensor::new(vec![oc, oh, ow], out)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

pub fn pool_forward(input: &Tensor, kind: PoolKind, kernel: usize, stride: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "pool kernel {kernel} and stride {stride} must be >= 1"
        )));
    }
    if kernel > h || kernel > w {
        return Err(Error::Shape(format!(
            "pool window {kernel}x{kernel} larger than input {:?}",
            input.shape()
        )));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let value = match kind {
                    PoolKind::Max => {
                        let mut best = f32::NEG_INFINITY;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let v = x[(ch * h + oy * stride + ky) * w + ox * stride + kx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        best
                    }
                    PoolKind::Avg => {
                        let mut acc = 0.0f64;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                acc += x[(ch * h + oy * stride + ky) * w + ox * stride + kx] as f64;
                            }
                        }
                        (acc / (kernel * kernel) as f64) as f32
                    }
                };
                out.push(value);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Row-major index of the max-pool winner for output cell `(ch, oy, ox)`.
pub(crate) fn max_pool_argmax(
    input: &Tensor,
    kernel: usize,
    stride: usize,
    ch: usize,
    oy: usize,
    ox: usize,
) -> usize {
    let (_, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let mut best = f32::NEG_INFINITY;
    let mut arg = (ch * h + oy * stride) * w + ox * stride;
    for ky in 0..kernel {
        for kx in 0..kernel {
            let idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
            if input.data[idx] > best {
                best = input.data[idx];
                arg = idx;
            }
        }
    }
    arg
}

pub fn linear_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.rank() != 1 {
        return Err(Error::Shape(format!(
            "linear input must be rank-1, got {:?}",
            input.shape()
        )));
    }
    let (out_f, in_f) = match weights.shape() {
        &[o, i] => (o, i),
        other => {
            return Err(Error::Shape(format!(
                "linear weights must be rank-2 (out, in), got {other:?}"
            )))
        }
    };
    if in_f != input.len() || bias.shape() != [out_f] {
        return Err(Error::Shape(format!(
            "linear input {:?} / bias {:?} do not match weights {:?}",
            input.shape(),
            bias.shape(),
            weights.shape()
        )));
    }
    let out = weights
        .data()
        .chunks_exact(in_f)
        .zip(bias.data())
        .map(|(row, &b)| {
            let mut acc = 0.0f64;
            for (&wv, &xv) in row.iter().zip(input.data()) {
                acc += wv as f64 * xv as f64;
            }
            (acc + b as f64) as f32
        })
        .collect();
    Tensor::new(vec![out_f], out)
}

pub fn flatten_forward(input: &Tensor) -> Tensor {
    Tensor {
        shape: vec![input.len()],
        data: input.data.clone(),
    }
}

pub fn global_avg_pool_forward(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let out = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as f32)
        .collect();
    Tensor::new(vec![c], out)
}
