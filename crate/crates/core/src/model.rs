//! Sequential convolutional models: layer specs, validation, forward passes
//! with tapped activations, and embedding similarity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::tensor::{self, PoolKind, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    #[serde(rename = "conv2d")]
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: String,
        bias: String,
    },
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d { kernel: usize, stride: usize },
    #[serde(rename = "avgpool2d")]
    AvgPool2d { kernel: usize, stride: usize },
    #[serde(rename = "linear")]
    Linear {
        in_features: usize,
        out_features: usize,
        weight: String,
        bias: String,
    },
    #[serde(rename = "flatten")]
    Flatten,
    #[serde(rename = "global-avg-pool")]
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Flatten => "flatten",
            LayerSpec::GlobalAvgPool => "global-avg-pool",
        }
    }

    /// `(kernel, stride, padding)` for windowed layers.
    pub fn window(&self) -> Option<(usize, usize, usize)> {
        match *self {
            LayerSpec::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => Some((kernel, stride, padding)),
            LayerSpec::MaxPool2d { kernel, stride } | LayerSpec::AvgPool2d { kernel, stride } => {
                Some((kernel, stride, 0))
            }
            _ => None,
        }
    }

    fn param_shapes(&self) -> Option<(&str, Vec<usize>, &str, Vec<usize>)> {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                weight,
                bias,
                ..
            } => Some((
                weight,
                vec![*out_channels, *in_channels, *kernel, *kernel],
                bias,
                vec![*out_channels],
            )),
            LayerSpec::Linear {
                in_features,
                out_features,
                weight,
                bias,
            } => Some((weight, vec![*out_features, *in_features], bias, vec![*out_features])),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Everything about a model except its parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub input_spec: InputSpec,
    pub normalization: Normalization,
    pub layers: Vec<LayerSpec>,
    pub tap_points: Vec<usize>,
    pub embedding_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_tap: Option<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A validated, immutable model. Shareable across threads.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    desc: ModelDescription,
    params: Vec<Option<LayerParams>>,
    tensors: BTreeMap<String, Tensor>,
    output_shapes: Vec<Vec<usize>>,
}

impl ModelGraph {
    pub fn new(desc: ModelDescription, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let InputSpec {
            channels,
            height,
            width,
        } = desc.input_spec;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Header("input_spec extents must be positive".into()));
        }
        if desc.normalization.mean.len() != channels || desc.normalization.std.len() != channels {
            return Err(Error::Header(format!(
                "normalization needs {channels} mean/std entries"
            )));
        }
        if desc.normalization.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Header("normalization std must be positive".into()));
        }
        if desc.embedding_index >= desc.layers.len() {
            return Err(Error::Header(format!(
                "embedding_index {} out of range for {} layers",
                desc.embedding_index,
                desc.layers.len()
            )));
        }

        let mut params = Vec::with_capacity(desc.layers.len());
        for (index, layer) in desc.layers.iter().enumerate() {
            if let Some((k, s, _)) = layer.window() {
                if k == 0 || s == 0 {
                    return Err(Error::Header(format!(
                        "layer {index}: kernel and stride must be >= 1"
                    )));
                }
            }
            params.push(match layer.param_shapes() {
                None => None,
                Some((wname, wshape, bname, bshape)) => {
                    let fetch = |name: &str, declared: Vec<usize>| -> Result<Tensor> {
                        let t = tensors.get(name).ok_or_else(|| {
                            Error::Header(format!("layer {index}: missing tensor {name:?}"))
                        })?;
                        if t.shape() != declared.as_slice() {
                            return Err(Error::LayerShapeMismatch {
                                layer: index,
                                declared,
                                stored: t.shape().to_vec(),
                            });
                        }
                        Ok(t.clone())
                    };
                    Some(LayerParams {
                        weight: fetch(wname, wshape)?,
                        bias: fetch(bname, bshape)?,
                    })
                }
            });
        }

        let output_shapes = infer_shapes(&desc)?;
        if output_shapes[desc.embedding_index].len() != 1 {
            return Err(Error::Header(format!(
                "embedding layer {} produces shape {:?}, expected rank-1",
                desc.embedding_index, output_shapes[desc.embedding_index]
            )));
        }
        let mut taps = desc.tap_points.clone();
        taps.sort_unstable();
        taps.dedup();
        if taps.len() != desc.tap_points.len() {
            return Err(Error::Header("duplicate tap points".into()));
        }
        for &t in &taps {
            if t >= desc.embedding_index {
                return Err(Error::Header(format!(
                    "tap {t} must precede the embedding layer {}",
                    desc.embedding_index
                )));
            }
            if output_shapes[t].len() != 3 {
                return Err(Error::Header(format!(
                    "tap {t} produces shape {:?}, expected rank-3",
                    output_shapes[t]
                )));
            }
        }
        if let Some(d) = desc.default_tap {
            if !taps.contains(&d) {
                return Err(Error::Header(format!("default_tap {d} is not a tap point")));
            }
        }
        let desc = ModelDescription {
            tap_points: taps,
            ..desc
        };
        Ok(ModelGraph {
            desc,
            params,
            tensors,
            output_shapes,
        })
    }

    pub fn description(&self) -> &ModelDescription {
        &self.desc
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.desc.layers
    }

    pub fn tap_points(&self) -> &[usize] {
        &self.desc.tap_points
    }

    pub fn embedding_index(&self) -> usize {
        self.desc.embedding_index
    }

    pub fn input_spec(&self) -> InputSpec {
        self.desc.input_spec
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub(crate) fn params(&self, layer: usize) -> Option<&LayerParams> {
        self.params[layer].as_ref()
    }

    /// Output shape of layer `index` for the declared input size.
    pub fn output_shape(&self, index: usize) -> &[usize] {
        &self.output_shapes[index]
    }

    /// Declared default tap, else the middle tap point.
    pub fn default_tap(&self) -> usize {
        self.desc
            .default_tap
            .unwrap_or(self.desc.tap_points[self.desc.tap_points.len() / 2])
    }

    pub fn is_tap(&self, layer: usize) -> bool {
        self.desc.tap_points.binary_search(&layer).is_ok()
    }

    /// Product of window strides up to and including `layer`.
    pub fn cumulative_stride(&self, layer: usize) -> usize {
        self.desc.layers[..=layer]
            .iter()
            .filter_map(|l| l.window().map(|(_, s, _)| s))
            .product()
    }

    /// Resize to the input spec, adapt channels, and normalize.
    pub fn prepare_input(&self, image: &RgbImage) -> Result<Tensor> {
        let spec = self.desc.input_spec;
        let resized = image.resize_bilinear(spec.width, spec.height);
        let plane = spec.width * spec.height;
        let mut data = Vec::with_capacity(spec.channels * plane);
        for c in 0..spec.channels {
            let (m, s) = (self.desc.normalization.mean[c], self.desc.normalization.std[c]);
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let v = match spec.channels {
                        3 => resized.get(c, y, x),
                        1 => resized.luma(y, x),
                        _ => resized.get(c % 3, y, x),
                    };
                    data.push((v - m) / s);
                }
            }
        }
        Tensor::new(vec![spec.channels, spec.height, spec.width], data)
    }

    /// Forward pass on an already-normalized input tensor.
    pub fn forward(&self, input: &Tensor) -> Result<ForwardTrace> {
        let spec = self.desc.input_spec;
        if input.shape() != [spec.channels, spec.height, spec.width] {
            return Err(Error::Shape(format!(
                "input {:?} does not match input_spec [{}, {}, {}]",
                input.shape(),
                spec.channels,
                spec.height,
                spec.width
            )));
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.desc.embedding_index + 1);
        for index in 0..=self.desc.embedding_index {
            let x = outputs.last().unwrap_or(input);
            let y = self.apply_layer(index, x)?;
            outputs.push(y);
        }
        Ok(ForwardTrace {
            input: input.clone(),
            outputs,
            taps: self.desc.tap_points.clone(),
        })
    }

    pub fn forward_image(&self, image: &RgbImage) -> Result<ForwardTrace> {
        self.forward(&self.prepare_input(image)?)
    }

    fn apply_layer(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        match &self.desc.layers[index] {
            LayerSpec::Conv2d {
                stride, padding, ..
            } => {
                let p = self.params(index).expect("validated conv params");
                tensor::conv2d_forward(x, &p.weight, &p.bias, *stride, *padding)
            }
            LayerSpec::Relu => Ok(tensor::relu_forward(x)),
            LayerSpec::MaxPool2d { kernel, stride } => {
                tensor::pool_forward(x, PoolKind::Max, *kernel, *stride)
            }
            LayerSpec::AvgPool2d { kernel, stride } => {
                tensor::pool_forward(x, PoolKind::Avg, *kernel, *stride)
            }
            LayerSpec::Linear { .. } => {
                let p = self.params(index).expect("validated linear params");
                tensor::linear_forward(x, &p.weight, &p.bias)
            }
            LayerSpec::Flatten => Ok(tensor::flatten_forward(x)),
            LayerSpec::GlobalAvgPool => tensor::global_avg_pool_forward(x),
        }
    }
}

fn infer_shapes(desc: &ModelDescription) -> Result<Vec<Vec<usize>>> {
    let s = desc.input_spec;
    let mut shape = vec![s.channels, s.height, s.width];
    let mut out = Vec::with_capacity(desc.layers.len());
    for (index, layer) in desc.layers.iter().enumerate() {
        let bad = |what: String| Error::Header(format!("layer {index} ({}): {what}", layer.kind_name()));
        shape = match layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if shape.len() != 3 || shape[0] != *in_channels {
                    return Err(bad(format!("expects {in_channels} input channels, got {shape:?}")));
                }
                let oh = tensor::window_output_extent(shape[1], *kernel, *stride, *padding);
                let ow = tensor::window_output_extent(shape[2], *kernel, *stride, *padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => vec![*out_channels, oh, ow],
                    _ => return Err(bad(format!("kernel does not fit {shape:?}"))),
                }
            }
            LayerSpec::MaxPool2d { kernel, stride } | LayerSpec::AvgPool2d { kernel, stride } => {
                if shape.len() != 3 || shape[1] < *kernel || shape[2] < *kernel {
                    return Err(bad(format!("window {kernel} does not fit {shape:?}")));
                }
                vec![shape[0], (shape[1] - kernel) / stride + 1, (shape[2] - kernel) / stride + 1]
            }
            LayerSpec::Relu => shape,
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => {
                if shape != [*in_features] {
                    return Err(bad(format!("expects [{in_features}], got {shape:?}")));
                }
                vec![*out_features]
            }
            LayerSpec::Flatten => vec![shape.iter().product()],
            LayerSpec::GlobalAvgPool => {
                if shape.len() != 3 {
                    return Err(bad(format!("expects rank-3 input, got {shape:?}")));
                }
                vec![shape[0]]
            }
        };
        out.push(shape.clone());
    }
    Ok(out)
}

/// Outputs of one forward pass. Taps record the output of the tapped layer,
/// which by convention is an activation (post-nonlinearity) layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    input: Tensor,
    outputs: Vec<Tensor>,
    taps: Vec<usize>,
}

impl ForwardTrace {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn embedding(&self) -> &Tensor {
        self.outputs.last().expect("at least one layer")
    }

    /// Tapped activation `A^l`, `None` if `layer` is not a tap.
    pub fn activation(&self, layer: usize) -> Option<&Tensor> {
        if self.taps.binary_search(&layer).is_ok() {
            self.outputs.get(layer)
        } else {
            None
        }
    }

    pub fn activations(&self) -> BTreeMap<usize, &Tensor> {
        self.taps.iter().map(|&t| (t, &self.outputs[t])).collect()
    }

    /// Input of layer `index` (the previous layer's output, or the model input).
    pub(crate) fn layer_input(&self, index: usize) -> &Tensor {
        if index == 0 {
            &self.input
        } else {
            &self.outputs[index - 1]
        }
    }

    pub(crate) fn layer_output(&self, index: usize) -> &Tensor {
        &self.outputs[index]
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

pub(crate) fn unit_embeddings(a: &Tensor, b: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.rank() != 1 || a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "embeddings must be equal-length vectors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (na, nb) = (norm(a.data()), norm(b.data()));
    if !(na > 0.0) || !(nb > 0.0) || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateEmbedding(format!(
            "embedding norms {na} and {nb}"
        )));
    }
    Ok((
        a.data().iter().map(|&x| x as f64 / na).collect(),
        b.data().iter().map(|&x| x as f64 / nb).collect(),
    ))
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (ua, ub) = unit_embeddings(a, b)?;
    let dot: f64 = ua.iter().zip(&ub).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}
