//! Fluent construction of sequential models.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{InputSpec, LayerSpec, ModelDescription, ModelGraph, Normalization};
use crate::tensor::Tensor;

/// Appends layers one at a time, tracking the running shape so parameter
/// tensors can be sized automatically. The last layer becomes the embedding.
#[derive(Debug)]
pub struct ModelBuilder {
    input: InputSpec,
    normalization: Normalization,
    layers: Vec<LayerSpec>,
    tensors: BTreeMap<String, Tensor>,
    taps: Vec<usize>,
    default_tap: Option<usize>,
    shape: Vec<usize>,
    error: Option<Error>,
}

impl ModelBuilder {
    pub fn new(input: InputSpec) -> Self {
        ModelBuilder {
            input,
            normalization: Normalization::identity(input.channels),
            layers: Vec::new(),
            tensors: BTreeMap::new(),
            taps: Vec::new(),
            default_tap: None,
            shape: vec![input.channels, input.height, input.width],
            error: None,
        }
    }

    pub fn normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    /// Current activation shape after the layers added so far.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn fail(mut self, msg: String) -> Self {
        if self.error.is_none() {
            self.error = Some(Error::InvalidArgument(msg));
        }
        self
    }

    pub fn conv(
        mut self,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Self {
        if self.shape.len() != 3 {
            let msg = format!("conv after non-spatial shape {:?}", self.shape);
            return self.fail(msg);
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let index = self.layers.len();
        let (wname, bname) = (format!("layer{index}.weight"), format!("layer{index}.bias"));
        let wt = match Tensor::new(vec![out_channels, c, kernel, kernel], weights) {
            Ok(t) => t,
            Err(e) => return self.fail(format!("conv weights: {e}")),
        };
        let bt = match Tensor::new(vec![out_channels], bias) {
            Ok(t) => t,
            Err(e) => return self.fail(format!("conv bias: {e}")),
        };
        self.tensors.insert(wname.clone(), wt);
        self.tensors.insert(bname.clone(), bt);
        self.layers.push(LayerSpec::Conv2d {
            in_channels: c,
            out_channels,
            kernel,
            stride,
            padding,
            weight: wname,
            bias: bname,
        });
        let oh = crate::tensor::window_output_extent(h, kernel, stride, padding).unwrap_or(0);
        let ow = crate::tensor::window_output_extent(w, kernel, stride, padding).unwrap_or(0);
        self.shape = vec![out_channels, oh, ow];
        self
    }

    /// Conv layer whose parameters come from closures over the flat weight
    /// index and the output channel.
    pub fn conv_with(
        self,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: impl FnMut(usize) -> f32,
        bias: impl FnMut(usize) -> f32,
    ) -> Self {
        let c = self.shape.first().copied().unwrap_or(0);
        let weights = (0..out_channels * c * kernel * kernel).map(weight).collect();
        let bias = (0..out_channels).map(bias).collect();
        self.conv(out_channels, kernel, stride, padding, weights, bias)
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(LayerSpec::Relu);
        self
    }

    fn pool(mut self, spec: LayerSpec, kernel: usize, stride: usize) -> Self {
        if self.shape.len() != 3 || stride == 0 {
            let msg = format!("pool after shape {:?}", self.shape);
            return self.fail(msg);
        }
        self.layers.push(spec);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.shape = vec![
            self.shape[0],
            h.saturating_sub(kernel) / stride + 1,
            w.saturating_sub(kernel) / stride + 1,
        ];
        self
    }

    pub fn maxpool(self, kernel: usize, stride: usize) -> Self {
        self.pool(LayerSpec::MaxPool2d { kernel, stride }, kernel, stride)
    }

    pub fn avgpool(self, kernel: usize, stride: usize) -> Self {
        self.pool(LayerSpec::AvgPool2d { kernel, stride }, kernel, stride)
    }

    pub fn flatten(mut self) -> Self {
        self.layers.push(LayerSpec::Flatten);
        self.shape = vec![self.shape.iter().product()];
        self
    }

    pub fn global_avg_pool(mut self) -> Self {
        self.layers.push(LayerSpec::GlobalAvgPool);
        self.shape = vec![self.shape[0]];
        self
    }

    pub fn linear(mut self, out_features: usize, weights: Vec<f32>, bias: Vec<f32>) -> Self {
        let in_features = self.shape.iter().product();
        let index = self.layers.len();
        let (wname, bname) = (format!("layer{index}.weight"), format!("layer{index}.bias"));
        match (
            Tensor::new(vec![out_features, in_features], weights),
            Tensor::new(vec![out_features], bias),
        ) {
            (Ok(w), Ok(b)) => {
                self.tensors.insert(wname.clone(), w);
                self.tensors.insert(bname.clone(), b);
            }
            (Err(e), _) | (_, Err(e)) => return self.fail(format!("linear params: {e}")),
        }
        self.layers.push(LayerSpec::Linear {
            in_features,
            out_features,
            weight: wname,
            bias: bname,
        });
        self.shape = vec![out_features];
        self
    }

    /// Marks the most recently added layer as a tap point.
    pub fn tap(mut self) -> Self {
        match self.layers.len() {
            0 => self.fail("tap before any layer".into()),
            n => {
                self.taps.push(n - 1);
                self
            }
        }
    }

    /// Marks the most recently added layer as the default tap.
    pub fn default_tap(mut self) -> Self {
        self = self.tap();
        self.default_tap = self.taps.last().copied();
        self
    }

    pub fn build(self) -> Result<ModelGraph> {
        if let Some(e) = self.error {
            return Err(e);
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("model has no layers".into()));
        }
        let desc = ModelDescription {
            input_spec: self.input,
            normalization: self.normalization,
            embedding_index: self.layers.len() - 1,
            layers: self.layers,
            tap_points: self.taps,
            default_tap: self.default_tap,
        };
        ModelGraph::new(desc, self.tensors)
    }
}
