//! Sequential networks of irregular convolutions, regular convolutions and
//! ReLUs, with a per-pixel softmax cross-entropy head.
//!
//! Gradients are computed explicitly, layer by layer, from the activations
//! and patch matrices cached by the last forward pass.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irrconv::{
    self, grid_center, output_extent, patch_gradient, patches_times_weights, weight_gradient,
    InterpolatedPatchMatrix, IrregularKernel, Offset, PositionSet,
};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    IrregularConv,
    RegularConv,
    Relu,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::IrregularConv => "irregular_conv",
            LayerKind::RegularConv => "regular_conv",
            LayerKind::Relu => "relu",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub grid: (usize, usize),
    pub stride: (usize, usize),
}

impl LayerSpec {
    pub fn irregular(c_in: usize, c_out: usize, grid: (usize, usize)) -> Self {
        LayerSpec {
            kind: LayerKind::IrregularConv,
            c_in,
            c_out,
            grid,
            stride: (1, 1),
        }
    }

    pub fn regular(c_in: usize, c_out: usize, grid: (usize, usize)) -> Self {
        LayerSpec {
            kind: LayerKind::RegularConv,
            c_in,
            c_out,
            grid,
            stride: (1, 1),
        }
    }

    pub fn relu(channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            c_in: channels,
            c_out: channels,
            grid: (1, 1),
            stride: (1, 1),
        }
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::argument(format!("{} layer with zero channels", self.kind)));
        }
        match self.kind {
            LayerKind::Relu => {
                if self.c_in != self.c_out {
                    return Err(Error::argument("relu must preserve the channel count"));
                }
            }
            LayerKind::IrregularConv | LayerKind::RegularConv => {
                if self.grid.0 == 0 || self.grid.1 == 0 {
                    return Err(Error::argument("convolution grid must be at least 1x1"));
                }
                if self.stride.0 == 0 || self.stride.1 == 0 {
                    return Err(Error::argument("stride must be positive"));
                }
                if self.kind == LayerKind::IrregularConv && self.grid == (1, 1) {
                    return Err(Error::argument(
                        "1x1 convolutions are channel mixers and must be regular_conv",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Which convolution the toy segmentation nets use for their 3x3 layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Irregular,
    Regular,
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irregular" => Ok(Arch::Irregular),
            "regular" => Ok(Arch::Regular),
            other => Err(Error::argument(format!("unknown arch {other:?}"))),
        }
    }
}

/// conv(c_in -> hidden, 3x3) -> relu -> conv(hidden -> hidden, 3x3) -> relu
/// -> 1x1(hidden -> classes).
pub fn toy_plan(arch: Arch, c_in: usize, hidden: usize, classes: usize) -> Vec<LayerSpec> {
    let conv = |a, b| match arch {
        Arch::Irregular => LayerSpec::irregular(a, b, (3, 3)),
        Arch::Regular => LayerSpec::regular(a, b, (3, 3)),
    };
    vec![
        conv(c_in, hidden),
        LayerSpec::relu(hidden),
        conv(hidden, hidden),
        LayerSpec::relu(hidden),
        LayerSpec::regular(hidden, classes, (1, 1)),
    ]
}

/// Fixed-grid convolution. Weights are `[c_out][c_in][row * cols + col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularKernel {
    c_in: usize,
    c_out: usize,
    grid: (usize, usize),
    stride: (usize, usize),
    weights: Vec<f64>,
}

impl RegularKernel {
    pub fn new(
        c_in: usize,
        c_out: usize,
        grid: (usize, usize),
        stride: (usize, usize),
        weights: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != c_out * c_in * grid.0 * grid.1 {
            return Err(Error::shape("regular kernel weight count mismatch"));
        }
        if grid.0 == 0 || grid.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::argument("grid and stride must be positive"));
        }
        Ok(RegularKernel {
            c_in,
            c_out,
            grid,
            stride,
            weights,
        })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn taps(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Plain integer im2col for a regular kernel.
#[derive(Debug, Clone)]
pub struct PatchMatrix {
    input_shape: [usize; 4],
    out_h: usize,
    out_w: usize,
    values: Vec<f64>,
}

fn im2col_regular(input: &Tensor, kernel: &RegularKernel) -> Result<PatchMatrix> {
    let [batch, c_in, h, w] = input.shape();
    if c_in != kernel.c_in {
        return Err(Error::shape(format!(
            "input has {c_in} channels, kernel expects {}",
            kernel.c_in
        )));
    }
    let (gr, gc) = kernel.grid;
    let (out_h, out_w) = match (
        output_extent(h, gr, kernel.stride.0),
        output_extent(w, gc, kernel.stride.1),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::shape(format!("{h}x{w} input too small for a {gr}x{gc} kernel"))),
    };
    let cols = c_in * gr * gc;
    let mut values = Vec::with_capacity(batch * out_h * out_w * cols);
    for b in 0..batch {
        for oy in 0..out_h {
            for ox in 0..out_w {
                for ci in 0..c_in {
                    let plane = input.plane(b, ci);
                    for ky in 0..gr {
                        let r = oy * kernel.stride.0 + ky;
                        let start = r * w + ox * kernel.stride.1;
                        values.extend_from_slice(&plane[start..start + gc]);
                    }
                }
            }
        }
    }
    Ok(PatchMatrix {
        input_shape: input.shape(),
        out_h,
        out_w,
        values,
    })
}

fn col2im_regular(d_patch: &[f64], kernel: &RegularKernel, patches: &PatchMatrix) -> Tensor {
    let [batch, c_in, _, _] = patches.input_shape;
    let (gr, gc) = kernel.grid;
    let cols = c_in * gr * gc;
    let mut grad = Tensor::zeros(patches.input_shape).expect("existing shape");
    for b in 0..batch {
        for oy in 0..patches.out_h {
            for ox in 0..patches.out_w {
                let row = (b * patches.out_h + oy) * patches.out_w + ox;
                let src = &d_patch[row * cols..(row + 1) * cols];
                for ci in 0..c_in {
                    for ky in 0..gr {
                        for kx in 0..gc {
                            let i = grad.offset(b, ci, oy * kernel.stride.0 + ky, ox * kernel.stride.1 + kx);
                            grad.data_mut()[i] += src[(ci * gr + ky) * gc + kx];
                        }
                    }
                }
            }
        }
    }
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Irregular(IrregularKernel),
    Regular(RegularKernel),
    Relu { channels: usize },
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Irregular(k) => LayerSpec::irregular(k.c_in(), k.c_out(), k.positions().grid())
                .with_stride(k.stride()),
            Layer::Regular(k) => LayerSpec::regular(k.c_in, k.c_out, k.grid).with_stride(k.stride),
            Layer::Relu { channels } => LayerSpec::relu(*channels),
        }
    }

    /// Builds a layer with He-scaled normal weights, `stddev = sqrt(2 / (c_in * taps))`.
    pub fn init(spec: &LayerSpec, rng: &mut Rng, epsilon_init: f64) -> Result<Layer> {
        spec.validate()?;
        let taps = spec.grid.0 * spec.grid.1;
        let stddev = (2.0 / (spec.c_in * taps) as f64).sqrt();
        let mut weights = || {
            Tensor::randn([spec.c_out, spec.c_in, 1, taps], rng, stddev).map(Tensor::into_vec)
        };
        Ok(match spec.kind {
            LayerKind::IrregularConv => {
                let positions = PositionSet::init(spec.grid.0, spec.grid.1, spec.c_in, epsilon_init)?;
                Layer::Irregular(IrregularKernel::new(spec.c_out, weights()?, positions, spec.stride)?)
            }
            LayerKind::RegularConv => Layer::Regular(RegularKernel::new(
                spec.c_in,
                spec.c_out,
                spec.grid,
                spec.stride,
                weights()?,
            )?),
            LayerKind::Relu => Layer::Relu {
                channels: spec.c_in,
            },
        })
    }

    pub fn weights(&self) -> Option<&[f64]> {
        match self {
            Layer::Irregular(k) => Some(k.weights()),
            Layer::Regular(k) => Some(k.weights()),
            Layer::Relu { .. } => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut [f64]> {
        match self {
            Layer::Irregular(k) => Some(k.weights_mut()),
            Layer::Regular(k) => Some(k.weights_mut()),
            Layer::Relu { .. } => None,
        }
    }

    pub fn positions(&self) -> Option<&PositionSet> {
        match self {
            Layer::Irregular(k) => Some(k.positions()),
            _ => None,
        }
    }

    pub fn positions_mut(&mut self) -> Option<&mut PositionSet> {
        match self {
            Layer::Irregular(k) => Some(k.positions_mut()),
            _ => None,
        }
    }

    fn in_channels(&self) -> usize {
        match self {
            Layer::Irregular(k) => k.c_in(),
            Layer::Regular(k) => k.c_in,
            Layer::Relu { channels } => *channels,
        }
    }
}

#[derive(Debug, Clone)]
enum Cached {
    Irregular(InterpolatedPatchMatrix),
    Regular(PatchMatrix),
    Relu,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    inputs: Vec<Tensor>,
    patches: Vec<Cached>,
    output_shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGradient {
    Irregular {
        weights: Vec<f64>,
        positions: Vec<Offset>,
    },
    Regular {
        weights: Vec<f64>,
    },
    None,
}

impl LayerGradient {
    pub fn weights(&self) -> Option<&[f64]> {
        match self {
            LayerGradient::Irregular { weights, .. } | LayerGradient::Regular { weights } => {
                Some(weights)
            }
            LayerGradient::None => None,
        }
    }

    pub fn positions(&self) -> Option<&[Offset]> {
        match self {
            LayerGradient::Irregular { positions, .. } => Some(positions),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
    pub input: Tensor,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    cache: Option<ForwardCache>,
}

fn at_layer(index: usize, err: Error) -> Error {
    match err {
        Error::Shape(msg) => Error::Shape(format!("layer {index}: {msg}")),
        other => other,
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            let out = pair[0].spec().c_out;
            if out != pair[1].in_channels() {
                return Err(Error::Shape(format!(
                    "layer {} outputs {out} channels but layer {} expects {}",
                    i,
                    i + 1,
                    pair[1].in_channels()
                )));
            }
        }
        for layer in &layers {
            layer.spec().validate()?;
        }
        Ok(Network {
            layers,
            cache: None,
        })
    }

    /// Materializes parameters for `specs`, drawing weights layer by layer
    /// from `rng`. Positions start on the grid shifted by `epsilon_init`.
    pub fn from_specs(specs: &[LayerSpec], rng: &mut Rng, epsilon_init: f64) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| Layer::init(s, rng, epsilon_init))
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable parameter access. Invalidates the forward cache.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.cache = None;
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn irregular_layers(&self) -> impl Iterator<Item = (usize, &IrregularKernel)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Irregular(k) => Some((i, k)),
            _ => None,
        })
    }

    /// Input coordinate that output pixel `(0, 0)` is centered on, and the
    /// cumulative stride.
    pub fn output_alignment(&self) -> ((usize, usize), (usize, usize)) {
        let mut offset = (0, 0);
        let mut scale = (1, 1);
        for layer in &self.layers {
            let spec = layer.spec();
            if spec.kind == LayerKind::Relu {
                continue;
            }
            let c = grid_center(spec.grid);
            offset.0 += c.0 * scale.0;
            offset.1 += c.1 * scale.1;
            scale.0 *= spec.stride.0;
            scale.1 *= spec.stride.1;
        }
        (offset, scale)
    }

    /// Runs every layer, caching inputs and patch matrices for backward.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        self.cache = None;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut patches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if x.channels() != layer.in_channels() {
                return Err(Error::Shape(format!(
                    "layer {i}: input has {} channels, layer expects {}",
                    x.channels(),
                    layer.in_channels()
                )));
            }
            let (y, cached) = match layer {
                Layer::Irregular(k) => {
                    let (y, p) = irrconv::forward_with_patches(&x, k).map_err(|e| at_layer(i, e))?;
                    (y, Cached::Irregular(p))
                }
                Layer::Regular(k) => {
                    let p = im2col_regular(&x, k).map_err(|e| at_layer(i, e))?;
                    let y = patches_times_weights(
                        &p.values,
                        k.c_in * k.taps(),
                        &k.weights,
                        k.c_out,
                        [x.batch(), k.c_out, p.out_h, p.out_w],
                    );
                    (y, Cached::Regular(p))
                }
                Layer::Relu { .. } => {
                    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                    (Tensor::from_vec(x.shape(), data)?, Cached::Relu)
                }
            };
            inputs.push(std::mem::replace(&mut x, y));
            patches.push(cached);
        }
        self.cache = Some(ForwardCache {
            inputs,
            patches,
            output_shape: x.shape(),
        });
        Ok(x)
    }

    /// Backpropagates `grad_out` through the cached forward pass.
    pub fn backward(&self, grad_out: &Tensor) -> Result<Gradients> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        if grad_out.shape() != cache.output_shape {
            return Err(Error::shape(format!(
                "grad_out shape {:?} does not match network output {:?}",
                grad_out.shape(),
                cache.output_shape
            )));
        }
        let mut grads = vec![LayerGradient::None; self.layers.len()];
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            g = match (&self.layers[i], &cache.patches[i]) {
                (Layer::Irregular(k), Cached::Irregular(p)) => {
                    let kg = irrconv::backward(&g, k, input, p).map_err(|e| at_layer(i, e))?;
                    grads[i] = LayerGradient::Irregular {
                        weights: kg.weights,
                        positions: kg.positions,
                    };
                    kg.input
                }
                (Layer::Regular(k), Cached::Regular(p)) => {
                    let cols = k.c_in * k.taps();
                    let locations = p.out_h * p.out_w;
                    let batch = input.batch();
                    grads[i] = LayerGradient::Regular {
                        weights: weight_gradient(g.data(), batch, k.c_out, locations, &p.values, cols),
                    };
                    let d_patch = patch_gradient(g.data(), batch, k.c_out, locations, &k.weights, cols);
                    col2im_regular(&d_patch, k, p)
                }
                (Layer::Relu { .. }, Cached::Relu) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(input.data())
                        .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
                        .collect();
                    Tensor::from_vec(input.shape(), data)?
                }
                _ => return Err(Error::State(format!("layer {i}: cache does not match layer"))),
            };
        }
        Ok(Gradients { layers: grads, input: g })
    }
}

/// Per-pixel integer class labels, `(batch, height, width)` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    batch: usize,
    height: usize,
    width: usize,
    classes: Vec<usize>,
}

impl LabelMap {
    pub fn new(batch: usize, height: usize, width: usize, classes: Vec<usize>) -> Result<Self> {
        if classes.len() != batch * height * width {
            return Err(Error::shape("label count does not match extents"));
        }
        Ok(LabelMap {
            batch,
            height,
            width,
            classes,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn get(&self, b: usize, r: usize, c: usize) -> usize {
        self.classes[(b * self.height + r) * self.width + c]
    }

    /// Labels at `offset + scale * (r, c)` for an `height x width` output.
    pub fn aligned(
        &self,
        offset: (usize, usize),
        scale: (usize, usize),
        height: usize,
        width: usize,
    ) -> Result<LabelMap> {
        if height == 0 || width == 0 {
            return LabelMap::new(self.batch, height, width, Vec::new());
        }
        let last_r = offset.0 + scale.0 * (height - 1);
        let last_c = offset.1 + scale.1 * (width - 1);
        if last_r >= self.height || last_c >= self.width {
            return Err(Error::shape("aligned window exceeds the label map"));
        }
        let mut classes = Vec::with_capacity(self.batch * height * width);
        for b in 0..self.batch {
            for r in 0..height {
                for c in 0..width {
                    classes.push(self.get(b, offset.0 + scale.0 * r, offset.1 + scale.1 * c));
                }
            }
        }
        LabelMap::new(self.batch, height, width, classes)
    }
}

/// Mean over batch and pixels of `-log softmax(scores)[label]`, with the
/// gradient `(softmax - onehot) / (batch * pixels)`.
pub fn pixel_softmax_xent(scores: &Tensor, labels: &LabelMap) -> Result<(f64, Tensor)> {
    let [batch, classes, h, w] = scores.shape();
    if labels.shape() != (batch, h, w) {
        return Err(Error::shape(format!(
            "labels {:?} do not match scores {:?}",
            labels.shape(),
            scores.shape()
        )));
    }
    if let Some(&bad) = labels.classes.iter().find(|&&c| c >= classes) {
        return Err(Error::argument(format!("label {bad} outside [0, {classes})")));
    }
    let pixels = h * w;
    let norm = (batch * pixels) as f64;
    let mut grad = Tensor::zeros(scores.shape())?;
    let mut total = 0.0;
    let mut probs = vec![0.0; classes];
    for b in 0..batch {
        for p in 0..pixels {
            let at = |k: usize| (b * classes + k) * pixels + p;
            let max = (0..classes)
                .map(|k| scores.data()[at(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, prob) in probs.iter_mut().enumerate() {
                *prob = (scores.data()[at(k)] - max).exp();
                sum += *prob;
            }
            let label = labels.classes[b * pixels + p];
            total += sum.ln() - (scores.data()[at(label)] - max);
            for (k, prob) in probs.iter().enumerate() {
                let onehot = if k == label { 1.0 } else { 0.0 };
                grad.data_mut()[at(k)] = (prob / sum - onehot) / norm;
            }
        }
    }
    let loss = if norm > 0.0 { total / norm } else { 0.0 };
    Ok((loss, grad))
}

/// Class with the largest score at every pixel.
pub fn argmax_classes(scores: &Tensor) -> LabelMap {
    let [batch, classes, h, w] = scores.shape();
    let pixels = h * w;
    let mut out = Vec::with_capacity(batch * pixels);
    for b in 0..batch {
        for p in 0..pixels {
            let mut best = 0;
            for k in 1..classes {
                if scores.data()[(b * classes + k) * pixels + p]
                    > scores.data()[(b * classes + best) * pixels + p]
                {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    LabelMap::new(batch, h, w, out).expect("extents from scores")
}

pub fn pixel_accuracy(predicted: &LabelMap, truth: &LabelMap) -> f64 {
    assert_eq!(predicted.shape(), truth.shape());
    if predicted.classes.is_empty() {
        return 0.0;
    }
    let hits = predicted
        .classes
        .iter()
        .zip(&truth.classes)
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / predicted.classes.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_network_is_identity() {
        let mut net = Network::new(vec![]).unwrap();
        let x = Tensor::randn([1, 2, 3, 3], &mut Rng::new(1), 1.0).unwrap();
        assert_eq!(net.forward(&x).unwrap(), x);
        let g = net.backward(&x).unwrap();
        assert_eq!(g.input, x);
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut net = Network::new(vec![Layer::Relu { channels: 1 }]).unwrap();
        let x = Tensor::from_vec([1, 1, 1, 3], vec![-1.0, 2.0, 0.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), &[0.0, 2.0, 0.0]);
        let g = Tensor::from_vec([1, 1, 1, 3], vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(net.backward(&g).unwrap().input.data(), &[0.0, 5.0, 0.0]);
    }

    #[test]
    fn irregular_one_by_one_is_rejected() {
        let spec = LayerSpec::irregular(4, 4, (1, 1));
        assert!(matches!(spec.validate(), Err(Error::Argument(_))));
        assert!(Network::from_specs(&[spec], &mut Rng::new(0), 0.05).is_err());
        assert!(LayerSpec::regular(4, 4, (1, 1)).validate().is_ok());
    }

    #[test]
    fn chained_channel_mismatch_is_rejected() {
        let specs = [LayerSpec::irregular(1, 4, (3, 3)), LayerSpec::relu(3)];
        assert!(matches!(
            Network::from_specs(&specs, &mut Rng::new(0), 0.05),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn forward_shape_error_names_layer() {
        let specs = [LayerSpec::regular(1, 2, (3, 3)), LayerSpec::relu(2), LayerSpec::irregular(2, 2, (3, 3))];
        let mut net = Network::from_specs(&specs, &mut Rng::new(0), 0.05).unwrap();
        let x = Tensor::zeros([1, 1, 4, 4]).unwrap();
        match net.forward(&x) {
            Err(Error::Shape(msg)) => assert!(msg.starts_with("layer 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        let x = Tensor::zeros([1, 3, 8, 8]).unwrap();
        match net.forward(&x) {
            Err(Error::Shape(msg)) => assert!(msg.starts_with("layer 0"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let net = Network::from_specs(&[LayerSpec::relu(1)], &mut Rng::new(0), 0.05).unwrap();
        let g = Tensor::zeros([1, 1, 1, 1]).unwrap();
        assert!(matches!(net.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn single_irregular_layer_delegates() {
        let mut rng = Rng::new(3);
        let mut net = Network::from_specs(&[LayerSpec::irregular(2, 3, (3, 3))], &mut rng, 0.13).unwrap();
        let x = Tensor::randn([2, 2, 6, 5], &mut rng, 1.0).unwrap();
        let y = net.forward(&x).unwrap();
        let Layer::Irregular(k) = &net.layers()[0] else { unreachable!() };
        let (direct, patches) = irrconv::forward_with_patches(&x, k).unwrap();
        assert_eq!(y, direct);
        let g = Tensor::randn(y.shape(), &mut rng, 1.0).unwrap();
        let grads = net.backward(&g).unwrap();
        let kg = irrconv::backward(&g, k, &x, &patches).unwrap();
        assert_eq!(grads.layers[0].weights().unwrap(), &kg.weights[..]);
        assert_eq!(grads.layers[0].positions().unwrap(), &kg.positions[..]);
        assert_eq!(grads.input, kg.input);
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut rng = Rng::new(5);
        let mut net = Network::from_specs(&toy_plan(Arch::Irregular, 1, 4, 2), &mut rng, 0.05).unwrap();
        let x = Tensor::randn([1, 1, 8, 8], &mut rng, 1.0).unwrap();
        let y = net.forward(&x).unwrap();
        let grads = net.backward(&Tensor::zeros(y.shape()).unwrap()).unwrap();
        for lg in &grads.layers {
            if let Some(w) = lg.weights() {
                assert!(w.iter().all(|&v| v == 0.0));
            }
            if let Some(p) = lg.positions() {
                assert!(p.iter().all(|o| o.x == 0.0 && o.y == 0.0));
            }
        }
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn he_init_scale() {
        let spec = LayerSpec::regular(8, 64, (3, 3));
        let layer = Layer::init(&spec, &mut Rng::new(9), 0.05).unwrap();
        let w = layer.weights().unwrap();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 72.0;
        assert!((var / expected - 1.0).abs() < 0.1, "{var} vs {expected}");
    }

    #[test]
    fn toy_plans_have_equal_weight_counts() {
        let count = |arch| {
            Network::from_specs(&toy_plan(arch, 1, 8, 2), &mut Rng::new(1), 0.05)
                .unwrap()
                .layers()
                .iter()
                .filter_map(Layer::weights)
                .map(<[f64]>::len)
                .sum::<usize>()
        };
        assert_eq!(count(Arch::Irregular), count(Arch::Regular));
    }

    #[test]
    fn output_alignment_accumulates_centers() {
        let net = Network::from_specs(&toy_plan(Arch::Regular, 1, 2, 2), &mut Rng::new(1), 0.0).unwrap();
        assert_eq!(net.output_alignment(), ((2, 2), (1, 1)));
    }

    #[test]
    fn xent_uniform_scores() {
        let scores = Tensor::zeros([2, 3, 2, 2]).unwrap();
        let labels = LabelMap::new(2, 2, 2, vec![0, 1, 2, 0, 1, 1, 2, 2]).unwrap();
        let (loss, grad) = pixel_softmax_xent(&scores, &labels).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
        for b in 0..2 {
            for r in 0..2 {
                for c in 0..2 {
                    let s: f64 = (0..3).map(|k| grad.get(b, k, r, c)).sum();
                    assert!(s.abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn xent_large_margin_goes_to_zero() {
        let scores = Tensor::from_vec([1, 2, 1, 1], vec![0.0, 60.0]).unwrap();
        let labels = LabelMap::new(1, 1, 1, vec![1]).unwrap();
        let (loss, _) = pixel_softmax_xent(&scores, &labels).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn xent_errors() {
        let scores = Tensor::zeros([1, 2, 2, 2]).unwrap();
        let labels = LabelMap::new(1, 2, 2, vec![0, 1, 2, 0]).unwrap();
        assert!(matches!(pixel_softmax_xent(&scores, &labels), Err(Error::Argument(_))));
        let labels = LabelMap::new(1, 1, 2, vec![0, 1]).unwrap();
        assert!(matches!(pixel_softmax_xent(&scores, &labels), Err(Error::Shape(_))));
    }

    #[test]
    fn labels_align_with_crop() {
        let labels = LabelMap::new(1, 3, 3, (0..9).collect()).unwrap();
        let cropped = labels.aligned((1, 1), (1, 1), 1, 1).unwrap();
        assert_eq!(cropped.classes(), &[4]);
        assert!(labels.aligned((1, 1), (1, 1), 3, 1).is_err());
    }
}
