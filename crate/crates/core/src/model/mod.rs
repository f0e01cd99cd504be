//! Small convolutional classifiers that expose what CAM needs: the last
//! convolutional feature maps and the rows of the final linear layer.
//!
//! Every network is a tiny static graph of convolution / ReLU / add / concat
//! nodes followed by global average pooling and one linear layer. All
//! parameters live in one flat `Vec<f64>`, which doubles as the checkpoint
//! payload.

pub mod checkpoint;
pub mod ops;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;
use ops::ConvGeometry;

/// Architecture families. The first four are the registered analogs
/// (plain ↔ DenseNet slot, residual ↔ ResNet, separable ↔ Xception,
/// multibranch ↔ Inception). `SingleConv` is a one-layer probe network used
/// for hand-checked examples and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    Plain,
    Residual,
    Separable,
    Multibranch,
    SingleConv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        relu: bool,
    },
}

impl ArchId {
    pub const REGISTERED: [ArchId; 4] = [
        ArchId::Plain,
        ArchId::Residual,
        ArchId::Separable,
        ArchId::Multibranch,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ArchId::Plain => "plain",
            ArchId::Residual => "residual",
            ArchId::Separable => "separable",
            ArchId::Multibranch => "multibranch",
            ArchId::SingleConv { .. } => "single_conv",
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ArchId::Plain),
            "residual" => Ok(ArchId::Residual),
            "separable" => Ok(ArchId::Separable),
            "multibranch" => Ok(ArchId::Multibranch),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub arch_id: ArchId,
    /// (H, W, C_in)
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub feature_grid: (usize, usize),
    pub num_feature_maps: usize,
}

impl ArchitectureSpec {
    /// Derives the feature geometry by tracing the architecture's layers.
    pub fn new(arch_id: ArchId, input_shape: (usize, usize, usize), num_classes: usize) -> Result<Self> {
        let graph = Graph::build(arch_id, input_shape, num_classes)?;
        let (f, h, w) = graph.shapes[graph.feature_node];
        let spec = Self {
            arch_id,
            input_shape,
            num_classes,
            feature_grid: (h, w),
            num_feature_maps: f,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Config("input shape must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.num_feature_maps == 0 {
            return Err(Error::Config("architecture has no feature maps".into()));
        }
        let (fh, fw) = self.feature_grid;
        let registered = !matches!(self.arch_id, ArchId::SingleConv { .. });
        if registered && (fh >= h || fw >= w) {
            return Err(Error::Config(format!(
                "{}: feature grid {fh}x{fw} is not smaller than input {h}x{w}",
                self.arch_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Input,
    Conv {
        src: usize,
        out_channels: usize,
        geom: ConvGeometry,
        weight: usize,
        bias: usize,
    },
    Depthwise {
        src: usize,
        geom: ConvGeometry,
        weight: usize,
        bias: usize,
    },
    Relu {
        src: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Concat {
        srcs: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct ParamBlock {
    offset: usize,
    len: usize,
    /// Zero for biases.
    fan_in: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Graph {
    nodes: Vec<Node>,
    shapes: Vec<(usize, usize, usize)>,
    blocks: Vec<ParamBlock>,
    feature_node: usize,
    head_weight: usize,
    head_bias: usize,
    num_params: usize,
    /// Inputs are mapped to `(x - mean) / std` before the first layer.
    input_norm: (f64, f64),
}

/// Input standardization for the registered architectures.
const STANDARD_INPUT: (f64, f64) = (0.5, 0.25);

struct GraphBuilder {
    arch: ArchId,
    nodes: Vec<Node>,
    shapes: Vec<(usize, usize, usize)>,
    blocks: Vec<ParamBlock>,
    num_params: usize,
}

impl GraphBuilder {
    fn new(arch: ArchId, input_shape: (usize, usize, usize)) -> Self {
        let (h, w, c) = input_shape;
        Self {
            arch,
            nodes: vec![Node::Input],
            shapes: vec![(c, h, w)],
            blocks: Vec::new(),
            num_params: 0,
        }
    }

    fn alloc(&mut self, len: usize, fan_in: usize) -> usize {
        let offset = self.num_params;
        self.blocks.push(ParamBlock { offset, len, fan_in });
        self.num_params += len;
        offset
    }

    fn push(&mut self, node: Node, shape: (usize, usize, usize)) -> usize {
        self.nodes.push(node);
        self.shapes.push(shape);
        self.nodes.len() - 1
    }

    fn out_shape(&self, src: usize, geom: ConvGeometry, channels: usize) -> Result<(usize, usize, usize)> {
        let (_, h, w) = self.shapes[src];
        match (geom.out_len(h), geom.out_len(w)) {
            (Some(oh), Some(ow)) => Ok((channels, oh, ow)),
            _ => Err(Error::Config(format!(
                "{}: unsupported input shape; a {}x{} kernel does not fit a {h}x{w} map",
                self.arch, geom.kernel, geom.kernel
            ))),
        }
    }

    fn conv(&mut self, src: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
        let geom = ConvGeometry::new(kernel, stride, pad);
        let shape = self.out_shape(src, geom, out_channels)?;
        let cin = self.shapes[src].0;
        let fan_in = cin * kernel * kernel;
        let weight = self.alloc(out_channels * fan_in, fan_in);
        let bias = self.alloc(out_channels, 0);
        Ok(self.push(
            Node::Conv {
                src,
                out_channels,
                geom,
                weight,
                bias,
            },
            shape,
        ))
    }

    fn depthwise(&mut self, src: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
        let geom = ConvGeometry::new(kernel, stride, pad);
        let c = self.shapes[src].0;
        let shape = self.out_shape(src, geom, c)?;
        let weight = self.alloc(c * kernel * kernel, kernel * kernel);
        let bias = self.alloc(c, 0);
        Ok(self.push(Node::Depthwise { src, geom, weight, bias }, shape))
    }

    fn relu(&mut self, src: usize) -> usize {
        let shape = self.shapes[src];
        self.push(Node::Relu { src }, shape)
    }

    fn conv_relu(&mut self, src: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
        let c = self.conv(src, out_channels, kernel, stride, pad)?;
        Ok(self.relu(c))
    }

    fn add(&mut self, a: usize, b: usize) -> usize {
        assert_eq!(self.shapes[a], self.shapes[b], "add operands differ in shape");
        let shape = self.shapes[a];
        self.push(Node::Add { a, b }, shape)
    }

    fn concat(&mut self, srcs: Vec<usize>) -> usize {
        let (_, h, w) = self.shapes[srcs[0]];
        let c = srcs
            .iter()
            .map(|&s| {
                assert_eq!((self.shapes[s].1, self.shapes[s].2), (h, w));
                self.shapes[s].0
            })
            .sum();
        self.push(Node::Concat { srcs }, (c, h, w))
    }

    fn finish(mut self, feature_node: usize, num_classes: usize, input_norm: (f64, f64)) -> Graph {
        let f = self.shapes[feature_node].0;
        let head_weight = self.alloc(num_classes * f, f);
        let head_bias = self.alloc(num_classes, 0);
        Graph {
            nodes: self.nodes,
            shapes: self.shapes,
            blocks: self.blocks,
            feature_node,
            head_weight,
            head_bias,
            num_params: self.num_params,
            input_norm,
        }
    }
}

impl Graph {
    fn build(arch: ArchId, input_shape: (usize, usize, usize), num_classes: usize) -> Result<Self> {
        let mut g = GraphBuilder::new(arch, input_shape);
        let x = 0;
        let graph = match arch {
            ArchId::Plain => {
                let a = g.conv_relu(x, 6, 3, 1, 1)?;
                let b = g.conv_relu(a, 8, 3, 2, 1)?;
                let c = g.conv_relu(b, 8, 3, 2, 1)?;
                g.finish(c, num_classes, STANDARD_INPUT)
            }
            ArchId::Residual => {
                let stem = g.conv_relu(x, 6, 3, 2, 1)?;
                let down = g.conv_relu(stem, 8, 3, 2, 1)?;
                let r1 = g.conv_relu(down, 8, 3, 1, 1)?;
                let r2 = g.conv(r1, 8, 3, 1, 1)?;
                let sum = g.add(down, r2);
                let out = g.relu(sum);
                g.finish(out, num_classes, STANDARD_INPUT)
            }
            ArchId::Separable => {
                let stem = g.conv_relu(x, 6, 3, 1, 1)?;
                let d1 = g.depthwise(stem, 3, 2, 1)?;
                let p1 = g.conv_relu(d1, 8, 1, 1, 0)?;
                let d2 = g.depthwise(p1, 3, 2, 1)?;
                let p2 = g.conv_relu(d2, 8, 1, 1, 0)?;
                g.finish(p2, num_classes, STANDARD_INPUT)
            }
            ArchId::Multibranch => {
                let stem = g.conv_relu(x, 6, 3, 2, 1)?;
                let reduce = g.conv_relu(stem, 8, 3, 3, 0)?;
                let b1 = g.conv_relu(reduce, 4, 1, 1, 0)?;
                let b3 = g.conv_relu(reduce, 4, 3, 1, 1)?;
                let cat = g.concat(vec![b1, b3]);
                g.finish(cat, num_classes, STANDARD_INPUT)
            }
            ArchId::SingleConv {
                filters,
                kernel,
                stride,
                pad,
                relu,
            } => {
                if filters == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::Config("single_conv needs positive filters/kernel/stride".into()));
                }
                let c = g.conv(x, filters, kernel, stride, pad)?;
                let out = if relu { g.relu(c) } else { c };
                g.finish(out, num_classes, (0.0, 1.0))
            }
        };
        Ok(graph)
    }
}

/// Output of a single-sample forward pass, retaining every intermediate
/// activation for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    values: Vec<Tensor>,
    feature_node: usize,
    pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardPass {
    pub fn features(&self) -> &Tensor {
        &self.values[self.feature_node]
    }

    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    spec: ArchitectureSpec,
    graph: Graph,
    params: Vec<f64>,
    seed: u64,
}

/// Builds a classifier with deterministic He-normal initialization.
pub fn build_model(spec: &ArchitectureSpec, seed: u64) -> Result<Classifier> {
    spec.validate()?;
    let graph = Graph::build(spec.arch_id, spec.input_shape, spec.num_classes)?;
    let (f, h, w) = graph.shapes[graph.feature_node];
    if (h, w) != spec.feature_grid || f != spec.num_feature_maps {
        return Err(Error::Config(format!(
            "{}: declared feature geometry {:?}x{} does not match traced {h}x{w}x{f}",
            spec.arch_id, spec.feature_grid, spec.num_feature_maps
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; graph.num_params];
    for block in &graph.blocks {
        if block.fan_in == 0 {
            continue;
        }
        let std = (2.0 / block.fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for p in &mut params[block.offset..block.offset + block.len] {
            *p = normal.sample(&mut rng);
        }
    }
    Ok(Classifier {
        spec: spec.clone(),
        graph,
        params,
        seed,
    })
}

impl Classifier {
    /// Rebuilds a classifier around an existing parameter vector.
    pub fn from_parameters(spec: &ArchitectureSpec, seed: u64, params: Vec<f64>) -> Result<Self> {
        let mut model = build_model(spec, seed)?;
        if params.len() != model.params.len() {
            return Err(Error::Input(format!(
                "parameter count {} does not match {} for {}",
                params.len(),
                model.params.len(),
                spec.arch_id
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    /// Offsets of the parameters owned by each layer, in graph order, ending
    /// with the linear head.
    pub fn layer_parameter_ranges(&self) -> Vec<Range<usize>> {
        let mut ranges = Vec::new();
        for node in &self.graph.nodes {
            match *node {
                Node::Conv { weight, bias, .. } | Node::Depthwise { weight, bias, .. } => {
                    let end = self
                        .graph
                        .blocks
                        .iter()
                        .find(|b| b.offset == bias)
                        .map(|b| b.offset + b.len)
                        .unwrap_or(bias);
                    ranges.push(weight..end);
                }
                _ => {}
            }
        }
        ranges.push(self.graph.head_weight..self.graph.num_params);
        ranges
    }

    /// Parameter range of the final linear layer's row for `class_index`.
    pub fn head_row_range(&self, class_index: usize) -> Range<usize> {
        let f = self.spec.num_feature_maps;
        let start = self.graph.head_weight + class_index * f;
        start..start + f
    }

    pub fn head_bias_index(&self, class_index: usize) -> usize {
        self.graph.head_bias + class_index
    }

    /// Row of the final linear layer for one class.
    pub fn classifier_weights(&self, class_index: usize) -> Result<&[f64]> {
        if class_index >= self.spec.num_classes {
            return Err(Error::OutOfRange {
                index: class_index,
                len: self.spec.num_classes,
            });
        }
        Ok(&self.params[self.head_row_range(class_index)])
    }

    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        let (h, w, c) = self.spec.input_shape;
        if image.shape() != (c, h, w) {
            return Err(Error::Input(format!(
                "image shape {:?} does not match model input (C,H,W)=({c},{h},{w})",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Single-sample forward pass keeping all activations.
    pub fn forward_one(&self, image: &Tensor) -> Result<ForwardPass> {
        self.check_input(image)?;
        Ok(self.forward_unchecked(image))
    }

    fn forward_unchecked(&self, image: &Tensor) -> ForwardPass {
        let p = &self.params;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.graph.nodes.len());
        for (i, node) in self.graph.nodes.iter().enumerate() {
            let v = match node {
                Node::Input => {
                    let mut t = image.clone();
                    let (mean, std) = self.graph.input_norm;
                    if (mean, std) != (0.0, 1.0) {
                        for x in &mut t.data {
                            *x = (*x - mean) / std;
                        }
                    }
                    t
                }
                Node::Conv {
                    src,
                    out_channels,
                    geom,
                    weight,
                    bias,
                } => {
                    let cin = self.graph.shapes[*src].0;
                    let wlen = out_channels * cin * geom.kernel * geom.kernel;
                    ops::conv2d_forward(
                        &values[*src],
                        &p[*weight..weight + wlen],
                        &p[*bias..bias + out_channels],
                        *out_channels,
                        *geom,
                    )
                }
                Node::Depthwise { src, geom, weight, bias } => {
                    let c = self.graph.shapes[*src].0;
                    ops::depthwise_forward(
                        &values[*src],
                        &p[*weight..weight + c * geom.kernel * geom.kernel],
                        &p[*bias..bias + c],
                        *geom,
                    )
                }
                Node::Relu { src } => ops::relu_forward(&values[*src]),
                Node::Add { a, b } => {
                    let mut t = values[*a].clone();
                    t.add_assign(&values[*b]);
                    t
                }
                Node::Concat { srcs } => {
                    let (c, h, w) = self.graph.shapes[i];
                    let mut data = Vec::with_capacity(c * h * w);
                    for s in srcs {
                        data.extend_from_slice(&values[*s].data);
                    }
                    Tensor::from_vec(c, h, w, data)
                }
            };
            values.push(v);
        }
        let features = &values[self.graph.feature_node];
        let pooled: Vec<f64> = (0..features.channels)
            .map(|f| features.plane(f).iter().sum::<f64>() / features.plane_len() as f64)
            .collect();
        let nf = pooled.len();
        let logits = (0..self.spec.num_classes)
            .map(|c| {
                let row = &p[self.graph.head_weight + c * nf..self.graph.head_weight + (c + 1) * nf];
                p[self.graph.head_bias + c] + row.iter().zip(&pooled).map(|(w, a)| w * a).sum::<f64>()
            })
            .collect();
        ForwardPass {
            values,
            feature_node: self.graph.feature_node,
            pooled,
            logits,
        }
    }

    /// Batch forward: logits (N×C) and last-conv feature maps (N×F×h×w).
    pub fn forward(&self, batch: &[Tensor]) -> Result<(Vec<Vec<f64>>, Vec<Tensor>)> {
        for img in batch {
            self.check_input(img)?;
        }
        let passes = par::map(batch, |img| {
            let pass = self.forward_unchecked(img);
            (pass.logits, pass.values.into_iter().nth(pass.feature_node).expect("feature node"))
        });
        Ok(passes.into_iter().unzip())
    }

    /// Logits only, for evaluation.
    pub fn logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward_one(image)?.logits)
    }

    /// Accumulates parameter gradients into `grads` given upstream gradients
    /// on the logits and (optionally) directly on the feature maps.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        grad_logits: &[f64],
        grad_features: Option<&Tensor>,
        grads: &mut [f64],
    ) {
        assert_eq!(grads.len(), self.params.len());
        let p = &self.params;
        let nf = self.spec.num_feature_maps;
        let (_, fh, fw) = self.graph.shapes[self.graph.feature_node];
        let area = (fh * fw) as f64;

        let mut grad_pooled = vec![0.0; nf];
        for (c, &g) in grad_logits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads[self.graph.head_bias + c] += g;
            let base = self.graph.head_weight + c * nf;
            for f in 0..nf {
                grads[base + f] += g * pass.pooled[f];
                grad_pooled[f] += g * p[base + f];
            }
        }

        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.graph.nodes.len()];
        let mut gf = match grad_features {
            Some(g) => g.clone(),
            None => Tensor::zeros(nf, fh, fw),
        };
        for f in 0..nf {
            let d = grad_pooled[f] / area;
            for v in gf.plane_mut(f) {
                *v += d;
            }
        }
        node_grads[self.graph.feature_node] = Some(gf);

        fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
            match slot {
                Some(existing) => existing.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for i in (1..self.graph.nodes.len()).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            match &self.graph.nodes[i] {
                Node::Input => {}
                Node::Conv {
                    src,
                    out_channels,
                    geom,
                    weight,
                    bias,
                } => {
                    let cin = self.graph.shapes[*src].0;
                    let wlen = out_channels * cin * geom.kernel * geom.kernel;
                    let (gw_all, gb_all) = grads.split_at_mut(*bias);
                    let need_input = *src != 0;
                    let gi = ops::conv2d_backward(
                        &pass.values[*src],
                        &p[*weight..weight + wlen],
                        &g,
                        *geom,
                        &mut gw_all[*weight..weight + wlen],
                        &mut gb_all[..*out_channels],
                        need_input,
                    );
                    if let Some(gi) = gi {
                        accumulate(&mut node_grads[*src], gi);
                    }
                }
                Node::Depthwise { src, geom, weight, bias } => {
                    let c = self.graph.shapes[*src].0;
                    let wlen = c * geom.kernel * geom.kernel;
                    let (gw_all, gb_all) = grads.split_at_mut(*bias);
                    let gi = ops::depthwise_backward(
                        &pass.values[*src],
                        &p[*weight..weight + wlen],
                        &g,
                        *geom,
                        &mut gw_all[*weight..weight + wlen],
                        &mut gb_all[..c],
                    );
                    if *src != 0 {
                        accumulate(&mut node_grads[*src], gi);
                    }
                }
                Node::Relu { src } => {
                    let gi = ops::relu_backward(&pass.values[i], &g);
                    accumulate(&mut node_grads[*src], gi);
                }
                Node::Add { a, b } => {
                    accumulate(&mut node_grads[*b], g.clone());
                    accumulate(&mut node_grads[*a], g);
                }
                Node::Concat { srcs } => {
                    let mut offset = 0;
                    for s in srcs {
                        let (c, h, w) = self.graph.shapes[*s];
                        let len = c * h * w;
                        let part = Tensor::from_vec(c, h, w, g.data[offset..offset + len].to_vec());
                        offset += len;
                        accumulate(&mut node_grads[*s], part);
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn spec(arch: ArchId) -> ArchitectureSpec {
        ArchitectureSpec::new(arch, (24, 24, 1), 2).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(1, 24, 24, (0..576).map(|_| rng.gen::<f64>()).collect())
    }

    #[test]
    fn build_is_deterministic() {
        let s = spec(ArchId::Plain);
        let a = build_model(&s, 7).unwrap();
        let b = build_model(&s, 7).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        let c = build_model(&s, 8).unwrap();
        assert_ne!(a.parameters(), c.parameters());
    }

    #[test]
    fn feature_grids_trace_layer_strides() {
        // Two stride-2 stages: 24 -> 12 -> 6.
        assert_eq!(spec(ArchId::Residual).feature_grid, (6, 6));
        assert_eq!(spec(ArchId::Plain).feature_grid, (6, 6));
        assert_eq!(spec(ArchId::Separable).feature_grid, (6, 6));
        // Stride 2 then a 3x3 stride-3 valid conv: 24 -> 12 -> 4.
        assert_eq!(spec(ArchId::Multibranch).feature_grid, (4, 4));
    }

    #[test]
    fn parameter_counts_are_distinct() {
        let counts: Vec<usize> = ArchId::REGISTERED
            .iter()
            .map(|&a| build_model(&spec(a), 0).unwrap().num_parameters())
            .collect();
        assert_eq!(counts, vec![1102, 1686, 346, 846]);
    }

    #[test]
    fn shape_contract_for_all_archs_and_batch_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for arch in ArchId::REGISTERED {
            let s = spec(arch);
            let m = build_model(&s, 3).unwrap();
            for n in 1..=8 {
                let batch: Vec<Tensor> = (0..n).map(|_| random_image(&mut rng)).collect();
                let (logits, feats) = m.forward(&batch).unwrap();
                assert_eq!(logits.len(), n);
                assert!(logits.iter().all(|l| l.len() == 2 && l.iter().all(|v| v.is_finite())));
                for f in &feats {
                    assert_eq!(f.shape(), (s.num_feature_maps, s.feature_grid.0, s.feature_grid.1));
                }
            }
        }
    }

    #[test]
    fn zero_image_gives_finite_logits() {
        for arch in ArchId::REGISTERED {
            let m = build_model(&spec(arch), 0).unwrap();
            let logits = m.logits(&Tensor::zeros(1, 24, 24)).unwrap();
            assert!(logits.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn batch_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = build_model(&spec(ArchId::Multibranch), 4).unwrap();
        let imgs: Vec<Tensor> = (0..3).map(|_| random_image(&mut rng)).collect();
        let (alone, _) = m.forward(&imgs[1..2]).unwrap();
        let (together, _) = m.forward(&imgs).unwrap();
        assert_eq!(alone[0], together[1]);
    }

    #[test]
    fn shape_mismatch_is_an_input_error() {
        let m = build_model(&spec(ArchId::Plain), 0).unwrap();
        let err = m.forward(&[Tensor::zeros(1, 20, 24)]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn unsupported_input_shape_is_a_config_error() {
        let err = ArchitectureSpec::new(ArchId::Multibranch, (4, 4, 1), 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    fn hand_net() -> Classifier {
        // 1 filter, 3x3, no padding, no ReLU: 4x4 input -> 2x2 feature map.
        let arch = ArchId::SingleConv {
            filters: 1,
            kernel: 3,
            stride: 1,
            pad: 0,
            relu: false,
        };
        let s = ArchitectureSpec::new(arch, (4, 4, 1), 2).unwrap();
        // conv weights: center 1, right neighbour -1 ; bias 0.1
        let mut params = vec![0.0; 9];
        params[4] = 1.0;
        params[5] = -1.0;
        params.push(0.1);
        // head rows [[2],[ -1 ]], biases [0, 0.5]
        params.extend_from_slice(&[2.0, -1.0, 0.0, 0.5]);
        Classifier::from_parameters(&s, 0, params).unwrap()
    }

    #[test]
    fn hand_computed_logits() {
        let m = hand_net();
        let img = Tensor::from_vec(
            1,
            4,
            4,
            vec![
                0.0, 0.1, 0.2, 0.3, //
                0.4, 0.5, 0.6, 0.7, //
                0.8, 0.9, 1.0, 0.0, //
                0.5, 0.5, 0.5, 0.5,
            ],
        );
        // feature(y,x) = in(y+1,x+1) - in(y+1,x+2) + 0.1
        // (0,0): 0.5-0.6+0.1 = 0.0 ; (0,1): 0.6-0.7+0.1 = 0.0
        // (1,0): 0.9-1.0+0.1 = 0.0 ; (1,1): 1.0-0.0+0.1 = 1.1
        // GAP = 1.1/4 = 0.275 ; logits = [2*0.275, -0.275+0.5] = [0.55, 0.225]
        let pass = m.forward_one(&img).unwrap();
        let f = pass.features();
        let expect = [0.0, 0.0, 0.0, 1.1];
        for (a, e) in f.data.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!((pass.logits[0] - 0.55).abs() < 1e-12);
        assert!((pass.logits[1] - 0.225).abs() < 1e-12);
    }

    #[test]
    fn classifier_weights_reads_rows() {
        let arch = ArchId::SingleConv {
            filters: 2,
            kernel: 1,
            stride: 1,
            pad: 0,
            relu: false,
        };
        let s = ArchitectureSpec::new(arch, (2, 2, 1), 2).unwrap();
        let params = vec![1.0, 1.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 0.0, 0.0];
        let m = Classifier::from_parameters(&s, 0, params).unwrap();
        assert_eq!(m.classifier_weights(0).unwrap(), &[1.0, 2.0]);
        assert_eq!(m.classifier_weights(1).unwrap(), &[3.0, 4.0]);
        assert!(matches!(m.classifier_weights(2), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn update_of_one_row_leaves_other_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = build_model(&spec(ArchId::Separable), 1).unwrap();
        let before0 = m.classifier_weights(0).unwrap().to_vec();
        let img = random_image(&mut rng);
        let pass = m.forward_one(&img).unwrap();
        let mut grads = vec![0.0; m.num_parameters()];
        // Upstream gradient only on the class-1 logit.
        m.backward(&pass, &[0.0, 1.0], None, &mut grads);
        let row1 = m.head_row_range(1);
        let row0 = m.head_row_range(0);
        assert!(grads[row0.clone()].iter().all(|&g| g == 0.0));
        assert!(grads[row1.clone()].iter().any(|&g| g != 0.0));
        // Crafted step touching only the head row of class 1.
        for i in row1 {
            m.parameters_mut()[i] -= 0.1 * grads[i];
        }
        assert_eq!(m.classifier_weights(0).unwrap(), before0.as_slice());
    }

    #[test]
    fn every_layer_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for arch in ArchId::REGISTERED {
            let m = build_model(&spec(arch), 5).unwrap();
            let mut grads = vec![0.0; m.num_parameters()];
            for _ in 0..4 {
                let pass = m.forward_one(&random_image(&mut rng)).unwrap();
                m.backward(&pass, &[1.0, -1.0], None, &mut grads);
            }
            for r in m.layer_parameter_ranges() {
                assert!(grads[r.clone()].iter().any(|g| *g != 0.0), "{arch}: dead layer {r:?}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_for_every_arch() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for arch in ArchId::REGISTERED {
            let m = build_model(&spec(arch), 2).unwrap();
            let img = random_image(&mut rng);
            let upstream = [0.7, -0.3];
            let objective = |model: &Classifier| {
                let l = model.logits(&img).unwrap();
                l[0] * upstream[0] + l[1] * upstream[1]
            };
            let pass = m.forward_one(&img).unwrap();
            let mut grads = vec![0.0; m.num_parameters()];
            m.backward(&pass, &upstream, None, &mut grads);
            let h = 1e-6;
            for i in (0..m.num_parameters()).step_by(7) {
                let mut plus = m.clone();
                plus.parameters_mut()[i] += h;
                let mut minus = m.clone();
                minus.parameters_mut()[i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                assert!(
                    (fd - grads[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "{arch} param {i}: fd {fd} vs {}",
                    grads[i]
                );
            }
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 1001.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[1] > p[0]);
    }
}
