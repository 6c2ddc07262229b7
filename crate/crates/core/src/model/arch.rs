use std::fmt;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::backend::{Backend, Eager};
use super::ModelError;
use crate::density::DensityMap;
use crate::tensor::{ConvSpec, Graph, Real, Tensor, Var};

/// Encoder blocks double the channel count and add the duplicated input;
/// decoder blocks add a 1×1 projection of the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Encoder,
    Decoder,
}

/// Residual dilated inception module: two parallel paths of two 3×3
/// convolutions, dilation 1 and dilation 4, summed with a residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RdimBlock {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Dilation of the second path.
pub const WIDE_DILATION: usize = 4;

impl RdimBlock {
    pub fn encoder(in_channels: usize) -> Self {
        Self {
            kind: BlockKind::Encoder,
            in_channels,
            out_channels: 2 * in_channels,
        }
    }

    pub fn decoder(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: BlockKind::Decoder,
            in_channels,
            out_channels,
        }
    }

    /// Layers in parameter order: `a1, a2, b1, b2[, proj]`.
    pub fn layers(&self, prefix: &str) -> Vec<LayerDef> {
        let (i, o) = (self.in_channels, self.out_channels);
        let mut v = vec![
            LayerDef::conv(format!("{prefix}.a1"), ConvSpec::same(i, o, 3, 1)),
            LayerDef::conv(format!("{prefix}.a2"), ConvSpec::same(o, o, 3, 1)),
            LayerDef::conv(format!("{prefix}.b1"), ConvSpec::same(i, o, 3, WIDE_DILATION)),
            LayerDef::conv(format!("{prefix}.b2"), ConvSpec::same(o, o, 3, WIDE_DILATION)),
        ];
        if self.kind == BlockKind::Decoder {
            v.push(LayerDef::conv(format!("{prefix}.proj"), ConvSpec::same(i, o, 1, 1)));
        }
        v
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(ModelError::Widths("block channel counts must be positive".into()));
        }
        if self.kind == BlockKind::Encoder && self.out_channels != 2 * self.in_channels {
            return Err(ModelError::Widths(format!(
                "encoder block {}→{} must double its channels",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv(ConvSpec),
    /// 2×2 stride-2 transposed convolution, `Cin×Cout×2×2` weights.
    Upsample { in_channels: usize, out_channels: usize },
}

/// A named layer; its parameters are `{name}.weight` then `{name}.bias`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDef {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerDef {
    fn conv(name: String, spec: ConvSpec) -> Self {
        Self {
            name,
            kind: LayerKind::Conv(spec),
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv(s) => s.weight_shape().to_vec(),
            LayerKind::Upsample {
                in_channels,
                out_channels,
            } => vec![in_channels, out_channels, 2, 2],
        }
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv(s) => vec![s.out_channels],
            LayerKind::Upsample { out_channels, .. } => vec![out_channels],
        }
    }

    /// He-normal fan-in of the weight tensor.
    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv(s) => s.patch_len(),
            LayerKind::Upsample { in_channels, .. } => in_channels,
        }
    }
}

/// How an encoder skip tensor joins the decoder stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipMode {
    /// 1×1 convolution on the skip tensor, then elementwise addition.
    Add,
}

impl SkipMode {
    fn as_str(self) -> &'static str {
        match self {
            SkipMode::Add => "add",
        }
    }
}

/// Default channel widths at the stem and the three encoder levels.
pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 128];

/// Network topology.
///
/// ```text
/// stem   conv3 3→w0, conv3 w0→w0                          H
/// enc1   RDIM-E w0→w1  ─ skip s1, pool                     H
/// enc2   RDIM-E w1→w2  ─ skip s2, pool                     H/2
/// enc3   RDIM-E w2→w3  ─ skip s3, pool                     H/4
/// dec1   RDIM-D w3→2·w3                                    H/8
/// up1 2·w3→w3, + skip1(s3), dec2 RDIM-D w3→w3              H/4
/// up2   w3→w2, + skip2(s2), dec3 RDIM-D w2→w2              H/2
/// up3   w2→w1, + skip3(s1), dec4 RDIM-D w1→w1              H
/// head  conv1 w1→w1, conv1 w1→w1, conv1 w1→3 (linear)      H
/// ```
///
/// Every convolution except the head is followed by a ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchDescriptor {
    pub widths: [usize; 4],
    pub skip: SkipMode,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self::new(&DEFAULT_WIDTHS).expect("default widths are consistent")
    }
}

impl ArchDescriptor {
    pub fn new(widths: &[usize]) -> Result<Self, ModelError> {
        let widths: [usize; 4] = widths
            .try_into()
            .map_err(|_| ModelError::Widths(format!("expected 4 widths, got {}", widths.len())))?;
        if widths[0] == 0 {
            return Err(ModelError::Widths("widths must be positive".into()));
        }
        for i in 0..3 {
            if widths[i + 1] != 2 * widths[i] {
                return Err(ModelError::Widths(format!(
                    "width {} must be twice width {} ({:?})",
                    i + 1,
                    i,
                    widths
                )));
            }
        }
        Ok(Self {
            widths,
            skip: SkipMode::Add,
        })
    }

    /// Widths `[b, 2b, 4b, 8b]`.
    pub fn from_base(base: usize) -> Result<Self, ModelError> {
        Self::new(&[base, 2 * base, 4 * base, 8 * base])
    }

    pub fn blocks(&self) -> Vec<(String, RdimBlock)> {
        let [w0, w1, w2, w3] = self.widths;
        vec![
            ("enc1".into(), RdimBlock::encoder(w0)),
            ("enc2".into(), RdimBlock::encoder(w1)),
            ("enc3".into(), RdimBlock::encoder(w2)),
            ("dec1".into(), RdimBlock::decoder(w3, 2 * w3)),
            ("dec2".into(), RdimBlock::decoder(w3, w3)),
            ("dec3".into(), RdimBlock::decoder(w2, w2)),
            ("dec4".into(), RdimBlock::decoder(w1, w1)),
        ]
    }

    /// Every layer in execution order, which is also parameter order.
    pub fn layers(&self) -> Vec<LayerDef> {
        let [w0, w1, w2, w3] = self.widths;
        let blocks = self.blocks();
        let block = |i: usize| blocks[i].1.layers(&blocks[i].0);
        let up = |n: usize, i, o| LayerDef {
            name: format!("up{n}"),
            kind: LayerKind::Upsample {
                in_channels: i,
                out_channels: o,
            },
        };
        let skip = |n: usize, c| LayerDef::conv(format!("skip{n}"), ConvSpec::same(c, c, 1, 1));

        let mut v = vec![
            LayerDef::conv("stem.conv1".into(), ConvSpec::same(3, w0, 3, 1)),
            LayerDef::conv("stem.conv2".into(), ConvSpec::same(w0, w0, 3, 1)),
        ];
        for i in 0..4 {
            v.extend(block(i));
        }
        for (n, (i, o)) in [(2 * w3, w3), (w3, w2), (w2, w1)].into_iter().enumerate() {
            v.push(up(n + 1, i, o));
            v.push(skip(n + 1, o));
            v.extend(block(4 + n));
        }
        v.push(LayerDef::conv("head.conv1".into(), ConvSpec::same(w1, w1, 1, 1)));
        v.push(LayerDef::conv("head.conv2".into(), ConvSpec::same(w1, w1, 1, 1)));
        v.push(LayerDef::conv("head.conv3".into(), ConvSpec::same(w1, 3, 1, 1)));
        v
    }

    /// `(name, shape)` for every parameter tensor, in order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .into_iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), l.weight_shape()),
                    (format!("{}.bias", l.name), l.bias_shape()),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn to_text(&self) -> String {
        let w = self.widths;
        let mut s = format!("widths={},{},{},{}\nskip={}\n", w[0], w[1], w[2], w[3], self.skip.as_str());
        for (name, shape) in self.param_shapes() {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            s.push_str(&format!("param {name} {}\n", dims.join(",")));
        }
        s
    }

    /// Parses [`ArchDescriptor::to_text`] output and checks that the listed
    /// parameters are exactly those the topology implies.
    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::Descriptor(m);
        let mut widths = None;
        let mut skip = None;
        let mut params = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some(rest) = line.strip_prefix("param ") {
                let (name, dims) = rest.split_once(' ').ok_or_else(|| bad(format!("bad param line {line:?}")))?;
                let shape = dims
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad shape in {line:?}")))?;
                params.push((name.to_string(), shape));
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("bad line {line:?}")))?;
            match key {
                "widths" => {
                    let w = value
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad widths {value:?}")))?;
                    widths = Some(w);
                }
                "skip" if value == "add" => skip = Some(SkipMode::Add),
                "skip" => return Err(bad(format!("unknown skip mode {value:?}"))),
                _ => return Err(bad(format!("unknown key {key:?}"))),
            }
        }
        let widths = widths.ok_or_else(|| bad("missing widths".into()))?;
        let mut desc = Self::new(&widths)?;
        desc.skip = skip.ok_or_else(|| bad("missing skip".into()))?;
        if params != desc.param_shapes() {
            return Err(ModelError::Length(
                "parameter list disagrees with the declared widths".into(),
            ));
        }
        Ok(desc)
    }
}

/// Named parameter tensors of one network instance.
#[derive(Clone, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub descriptor: ArchDescriptor,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> fmt::Debug for ModelParams<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelParams")
            .field("descriptor", &self.descriptor)
            .field("tensors", &self.tensors.len())
            .field("param_count", &self.param_count())
            .finish()
    }
}

impl<T: Real> ModelParams<T> {
    pub fn param_count(&self) -> usize {
        crate::tensor::count_params(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            descriptor: self.descriptor.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Zero parameters for `descriptor`.
    pub fn zeros(descriptor: ArchDescriptor) -> Self {
        let (names, tensors) = descriptor
            .param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .unzip();
        Self {
            descriptor,
            names,
            tensors,
        }
    }
}

/// He-normal weights (std `sqrt(2 / fan_in)`), zero biases, drawn in
/// parameter order from a ChaCha stream seeded with `seed`.
pub fn init_params(descriptor: ArchDescriptor, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(descriptor);
    for (i, layer) in params.descriptor.layers().iter().enumerate() {
        let normal = Normal::new(0.0f64, (2.0 / layer.fan_in() as f64).sqrt()).expect("positive std");
        for w in params.tensors[2 * i].data_mut() {
            *w = normal.sample(&mut rng) as f32;
        }
    }
    params
}

pub fn build_pathonet(widths: &[usize], seed: u64) -> Result<ModelParams, ModelError> {
    Ok(init_params(ArchDescriptor::new(widths)?, seed))
}

struct Cursor<'a, B: Backend> {
    be: &'a mut B,
    params: &'a [B::V],
    layers: &'a [LayerDef],
    pos: usize,
}

impl<B: Backend> Cursor<'_, B> {
    fn next(&mut self) -> (&LayerDef, B::V, B::V) {
        let l = &self.layers[self.pos];
        let w = self.params[2 * self.pos].clone();
        let b = self.params[2 * self.pos + 1].clone();
        self.pos += 1;
        (l, w, b)
    }

    fn conv(&mut self, x: &B::V, relu: bool) -> Result<B::V, ModelError> {
        let (l, w, b) = self.next();
        let LayerKind::Conv(spec) = l.kind else {
            unreachable!("layer {} is not a convolution", l.name)
        };
        let y = self.be.conv(x, &w, &b, &spec)?;
        Ok(if relu { self.be.relu(&y) } else { y })
    }

    fn upsample(&mut self, x: &B::V) -> Result<B::V, ModelError> {
        let (l, w, b) = self.next();
        assert!(matches!(l.kind, LayerKind::Upsample { .. }), "layer {} is not an upsample", l.name);
        let y = self.be.upsample(x, &w, &b)?;
        Ok(self.be.relu(&y))
    }

    fn rdim(&mut self, kind: BlockKind, x: &B::V) -> Result<B::V, ModelError> {
        let a = self.conv(x, true)?;
        let a = self.conv(&a, true)?;
        let b = self.conv(x, true)?;
        let b = self.conv(&b, true)?;
        let paths = self.be.add(&a, &b)?;
        let residual = match kind {
            BlockKind::Encoder => self.be.dup(x)?,
            BlockKind::Decoder => self.conv(x, true)?,
        };
        Ok(self.be.add(&paths, &residual)?)
    }
}

fn run<B: Backend>(desc: &ArchDescriptor, be: &mut B, params: &[B::V], x: B::V) -> Result<B::V, ModelError> {
    let layers = desc.layers();
    assert_eq!(params.len(), 2 * layers.len(), "parameter count does not match descriptor");
    let mut c = Cursor {
        be,
        params,
        layers: &layers,
        pos: 0,
    };
    let h = c.conv(&x, true)?;
    let mut h = c.conv(&h, true)?;
    let mut skips = Vec::with_capacity(3);
    for _ in 0..3 {
        h = c.rdim(BlockKind::Encoder, &h)?;
        skips.push(h.clone());
        h = c.be.pool(&h)?;
    }
    h = c.rdim(BlockKind::Decoder, &h)?;
    for s in skips.into_iter().rev() {
        let up = c.upsample(&h)?;
        let s = c.conv(&s, true)?;
        h = c.be.add(&up, &s)?;
        h = c.rdim(BlockKind::Decoder, &h)?;
    }
    h = c.conv(&h, false)?;
    h = c.conv(&h, false)?;
    h = c.conv(&h, false)?;
    debug_assert_eq!(c.pos, layers.len());
    Ok(h)
}

fn check_input<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    match *image.shape() {
        [3, h, w] if h % 8 == 0 && w % 8 == 0 => Ok(image.clone().reshape(vec![1, 3, h, w])?),
        [_, 3, h, w] if h % 8 == 0 && w % 8 == 0 => Ok(image.clone()),
        _ => Err(ModelError::InputShape(image.shape().to_vec())),
    }
}

/// Raw network output for an `N×3×H×W` (or `3×H×W`) image batch, H and W
/// divisible by 8. The result is `N×3×H×W`.
pub fn forward_tensor<T: Real>(params: &ModelParams<T>, image: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let x = Rc::new(check_input(image)?);
    let p: Vec<_> = params.tensors.iter().cloned().map(Rc::new).collect();
    let out = run(&params.descriptor, &mut Eager::new(), &p, x)?;
    let out = Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone());
    out.ensure_finite("forward").map_err(|_| ModelError::NonFinite)?;
    Ok(out)
}

/// Density map for one `3×H×W` image scaled to `[0, 1]`.
pub fn forward(params: &ModelParams, image: &Tensor) -> Result<DensityMap, ModelError> {
    if image.shape().len() == 4 && image.shape()[0] != 1 {
        return Err(ModelError::InputShape(image.shape().to_vec()));
    }
    let out = forward_tensor(params, image)?;
    Ok(DensityMap::from_tensor(&out).expect("network emits three finite channels"))
}

/// Records the forward pass on `graph`. Returns the parameter leaves, in
/// parameter order, and the output node.
pub fn forward_graph<T: Real>(
    params: &ModelParams<T>,
    graph: &mut Graph<T>,
    image: &Tensor<T>,
) -> Result<(Vec<Var>, Var), ModelError> {
    let x = check_input(image)?;
    let x = graph.constant(x);
    let p: Vec<Var> = params.tensors.iter().map(|t| graph.param(t.clone())).collect();
    let out = run(&params.descriptor, graph, &p, x)?;
    Ok((p, out))
}

/// One RDIM block. `params` holds its layers' weight and bias tensors in
/// [`RdimBlock::layers`] order.
pub fn rdim_forward<T: Real>(block: &RdimBlock, params: &[Tensor<T>], input: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    block.validate()?;
    let layers = block.layers("block");
    if params.len() != 2 * layers.len() {
        return Err(ModelError::Length(format!(
            "block needs {} tensors, got {}",
            2 * layers.len(),
            params.len()
        )));
    }
    for (i, l) in layers.iter().enumerate() {
        if params[2 * i].shape() != l.weight_shape() || params[2 * i + 1].shape() != l.bias_shape() {
            return Err(ModelError::Length(format!("parameter shapes of {} do not match", l.name)));
        }
    }
    match input.shape() {
        [_, c, _, _] if *c == block.in_channels => {}
        s => {
            return Err(ModelError::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "rdim_forward",
                detail: format!("input {s:?}, block expects {} channels", block.in_channels),
            }))
        }
    }
    let p: Vec<_> = params.iter().cloned().map(Rc::new).collect();
    let mut be = Eager::new();
    let mut c = Cursor {
        be: &mut be,
        params: &p,
        layers: &layers,
        pos: 0,
    };
    let out = c.rdim(block.kind, &Rc::new(input.clone()))?;
    Ok(Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone()))
}
