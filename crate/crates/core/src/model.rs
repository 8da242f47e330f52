//! Backbone `f`, grid detection head `h`, projection head `g`, and decoding.
//!
//! The backbone is a scaled-down CSP-style network: a stride-2 stem, then
//! stages of split/merge blocks with a stride-2 convolution in front of every
//! stage after the first. Its last stage output is the P5 map, which feeds both
//! heads. Both image domains pass through the same parameters.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, Detection, ParasiteClass, NUM_CLASSES};
use crate::image::Image;
use crate::rng;
use crate::tensor::{sigmoid, Graph, Shape, TensorError, Var};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input {got:?} does not match the configured {channels} channels and a multiple of the stride {stride}")]
    InputShape { got: (usize, usize, usize), channels: usize, stride: usize },
}

/// Per-cell channel layout of the detection head output.
pub const OBJ: usize = 0;
pub const TX: usize = 1;
pub const TY: usize = 2;
pub const TW: usize = 3;
pub const TH: usize = 4;
pub const CLS: usize = 5;
pub const HEAD_CHANNELS: usize = 5 + NUM_CLASSES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Output width of every stage; the last one is the P5 width.
    pub stage_widths: Vec<usize>,
    /// Split/merge blocks per stage.
    pub stage_blocks: Vec<usize>,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    /// Initial box side (fraction of the image) encoded in the head bias.
    pub prior_box_size: f64,
    /// Initial objectness probability encoded in the head bias.
    pub prior_objectness: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            stage_widths: vec![16, 32, 64],
            stage_blocks: vec![2, 2, 2],
            proj_hidden: 128,
            proj_dim: 64,
            prior_box_size: 0.15,
            prior_objectness: 0.03,
        }
    }
}

impl ModelConfig {
    /// Small network for gradient checks.
    pub fn tiny() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 4,
            stage_widths: vec![4, 6, 8],
            stage_blocks: vec![1, 1, 1],
            proj_hidden: 12,
            proj_dim: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.stage_blocks.len() {
            return bad("stage_widths and stage_blocks must be non-empty and of equal length");
        }
        if self.in_channels == 0 || self.stem_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.stage_widths.iter().any(|&w| w < 2 || w % 2 != 0) {
            return bad("stage widths must be even and at least 2");
        }
        if self.proj_hidden == 0 || self.proj_dim < 2 {
            return bad("projection needs a hidden width >= 1 and output dimension >= 2");
        }
        if !(self.prior_box_size > 0.0 && self.prior_box_size <= 1.0) {
            return bad("prior_box_size must lie in (0, 1]");
        }
        if !(self.prior_objectness > 0.0 && self.prior_objectness < 1.0) {
            return bad("prior_objectness must lie in (0, 1)");
        }
        Ok(())
    }

    /// Total downsampling factor of the backbone.
    pub fn stride(&self) -> usize {
        1 << self.stage_widths.len()
    }

    pub fn p5_channels(&self) -> usize {
        *self.stage_widths.last().expect("validated")
    }

    pub fn grid_size(&self, image_size: usize) -> usize {
        image_size / self.stride()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<T>,
    pub grad: Vec<T>,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

/// Graph leaves created for a [`ParamSet`], one per parameter.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: String, shape: Shape, data: Vec<T>) -> ParamId {
        debug_assert_eq!(shape.numel(), data.len());
        let grad = vec![T::zero(); data.len()];
        self.params.push(Param { name, shape, data, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> core::slice::IterMut<'_, Param<T>> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds every parameter to `g` as a leaf (once).
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.shape, p.data.clone(), requires_grad).expect("parameter shape"))
            .collect();
        Bound { vars }
    }

    /// Adds the leaf gradients of a finished backward pass to the stored ones.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            for (acc, &d) in p.grad.iter_mut().zip(g.grad(v)) {
                *acc += d;
            }
        }
    }

    /// Same parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape,
                    data: p.data.iter().map(|v| U::of(v.as_f64())).collect(),
                    grad: vec![U::zero(); p.data.len()],
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct CspBlock {
    cv1: Conv,
    cv2: Conv,
    merge: Conv,
}

#[derive(Clone, Debug)]
struct Stage {
    entry: Option<Conv>,
    blocks: Vec<CspBlock>,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Conv,
    stages: Vec<Stage>,
    head: Conv,
    fc1: Dense,
    fc2: Dense,
}

struct Builder<'a, T> {
    params: ParamSet<T>,
    rng: &'a mut rng::StreamRng,
}

impl<T: Scalar> Builder<'_, T> {
    /// Kaiming-uniform over fan-in, zero bias.
    fn weight(&mut self, name: String, dims: &[usize], fan_in: usize) -> ParamId {
        let bound = libm::sqrt(6.0 / fan_in as f64);
        let shape = Shape::new(dims).expect("layer dims");
        let data = (0..shape.numel()).map(|_| T::of(self.rng.random_range(-bound..bound))).collect();
        self.params.push(name, shape, data)
    }

    fn bias(&mut self, name: String, n: usize) -> ParamId {
        self.params.push(name, Shape::vector(n).expect("bias"), vec![T::zero(); n])
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Conv {
        let w = self.weight(format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k);
        let b = self.bias(format!("{name}.bias"), c_out);
        Conv { w, b, stride, pad: k / 2 }
    }

    fn dense(&mut self, name: &str, d_in: usize, d_out: usize) -> Dense {
        let w = self.weight(format!("{name}.weight"), &[d_out, d_in], d_in);
        let b = self.bias(format!("{name}.bias"), d_out);
        Dense { w, b }
    }
}

/// The full model: backbone, detection head and projection head.
#[derive(Clone, Debug)]
pub struct DetectorModel<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    layout: Layout,
}

/// Raw head output for one image: `(5 + classes) × S × S` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPrediction<T> {
    pub grid: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> GridPrediction<T> {
    #[inline]
    pub fn at(&self, channel: usize, row: usize, col: usize) -> T {
        self.data[(channel * self.grid + row) * self.grid + col]
    }
}

impl<T: Scalar> PartialEq for DetectorModel<T> {
    /// The layout is a function of the config, so config and weights decide.
    /// Gradient buffers are scratch space and do not take part.
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.data == b.data)
    }
}

impl<T: Scalar> DetectorModel<T> {
    /// Fresh, seeded initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut r = rng::stream(seed, &[0x1417]);
        let mut b = Builder { params: ParamSet::new(), rng: &mut r };
        let stem = b.conv("backbone.stem", config.in_channels, config.stem_channels, 3, 2);
        let mut prev = config.stem_channels;
        let mut stages = Vec::new();
        for (i, (&width, &n_blocks)) in config.stage_widths.iter().zip(&config.stage_blocks).enumerate() {
            let entry = if i > 0 {
                Some(b.conv(&format!("backbone.stage{i}.down"), prev, width, 3, 2))
            } else if prev != width {
                Some(b.conv(&format!("backbone.stage{i}.proj"), prev, width, 1, 1))
            } else {
                None
            };
            let half = width / 2;
            let blocks = (0..n_blocks)
                .map(|j| {
                    let base = format!("backbone.stage{i}.block{j}");
                    CspBlock {
                        cv1: b.conv(&format!("{base}.cv1"), half, half, 1, 1),
                        cv2: b.conv(&format!("{base}.cv2"), half, half, 3, 1),
                        merge: b.conv(&format!("{base}.merge"), width, width, 1, 1),
                    }
                })
                .collect();
            stages.push(Stage { entry, blocks });
            prev = width;
        }
        let head = b.conv("head", prev, HEAD_CHANNELS, 1, 1);
        // start from small boxes and rare objects instead of whole-image boxes
        // at even odds
        let bias = &mut b.params.by_name_mut("head.bias").expect("just built").data;
        let p = config.prior_objectness;
        bias[OBJ] = T::of(libm::log(p / (1.0 - p)));
        bias[TW] = T::of(libm::log(config.prior_box_size));
        bias[TH] = bias[TW];
        let fc1 = b.dense("proj.fc1", prev, config.proj_hidden);
        let fc2 = b.dense("proj.fc2", config.proj_hidden, config.proj_dim);
        let params = b.params;
        Ok(Self { config, params, layout: Layout { stem, stages, head, fc1, fc2 } })
    }

    /// Rebuilds a model around existing parameters (e.g. a checkpoint). Names
    /// and shapes must match a fresh model of `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self, ModelError> {
        let mut fresh = Self::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (a, b) in fresh.params.iter().zip(params.iter()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(ModelError::InvalidConfig(format!(
                    "parameter {} {} does not match expected {} {}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn cast<U: Scalar>(&self) -> DetectorModel<U> {
        DetectorModel { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    /// Adds an image to `g` as a constant `C×H×W` value.
    pub fn input(&self, g: &mut Graph<T>, img: &Image) -> Result<Var, ModelError> {
        let stride = self.config.stride();
        let ok = img.channels == self.config.in_channels
            && img.height % stride == 0
            && img.width % stride == 0
            && img.height >= stride
            && img.width >= stride;
        if !ok {
            return Err(ModelError::InputShape {
                got: (img.channels, img.height, img.width),
                channels: self.config.in_channels,
                stride,
            });
        }
        let shape = Shape::new(&[img.channels, img.height, img.width])?;
        Ok(g.constant(shape, img.data.iter().map(|&v| T::of(v as f64)).collect())?)
    }

    fn conv(&self, g: &mut Graph<T>, p: &Bound, c: &Conv, x: Var) -> Result<Var, ModelError> {
        let y = g.conv2d(x, p.var(c.w), c.stride, c.pad)?;
        Ok(g.add_bias(y, p.var(c.b))?)
    }

    fn conv_act(&self, g: &mut Graph<T>, p: &Bound, c: &Conv, x: Var) -> Result<Var, ModelError> {
        let y = self.conv(g, p, c, x)?;
        Ok(g.silu(y))
    }

    fn csp_block(&self, g: &mut Graph<T>, p: &Bound, blk: &CspBlock, x: Var) -> Result<Var, ModelError> {
        let c = g.shape(x).leading();
        let half = c / 2;
        let a = g.narrow(x, 0, half)?;
        let b = g.narrow(x, half, c - half)?;
        let t = self.conv_act(g, p, &blk.cv1, b)?;
        let t = self.conv_act(g, p, &blk.cv2, t)?;
        let b = g.add(b, t)?;
        let m = g.concat(&[a, b])?;
        self.conv_act(g, p, &blk.merge, m)
    }

    /// `f`: image → P5 feature map `C5 × H/stride × W/stride`.
    pub fn backbone(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, ModelError> {
        let mut h = self.conv_act(g, p, &self.layout.stem, x)?;
        for stage in &self.layout.stages {
            if let Some(entry) = &stage.entry {
                h = self.conv_act(g, p, entry, h)?;
            }
            for blk in &stage.blocks {
                h = self.csp_block(g, p, blk, h)?;
            }
        }
        Ok(h)
    }

    /// `h`: 1×1 projection of P5 to per-cell logits `(5 + classes) × S × S`.
    pub fn detection_head(&self, g: &mut Graph<T>, p: &Bound, p5: Var) -> Result<Var, ModelError> {
        self.conv(g, p, &self.layout.head, p5)
    }

    /// `g`: global average pool → linear → ReLU → linear.
    pub fn projection_head(&self, g: &mut Graph<T>, p: &Bound, p5: Var) -> Result<Var, ModelError> {
        let pooled = g.global_avg_pool(p5)?;
        let (fc1, fc2) = (&self.layout.fc1, &self.layout.fc2);
        let h = g.linear(pooled, p.var(fc1.w), p.var(fc1.b))?;
        let h = g.relu(h);
        Ok(g.linear(h, p.var(fc2.w), p.var(fc2.b))?)
    }

    /// Detection head output for one image, without gradients.
    pub fn predict(&self, img: &Image) -> Result<GridPrediction<T>, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = self.input(&mut g, img)?;
        let f = self.backbone(&mut g, &p, x)?;
        let out = self.detection_head(&mut g, &p, f)?;
        Ok(GridPrediction { grid: g.shape(out).dims()[1], data: g.value(out).to_vec() })
    }

    /// Projection-head embedding for one image, without gradients.
    pub fn embed(&self, img: &Image) -> Result<Vec<T>, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = self.input(&mut g, img)?;
        let f = self.backbone(&mut g, &p, x)?;
        let z = self.projection_head(&mut g, &p, f)?;
        Ok(g.value(z).to_vec())
    }
}

/// Cell `(row, col)` decoded to a normalized box:
/// `((col + σ(tx))/S, (row + σ(ty))/S, e^{tw}, e^{th})`.
pub fn decode_cell<T: Scalar>(grid: &GridPrediction<T>, row: usize, col: usize) -> [f64; 4] {
    let s = grid.grid as f64;
    let tx = sigmoid(grid.at(TX, row, col).as_f64());
    let ty = sigmoid(grid.at(TY, row, col).as_f64());
    [
        (col as f64 + tx) / s,
        (row as f64 + ty) / s,
        libm::exp(grid.at(TW, row, col).as_f64()),
        libm::exp(grid.at(TH, row, col).as_f64()),
    ]
}

fn by_confidence(a: &Detection, b: &Detection) -> Ordering {
    b.confidence.partial_cmp(&a.confidence).unwrap_or(Ordering::Equal)
}

/// Class-wise greedy non-maximum suppression: a candidate is dropped when its
/// IoU with an already kept box of the same class exceeds `iou_thresh`.
/// Output is in descending confidence (stable for ties).
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(by_confidence);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed =
            kept.iter().any(|k| k.bbox.class == d.bbox.class && k.bbox.iou(&d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Turns one grid prediction into detections: confidence is
/// `σ(obj) · max_c σ(cls_c)`, cells below `conf_thresh` are skipped, boxes are
/// clipped to the image and suppressed class-wise at `nms_iou`.
pub fn decode_predictions<T: Scalar>(grid: &GridPrediction<T>, conf_thresh: f64, nms_iou: f64) -> Vec<Detection> {
    let s = grid.grid;
    let mut cands = Vec::new();
    for row in 0..s {
        for col in 0..s {
            let obj = sigmoid(grid.at(OBJ, row, col).as_f64());
            let (mut best, mut best_p) = (0, f64::NEG_INFINITY);
            for c in 0..NUM_CLASSES {
                let pc = sigmoid(grid.at(CLS + c, row, col).as_f64());
                if pc > best_p {
                    best = c;
                    best_p = pc;
                }
            }
            let confidence = obj * best_p;
            if confidence < conf_thresh {
                continue;
            }
            let [cx, cy, w, h] = decode_cell(grid, row, col);
            let class = ParasiteClass::ALL[best];
            let Some(bbox) = BBox::new(class, cx, cy, w, h).clipped() else {
                continue;
            };
            cands.push(Detection { bbox, confidence: confidence.clamp(0.0, 1.0) });
        }
    }
    nms(cands, nms_iou)
}
