//! A small one-stage anchor-based detector with a three-level pyramid and
//! per-cell class/objectness/regression heads. It stands in for a full-scale
//! backbone while keeping the same interface shape: P3/P4/P5 stages at
//! strides 8/16/32, an FPN-style neck, and 1x1 prediction heads.

use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_grid_box, BBox, DetectionSet, GridCell};
use crate::multiscale::ScaleSpec;
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId};

/// Strides, per-level anchors, and the class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig<T> {
    pub strides: Vec<usize>,
    pub anchors_per_level: Vec<Vec<(T, T)>>,
    pub num_classes: usize,
}

impl<T: Scalar> AnchorConfig<T> {
    pub fn new(
        strides: Vec<usize>,
        anchors_per_level: Vec<Vec<(T, T)>>,
        num_classes: usize,
    ) -> Result<Self> {
        if strides.is_empty() || strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("strides must be non-empty and strictly increasing"));
        }
        if anchors_per_level.len() != strides.len() {
            return Err(Error::config("one anchor set required per stride"));
        }
        if anchors_per_level
            .iter()
            .flatten()
            .any(|&(w, h)| !(w > T::zero() && h > T::zero()))
        {
            return Err(Error::config("anchor dimensions must be positive"));
        }
        if num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        Ok(Self { strides, anchors_per_level, num_classes })
    }

    /// Three anchors per level with aspect set {1:1, 1:2, 2:1}, base size
    /// `2 * stride`.
    pub fn with_default_anchors(strides: Vec<usize>, num_classes: usize) -> Result<Self> {
        let sqrt2 = T::of(std::f64::consts::SQRT_2);
        let anchors = strides
            .iter()
            .map(|&s| {
                let base = T::of_usize(2 * s);
                vec![(base, base), (base / sqrt2, base * sqrt2), (base * sqrt2, base / sqrt2)]
            })
            .collect();
        Self::new(strides, anchors, num_classes)
    }

    pub fn levels(&self) -> usize {
        self.strides.len()
    }

    pub fn max_stride(&self) -> usize {
        *self.strides.last().expect("non-empty strides")
    }
}

/// Per-stage feature grids, `[C, H, W]` each.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Array3<T>>,
}

/// Raw head output of one pyramid level: `[A*(5+C), H, W]` with per-anchor
/// channel layout `[tx, ty, tw, th, obj, cls_0..cls_{C-1}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPred<T> {
    pub stride: usize,
    pub anchors: Vec<(T, T)>,
    pub num_classes: usize,
    pub data: Array3<T>,
}

impl<T: Scalar> LevelPred<T> {
    pub fn grid(&self) -> (usize, usize) {
        let d = self.data.dim();
        (d.1, d.2)
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    #[inline]
    fn base(&self, anchor: usize) -> usize {
        anchor * (5 + self.num_classes)
    }

    pub fn reg(&self, anchor: usize, row: usize, col: usize) -> [T; 4] {
        let b = self.base(anchor);
        [
            self.data[[b, row, col]],
            self.data[[b + 1, row, col]],
            self.data[[b + 2, row, col]],
            self.data[[b + 3, row, col]],
        ]
    }

    pub fn obj_logit(&self, anchor: usize, row: usize, col: usize) -> T {
        self.data[[self.base(anchor) + 4, row, col]]
    }

    pub fn cls_logits(&self, anchor: usize, row: usize, col: usize) -> Vec<T> {
        let b = self.base(anchor) + 5;
        (0..self.num_classes).map(|c| self.data[[b + c, row, col]]).collect()
    }
}

/// Dense per-cell predictions across all pyramid levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensePredictions<T> {
    pub levels: Vec<LevelPred<T>>,
}

impl<T: Scalar> DensePredictions<T> {
    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(|l| l.data.iter().all(|v| v.is_finite()))
    }
}

/// Named parameter arrays in a fixed construction order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams<T> {
    pub entries: Vec<(String, ArrayD<T>)>,
}

impl<T: Scalar> DetectorParams<T> {
    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Structural match: same names and shapes in the same order.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }
}

/// Architecture hyperparameters; combined with [`DetectorParams`] this fully
/// determines the forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorArch<T> {
    pub cfg: AnchorConfig<T>,
    /// Default (tile) input side; must be divisible by the largest stride.
    pub image_size: usize,
    /// Base channel width of the backbone stem.
    pub width: usize,
    /// Channel width of the neck and heads.
    pub neck_width: usize,
    pub scale_spec: ScaleSpec,
    /// Negative slope of the leaky-relu activations.
    pub leak: T,
}

/// Parameter nodes registered on a graph, aligned with `DetectorParams`.
pub struct BoundParams {
    pub ids: Vec<NodeId>,
    names: Vec<String>,
}

impl BoundParams {
    fn node(&self, name: &str) -> NodeId {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[i]
    }
}

/// Everything the training loop needs from one forward pass.
pub struct ForwardOut {
    /// Neck output nodes, one per level (base -> coarsest).
    pub pyramid: Vec<NodeId>,
    /// Head output nodes, one per level.
    pub heads: Vec<NodeId>,
    /// Domain-classifier logit node, if requested.
    pub domain_logits: Option<NodeId>,
    pub image_node: NodeId,
    pub bound: BoundParams,
}

struct ConvSpec {
    name: &'static str,
    cin: usize,
    cout: usize,
    k: usize,
}

impl<T: Scalar> DetectorArch<T> {
    pub fn new(
        cfg: AnchorConfig<T>,
        image_size: usize,
        width: usize,
        neck_width: usize,
        scale_spec: ScaleSpec,
    ) -> Result<Self> {
        if image_size % cfg.max_stride() != 0 {
            return Err(Error::shape(format!(
                "image size {image_size} not divisible by stride {}",
                cfg.max_stride()
            )));
        }
        if width == 0 || neck_width == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        Ok(Self { cfg, image_size, width, neck_width, scale_spec, leak: T::of(0.1) })
    }

    /// Backbone stage widths for (P3, P4, P5).
    fn stage_channels(&self) -> [usize; 3] {
        [4 * self.width, 8 * self.width, 8 * self.width]
    }

    fn conv_plan(&self) -> Vec<ConvSpec> {
        let w = self.width;
        let n = self.neck_width;
        let [c3, c4, c5] = self.stage_channels();
        let ns = self.scale_spec.scales.len();
        let head_out = self.cfg.anchors_per_level[0].len() * (5 + self.cfg.num_classes);
        vec![
            ConvSpec { name: "bb.stem", cin: 3, cout: w, k: 3 },
            ConvSpec { name: "bb.d1", cin: w, cout: 2 * w, k: 3 },
            ConvSpec { name: "bb.d2", cin: 2 * w, cout: 2 * w, k: 3 },
            ConvSpec { name: "bb.d3", cin: 2 * w, cout: c3, k: 3 },
            ConvSpec { name: "bb.d4", cin: c3, cout: c4, k: 3 },
            ConvSpec { name: "bb.d5", cin: c4, cout: c5, k: 3 },
            // 1x1 reduction absorbing the multi-scale channel concat.
            ConvSpec { name: "ms.red3", cin: c3 * ns, cout: c3, k: 1 },
            ConvSpec { name: "ms.red4", cin: c4 * ns, cout: c4, k: 1 },
            ConvSpec { name: "ms.red5", cin: c5 * ns, cout: c5, k: 1 },
            ConvSpec { name: "neck.lat3", cin: c3, cout: n, k: 1 },
            ConvSpec { name: "neck.lat4", cin: c4, cout: n, k: 1 },
            ConvSpec { name: "neck.lat5", cin: c5, cout: n, k: 1 },
            ConvSpec { name: "neck.out3", cin: n, cout: n, k: 3 },
            ConvSpec { name: "neck.out4", cin: n, cout: n, k: 3 },
            ConvSpec { name: "neck.out5", cin: n, cout: n, k: 3 },
            ConvSpec { name: "head.p3", cin: n, cout: head_out, k: 1 },
            ConvSpec { name: "head.p4", cin: n, cout: head_out, k: 1 },
            ConvSpec { name: "head.p5", cin: n, cout: head_out, k: 1 },
            ConvSpec { name: "dom.c0", cin: n, cout: n / 2, k: 3 },
            ConvSpec { name: "dom.c1", cin: n / 2, cout: 1, k: 1 },
        ]
    }

    /// Deterministic He-normal initialization; two calls with the same seed
    /// produce element-wise identical parameters. Objectness biases start
    /// negative so early confidences are low.
    pub fn init_params(&self, seed: u64) -> DetectorParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for spec in self.conv_plan() {
            let fan_in = (spec.cin * spec.k * spec.k) as f64;
            let std = (2.0 / fan_in).sqrt();
            let w = ArrayD::from_shape_fn(
                IxDyn(&[spec.cout, spec.cin, spec.k, spec.k]),
                |_| T::of(gauss(&mut rng) * std),
            );
            let mut b = Array1::<T>::zeros(spec.cout).into_dyn();
            if spec.name.starts_with("head.") {
                let per_anchor = 5 + self.cfg.num_classes;
                for a in 0..spec.cout / per_anchor {
                    b[[a * per_anchor + 4]] = T::of(-2.0);
                }
            }
            entries.push((format!("{}.w", spec.name), w));
            entries.push((format!("{}.b", spec.name), b));
        }
        DetectorParams { entries }
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>, params: &DetectorParams<T>) -> Result<BoundParams> {
        let plan = self.conv_plan();
        if params.entries.len() != plan.len() * 2 {
            return Err(Error::state(format!(
                "parameter set has {} entries, architecture expects {}",
                params.entries.len(),
                plan.len() * 2
            )));
        }
        let mut ids = Vec::with_capacity(params.entries.len());
        let mut names = Vec::with_capacity(params.entries.len());
        for (name, arr) in &params.entries {
            ids.push(g.leaf(arr.clone()));
            names.push(name.clone());
        }
        Ok(BoundParams { ids, names })
    }

    fn conv_block(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        name: &str,
        x: NodeId,
        stride: usize,
        pad: usize,
        activate: bool,
    ) -> Result<NodeId> {
        let w = bound.node(&format!("{name}.w"));
        let b = bound.node(&format!("{name}.b"));
        let y = g.conv2d(x, w, b, stride, pad)?;
        Ok(if activate { g.leaky_relu(y, self.leak) } else { y })
    }

    fn validate_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(format!("expected [3, H, W] image, got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        if h != w {
            return Err(Error::shape(format!("expected a square image, got {h}x{w}")));
        }
        for &s in &self.cfg.strides {
            if h % s != 0 {
                return Err(Error::shape(format!(
                    "image size {h} not divisible by stride {s}"
                )));
            }
        }
        Ok(())
    }

    /// Single-scale backbone stages (P3, P4, P5) for one tile.
    fn backbone_nodes(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        image: NodeId,
    ) -> Result<[NodeId; 3]> {
        let x = self.conv_block(g, bound, "bb.stem", image, 1, 1, true)?;
        let x = self.conv_block(g, bound, "bb.d1", x, 2, 1, true)?;
        let x = self.conv_block(g, bound, "bb.d2", x, 2, 1, true)?;
        let c3 = self.conv_block(g, bound, "bb.d3", x, 2, 1, true)?;
        let c4 = self.conv_block(g, bound, "bb.d4", c3, 2, 1, true)?;
        let c5 = self.conv_block(g, bound, "bb.d5", c4, 2, 1, true)?;
        Ok([c3, c4, c5])
    }

    /// Multi-scale stage features: per scale, interpolate + tile + shared
    /// backbone + merge + max-pool, then concatenate per stage (base scale
    /// first). With `scales == [1]` this is exactly the single-scale stages.
    pub(crate) fn multiscale_stage_nodes(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        image: NodeId,
        spec: &ScaleSpec,
    ) -> Result<Vec<NodeId>> {
        self.validate_input(g.value(image).shape())?;
        let side = g.value(image).shape()[1];
        let mut per_stage: Vec<Vec<NodeId>> = vec![Vec::new(); 3];
        for &s in &spec.scales {
            if s == 1 {
                let stages = self.backbone_nodes(g, bound, image)?;
                for (stage, &n) in per_stage.iter_mut().zip(stages.iter()) {
                    stage.push(n);
                }
                continue;
            }
            let scaled = g.bilinear_resize(image, s * side, s * side)?;
            let mut tile_stages: Vec<Vec<NodeId>> = vec![Vec::new(); 3];
            for ry in 0..s {
                for rx in 0..s {
                    let tile = g.slice_spatial(scaled, ry * side, rx * side, side, side)?;
                    let stages = self.backbone_nodes(g, bound, tile)?;
                    for (ts, &n) in tile_stages.iter_mut().zip(stages.iter()) {
                        ts.push(n);
                    }
                }
            }
            for (stage, tiles) in per_stage.iter_mut().zip(tile_stages.iter()) {
                let merged = g.merge_tiles(tiles, s)?;
                stage.push(g.max_pool2d(merged, s)?);
            }
        }
        per_stage
            .into_iter()
            .map(|parts| {
                if parts.len() == 1 {
                    Ok(parts[0])
                } else {
                    g.concat_channels(&parts)
                }
            })
            .collect()
    }

    /// Full forward pass: multi-scale stages, channel reduction, FPN neck,
    /// prediction heads, and optionally the domain classifier on the middle
    /// neck level. `domain` is None for no domain head, or the gradient
    /// multiplier applied where the classifier meets the neck: -1 is the
    /// pure GRL, +1 trains the classifier without reversal, and ramped
    /// adversarial schedules pass values in (-1, 0).
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        params: &DetectorParams<T>,
        image: &Array3<T>,
        domain: Option<T>,
    ) -> Result<ForwardOut> {
        let bound = self.bind(g, params)?;
        let image_node = g.leaf(image.clone().into_dyn());
        self.forward_bound(g, bound, image_node, domain)
    }

    pub fn forward_bound(
        &self,
        g: &mut Graph<T>,
        bound: BoundParams,
        image_node: NodeId,
        domain: Option<T>,
    ) -> Result<ForwardOut> {
        let stages = self.multiscale_stage_nodes(g, &bound, image_node, &self.scale_spec)?;
        let r3 = self.conv_block(g, &bound, "ms.red3", stages[0], 1, 0, true)?;
        let r4 = self.conv_block(g, &bound, "ms.red4", stages[1], 1, 0, true)?;
        let r5 = self.conv_block(g, &bound, "ms.red5", stages[2], 1, 0, true)?;

        let l3 = self.conv_block(g, &bound, "neck.lat3", r3, 1, 0, true)?;
        let l4 = self.conv_block(g, &bound, "neck.lat4", r4, 1, 0, true)?;
        let l5 = self.conv_block(g, &bound, "neck.lat5", r5, 1, 0, true)?;

        let p5 = l5;
        let (h4, w4) = {
            let s = g.value(l4).shape().to_vec();
            (s[1], s[2])
        };
        let up5 = g.bilinear_resize(p5, h4, w4)?;
        let p4 = g.add(l4, up5)?;
        let (h3, w3) = {
            let s = g.value(l3).shape().to_vec();
            (s[1], s[2])
        };
        let up4 = g.bilinear_resize(p4, h3, w3)?;
        let p3 = g.add(l3, up4)?;

        let o3 = self.conv_block(g, &bound, "neck.out3", p3, 1, 1, true)?;
        let o4 = self.conv_block(g, &bound, "neck.out4", p4, 1, 1, true)?;
        let o5 = self.conv_block(g, &bound, "neck.out5", p5, 1, 1, true)?;

        let h3n = self.conv_block(g, &bound, "head.p3", o3, 1, 0, false)?;
        let h4n = self.conv_block(g, &bound, "head.p4", o4, 1, 0, false)?;
        let h5n = self.conv_block(g, &bound, "head.p5", o5, 1, 0, false)?;

        let domain_logits = if let Some(m) = domain {
            let src = if m == T::one() { o4 } else { g.grad_scale(o4, m) };
            let d = self.conv_block(g, &bound, "dom.c0", src, 1, 1, true)?;
            Some(self.conv_block(g, &bound, "dom.c1", d, 1, 0, false)?)
        } else {
            None
        };

        Ok(ForwardOut {
            pyramid: vec![o3, o4, o5],
            heads: vec![h3n, h4n, h5n],
            domain_logits,
            image_node,
            bound,
        })
    }

    /// Copies head values off the graph into [`DensePredictions`].
    pub fn predictions(&self, g: &Graph<T>, fwd: &ForwardOut) -> DensePredictions<T> {
        let levels = fwd
            .heads
            .iter()
            .enumerate()
            .map(|(l, &n)| LevelPred {
                stride: self.cfg.strides[l],
                anchors: self.cfg.anchors_per_level[l].clone(),
                num_classes: self.cfg.num_classes,
                data: g
                    .value(n)
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("head output is [C,H,W]"),
            })
            .collect();
        DensePredictions { levels }
    }

    /// Inference convenience: forward without gradients, returning the neck
    /// pyramid and dense predictions.
    pub fn infer(
        &self,
        params: &DetectorParams<T>,
        image: &Array3<T>,
    ) -> Result<(FeaturePyramid<T>, DensePredictions<T>)> {
        let mut g = Graph::inference();
        let fwd = self.forward(&mut g, params, image, None)?;
        let pyramid = FeaturePyramid {
            levels: fwd
                .pyramid
                .iter()
                .map(|&n| {
                    g.value(n)
                        .to_owned()
                        .into_dimensionality::<ndarray::Ix3>()
                        .expect("neck output is [C,H,W]")
                })
                .collect(),
        };
        Ok((pyramid, self.predictions(&g, &fwd)))
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per normal keeps the stream layout obvious.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Stable softmax over a logit slice.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// One decoded cell above the confidence floor, with provenance.
#[derive(Debug, Clone)]
pub struct CellDetection<T> {
    pub bbox: BBox<T>,
    pub level: usize,
    pub anchor: usize,
    pub cell: GridCell,
    pub obj_prob: T,
    pub class_dist: Vec<T>,
}

/// Decodes every cell whose confidence `sigmoid(obj) * max softmax(cls)`
/// reaches `conf_floor`; boxes are clipped to image bounds.
pub fn decode_cells<T: Scalar>(
    preds: &DensePredictions<T>,
    conf_floor: T,
) -> Result<Vec<CellDetection<T>>> {
    if !(conf_floor >= T::zero() && conf_floor <= T::one()) {
        return Err(Error::config(format!("conf_floor must be in [0,1], got {conf_floor}")));
    }
    let mut out = Vec::new();
    for (level, lp) in preds.levels.iter().enumerate() {
        let (h, w) = lp.grid();
        let size = T::of_usize(h * lp.stride);
        for (anchor, &anc) in lp.anchors.iter().enumerate() {
            for row in 0..h {
                for col in 0..w {
                    let obj = sigmoid(lp.obj_logit(anchor, row, col));
                    let dist = softmax(&lp.cls_logits(anchor, row, col));
                    let (class_id, &best) = dist
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                        .expect("at least one class");
                    let conf = obj * best;
                    if conf < conf_floor {
                        continue;
                    }
                    let raw = decode_grid_box(
                        GridCell { row, col },
                        &lp.reg(anchor, row, col),
                        lp.stride,
                        anc,
                        class_id,
                        conf,
                    );
                    let Some(bbox) = raw.clipped(size, size) else { continue };
                    out.push(CellDetection {
                        bbox,
                        level,
                        anchor,
                        cell: GridCell { row, col },
                        obj_prob: obj,
                        class_dist: dist,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Thresholded decode into a [`DetectionSet`] (no NMS).
pub fn decode_predictions<T: Scalar>(
    preds: &DensePredictions<T>,
    conf_threshold: T,
    image_id: u64,
) -> Result<DetectionSet<T>> {
    Ok(DetectionSet {
        image_id,
        boxes: decode_cells(preds, conf_threshold)?
            .into_iter()
            .map(|c| c.bbox)
            .collect(),
    })
}
