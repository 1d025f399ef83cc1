//! Minimal reverse-mode autodiff over `ndarray` dynamic arrays.
//!
//! Each training sample builds its own [`Graph`]; samples are independent, so
//! batches parallelize across graphs and gradients are reduced in a fixed
//! order afterwards. Spatial tensors are `[C, H, W]`, scalars are 0-d arrays.

use ndarray::{Array2, ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&ArrayD<T>, &[&ArrayD<T>], &ArrayD<T>) -> Vec<ArrayD<T>> + Send>;

struct Node<T: Scalar> {
    value: ArrayD<T>,
    parents: Vec<usize>,
    backward: Option<BackFn<T>>,
}

/// A forward tape. Nodes are appended in topological order; `backward` walks
/// the tape in reverse.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Gradients for every node reached by the backward pass.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph that records backward closures.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// Forward-only graph; backward closures are dropped.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    /// Value of a 0-d (scalar) node.
    pub fn scalar(&self, id: NodeId) -> T {
        *self.nodes[id.0]
            .value
            .iter()
            .next()
            .expect("scalar node has one element")
    }

    pub fn leaf(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, vec![], None)
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<T>,
        parents: Vec<usize>,
        backward: Option<BackFn<T>>,
    ) -> NodeId {
        let id = self.nodes.len();
        let backward = if self.grad_enabled { backward } else { None };
        self.nodes.push(Node { value, parents, backward });
        NodeId(id)
    }

    /// Reverse pass from a scalar root. Returns gradients for every node the
    /// root depends on, leaves included.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        assert!(
            self.nodes[root.0].value.len() == 1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let pvals: Vec<&ArrayD<T>> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let pgrads = back(&g, &pvals, &node.value);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(pgrads) {
                    debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| vec![g.mapv(|x| x * c)])),
        )
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: T) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| if x > T::zero() { x } else { x * alpha });
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, p, _| {
                let mut out = g.clone();
                out.zip_mut_with(p[0], |gi, &xi| {
                    if xi <= T::zero() {
                        *gi = *gi * alpha;
                    }
                });
                vec![out]
            })),
        )
    }

    /// Identity forward; gradient sign flipped on the way back.
    pub fn grl(&mut self, a: NodeId) -> NodeId {
        self.grad_scale(a, -T::one())
    }

    /// Identity forward; backward multiplies the gradient by `m` (the GRL is
    /// `m = -1`; adversarial ramps use `m` in `[-1, 0)`).
    pub fn grad_scale(&mut self, a: NodeId, m: T) -> NodeId {
        let value = self.nodes[a.0].value.clone();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| vec![g.mapv(|x| x * m)])),
        )
    }

    /// Weighted sum of scalar nodes: `sum_i w_i * s_i`.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> NodeId {
        let mut total = T::zero();
        for &(id, w) in terms {
            total = total + self.scalar(id) * w;
        }
        let weights: Vec<T> = terms.iter().map(|&(_, w)| w).collect();
        let parents: Vec<usize> = terms.iter().map(|&(id, _)| id.0).collect();
        self.push(
            ndarray::arr0(total).into_dyn(),
            parents,
            Some(Box::new(move |g, _, _| {
                let go = *g.iter().next().unwrap();
                weights
                    .iter()
                    .map(|&w| ndarray::arr0(go * w).into_dyn())
                    .collect()
            })),
        )
    }

    /// Sum of squares, as a scalar node (handy probe loss in tests).
    pub fn sq_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .iter()
            .fold(T::zero(), |acc, &x| acc + x * x);
        self.push(
            ndarray::arr0(v).into_dyn(),
            vec![a.0],
            Some(Box::new(|g, p, _| {
                let go = *g.iter().next().unwrap();
                vec![p[0].mapv(|x| x * (T::of(2.0) * go))]
            })),
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.sum();
        self.push(
            ndarray::arr0(v).into_dyn(),
            vec![a.0],
            Some(Box::new(|g, p, _| {
                let go = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(p[0].raw_dim(), go)]
            })),
        )
    }

    // -- spatial ops on [C, H, W] --------------------------------------------

    /// 2-d convolution with square stride and zero padding.
    /// `x: [Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
            return Err(Error::shape(format!("conv2d: x {xs:?} w {ws:?}")));
        }
        let (cin, h, wdt) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wdt + 2 * pad < kw {
            return Err(Error::shape("conv2d: kernel larger than padded input"));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;

        let col = im2col(self.value(x), kh, kw, stride, pad, ho, wo);
        let wmat = to_mat(self.value(w), cout, cin * kh * kw);
        let mut out = wmat.dot(&col); // [Cout, Ho*Wo]
        {
            let bias = self.value(b);
            for (co, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
                let bc = bias[[co]];
                row.mapv_inplace(|v| v + bc);
            }
        }
        let value = out
            .into_shape_with_order(IxDyn(&[cout, ho, wo]))
            .expect("conv output reshape");

        let backward: Option<BackFn<T>> = if self.grad_enabled {
            Some(Box::new(move |g, p, _| {
                let gmat = to_mat(g, cout, ho * wo);
                // dW = g . col^T
                let dw = gmat.dot(&col.t());
                let dw = dw
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                    .unwrap();
                // db = row sums
                let db = gmat.sum_axis(Axis(1)).into_dyn();
                // dX = col2im(w^T . g)
                let wmat_b = to_mat(p[1], cout, cin * kh * kw);
                let dcol = wmat_b.t().dot(&gmat);
                let dx = col2im(&dcol, cin, h, wdt, kh, kw, stride, pad, ho, wo);
                vec![dx, dw, db]
            }))
        } else {
            None
        };
        Ok(self.push(value, vec![x.0, w.0, b.0], backward))
    }

    /// Non-overlapping max pooling with window == stride == `k`.
    pub fn max_pool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || k == 0 || xs[1] % k != 0 || xs[2] % k != 0 {
            return Err(Error::shape(format!("max_pool2d: input {xs:?} window {k}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (ho, wo) = (h / k, w / k);
        let xsl = self.value(x).as_standard_layout().to_owned();
        let xflat = xsl.as_slice().expect("standard layout");
        let mut out = vec![T::zero(); c * ho * wo];
        let mut arg = vec![0usize; c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = (ci * h + oy * k + dy) * w + ox * k + dx;
                            let v = xflat[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ci * ho + oy) * wo + ox;
                    out[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c, ho, wo]), out).unwrap();
        let backward: Option<BackFn<T>> = if self.grad_enabled {
            let in_dim = IxDyn(&[c, h, w]);
            Some(Box::new(move |g, _, _| {
                let gflat = g.as_standard_layout().to_owned();
                let gs = gflat.as_slice().unwrap();
                let mut dx = vec![T::zero(); c * h * w];
                for (o, &src) in arg.iter().enumerate() {
                    dx[src] = dx[src] + gs[o];
                }
                vec![ArrayD::from_shape_vec(in_dim.clone(), dx).unwrap()]
            }))
        } else {
            None
        };
        Ok(self.push(value, vec![x.0], backward))
    }

    /// Bilinear resize to `(oh, ow)` with half-pixel (non-corner-aligned)
    /// sampling; exact identity when the size is unchanged.
    pub fn bilinear_resize(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || oh == 0 || ow == 0 {
            return Err(Error::shape(format!("bilinear_resize: input {xs:?} -> ({oh},{ow})")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let ymap = bilinear_axis_map::<T>(h, oh);
        let xmap = bilinear_axis_map::<T>(w, ow);
        let xsl = self.value(x).as_standard_layout().to_owned();
        let xflat = xsl.as_slice().expect("standard layout");
        let mut out = vec![T::zero(); c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1, wy) = ymap[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = xmap[ox];
                    let f = |yy: usize, xx: usize| xflat[(ci * h + yy) * w + xx];
                    let top = f(y0, x0) * (T::one() - wx) + f(y0, x1) * wx;
                    let bot = f(y1, x0) * (T::one() - wx) + f(y1, x1) * wx;
                    out[(ci * oh + oy) * ow + ox] = top * (T::one() - wy) + bot * wy;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c, oh, ow]), out).unwrap();
        let backward: Option<BackFn<T>> = if self.grad_enabled {
            let ymap = ymap.clone();
            let xmap = xmap.clone();
            Some(Box::new(move |g, _, _| {
                let gfl = g.as_standard_layout().to_owned();
                let gs = gfl.as_slice().unwrap();
                let mut dx = vec![T::zero(); c * h * w];
                for ci in 0..c {
                    for oy in 0..oh {
                        let (y0, y1, wy) = ymap[oy];
                        for ox in 0..ow {
                            let (x0, x1, wx) = xmap[ox];
                            let go = gs[(ci * oh + oy) * ow + ox];
                            let mut acc = |yy: usize, xx: usize, wgt: T| {
                                let i = (ci * h + yy) * w + xx;
                                dx[i] = dx[i] + go * wgt;
                            };
                            acc(y0, x0, (T::one() - wy) * (T::one() - wx));
                            acc(y0, x1, (T::one() - wy) * wx);
                            acc(y1, x0, wy * (T::one() - wx));
                            acc(y1, x1, wy * wx);
                        }
                    }
                }
                vec![ArrayD::from_shape_vec(IxDyn(&[c, h, w]), dx).unwrap()]
            }))
        } else {
            None
        };
        Ok(self.push(value, vec![x.0], backward))
    }

    /// Concatenates along the channel axis; spatial dims must agree.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_channels: empty input"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 3 || s[1..] != first[1..] {
                return Err(Error::shape(format!(
                    "concat_channels: {:?} vs {:?}",
                    s, first
                )));
            }
            chans.push(s[0]);
        }
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("checked shapes");
        let backward: Option<BackFn<T>> = Some(Box::new(move |g, _, _| {
            let mut offset = 0usize;
            let mut grads = Vec::with_capacity(chans.len());
            for &c in &chans {
                grads.push(
                    g.slice_axis(Axis(0), ndarray::Slice::from(offset..offset + c))
                        .to_owned(),
                );
                offset += c;
            }
            grads
        }));
        Ok(self.push(value, parts.iter().map(|p| p.0).collect(), backward))
    }

    /// Extracts the spatial window `[y0..y0+h, x0..x0+w]` across all channels.
    pub fn slice_spatial(
        &mut self,
        x: NodeId,
        y0: usize,
        x0: usize,
        h: usize,
        w: usize,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || y0 + h > xs[1] || x0 + w > xs[2] {
            return Err(Error::shape(format!(
                "slice_spatial: window ({y0},{x0})+({h},{w}) exceeds {xs:?}"
            )));
        }
        let value = self.nodes[x.0]
            .value
            .slice(ndarray::s![.., y0..y0 + h, x0..x0 + w])
            .to_owned()
            .into_dyn();
        let (c, ih, iw) = (xs[0], xs[1], xs[2]);
        let backward: Option<BackFn<T>> = Some(Box::new(move |g, _, _| {
            let mut dx = ArrayD::zeros(IxDyn(&[c, ih, iw]));
            dx.slice_mut(ndarray::s![.., y0..y0 + h, x0..x0 + w])
                .assign(g);
            vec![dx]
        }));
        Ok(self.push(value, vec![x.0], backward))
    }

    /// Places `s*s` equally-sized tiles (row-major) into one spatial mosaic.
    pub fn merge_tiles(&mut self, tiles: &[NodeId], s: usize) -> Result<NodeId> {
        if tiles.len() != s * s || s == 0 {
            return Err(Error::shape(format!(
                "merge_tiles: expected {} tiles, got {}",
                s * s,
                tiles.len()
            )));
        }
        let ts = self.value(tiles[0]).shape().to_vec();
        for &t in tiles {
            if self.value(t).shape() != &ts[..] {
                return Err(Error::shape("merge_tiles: tile shapes differ"));
            }
        }
        let (c, th, tw) = (ts[0], ts[1], ts[2]);
        let mut value = ArrayD::zeros(IxDyn(&[c, s * th, s * tw]));
        for (i, &t) in tiles.iter().enumerate() {
            let (ry, rx) = (i / s, i % s);
            let mut dst = value.slice_mut(ndarray::s![
                ..,
                ry * th..(ry + 1) * th,
                rx * tw..(rx + 1) * tw
            ]);
            dst.assign(&self.nodes[t.0].value);
        }
        let n = tiles.len();
        let backward: Option<BackFn<T>> = Some(Box::new(move |g, _, _| {
            let mut grads = Vec::with_capacity(n);
            for i in 0..n {
                let (ry, rx) = (i / s, i % s);
                grads.push(
                    g.slice(ndarray::s![.., ry * th..(ry + 1) * th, rx * tw..(rx + 1) * tw])
                        .to_owned()
                        .into_dyn(),
                );
            }
            grads
        }));
        Ok(self.push(value, tiles.iter().map(|t| t.0).collect(), backward))
    }
}

/// Sampling map for one axis of a half-pixel bilinear resize:
/// `out[i]` draws from `lo` and `hi` with weight `w` on `hi`.
pub(crate) fn bilinear_axis_map<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, T::of(src - lo as f64))
        })
        .collect()
}

fn to_mat<T: Scalar>(a: &ArrayD<T>, rows: usize, cols: usize) -> Array2<T> {
    a.as_standard_layout()
        .to_owned()
        .into_shape_with_order((rows, cols))
        .expect("matrix reshape")
}

fn im2col<T: Scalar>(
    x: &ArrayD<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<T> {
    let s = x.shape();
    let (cin, h, w) = (s[0], s[1], s[2]);
    let xs = x.as_standard_layout().to_owned();
    let xflat = xs.as_slice().expect("standard layout");
    let mut col = Array2::<T>::zeros((cin * kh * kw, ho * wo));
    let cslice = col.as_slice_mut().unwrap();
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let krow = ((c * kh + ky) * kw + kx) * (ho * wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (c * h + iy as usize) * w;
                    let orow = krow + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cslice[orow + ox] = xflat[xrow + ix as usize];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    dcol: &Array2<T>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ArrayD<T> {
    let mut dx = vec![T::zero(); cin * h * w];
    let dsl = dcol.as_slice().expect("standard layout");
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let krow = ((c * kh + ky) * kw + kx) * (ho * wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (c * h + iy as usize) * w;
                    let orow = krow + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = xrow + ix as usize;
                        dx[i] = dx[i] + dsl[orow + ox];
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[cin, h, w]), dx).unwrap()
}
