//! Tape-based reverse-mode differentiation over dense NCHW arrays.
//!
//! Only the primitives the registration network and its losses need are
//! provided. The tape keeps every forward value, so `backward` can be run
//! any number of times from different scalar roots (the similarity and
//! regularisation passes share one forward).

use std::collections::BTreeMap;

use crate::grid::BilinearStencil;
use crate::{Error, Result};

/// Dense 4-D array in `[batch, channel, height, width]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(
                "Tensor::new",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of one `[height, width]` plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// The parameters of one layer: convolution weight and bias plus, when the
/// convolution is normalised, the batch-norm scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub layer_id: String,
    pub tensors: Vec<Tensor>,
    pub trainable: bool,
}

impl ParamGroup {
    pub fn new(layer_id: impl Into<String>, tensors: Vec<Tensor>) -> Self {
        ParamGroup {
            layer_id: layer_id.into(),
            tensors,
            trainable: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Tensors concatenated in declaration order, each row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`ParamGroup::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::shape(
                "ParamGroup::assign_flat",
                format!("{} values for group {} of size {}", flat.len(), self.layer_id, self.numel()),
            ));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Per-layer flat gradients keyed by layer id (iteration is in sorted id order).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet {
    groups: BTreeMap<String, Vec<f64>>,
}

impl GradientSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer_id: impl Into<String>, grad: Vec<f64>) {
        self.groups.insert(layer_id.into(), grad);
    }

    pub fn get(&self, layer_id: &str) -> Option<&[f64]> {
        self.groups.get(layer_id).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, layer_id: &str) -> Option<&mut Vec<f64>> {
        self.groups.get_mut(layer_id)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.groups.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn numel(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    /// All groups concatenated in sorted layer-id order.
    pub fn concat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for v in self.groups.values() {
            out.extend_from_slice(v);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.groups
            .values()
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn map_values(&self, f: impl Fn(&str, &[f64]) -> Vec<f64>) -> GradientSet {
        GradientSet {
            groups: self
                .groups
                .iter()
                .map(|(k, v)| (k.clone(), f(k, v)))
                .collect(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with stored running statistics.
    Eval,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    },
    BatchNormTrain {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        input: NodeId,
        slope: f64,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Warp {
        image: NodeId,
        field: NodeId,
    },
    Mse {
        input: NodeId,
        target: Vec<f64>,
    },
    Lncc {
        input: NodeId,
        target: Vec<f64>,
        window: usize,
    },
    Smoothness {
        field: NodeId,
    },
    Sum {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics captured by a train-mode batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance per channel.
    pub var: Vec<f64>,
    /// Number of values each channel statistic was computed over.
    pub count: usize,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Adjoints produced by one backward pass, indexed by node.
pub struct Adjoints {
    grads: Vec<Option<Vec<f64>>>,
}

impl Adjoints {
    /// Adjoint of `node`, or `None` when the root does not depend on it.
    pub fn get(&self, node: NodeId) -> Option<&[f64]> {
        self.grads.get(node.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Clone)]
struct BoundGroup {
    layer_id: String,
    nodes: Vec<NodeId>,
    sizes: Vec<usize>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<BoundGroup>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Reusable im2col buffer of at least `len` values. Contents are
/// unspecified; every user overwrites the full range it reads.
fn take_scratch(len: usize) -> Vec<f64> {
    let mut v = SCRATCH.with(|s| std::mem::take(&mut *s.borrow_mut()));
    v.resize(len, 0.0);
    v
}

fn return_scratch(v: Vec<f64>) {
    SCRATCH.with(|s| *s.borrow_mut() = v);
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant leaf (receives an adjoint but is never reported as a parameter).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Differentiable leaf not tied to any parameter group.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Param, true)
    }

    /// Places every tensor of each group on the tape. Trainable groups are
    /// reported by [`Tape::backward`]; the returned ids follow the groups'
    /// tensor order.
    pub fn bind_groups(&mut self, groups: &[ParamGroup]) -> Vec<Vec<NodeId>> {
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            let nodes: Vec<NodeId> = g
                .tensors
                .iter()
                .map(|t| self.push(t.clone(), Op::Param, g.trainable))
                .collect();
            if g.trainable {
                self.bound.push(BoundGroup {
                    layer_id: g.layer_id.clone(),
                    nodes: nodes.clone(),
                    sizes: g.tensors.iter().map(Tensor::numel).collect(),
                });
            }
            out.push(nodes);
        }
        out
    }

    /// 2-D convolution with square kernel `k`, zero padding `k / 2`.
    /// `input` is `[N, Cin, H, W]`, `weight` `[Cout, Cin, k, k]`, `bias` has `Cout` values.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let [n, cin, h, wd] = x.shape;
        let [cout, wcin, kh, kw] = w.shape;
        if stride == 0 || kh != kw || kh % 2 == 0 || wcin != cin || b.numel() != cout {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?}, weight {:?}, bias {:?}, stride {stride}",
                    x.shape, w.shape, b.shape
                ),
            ));
        }
        let geo = ConvGeometry::new(cin, h, wd, kh, stride);
        let mut out = Tensor::zeros([n, cout, geo.ho, geo.wo]);
        let mut cols = take_scratch(geo.rows() * geo.plane_out());
        for s in 0..n {
            let xin = &x.data[s * cin * h * wd..(s + 1) * cin * h * wd];
            geo.im2col(xin, &mut cols);
            let o = &mut out.data[s * cout * geo.plane_out()..(s + 1) * cout * geo.plane_out()];
            for (co, row) in o.chunks_mut(geo.plane_out()).enumerate() {
                row.fill(b.data[co]);
            }
            // out[cout, P] += W[cout, R] * cols[R, P]
            gemm(cout, geo.rows(), geo.plane_out(), &w.data, false, &cols, false, 1.0, o);
        }
        return_scratch(cols);
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
            rg,
        ))
    }

    /// Per-channel normalisation. `scale` and `shift` hold one value per channel.
    /// In eval mode `running` provides the `(mean, var)` used instead of batch
    /// statistics.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        mode: NormMode,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let [n, c, h, w] = x.shape;
        let g = self.value(scale);
        let bt = self.value(shift);
        if g.numel() != c || bt.numel() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("input {:?}, scale {:?}, shift {:?}", x.shape, g.shape, bt.shape),
            ));
        }
        let plane = h * w;
        let count = n * plane;
        let mut out = Tensor::zeros(x.shape);
        let rg = self.rg(input) || self.rg(scale) || self.rg(shift);
        match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        s += x.data[off..off + plane].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut v = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        v += x.data[off..off + plane].iter().map(|&t| (t - m) * (t - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = v / count as f64;
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut normalized = vec![0.0; x.numel()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            let xh = (x.data[i] - mean[ch]) * inv_std[ch];
                            normalized[i] = xh;
                            out.data[i] = g.data[ch] * xh + bt.data[ch];
                        }
                    }
                }
                Ok(self.push(
                    out,
                    Op::BatchNormTrain {
                        input,
                        scale,
                        shift,
                        normalized,
                        inv_std,
                    },
                    rg,
                ))
            }
            NormMode::Eval => {
                let (rm, rv) = running.ok_or_else(|| {
                    Error::Invalid("batch_norm in eval mode needs running statistics".into())
                })?;
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running stats of length {}/{} for {c} channels", rm.len(), rv.len()),
                    ));
                }
                let inv_std: Vec<f64> = rv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            out.data[i] = g.data[ch] * (x.data[i] - rm[ch]) * inv_std[ch] + bt.data[ch];
                        }
                    }
                }
                Ok(self.push(
                    out,
                    Op::BatchNormEval {
                        input,
                        scale,
                        shift,
                        mean: rm.to_vec(),
                        inv_std,
                    },
                    rg,
                ))
            }
        }
    }

    /// Statistics of a train-mode batch-norm node (`None` for any other node).
    pub fn batch_stats(&self, id: NodeId) -> Option<BatchStats> {
        match &self.nodes[id.0].op {
            Op::BatchNormTrain { input, inv_std, .. } => {
                let x = self.value(*input);
                let [n, c, h, w] = x.shape;
                let plane = h * w;
                let mut mean = vec![0.0; c];
                for b in 0..n {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let off = (b * c + ch) * plane;
                        *m += x.data[off..off + plane].iter().sum::<f64>();
                    }
                }
                let count = n * plane;
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let var = inv_std.iter().map(|s| 1.0 / (s * s) - BN_EPS).collect();
                Some(BatchStats { mean, var, count })
            }
            _ => None,
        }
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        let x = self.value(input);
        let data = x
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let out = Tensor { shape: x.shape, data };
        let rg = self.rg(input);
        self.push(out, Op::LeakyRelu { input, slope }, rg)
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let [n, c, h, w] = x.shape;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::shape("maxpool2", format!("input {:?} needs even height and width", x.shape)));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xo + dx;
                        if x.data[i] > x.data[best] {
                            best = i;
                        }
                    }
                    let o = p * ho * wo + y * wo + xo;
                    out.data[o] = x.data[best];
                    argmax[o] = best;
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let [n, c, h, w] = x.shape;
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for p in 0..n * c {
            for y in 0..ho {
                let src = &x.data[p * h * w + (y / 2) * w..p * h * w + (y / 2) * w + w];
                let dst = &mut out.data[p * ho * wo + y * wo..p * ho * wo + (y + 1) * wo];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / 2];
                }
            }
        }
        let rg = self.rg(input);
        self.push(out, Op::Upsample2 { input }, rg)
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = ta.shape;
        let [nb, cb, hb, wb] = tb.shape;
        if n != nb || h != hb || w != wb {
            return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", ta.shape, tb.shape)));
        }
        let plane = h * w;
        let mut out = Tensor::zeros([n, ca + cb, h, w]);
        for s in 0..n {
            let dst = &mut out.data[s * (ca + cb) * plane..(s + 1) * (ca + cb) * plane];
            dst[..ca * plane].copy_from_slice(&ta.data[s * ca * plane..(s + 1) * ca * plane]);
            dst[ca * plane..].copy_from_slice(&tb.data[s * cb * plane..(s + 1) * cb * plane]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Spatial transformer: bilinearly samples every channel of `image`
    /// (`[N, C, H, W]`) at `x + u(x)`, with `field` of shape `[N, 2, H, W]`
    /// holding `(u_x, u_y)`.
    pub fn warp(&mut self, image: NodeId, field: NodeId) -> Result<NodeId> {
        let (img, f) = (self.value(image), self.value(field));
        let [n, c, h, w] = img.shape;
        if f.shape != [n, 2, h, w] {
            return Err(Error::shape("warp", format!("image {:?}, field {:?}", img.shape, f.shape)));
        }
        let plane = h * w;
        let mut out = Tensor::zeros(img.shape);
        for s in 0..n {
            let ux = &f.data[(2 * s) * plane..(2 * s + 1) * plane];
            let uy = &f.data[(2 * s + 1) * plane..(2 * s + 2) * plane];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let st = BilinearStencil::new(h, w, x as f64 + ux[i], y as f64 + uy[i]);
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        out.data[off + i] = st.sample(&img.data[off..off + plane]);
                    }
                }
            }
        }
        let rg = self.rg(image) || self.rg(field);
        Ok(self.push(out, Op::Warp { image, field }, rg))
    }

    /// Mean squared difference against a constant target of the same shape.
    pub fn mse(&mut self, input: NodeId, target: &Tensor) -> Result<NodeId> {
        let x = self.value(input);
        same_shape("mse", x, target)?;
        let v = x
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / x.numel() as f64;
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Mse {
                input,
                target: target.data.clone(),
            },
            rg,
        ))
    }

    /// Negative mean local squared correlation coefficient against a constant
    /// target, over square `window`s clipped to the image.
    pub fn lncc(&mut self, input: NodeId, target: &Tensor, window: usize) -> Result<NodeId> {
        if window < 3 || window % 2 == 0 {
            return Err(Error::Invalid(format!("lncc window must be odd and >= 3, got {window}")));
        }
        let x = self.value(input);
        same_shape("lncc", x, target)?;
        let [n, c, h, w] = x.shape;
        let plane = h * w;
        let mut total = 0.0;
        for p in 0..n * c {
            let xi = &x.data[p * plane..(p + 1) * plane];
            let ti = &target.data[p * plane..(p + 1) * plane];
            let st = LnccStats::new(xi, ti, h, w, window);
            total += st.cc.iter().sum::<f64>();
        }
        let v = -total / x.numel() as f64;
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Lncc {
                input,
                target: target.data.clone(),
                window,
            },
            rg,
        ))
    }

    /// Diffusion regulariser: mean over samples, components and pixels of
    /// `|∇u_c|²` with forward differences (zero on the last row/column).
    pub fn smoothness(&mut self, field: NodeId) -> Result<NodeId> {
        let f = self.value(field);
        let [n, c, h, w] = f.shape;
        if h < 2 || w < 2 {
            return Err(Error::shape("smoothness", format!("field {:?} smaller than 2x2", f.shape)));
        }
        let mut s = 0.0;
        for p in 0..n * c {
            let u = &f.data[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if x + 1 < w {
                        let d = u[i + 1] - u[i];
                        s += d * d;
                    }
                    if y + 1 < h {
                        let d = u[i + w] - u[i];
                        s += d * d;
                    }
                }
            }
        }
        let v = s / f.numel() as f64;
        let rg = self.rg(field);
        Ok(self.push(Tensor::scalar(v), Op::Smoothness { field }, rg))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input).data.iter().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(v), Op::Sum { input }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor { shape: ta.shape, data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let x = self.value(input);
        let out = Tensor {
            shape: x.shape,
            data: x.data.iter().map(|v| v * factor).collect(),
        };
        let rg = self.rg(input);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    /// Reverse sweep from a scalar root, returning adjoints of every node.
    pub fn backward_full(&self, root: NodeId) -> Result<Adjoints> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", rv.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &dy, &mut grads)?;
            }
            grads[i] = Some(dy);
        }
        Ok(Adjoints { grads })
    }

    /// Gradients of `root` for every trainable bound group. Groups the root
    /// does not depend on get all-zero vectors.
    pub fn backward(&self, root: NodeId) -> Result<GradientSet> {
        let adj = self.backward_full(root)?;
        Ok(self.collect(&adj))
    }

    /// Flattens adjoints of the bound parameter groups into a [`GradientSet`].
    pub fn collect(&self, adj: &Adjoints) -> GradientSet {
        let mut set = GradientSet::new();
        for g in &self.bound {
            let mut flat = Vec::with_capacity(g.sizes.iter().sum());
            for (node, &size) in g.nodes.iter().zip(&g.sizes) {
                match adj.get(*node) {
                    Some(d) => flat.extend_from_slice(d),
                    None => flat.extend(std::iter::repeat_n(0.0, size)),
                }
            }
            set.insert(g.layer_id.clone(), flat);
        }
        set
    }

    fn propagate(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => self.conv2d_backward(*input, *weight, *bias, *stride, dy, grads),
            Op::BatchNormTrain {
                input,
                scale,
                shift,
                normalized,
                inv_std,
            } => {
                let x = self.value(*input);
                let [n, c, h, w] = x.shape;
                let plane = h * w;
                let count = (n * plane) as f64;
                let g = self.value(*scale);
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for j in off..off + plane {
                            dg[ch] += dy[j] * normalized[j];
                            db[ch] += dy[j];
                        }
                    }
                }
                if self.rg(*input) {
                    let dx = accumulate(&mut grads[input.0], x.numel());
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let k = g.data[ch] * inv_std[ch];
                            let mean_dy = db[ch] / count;
                            let mean_dyx = dg[ch] / count;
                            for j in off..off + plane {
                                dx[j] += k * (dy[j] - mean_dy - normalized[j] * mean_dyx);
                            }
                        }
                    }
                }
                add_into(grads, *scale, &dg);
                add_into(grads, *shift, &db);
            }
            Op::BatchNormEval {
                input,
                scale,
                shift,
                mean,
                inv_std,
            } => {
                let x = self.value(*input);
                let [n, c, h, w] = x.shape;
                let plane = h * w;
                let g = self.value(*scale);
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for j in off..off + plane {
                            dg[ch] += dy[j] * (x.data[j] - mean[ch]) * inv_std[ch];
                            db[ch] += dy[j];
                        }
                    }
                }
                if self.rg(*input) {
                    let dx = accumulate(&mut grads[input.0], x.numel());
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let k = g.data[ch] * inv_std[ch];
                            for j in off..off + plane {
                                dx[j] += k * dy[j];
                            }
                        }
                    }
                }
                add_into(grads, *scale, &dg);
                add_into(grads, *shift, &db);
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input);
                let dx = accumulate(&mut grads[input.0], x.numel());
                for ((d, &v), &g) in dx.iter_mut().zip(&x.data).zip(dy) {
                    *d += if v > 0.0 { g } else { slope * g };
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let len = self.value(*input).numel();
                let dx = accumulate(&mut grads[input.0], len);
                for (&src, &g) in argmax.iter().zip(dy) {
                    dx[src] += g;
                }
            }
            Op::Upsample2 { input } => {
                let x = self.value(*input);
                let [n, c, h, w] = x.shape;
                let (ho, wo) = (2 * h, 2 * w);
                let dx = accumulate(&mut grads[input.0], x.numel());
                for p in 0..n * c {
                    for y in 0..ho {
                        for xo in 0..wo {
                            dx[p * h * w + (y / 2) * w + xo / 2] += dy[p * ho * wo + y * wo + xo];
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(*a).shape;
                let cb = self.value(*b).shape[1];
                let plane = h * w;
                for (id, c0, cn) in [(*a, 0, ca), (*b, ca, cb)] {
                    if !self.rg(id) {
                        continue;
                    }
                    let d = accumulate(&mut grads[id.0], n * cn * plane);
                    for s in 0..n {
                        let src = &dy[(s * (ca + cb) + c0) * plane..(s * (ca + cb) + c0 + cn) * plane];
                        for (t, v) in d[s * cn * plane..(s + 1) * cn * plane].iter_mut().zip(src) {
                            *t += v;
                        }
                    }
                }
            }
            Op::Warp { image, field } => {
                let img = self.value(*image);
                let f = self.value(*field);
                let [n, c, h, w] = img.shape;
                let plane = h * w;
                let mut dimg = if self.rg(*image) { Some(vec![0.0; img.numel()]) } else { None };
                let mut dfield = if self.rg(*field) { Some(vec![0.0; f.numel()]) } else { None };
                for s in 0..n {
                    let ux = &f.data[(2 * s) * plane..(2 * s + 1) * plane];
                    let uy = &f.data[(2 * s + 1) * plane..(2 * s + 2) * plane];
                    for y in 0..h {
                        for x in 0..w {
                            let i = y * w + x;
                            let st = BilinearStencil::new(h, w, x as f64 + ux[i], y as f64 + uy[i]);
                            let (mut gx, mut gy) = (0.0, 0.0);
                            for ch in 0..c {
                                let off = (s * c + ch) * plane;
                                let g = dy[off + i];
                                if let Some(di) = dimg.as_mut() {
                                    st.scatter(g, &mut di[off..off + plane]);
                                }
                                let (cx, cy) = st.coord_grad(&img.data[off..off + plane]);
                                gx += g * cx;
                                gy += g * cy;
                            }
                            if let Some(df) = dfield.as_mut() {
                                df[(2 * s) * plane + i] += gx;
                                df[(2 * s + 1) * plane + i] += gy;
                            }
                        }
                    }
                }
                if let Some(d) = dimg {
                    add_into(grads, *image, &d);
                }
                if let Some(d) = dfield {
                    add_into(grads, *field, &d);
                }
            }
            Op::Mse { input, target } => {
                let x = self.value(*input);
                let k = 2.0 * dy[0] / x.numel() as f64;
                let dx = accumulate(&mut grads[input.0], x.numel());
                for ((d, a), b) in dx.iter_mut().zip(&x.data).zip(target) {
                    *d += k * (a - b);
                }
            }
            Op::Lncc { input, target, window } => {
                let x = self.value(*input);
                let [n, c, h, w] = x.shape;
                let plane = h * w;
                let k = -dy[0] / x.numel() as f64;
                let dx = accumulate(&mut grads[input.0], x.numel());
                for p in 0..n * c {
                    let xi = &x.data[p * plane..(p + 1) * plane];
                    let ti = &target[p * plane..(p + 1) * plane];
                    let st = LnccStats::new(xi, ti, h, w, *window);
                    st.backward(xi, ti, k, &mut dx[p * plane..(p + 1) * plane]);
                }
            }
            Op::Smoothness { field } => {
                let f = self.value(*field);
                let [n, c, h, w] = f.shape;
                let k = 2.0 * dy[0] / f.numel() as f64;
                let df = accumulate(&mut grads[field.0], f.numel());
                for p in 0..n * c {
                    let u = &f.data[p * h * w..(p + 1) * h * w];
                    let d = &mut df[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for x in 0..w {
                            let i = y * w + x;
                            if x + 1 < w {
                                let g = k * (u[i + 1] - u[i]);
                                d[i + 1] += g;
                                d[i] -= g;
                            }
                            if y + 1 < h {
                                let g = k * (u[i + w] - u[i]);
                                d[i + w] += g;
                                d[i] -= g;
                            }
                        }
                    }
                }
            }
            Op::Sum { input } => {
                let len = self.value(*input).numel();
                let dx = accumulate(&mut grads[input.0], len);
                dx.iter_mut().for_each(|d| *d += dy[0]);
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if self.rg(id) {
                        add_into(grads, id, dy);
                    }
                }
            }
            Op::Scale { input, factor } => {
                let dx = accumulate(&mut grads[input.0], dy.len());
                for (d, g) in dx.iter_mut().zip(dy) {
                    *d += factor * g;
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let x = self.value(input);
        let w = self.value(weight);
        let [n, cin, h, wd] = x.shape;
        let [cout, _, k, _] = w.shape;
        let geo = ConvGeometry::new(cin, h, wd, k, stride);
        let po = geo.plane_out();
        let need_w = self.rg(weight);
        let need_x = self.rg(input);

        if self.rg(bias) {
            let mut db = vec![0.0; cout];
            for s in 0..n {
                for (co, d) in db.iter_mut().enumerate() {
                    let off = (s * cout + co) * po;
                    *d += dy[off..off + po].iter().sum::<f64>();
                }
            }
            add_into(grads, bias, &db);
        }

        let mut cols = take_scratch(geo.rows() * po);
        if need_w {
            let dw = accumulate(&mut grads[weight.0], w.numel());
            for s in 0..n {
                let dys = &dy[s * cout * po..(s + 1) * cout * po];
                geo.im2col(&x.data[s * cin * h * wd..(s + 1) * cin * h * wd], &mut cols);
                // dW[cout, R] += dY[cout, P] * cols[R, P]^T
                gemm(cout, po, geo.rows(), dys, false, &cols, true, 1.0, dw);
            }
        }
        if need_x {
            let dx = accumulate(&mut grads[input.0], x.numel());
            for s in 0..n {
                let dys = &dy[s * cout * po..(s + 1) * cout * po];
                // dcols[R, P] = W[cout, R]^T * dY[cout, P]
                gemm(geo.rows(), cout, po, &w.data, true, dys, false, 0.0, &mut cols);
                geo.col2im(&cols, &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd]);
            }
        }
        return_scratch(cols);
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: NodeId, d: &[f64]) {
    let slot = accumulate(&mut grads[id.0], d.len());
    for (t, v) in slot.iter_mut().zip(d) {
        *t += v;
    }
}

/// `c[m, n] = beta · c + op(a)[m, k] * op(b)[k, n]` on row-major buffers,
/// where `op` optionally transposes the stored matrix. With `beta = 0` the
/// previous contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the m*k, k*n and m*n
    // row-major buffers whose lengths are checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeometry {
            cin,
            h,
            w,
            k,
            pad,
            stride,
            ho,
            wo,
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
    fn valid(&self, kk: usize, len_in: usize, len_out: usize) -> (usize, usize) {
        // input index = o * stride + kk - pad must lie in [0, len_in)
        let lo = if kk >= self.pad { 0 } else { (self.pad - kk).div_ceil(self.stride) };
        let hi = match (len_in - 1 + self.pad).checked_sub(kk) {
            Some(last) => (last / self.stride + 1).min(len_out),
            None => 0,
        };
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let po = self.plane_out();
        for ci in 0..self.cin {
            let xin = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (ylo, yhi) = self.valid(ky, self.h, self.ho);
                for kx in 0..self.k {
                    let (xlo, xhi) = self.valid(kx, self.w, self.wo);
                    let r = (ci * self.k + ky) * self.k + kx;
                    let row = &mut cols[r * po..(r + 1) * po];
                    row[..ylo * self.wo].fill(0.0);
                    row[yhi * self.wo..].fill(0.0);
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = &xin[iy * self.w..(iy + 1) * self.w];
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        dst[..xlo].fill(0.0);
                        dst[xhi..].fill(0.0);
                        if self.stride == 1 {
                            let start = xlo + kx - self.pad;
                            dst[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                dst[ox] = src[ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let po = self.plane_out();
        for ci in 0..self.cin {
            let d = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (ylo, yhi) = self.valid(ky, self.h, self.ho);
                for kx in 0..self.k {
                    let (xlo, xhi) = self.valid(kx, self.w, self.wo);
                    let r = (ci * self.k + ky) * self.k + kx;
                    let row = &cols[r * po..(r + 1) * po];
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = &row[oy * self.wo..(oy + 1) * self.wo];
                        let dst = &mut d[iy * self.w..(iy + 1) * self.w];
                        if self.stride == 1 {
                            let start = xlo + kx - self.pad;
                            for (t, v) in dst[start..start + (xhi - xlo)].iter_mut().zip(&src[xlo..xhi]) {
                                *t += v;
                            }
                        } else {
                            for ox in xlo..xhi {
                                dst[ox * self.stride + kx - self.pad] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Windowed sums for one image plane and the per-pixel squared correlation.
struct LnccStats {
    h: usize,
    w: usize,
    radius: usize,
    count: Vec<f64>,
    si: Vec<f64>,
    sj: Vec<f64>,
    cross: Vec<f64>,
    var_i: Vec<f64>,
    var_j: Vec<f64>,
    cc: Vec<f64>,
}

pub(crate) const LNCC_EPS: f64 = 1e-5;

/// Sum of `v` over the clipped square window centred at each pixel.
fn box_sum(v: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    // separable: rows then columns, via prefix sums
    let mut tmp = vec![0.0; h * w];
    let mut prefix = vec![0.0; w.max(h) + 1];
    for y in 0..h {
        for x in 0..w {
            prefix[x + 1] = prefix[x] + v[y * w + x];
        }
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(w);
            tmp[y * w + x] = prefix[hi] - prefix[lo];
        }
    }
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        for y in 0..h {
            prefix[y + 1] = prefix[y] + tmp[y * w + x];
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r + 1).min(h);
            out[y * w + x] = prefix[hi] - prefix[lo];
        }
    }
    out
}

impl LnccStats {
    fn new(i: &[f64], j: &[f64], h: usize, w: usize, window: usize) -> Self {
        let r = window / 2;
        let count: Vec<f64> = (0..h * w)
            .map(|p| {
                let (y, x) = (p / w, p % w);
                let ny = (y + r + 1).min(h) - y.saturating_sub(r);
                let nx = (x + r + 1).min(w) - x.saturating_sub(r);
                (ny * nx) as f64
            })
            .collect();
        let si = box_sum(i, h, w, r);
        let sj = box_sum(j, h, w, r);
        let ii: Vec<f64> = i.iter().map(|v| v * v).collect();
        let jj: Vec<f64> = j.iter().map(|v| v * v).collect();
        let ij: Vec<f64> = i.iter().zip(j).map(|(a, b)| a * b).collect();
        let sii = box_sum(&ii, h, w, r);
        let sjj = box_sum(&jj, h, w, r);
        let sij = box_sum(&ij, h, w, r);
        let n = h * w;
        let mut cross = vec![0.0; n];
        let mut var_i = vec![0.0; n];
        let mut var_j = vec![0.0; n];
        let mut cc = vec![0.0; n];
        for p in 0..n {
            cross[p] = sij[p] - si[p] * sj[p] / count[p];
            var_i[p] = sii[p] - si[p] * si[p] / count[p];
            var_j[p] = sjj[p] - sj[p] * sj[p] / count[p];
            cc[p] = cross[p] * cross[p] / (var_i[p] * var_j[p] + LNCC_EPS);
        }
        LnccStats {
            h,
            w,
            radius: r,
            count,
            si,
            sj,
            cross,
            var_i,
            var_j,
            cc,
        }
    }

    /// Adds `k * d(Σ cc)/dI` into `dx`.
    fn backward(&self, i: &[f64], j: &[f64], k: f64, dx: &mut [f64]) {
        let n = self.h * self.w;
        let mut a_si = vec![0.0; n];
        let mut a_sii = vec![0.0; n];
        let mut a_sij = vec![0.0; n];
        for p in 0..n {
            let denom = self.var_i[p] * self.var_j[p] + LNCC_EPS;
            let d_cross = 2.0 * self.cross[p] / denom;
            let d_vari = -self.cross[p] * self.cross[p] * self.var_j[p] / (denom * denom);
            a_si[p] = -d_cross * self.sj[p] / self.count[p] - 2.0 * d_vari * self.si[p] / self.count[p];
            a_sii[p] = d_vari;
            a_sij[p] = d_cross;
        }
        // windows are symmetric, so the adjoint of a box sum is a box sum
        let b_si = box_sum(&a_si, self.h, self.w, self.radius);
        let b_sii = box_sum(&a_sii, self.h, self.w, self.radius);
        let b_sij = box_sum(&a_sij, self.h, self.w, self.radius);
        for p in 0..n {
            dx[p] += k * (b_si[p] + 2.0 * i[p] * b_sii[p] + j[p] * b_sij[p]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([2, 3, 5, 6], &mut rng);
        let mut w = Tensor::zeros([3, 3, 3, 3]);
        for c in 0..3 {
            w.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let wi = tape.input(w);
        let bi = tape.input(Tensor::zeros([3, 1, 1, 1]));
        let y = tape.conv2d(xi, wi, bi, 1).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn strided_conv_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let xi = tape.input(random([1, 2, 7, 8], &mut rng));
        let wi = tape.input(random([4, 2, 3, 3], &mut rng));
        let bi = tape.input(Tensor::zeros([4, 1, 1, 1]));
        let y = tape.conv2d(xi, wi, bi, 2).unwrap();
        assert_eq!(tape.value(y).shape(), [1, 4, 4, 4]);
    }

    #[test]
    fn conv_shape_errors_name_the_primitive() {
        let mut tape = Tape::new();
        let xi = tape.input(Tensor::zeros([1, 2, 4, 4]));
        let wi = tape.input(Tensor::zeros([4, 3, 3, 3]));
        let bi = tape.input(Tensor::zeros([4, 1, 1, 1]));
        let err = tape.conv2d(xi, wi, bi, 1).unwrap_err();
        assert!(err.to_string().contains("conv2d"), "{err}");
        let odd = tape.input(Tensor::zeros([1, 1, 3, 4]));
        assert!(tape.maxpool2(odd).unwrap_err().to_string().contains("maxpool2"));
    }

    #[test]
    fn leaky_relu_definition() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap());
        let y = tape.leaky_relu(x, 0.01);
        assert_eq!(tape.value(y).data(), &[-0.01, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros([1, 1, 2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    fn two_groups() -> Vec<ParamGroup> {
        vec![
            ParamGroup::new("a", vec![Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()]),
            ParamGroup::new("b", vec![Tensor::new([1, 1, 1, 3], vec![5.0, 6.0, 7.0]).unwrap()]),
        ]
    }

    #[test]
    fn sum_of_one_group() {
        let groups = two_groups();
        let mut tape = Tape::new();
        let ids = tape.bind_groups(&groups);
        let loss = tape.sum(ids[0][0]);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("a").unwrap(), &[1.0; 4]);
        assert_eq!(g.get("b").unwrap(), &[0.0; 3]);
        assert_eq!(g.keys().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn zero_scaled_loss_gives_zero_gradients() {
        let groups = two_groups();
        let mut tape = Tape::new();
        let ids = tape.bind_groups(&groups);
        let s = tape.sum(ids[1][0]);
        let loss = tape.scale(s, 0.0);
        let g = tape.backward(loss).unwrap();
        assert!(g.concat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untrainable_groups_are_not_reported() {
        let mut groups = two_groups();
        groups[1].trainable = false;
        let mut tape = Tape::new();
        let ids = tape.bind_groups(&groups);
        let loss = tape.sum(ids[1][0]);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.get("b").is_none());
    }

    #[test]
    fn batch_stats_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([2, 3, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let g = tape.input(Tensor::new([3, 1, 1, 1], vec![1.0; 3]).unwrap());
        let b = tape.input(Tensor::zeros([3, 1, 1, 1]));
        let y = tape.batch_norm(xi, g, b, NormMode::Train, None).unwrap();
        let st = tape.batch_stats(y).unwrap();
        assert_eq!(st.count, 32);
        // normalised output: zero mean, unit (biased) variance per channel
        let out = tape.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|s| out.data()[(s * 3 + ch) * 16..(s * 3 + ch + 1) * 16].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 32.0;
            let v = vals.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / 32.0;
            assert!(m.abs() < 1e-12);
            assert!((v * (st.var[ch] + BN_EPS) / st.var[ch] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn box_sum_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, w, r) = (7, 9, 2);
        let v: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = box_sum(&v, h, w, r);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                    for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                        s += v[yy * w + xx];
                    }
                }
                assert!((s - fast[y * w + x]).abs() < 1e-12);
            }
        }
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn tensor(shape: [usize; 4], seed: &[f64]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| seed[i % seed.len()] * (1.0 + 0.1 * (i % 7) as f64)).collect()).unwrap()
    }

    struct Graph {
        tape: Tape,
        w: NodeId,
        b: NodeId,
        l_sim: NodeId,
        l_reg: NodeId,
    }

    fn build(x: &Tensor, w: &Tensor, b: &Tensor, target: &Tensor) -> Graph {
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let wi = tape.variable(w.clone());
        let bi = tape.variable(b.clone());
        let y = tape.conv2d(xi, wi, bi, 1).unwrap();
        let y = tape.leaky_relu(y, 0.2);
        let l_sim = tape.mse(y, target).unwrap();
        let l_reg = tape.smoothness(y).unwrap();
        Graph {
            tape,
            w: wi,
            b: bi,
            l_sim,
            l_reg,
        }
    }

    fn adjoint(g: &Graph, root: NodeId) -> Vec<f64> {
        let adj = g.tape.backward_full(root).unwrap();
        [g.w, g.b].iter().flat_map(|&n| adj.get(n).unwrap().to_vec()).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn backward_passes_are_independent(
            vals in prop::collection::vec(-1.0f64..1.0, 8..24),
            c in 0.01f64..10.0,
        ) {
            let x = tensor([1, 2, 5, 5], &vals);
            let w = tensor([2, 2, 3, 3], &vals[3..]);
            let b = tensor([2, 1, 1, 1], &vals[5..]);
            let t = tensor([1, 2, 5, 5], &vals[1..]);

            let shared = build(&x, &w, &b, &t);
            let sim_then = adjoint(&shared, shared.l_sim);
            let reg_then = adjoint(&shared, shared.l_reg);
            let alone = build(&x, &w, &b, &t);
            prop_assert_eq!(&sim_then, &adjoint(&alone, alone.l_sim));
            let alone = build(&x, &w, &b, &t);
            prop_assert_eq!(&reg_then, &adjoint(&alone, alone.l_reg));

            // reverse mode is linear in the root
            let mut g = build(&x, &w, &b, &t);
            let scaled = g.tape.scale(g.l_reg, c);
            let total = g.tape.add(g.l_sim, scaled).unwrap();
            let sum = adjoint(&g, total);
            for ((s, r), t) in sim_then.iter().zip(&reg_then).zip(&sum) {
                prop_assert!((s + c * r - t).abs() <= 1e-12 * (1.0 + t.abs()));
            }
        }
    }
}
