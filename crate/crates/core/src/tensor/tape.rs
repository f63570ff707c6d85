//! Reverse-mode differentiation over a flat record of primitives.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations take
//! [`Var`] handles, push one node each, and return the handle of the result.
//! [`Tape::backward`] walks the nodes in reverse record order and accumulates
//! gradients additively into every input that requires them.

use super::kernels::{self, Conv3};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Name of the primitive that produced a node, for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Reshape,
    Add,
    Sub,
    Mul,
    Affine,
    Sum,
    Matmul,
    Bmm,
    Transpose,
    AddBias,
    Softmax,
    Sigmoid,
    Relu,
    PointwiseLinear,
    Conv3x3,
    Subsample,
    GapSpatial,
    MeanTime,
    ScaleChannels,
    ScalePositions,
    Cosine,
    ExtendLast,
    TemporalConv,
    BatchNorm,
    CrossEntropy,
}

pub(crate) enum Op {
    Leaf,
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: f64 },
    Sum { x: Var },
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Transpose { x: Var },
    AddBias { x: Var, bias: Var },
    Softmax { x: Var },
    Sigmoid { x: Var },
    Relu { x: Var },
    PointwiseLinear { x: Var, w: Var, bias: Option<Var> },
    Conv3x3 { x: Var, w: Var, geom: Conv3 },
    Subsample { x: Var, stride: usize },
    GapSpatial { x: Var },
    MeanTime { x: Var },
    ScaleChannels { x: Var, gate: Var },
    ScalePositions { x: Var, map: Var },
    Cosine { x: Var },
    ExtendLast { x: Var },
    TemporalConv { x: Var, kernel: Var },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Affine { .. } => OpKind::Affine,
            Op::Sum { .. } => OpKind::Sum,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Bmm { .. } => OpKind::Bmm,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Relu { .. } => OpKind::Relu,
            Op::PointwiseLinear { .. } => OpKind::PointwiseLinear,
            Op::Conv3x3 { .. } => OpKind::Conv3x3,
            Op::Subsample { .. } => OpKind::Subsample,
            Op::GapSpatial { .. } => OpKind::GapSpatial,
            Op::MeanTime { .. } => OpKind::MeanTime,
            Op::ScaleChannels { .. } => OpKind::ScaleChannels,
            Op::ScalePositions { .. } => OpKind::ScalePositions,
            Op::Cosine { .. } => OpKind::Cosine,
            Op::ExtendLast { .. } => OpKind::ExtendLast,
            Op::TemporalConv { .. } => OpKind::TemporalConv,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the leaves, indexed by [`Var`], produced by [`Tape::backward`].
/// Intermediate nodes are dropped once propagated.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like it when nothing flowed back.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, d) in g.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), delta)),
    }
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

    /// Records a value that gradients are computed for.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a value that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Active/inactive pattern of every ReLU on the tape, in recording order.
    /// Two evaluations with different patterns straddle a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| n.op.kind() == OpKind::Relu)
            .flat_map(|n| n.value.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    /// First recorded node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(Var, OpKind)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (Var(i), n.op.kind()))
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn dims5(&self, v: Var) -> Result<[usize; 5]> {
        self.value(v).clip_dims()
    }

    // ---- structural and elementwise -------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    /// Sum of `x * weights` for a constant weight tensor; a common probe scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let w = self.constant(weights.clone());
        let p = self.mul(x, w)?;
        Ok(self.sum(p))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(value, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            data.extend(kernels::matmul(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let value = Tensor::from_parts(vec![batch, m, n], data);
        Ok(self.push(value, Op::Bmm { a, b, batch, m, k, n }, &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(Error::Contract(format!(
                "transpose needs rank >= 2, got {:?}",
                t.shape()
            )));
        }
        let value = transpose_last2(t);
        Ok(self.push(value, Op::Transpose { x }, &[x]))
    }

    /// Adds `bias [K]` to every slice along the last axis of `x [..., K]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let k = *sx.last().unwrap();
        if sb != [k] {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(k) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `x W^T + b` for `x [M, in]`, `W [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ---- nonlinearities --------------------------------------------------

    /// Softmax over the last axis, stabilised by subtracting the slice maximum.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.all_finite() {
            return Err(Error::Numeric("softmax input".into()));
        }
        let value = softmax_rows(t);
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x }, &[x])
    }

    // ---- convolutions and pooling over clips -----------------------------

    /// 1x1 convolution: `W [Cout, Cin]` applied at every `(n, t, h, w)`.
    pub fn pointwise_linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let [n, t, cin, h, wd] = self.dims5(x)?;
        let sw = self.shape(w);
        if sw.len() != 2 || sw[1] != cin {
            return Err(Error::dim("pointwise_linear", self.shape(x), sw));
        }
        let cout = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim("pointwise_linear bias", sw, self.shape(b)));
            }
        }
        let data = kernels::pointwise_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            n * t,
            cin,
            cout,
            h * wd,
        );
        let value = Tensor::from_parts(vec![n, t, cout, h, wd], data);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(value, Op::PointwiseLinear { x, w, bias }, &inputs))
    }

    /// 3x3 cross-correlation per frame with one pixel of zero padding.
    pub fn conv2d_3x3(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let [n, t, cin, h, wd] = self.dims5(x)?;
        let sw = self.shape(w);
        if sw.len() != 4 || sw[1] != cin || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::dim("conv2d_3x3", self.shape(x), sw));
        }
        if stride == 0 {
            return Err(Error::Contract("conv stride must be positive".into()));
        }
        let geom = Conv3 {
            cin,
            cout: sw[0],
            h,
            w: wd,
            stride,
        };
        let data = geom.forward(self.value(x).data(), self.value(w).data(), n * t);
        let value = Tensor::from_parts(vec![n, t, geom.cout, geom.out_h(), geom.out_w()], data);
        Ok(self.push(value, Op::Conv3x3 { x, w, geom }, &[x, w]))
    }

    /// Keeps every `stride`-th row and column.
    pub fn subsample_spatial(&mut self, x: Var, stride: usize) -> Result<Var> {
        let [n, t, c, h, w] = self.dims5(x)?;
        if stride == 0 {
            return Err(Error::Contract("subsample stride must be positive".into()));
        }
        if stride == 1 {
            return Ok(x);
        }
        let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * t * c * ho * wo);
        for plane in src.chunks(h * w) {
            for oy in 0..ho {
                for ox in 0..wo {
                    data.push(plane[oy * stride * w + ox * stride]);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, t, c, ho, wo], data);
        Ok(self.push(value, Op::Subsample { x, stride }, &[x]))
    }

    /// Mean over `H x W`: `[N,T,C,H,W] -> [N,T,C]`.
    pub fn global_avg_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let [n, t, c, h, w] = self.dims5(x)?;
        let p = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f64>() / p)
            .collect();
        let value = Tensor::from_parts(vec![n, t, c], data);
        Ok(self.push(value, Op::GapSpatial { x }, &[x]))
    }

    /// Mean over the temporal axis: `[N,T,C] -> [N,C]`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let [n, t, c] = s[..] else {
            return Err(Error::Contract(format!("mean_time expects [N,T,C], got {s:?}")));
        };
        let src = self.value(x).data();
        let mut data = vec![0.0; n * c];
        for b in 0..n {
            for ti in 0..t {
                for ci in 0..c {
                    data[b * c + ci] += src[(b * t + ti) * c + ci];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= t as f64);
        let value = Tensor::from_parts(vec![n, c], data);
        Ok(self.push(value, Op::MeanTime { x }, &[x]))
    }

    /// `x [N,T,C,H,W] * gate [N,T,C]`, broadcast over space.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [n, t, c, h, w] = self.dims5(x)?;
        if self.shape(gate) != [n, t, c] {
            return Err(Error::dim("scale_channels", self.shape(x), self.shape(gate)));
        }
        let g = self.value(gate).data();
        let mut value = self.value(x).clone();
        for (plane, &gv) in value.data_mut().chunks_mut(h * w).zip(g) {
            plane.iter_mut().for_each(|v| *v *= gv);
        }
        Ok(self.push(value, Op::ScaleChannels { x, gate }, &[x, gate]))
    }

    /// `x [N,T,C,H,W] * map [N,T,H,W]`, broadcast over channels.
    pub fn scale_positions(&mut self, x: Var, map: Var) -> Result<Var> {
        let [n, t, c, h, w] = self.dims5(x)?;
        if self.shape(map) != [n, t, h, w] {
            return Err(Error::dim("scale_positions", self.shape(x), self.shape(map)));
        }
        let p = h * w;
        let m = self.value(map).data();
        let mut value = self.value(x).clone();
        for (f, frame) in value.data_mut().chunks_mut(c * p).enumerate() {
            let mf = &m[f * p..(f + 1) * p];
            for plane in frame.chunks_mut(p) {
                for (v, &mv) in plane.iter_mut().zip(mf) {
                    *v *= mv;
                }
            }
        }
        Ok(self.push(value, Op::ScalePositions { x, map }, &[x, map]))
    }

    /// Cosine similarity of channel vectors at each position of adjacent
    /// frames: `[N,T,C,H,W] -> [N,T-1,H,W]`. Positions where both vectors have
    /// norm below `1e-8` are defined as fully similar.
    pub fn pointwise_cosine(&mut self, x: Var) -> Result<Var> {
        let [n, t, c, h, w] = self.dims5(x)?;
        if t < 2 {
            return Err(Error::Contract(format!(
                "adjacent-frame similarity needs T >= 2, got T = {t}"
            )));
        }
        let data = kernels::cosine_forward(self.value(x).data(), [n, t, c, h * w]);
        let value = Tensor::from_parts(vec![n, t - 1, h, w], data);
        Ok(self.push(value, Op::Cosine { x }, &[x]))
    }

    /// Appends a copy of the last temporal slice (axis 1).
    pub fn extend_last_frame(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Contract(format!("extend_last_frame needs rank >= 2, got {s:?}")));
        }
        let (n, t) = (s[0], s[1]);
        let frame: usize = s[2..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * (t + 1) * frame);
        for b in 0..n {
            let clip = &src[b * t * frame..(b + 1) * t * frame];
            data.extend_from_slice(clip);
            data.extend_from_slice(&clip[(t - 1) * frame..]);
        }
        let mut shape = s;
        shape[1] = t + 1;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::ExtendLast { x }, &[x]))
    }

    /// Depthwise temporal convolution with kernel `[C, K]`, zero padded.
    pub fn temporal_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let [n, t, c, h, w] = self.dims5(x)?;
        let sk = self.shape(kernel);
        if sk.len() != 2 || sk[0] != c || sk[1] % 2 == 0 {
            return Err(Error::dim("temporal_conv", self.shape(x), sk));
        }
        let k = sk[1];
        let data = kernels::temporal_conv_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            [n, t, c, h * w],
            k,
        );
        let value = Tensor::from_parts(vec![n, t, c, h, w], data);
        Ok(self.push(value, Op::TemporalConv { x, kernel }, &[x, kernel]))
    }

    /// Mean cross-entropy of `logits [N, K]` against integer labels.
    pub fn cross_entropy_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        let [n, k] = s[..] else {
            return Err(Error::Contract(format!("logits must be [N, K], got {s:?}")));
        };
        if labels.len() != n {
            return Err(Error::dim("cross_entropy_loss", s, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index { index: bad, bound: k });
        }
        let lv = self.value(logits);
        if !lv.all_finite() {
            return Err(Error::Numeric("cross-entropy logits".into()));
        }
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (row, &l) in lv.data().chunks(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let value = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: probs.into_data(),
            },
            &[logits],
        ))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every recorded value
    /// that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss does not belong to this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if self.wants(v) {
            accumulate(grads, v, self.shape(v), delta);
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Reshape { x } => self.send(grads, *x, gd.to_vec()),
            Op::Add { a, b } => {
                self.send(grads, *a, gd.to_vec());
                self.send(grads, *b, gd.to_vec());
            }
            Op::Sub { a, b } => {
                self.send(grads, *a, gd.to_vec());
                self.send(grads, *b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.send(grads, *a, gd.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.wants(*b) {
                    self.send(grads, *b, gd.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Affine { x, scale } => {
                self.send(grads, *x, gd.iter().map(|v| v * scale).collect())
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.send(grads, *x, vec![gd[0]; n]);
            }
            Op::Matmul { a, b, m, k, n } => {
                let (da, db) = kernels::matmul_backward(
                    self.value(*a).data(),
                    self.value(*b).data(),
                    gd,
                    *m,
                    *k,
                    *n,
                );
                self.send(grads, *a, da);
                self.send(grads, *b, db);
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = Vec::with_capacity(batch * m * k);
                let mut db = Vec::with_capacity(batch * k * n);
                for i in 0..*batch {
                    let (x, y) = kernels::matmul_backward(
                        &av[i * m * k..(i + 1) * m * k],
                        &bv[i * k * n..(i + 1) * k * n],
                        &gd[i * m * n..(i + 1) * m * n],
                        *m,
                        *k,
                        *n,
                    );
                    da.extend(x);
                    db.extend(y);
                }
                self.send(grads, *a, da);
                self.send(grads, *b, db);
            }
            Op::Transpose { x } => self.send(grads, *x, transpose_last2(g).into_data()),
            Op::AddBias { x, bias } => {
                self.send(grads, *x, gd.to_vec());
                if self.wants(*bias) {
                    let k = self.value(*bias).len();
                    let mut db = vec![0.0; k];
                    for row in gd.chunks(k) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.send(grads, *bias, db);
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(k).zip(y.chunks(k)).zip(gd.chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                self.send(
                    grads,
                    *x,
                    gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect(),
                );
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                self.send(
                    grads,
                    *x,
                    gd.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::PointwiseLinear { x, w, bias } => {
                let [n, t, cin, h, wd] = self.value(*x).clip_dims().unwrap();
                let cout = self.shape(*w)[0];
                let (dx, dw, db) = kernels::pointwise_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    n * t,
                    cin,
                    cout,
                    h * wd,
                );
                self.send(grads, *x, dx);
                self.send(grads, *w, dw);
                if let Some(b) = bias {
                    self.send(grads, *b, db);
                }
            }
            Op::Conv3x3 { x, w, geom } => {
                let [n, t, ..] = self.value(*x).clip_dims().unwrap();
                let (dx, dw) =
                    geom.backward(self.value(*x).data(), self.value(*w).data(), gd, n * t);
                self.send(grads, *x, dx);
                self.send(grads, *w, dw);
            }
            Op::Subsample { x, stride } => {
                let [_, _, _, h, w] = self.value(*x).clip_dims().unwrap();
                let [_, _, _, ho, wo] = node.value.clip_dims().unwrap();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (plane, gp) in dx.chunks_mut(h * w).zip(gd.chunks(ho * wo)) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            plane[oy * stride * w + ox * stride] += gp[oy * wo + ox];
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::GapSpatial { x } => {
                let [_, _, _, h, w] = self.value(*x).clip_dims().unwrap();
                let p = h * w;
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for &gv in gd {
                    dx.extend(std::iter::repeat(gv / p as f64).take(p));
                }
                self.send(grads, *x, dx);
            }
            Op::MeanTime { x } => {
                let [n, t, c] = self.shape(*x)[..] else { unreachable!() };
                let mut dx = vec![0.0; n * t * c];
                for b in 0..n {
                    for ti in 0..t {
                        for ci in 0..c {
                            dx[(b * t + ti) * c + ci] = gd[b * c + ci] / t as f64;
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::ScaleChannels { x, gate } => {
                let [_, _, _, h, w] = self.value(*x).clip_dims().unwrap();
                let p = h * w;
                let gate_v = self.value(*gate).data();
                let xv = self.value(*x).data();
                if self.wants(*x) {
                    let mut dx = gd.to_vec();
                    for (plane, &a) in dx.chunks_mut(p).zip(gate_v) {
                        plane.iter_mut().for_each(|v| *v *= a);
                    }
                    self.send(grads, *x, dx);
                }
                if self.wants(*gate) {
                    let dg = gd
                        .chunks(p)
                        .zip(xv.chunks(p))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                        .collect();
                    self.send(grads, *gate, dg);
                }
            }
            Op::ScalePositions { x, map } => {
                let [_, _, c, h, w] = self.value(*x).clip_dims().unwrap();
                let p = h * w;
                let mv = self.value(*map).data();
                let xv = self.value(*x).data();
                let mut dx = vec![0.0; xv.len()];
                let mut dm = vec![0.0; mv.len()];
                for f in 0..mv.len() / p {
                    let mf = &mv[f * p..(f + 1) * p];
                    let dmf = &mut dm[f * p..(f + 1) * p];
                    for ci in 0..c {
                        let off = (f * c + ci) * p;
                        for i in 0..p {
                            dx[off + i] = gd[off + i] * mf[i];
                            dmf[i] += gd[off + i] * xv[off + i];
                        }
                    }
                }
                self.send(grads, *x, dx);
                self.send(grads, *map, dm);
            }
            Op::Cosine { x } => {
                let [n, t, c, h, w] = self.value(*x).clip_dims().unwrap();
                let dx = kernels::cosine_backward(self.value(*x).data(), gd, [n, t, c, h * w]);
                self.send(grads, *x, dx);
            }
            Op::ExtendLast { x } => {
                let s = self.shape(*x);
                let (n, t) = (s[0], s[1]);
                let frame: usize = s[2..].iter().product();
                let mut dx = Vec::with_capacity(n * t * frame);
                for b in 0..n {
                    let clip = &gd[b * (t + 1) * frame..(b + 1) * (t + 1) * frame];
                    let start = dx.len();
                    dx.extend_from_slice(&clip[..t * frame]);
                    let last = &mut dx[start + (t - 1) * frame..start + t * frame];
                    for (d, v) in last.iter_mut().zip(&clip[t * frame..]) {
                        *d += v;
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::TemporalConv { x, kernel } => {
                let [n, t, c, h, w] = self.value(*x).clip_dims().unwrap();
                let k = self.shape(*kernel)[1];
                let (dx, dk) = kernels::temporal_conv_backward(
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    gd,
                    [n, t, c, h * w],
                    k,
                );
                self.send(grads, *x, dx);
                self.send(grads, *kernel, dk);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let [n, t, c, h, w] = self.value(*x).clip_dims().unwrap();
                let p = h * w;
                let m = (n * t * p) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (idx, plane) in gd.chunks(p).enumerate() {
                    let ci = idx % c;
                    let xh = &xhat[idx * p..(idx + 1) * p];
                    sum_g[ci] += plane.iter().sum::<f64>();
                    sum_gx[ci] += plane.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for (idx, (dplane, gplane)) in dx.chunks_mut(p).zip(gd.chunks(p)).enumerate() {
                        let ci = idx % c;
                        let xh = &xhat[idx * p..(idx + 1) * p];
                        let scale = gam[ci] * inv_std[ci];
                        if *training {
                            let (mg, mgx) = (sum_g[ci] / m, sum_gx[ci] / m);
                            for ((d, &gv), &xv) in dplane.iter_mut().zip(gplane).zip(xh) {
                                *d = scale * (gv - mg - xv * mgx);
                            }
                        } else {
                            for (d, &gv) in dplane.iter_mut().zip(gplane) {
                                *d = scale * gv;
                            }
                        }
                    }
                    self.send(grads, *x, dx);
                }
                self.send(grads, *gamma, sum_gx);
                self.send(grads, *beta, sum_g);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let n = labels.len() as f64;
                let mut dx = probs.clone();
                for (row, &l) in dx.chunks_mut(k).zip(labels) {
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gd[0] / n);
                }
                self.send(grads, *logits, dx);
            }
        }
    }
}

/// Logistic function, kept inside the open interval `(0, 1)` even where the
/// exact value rounds to 0 or 1 in `f64`.
pub(crate) fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let k = *t.shape().last().unwrap();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let r = s.len();
    let (rows, cols) = (s[r - 2], s[r - 1]);
    let batch = t.len() / (rows * cols);
    let src = t.data();
    let mut data = vec![0.0; t.len()];
    for b in 0..batch {
        let off = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                data[off + j * rows + i] = src[off + i * cols + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_parts(shape, data)
}
