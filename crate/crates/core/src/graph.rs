//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` walks it once in reverse.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{conv, linear, norm, pool};
use crate::tensor::{image_shape, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const LOG_CLAMP: f64 = 1e-12;

static CORRUPT_MODULATE_BACKWARD: AtomicBool = AtomicBool::new(false);

/// Test hook: makes the modulation backward rule wrong on purpose so the
/// gradient suite can prove it notices.
#[doc(hidden)]
pub fn set_corrupt_modulate_backward(on: bool) {
    CORRUPT_MODULATE_BACKWARD.store(on, Ordering::SeqCst);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: conv::Geometry,
    },
    Deconv2d {
        x: Var,
        w: Var,
        geom: conv::Geometry,
    },
    MaxPool {
        x: Var,
        geom: pool::PoolGeometry,
        arg: Vec<u32>,
    },
    GlobalAvgPool {
        x: Var,
        hw: usize,
        c: usize,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Softmax(Var),
    Concat {
        a: Var,
        b: Var,
        ca: usize,
        cb: usize,
    },
    FullyConnected {
        x: Var,
        w: Var,
        b: Var,
        n_in: usize,
        n_out: usize,
    },
    CrossEntropy {
        p: Var,
        labels: Vec<usize>,
        classes: usize,
    },
    Modulate {
        y: Var,
        a: Var,
        channels: usize,
        broadcast: bool,
    },
    MaskedNll {
        y: Var,
        mask: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
        pixels: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mul(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::GlobalAvgPool { .. } => "global_avgpool",
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batchnorm",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::Concat { .. } => "concat_channels",
            Op::FullyConnected { .. } => "fully_connected",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Modulate { .. } => "modulate",
            Op::MaskedNll { .. } => "masked_nll_loss",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mul(..) => "mul",
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    retain: bool,
    op: Op,
}

/// A single-use computation graph. Not `Sync`; may be moved across threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            retain: false,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            retain: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keeps the gradient of an intermediate node after `backward`.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let xv = self.value(x);
        let (n, h, wd, ci) = xv.nhwc(OP)?;
        let batched = xv.rank() == 4;
        let ws = self.value(w).shape().to_vec();
        let [k, k2, wci, co] = ws[..] else {
            return Err(Error::shape(OP, format!("kernel must be [k,k,Cin,Cout], got {ws:?}")));
        };
        if k != k2 || k == 0 {
            return Err(Error::shape(OP, format!("kernel must be square and non-empty, got {ws:?}")));
        }
        if wci != ci {
            return Err(Error::shape(OP, format!("Cin: input has {ci} channels, kernel expects {wci}")));
        }
        if self.value(b).shape() != [co] {
            return Err(Error::shape(OP, format!("Cout: bias shape {:?}, expected [{co}]", self.value(b).shape())));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be at least 1"));
        }
        let ho = out_dim(h, k, stride, padding).ok_or_else(|| Error::shape(OP, format!("H: {h} with padding {padding} is smaller than kernel {k}")))?;
        let wo = out_dim(wd, k, stride, padding).ok_or_else(|| Error::shape(OP, format!("W: {wd} with padding {padding} is smaller than kernel {k}")))?;
        let geom = conv::Geometry {
            n,
            big_h: h,
            big_w: wd,
            big_c: ci,
            small_h: ho,
            small_w: wo,
            small_c: co,
            k,
            stride,
            pad: padding,
        };
        let out = conv::conv2d_forward(xv.data(), self.value(w).data(), self.value(b).data(), &geom);
        let value = Tensor::new(&image_shape(batched, n, ho, wo, co), out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Transposed convolution with kernel `[k, k, Cout, Cin]`; the output is
    /// `(H - 1) * stride + k` on each side.
    pub fn deconv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.deconv2d_padded(x, w, stride, (0, 0))
    }

    /// Transposed convolution with extra trailing rows and columns
    /// (`output_padding < stride`) that receive no taps.
    pub fn deconv2d_padded(&mut self, x: Var, w: Var, stride: usize, output_padding: (usize, usize)) -> Result<Var> {
        const OP: &str = "deconv2d";
        let xv = self.value(x);
        let (n, h, wd, ci) = xv.nhwc(OP)?;
        let batched = xv.rank() == 4;
        let ws = self.value(w).shape().to_vec();
        let [k, k2, co, wci] = ws[..] else {
            return Err(Error::shape(OP, format!("kernel must be [k,k,Cout,Cin], got {ws:?}")));
        };
        if k != k2 || k == 0 {
            return Err(Error::shape(OP, format!("kernel must be square and non-empty, got {ws:?}")));
        }
        if wci != ci {
            return Err(Error::shape(OP, format!("Cin: input has {ci} channels, kernel expects {wci}")));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be at least 1"));
        }
        if h == 0 || wd == 0 {
            return Err(Error::shape(OP, "empty spatial extent"));
        }
        let (oph, opw) = output_padding;
        if oph >= stride || opw >= stride {
            return Err(Error::invalid(OP, format!("output padding {output_padding:?} must be below stride {stride}")));
        }
        let ho = (h - 1) * stride + k + oph;
        let wo = (wd - 1) * stride + k + opw;
        let geom = conv::Geometry {
            n,
            big_h: ho,
            big_w: wo,
            big_c: co,
            small_h: h,
            small_w: wd,
            small_c: ci,
            k,
            stride,
            pad: 0,
        };
        let out = conv::deconv2d_forward(xv.data(), self.value(w).data(), &geom);
        let value = Tensor::new(&image_shape(batched, n, ho, wo, co), out)?;
        Ok(self.push(value, Op::Deconv2d { x, w, geom }, &[x, w]))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        const OP: &str = "maxpool2d";
        let xv = self.value(x);
        let (n, h, w, c) = xv.nhwc(OP)?;
        let batched = xv.rank() == 4;
        if k == 0 || stride == 0 {
            return Err(Error::invalid(OP, "window and stride must be at least 1"));
        }
        if k > h || k > w {
            return Err(Error::shape(OP, format!("window {k} larger than input {h}x{w}")));
        }
        let geom = pool::PoolGeometry {
            n,
            h,
            w,
            c,
            k,
            stride,
            out_h: (h - k) / stride + 1,
            out_w: (w - k) / stride + 1,
        };
        let (out, arg) = pool::maxpool_forward(xv.data(), &geom);
        let value = Tensor::new(&image_shape(batched, n, geom.out_h, geom.out_w, c), out)?;
        Ok(self.push(value, Op::MaxPool { x, geom, arg }, &[x]))
    }

    /// `[H,W,C] -> [C]`, `[N,H,W,C] -> [N,C]`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "global_avgpool";
        let xv = self.value(x);
        let (n, h, w, c) = xv.nhwc(OP)?;
        if h == 0 || w == 0 {
            return Err(Error::shape(OP, "empty spatial extent"));
        }
        let hw = h * w;
        let mut out = vec![0.0; n * c];
        for (o, sample) in out.chunks_mut(c).zip(xv.data().chunks(hw * c)) {
            for px in sample.chunks(c) {
                for (a, &v) in o.iter_mut().zip(px) {
                    *a += v;
                }
            }
            o.iter_mut().for_each(|a| *a /= hw as f64);
        }
        let shape = if xv.rank() == 4 { vec![n, c] } else { vec![c] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x, hw, c }, &[x]))
    }

    fn check_bn_params(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = *self.value(x).shape().last().ok_or_else(|| Error::shape("batchnorm", "rank-0 input"))?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape("batchnorm", format!("{name} shape {:?}, expected [{c}]", self.value(p).shape())));
            }
        }
        Ok(c)
    }

    /// Normalizes with batch statistics over every axis but the last.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let c = self.check_bn_params(x, gamma, beta)?;
        let xv = self.value(x);
        let (mean, var) = norm::channel_stats(xv.data(), c);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let (xhat, y) = norm::normalize(xv.data(), &mean, &inv_std, self.value(gamma).data(), self.value(beta).data());
        let value = Tensor::new(xv.shape(), y)?;
        let v = self.push(value, Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]);
        Ok((v, BatchStats { mean, var }))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let c = self.check_bn_params(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batchnorm", format!("running stats must have {c} channels")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let xv = self.value(x);
        let (_, y) = norm::normalize(xv.data(), mean, &inv_std, self.value(gamma).data(), self.value(beta).data());
        let value = Tensor::new(xv.shape(), y)?;
        let op = Op::BatchNormEval { x, gamma, beta, mean: mean.to_vec(), inv_std };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        if c == 0 {
            return Err(Error::shape("softmax", "empty channel axis"));
        }
        let mut out = xv.data().to_vec();
        for fiber in out.chunks_mut(c) {
            let m = fiber.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in fiber.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            fiber.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape(OP, format!("spatial dims differ: {sa:?} vs {sb:?}")));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for (pa, pb) in da.chunks(ca.max(1)).zip(db.chunks(cb.max(1))) {
            out.extend_from_slice(pa);
            out.extend_from_slice(pb);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat { a, b, ca, cb }, &[a, b]))
    }

    /// Affine map `[N_in] -> [N_out]` (or batched `[B, N_in] -> [B, N_out]`)
    /// with weights `[N_in, N_out]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "fully_connected";
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let [n_in, n_out] = ws[..] else {
            return Err(Error::shape(OP, format!("weights must be [N,M], got {ws:?}")));
        };
        let (batch, x_in) = match xs[..] {
            [a] => (None, a),
            [bsz, a] => (Some(bsz), a),
            _ => return Err(Error::shape(OP, format!("input must be [N] or [B,N], got {xs:?}"))),
        };
        if x_in != n_in {
            return Err(Error::shape(OP, format!("input has {x_in} features, weights expect {n_in}")));
        }
        if self.value(b).shape() != [n_out] {
            return Err(Error::shape(OP, format!("bias shape {:?}, expected [{n_out}]", self.value(b).shape())));
        }
        let out = linear::fc_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), n_in);
        let shape = match batch {
            Some(bsz) => vec![bsz, n_out],
            None => vec![n_out],
        };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::FullyConnected { x, w, b, n_in, n_out }, &[x, w, b]))
    }

    /// Mean over the batch of `-ln p[label]`, with `p` clamped at 1e-12.
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let pv = self.value(p);
        let classes = *pv.shape().last().ok_or_else(|| Error::shape(OP, "rank-0 input"))?;
        let rows = pv.len() / classes.max(1);
        if rows != labels.len() || pv.rank() > 2 {
            return Err(Error::shape(OP, format!("{} labels for probabilities of shape {:?}", labels.len(), pv.shape())));
        }
        let mut loss = 0.0;
        for (row, &l) in pv.data().chunks(classes).zip(labels) {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            loss -= row[l].max(LOG_CLAMP).ln();
        }
        loss /= rows as f64;
        let op = Op::CrossEntropy { p, labels: labels.to_vec(), classes };
        Ok(self.push(Tensor::scalar(loss), op, &[p]))
    }

    /// Channel-wise multiplication `out(x,y,k) = a(x,y) · y(x,y,k)`.
    ///
    /// `a` has the spatial shape of `y` (optionally with a trailing unit
    /// channel), or a bare `[H, W]` shared by every batch element.
    pub fn modulate(&mut self, y: Var, a: Var) -> Result<Var> {
        const OP: &str = "modulate";
        let ys = self.value(y).shape().to_vec();
        let mut as_ = self.value(a).shape().to_vec();
        if as_.len() > 2 && as_.last() == Some(&1) && as_.len() == ys.len() {
            as_.pop();
        }
        if ys.len() < 3 {
            return Err(Error::shape(OP, format!("feature map must be [H,W,C] or [N,H,W,C], got {ys:?}")));
        }
        let spatial = &ys[..ys.len() - 1];
        let broadcast = if as_[..] == spatial[..] {
            false
        } else if ys.len() == 4 && as_[..] == spatial[1..] {
            true
        } else {
            return Err(Error::shape(OP, format!("attention {:?} does not match feature map {ys:?}", self.value(a).shape())));
        };
        let channels = ys[ys.len() - 1];
        let av = self.value(a).data();
        let plane = av.len();
        let mut out = self.value(y).data().to_vec();
        for (i, px) in out.chunks_mut(channels).enumerate() {
            let s = av[i % plane];
            px.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::new(&ys, out)?;
        Ok(self.push(value, Op::Modulate { y, a, channels, broadcast }, &[y, a]))
    }

    /// Per-image `-Σ m·ln Y(label) / max(1, Σ m)`, averaged over the batch.
    /// `mask` has the spatial shape of `y` without the channel axis.
    pub fn masked_nll(&mut self, y: Var, mask: &Tensor, labels: &[usize]) -> Result<Var> {
        const OP: &str = "masked_nll_loss";
        let yv = self.value(y);
        let (n, h, w, classes) = yv.nhwc(OP)?;
        if mask.len() != n * h * w {
            return Err(Error::shape(OP, format!("mask {:?} does not match map {:?}", mask.shape(), yv.shape())));
        }
        if labels.len() != n {
            return Err(Error::shape(OP, format!("{} labels for a batch of {n}", labels.len())));
        }
        let pixels = h * w;
        let mut loss = 0.0;
        for ((sample, m), &l) in yv.data().chunks(pixels * classes).zip(mask.data().chunks(pixels)).zip(labels) {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            let count: f64 = m.iter().sum();
            if count == 0.0 {
                log::warn!("masked_nll_loss: empty saliency mask, sample contributes zero loss");
                continue;
            }
            let mut s = 0.0;
            for (px, &mv) in sample.chunks(classes).zip(m) {
                if mv != 0.0 {
                    s += mv * px[l].max(LOG_CLAMP).ln();
                }
            }
            loss -= s / count.max(1.0);
        }
        loss /= n as f64;
        let op = Op::MaskedNll { y, mask: mask.data().to_vec(), labels: labels.to_vec(), classes, pixels };
        Ok(self.push(Tensor::scalar(loss), op, &[y]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Populates `dloss/dv` for every node that requires a gradient.
    ///
    /// Intermediate gradients are released once propagated unless
    /// `retain_grad` was called on the node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(shape));
        }
        // name the node where a non-finite value first appears
        if let Some(i) = (0..=loss.0).find(|&i| !self.nodes[i].value.is_finite()) {
            return Err(Error::NonFinite { op: self.nodes[i].op.name(), node: i });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let node = &self.nodes[i];
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: node.op.name(), node: i });
            }
            let contributions = self.input_grads(i, &g)?;
            if self.nodes[i].retain {
                self.nodes[i].grad = Some(g);
            }
            for (v, dg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                if self.needs(*x) {
                    out.push((*x, conv::conv2d_backward_input(g, val(*w), geom)));
                }
                if self.needs(*w) {
                    out.push((*w, conv::conv2d_backward_kernel(val(*x), g, geom)));
                }
                if self.needs(*b) {
                    out.push((*b, conv::bias_grad(g, geom.small_c)));
                }
            }
            Op::Deconv2d { x, w, geom } => {
                if self.needs(*x) {
                    out.push((*x, conv::deconv2d_backward_input(g, val(*w), geom)));
                }
                if self.needs(*w) {
                    out.push((*w, conv::deconv2d_backward_kernel(val(*x), g, geom)));
                }
            }
            Op::MaxPool { x, geom, arg } => {
                out.push((*x, pool::maxpool_backward(g, arg, geom)));
            }
            Op::GlobalAvgPool { x, hw, c } => {
                let scale = 1.0 / *hw as f64;
                let mut dx = Vec::with_capacity(g.len() * hw);
                for gs in g.chunks(*c) {
                    for _ in 0..*hw {
                        dx.extend(gs.iter().map(|v| v * scale));
                    }
                }
                out.push((*x, dx));
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let (dx, dgamma, dbeta) = norm::batchnorm_backward(g, xhat, inv_std, val(*gamma));
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let c = mean.len();
                let gm = val(*gamma);
                let xs = val(*x);
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ((d, gp), xp) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xs.chunks(c)) {
                    for j in 0..c {
                        d[j] = gp[j] * gm[j] * inv_std[j];
                        dgamma[j] += gp[j] * (xp[j] - mean[j]) * inv_std[j];
                        dbeta[j] += gp[j];
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Relu(x) => {
                let dx = g.iter().zip(val(*x)).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect();
                out.push((*x, dx));
            }
            Op::Softmax(x) => {
                let c = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((d, gp), pp) in dx.chunks_mut(c).zip(g.chunks(c)).zip(node.value.data().chunks(c)) {
                    let dot: f64 = gp.iter().zip(pp).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[j] = pp[j] * (gp[j] - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::Concat { a, b, ca, cb } => {
                let c = ca + cb;
                let px = g.len() / c.max(1);
                let mut da = Vec::with_capacity(px * ca);
                let mut db = Vec::with_capacity(px * cb);
                for gp in g.chunks(c) {
                    da.extend_from_slice(&gp[..*ca]);
                    db.extend_from_slice(&gp[*ca..]);
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::FullyConnected { x, w, b, n_in, n_out } => {
                let (dx, dw, db) = linear::fc_backward(g, val(*x), val(*w), *n_in, *n_out);
                out.push((*x, dx));
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::CrossEntropy { p, labels, classes } => {
                let pv = val(*p);
                let scale = g[0] / labels.len() as f64;
                let mut dp = vec![0.0; pv.len()];
                for (r, &l) in labels.iter().enumerate() {
                    let q = pv[r * classes + l];
                    if q > LOG_CLAMP {
                        dp[r * classes + l] = -scale / q;
                    }
                }
                out.push((*p, dp));
            }
            Op::Modulate { y, a, channels, broadcast } => {
                let (yv, av) = (val(*y), val(*a));
                let plane = av.len();
                let corrupt = CORRUPT_MODULATE_BACKWARD.load(Ordering::Relaxed);
                if self.needs(*y) {
                    // d out / d y_k = a for every channel k.
                    let mut dy = vec![0.0; g.len()];
                    for (i, (d, gp)) in dy.chunks_mut(*channels).zip(g.chunks(*channels)).enumerate() {
                        let s = av[i % plane];
                        for (dv, &gv) in d.iter_mut().zip(gp) {
                            *dv = gv * s;
                        }
                    }
                    out.push((*y, dy));
                }
                if self.needs(*a) {
                    // d out / d a = Σ_k y_k, weighted by the upstream gradient.
                    let mut da = vec![0.0; plane];
                    for (i, (gp, yp)) in g.chunks(*channels).zip(yv.chunks(*channels)).enumerate() {
                        let mut s = 0.0;
                        for (gv, yk) in gp.iter().zip(yp) {
                            s += gv * yk;
                        }
                        if corrupt {
                            s *= 0.5;
                        }
                        if *broadcast {
                            da[i % plane] += s;
                        } else {
                            da[i] = s;
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::MaskedNll { y, mask, labels, classes, pixels } => {
                let yv = val(*y);
                let n = labels.len() as f64;
                let mut dy = vec![0.0; yv.len()];
                for (s, &l) in labels.iter().enumerate() {
                    let m = &mask[s * pixels..][..*pixels];
                    let count: f64 = m.iter().sum();
                    if count == 0.0 {
                        continue;
                    }
                    let scale = g[0] / (count.max(1.0) * n);
                    for (p, &mv) in m.iter().enumerate() {
                        let idx = (s * pixels + p) * classes + l;
                        if mv != 0.0 && yv[idx] > LOG_CLAMP {
                            dy[idx] = -mv * scale / yv[idx];
                        }
                    }
                }
                out.push((*y, dy));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Sum(x) => out.push((*x, vec![g[0]; self.nodes[x.0].value.len()])),
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                out.push((*a, g.iter().zip(bv).map(|(d, v)| d * v).collect()));
                out.push((*b, g.iter().zip(av).map(|(d, v)| d * v).collect()));
            }
        }
        Ok(out)
    }
}

fn out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, finite_diff_check_many, DEFAULT_EPS};
    use crate::testutil::{random_tensor, rng};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1], &[2.0]));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[2.0]);
    }

    #[test]
    fn conv_sums_a_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[3, 3, 1]));
        let w = g.constant(Tensor::ones(&[3, 3, 1, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_reports_offending_dimension() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[3, 3, 2]));
        let w = g.constant(Tensor::ones(&[3, 3, 1, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        let err = g.conv2d(x, w, b, 1, 0).unwrap_err().to_string();
        assert!(err.contains("Cin"), "{err}");
        let w = g.constant(Tensor::ones(&[5, 5, 2, 1]));
        let err = g.conv2d(x, w, b, 1, 0).unwrap_err().to_string();
        assert!(err.contains("H:"), "{err}");
    }

    #[test]
    fn deconv_of_impulse_is_kernel() {
        let mut r = rng(11);
        let k = random_tensor(&[8, 8, 1, 1], &mut r);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 1]));
        let w = g.constant(k.clone());
        let y = g.deconv2d(x, w, 4).unwrap();
        assert_eq!(g.value(y).shape(), &[8, 8, 1]);
        assert_eq!(g.value(y).data(), k.data());
    }

    #[test]
    fn deconv_disjoint_scatter() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 2, 1]));
        let w = g.constant(Tensor::ones(&[2, 2, 1, 1]));
        let y = g.deconv2d(x, w, 2).unwrap();
        assert_eq!(g.value(y), &Tensor::ones(&[4, 4, 1]));
    }

    #[test]
    fn deconv_output_padding_must_be_below_stride() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 2, 1]));
        let w = g.constant(Tensor::ones(&[3, 3, 1, 1]));
        let y = g.deconv2d_padded(x, w, 2, (1, 0)).unwrap();
        assert_eq!(g.value(y).shape(), &[6, 5, 1]);
        assert!(g.deconv2d_padded(x, w, 2, (2, 0)).is_err());
    }

    #[test]
    fn maxpool_picks_max() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        assert!(g.maxpool2d(x, 3, 1).is_err());
    }

    #[test]
    fn maxpool_constant_input_routes_to_first_index() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[4, 4, 1], 2.5));
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 2.5));
        let s = g.sum(y);
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        // one unit of gradient per window, on the window's top-left pixel
        assert_eq!(gx.sum(), 4.0);
        for (i, &v) in gx.data().iter().enumerate() {
            let (r, c) = (i / 4, i % 4);
            assert_eq!(v, if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn avgpool_means() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2, 1], &[1.0, 3.0, 5.0, 7.0]));
        let y = g.global_avgpool(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let c = g.constant(Tensor::full(&[3, 5, 2], 0.25));
        let y = g.global_avgpool(c).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, 0.25]);
    }

    #[test]
    fn batchnorm_on_standardized_input_is_near_identity() {
        let data = [-1.5, -0.5, 0.5, 1.5];
        let mean = 0.0;
        let sd = (data.iter().map(|v: &f64| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        let x = Tensor::new(&[2, 2, 1], data.iter().map(|v| v / sd).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gamma = g.constant(Tensor::ones(&[1]));
        let beta = g.constant(Tensor::zeros(&[1]));
        let (y, stats) = g.batchnorm_train(xv, gamma, beta).unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-4);
        assert!(stats.mean[0].abs() < 1e-12 && (stats.var[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_zero_gamma_outputs_beta() {
        let mut r = rng(12);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&[3, 3, 2], &mut r));
        let gamma = g.constant(Tensor::zeros(&[2]));
        let beta = g.constant(t(&[2], &[0.3, -0.7]));
        let (y, _) = g.batchnorm_train(x, gamma, beta).unwrap();
        for px in g.value(y).data().chunks(2) {
            assert_eq!(px, &[0.3, -0.7]);
        }
    }

    #[test]
    fn batchnorm_constant_channel_is_finite() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[3, 3, 1], 4.0));
        let gamma = g.param(Tensor::ones(&[1]));
        let beta = g.param(Tensor::zeros(&[1]));
        let (y, _) = g.batchnorm_train(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().is_finite());
    }

    #[test]
    fn batchnorm_gradients() {
        let mut r = rng(13);
        let x = random_tensor(&[2, 3, 3, 2], &mut r);
        let gamma = random_tensor(&[2], &mut r);
        let beta = random_tensor(&[2], &mut r);
        let w = random_tensor(&[2, 3, 3, 2], &mut r);
        let errs = finite_diff_check_many(
            |g, v| {
                let (y, _) = g.batchnorm_train(v[0], v[1], v[2])?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                Ok(g.sum(p))
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
        let (m, v) = (vec![0.1, -0.2], vec![0.5, 2.0]);
        let errs = finite_diff_check_many(
            |g, vars| {
                let y = g.batchnorm_eval(vars[0], vars[1], vars[2], &m, &v)?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                Ok(g.sum(p))
            },
            &[x, gamma, beta],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
    }

    #[test]
    fn relu_and_softmax_basics() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[-1.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0]);
        let z = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_fibers_sum_to_one() {
        let mut r = rng(14);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&[5, 6, 11], &mut r).map(|v| 30.0 * v));
        let s = g.softmax(x).unwrap();
        for fiber in g.value(s).data().chunks(11) {
            assert!((fiber.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(fiber.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn concat_stacks_channels_and_splits_gradient() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1, 1, 1], &[2.0]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0]);
        let bad = g.constant(Tensor::zeros(&[2, 1, 1]));
        assert!(g.concat_channels(a, bad).is_err());

        let mut r = rng(15);
        let (av, bv) = (random_tensor(&[3, 2, 2], &mut r), random_tensor(&[3, 2, 3], &mut r));
        let w = random_tensor(&[3, 2, 5], &mut r);
        let mut g = Graph::new();
        let (a, b) = (g.constant(av.clone()), g.constant(bv.clone()));
        let c = g.concat_channels(a, b).unwrap();
        let joined = g.value(c).clone();
        assert_eq!(joined.slice_channels(0, 2), av);
        assert_eq!(joined.slice_channels(2, 5), bv);
        let errs = finite_diff_check_many(
            |g, v| {
                let c = g.concat_channels(v[0], v[1])?;
                let wv = g.constant(w.clone());
                let p = g.mul(c, wv)?;
                Ok(g.sum(p))
            },
            &[av, bv],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < 1e-8), "{errs:?}");
    }

    #[test]
    fn fully_connected_trivial_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, -2.0, 0.5]));
        let eye = g.constant(Tensor::from_fn(&[3, 3], |i| (i / 3 == i % 3) as u8 as f64));
        let zero_b = g.constant(Tensor::zeros(&[3]));
        let y = g.fully_connected(x, eye, zero_b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 0.5]);
        let zw = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.constant(t(&[2], &[0.25, 4.0]));
        let y = g.fully_connected(x, zw, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, 4.0]);
        let wrong = g.constant(Tensor::zeros(&[4, 2]));
        assert!(g.fully_connected(x, wrong, b).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let p = g.constant(t(&[3], &[0.0, 1.0, 0.0]));
        let l = g.cross_entropy(p, &[1]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let u = g.constant(Tensor::full(&[11], 1.0 / 11.0));
        let l = g.cross_entropy(u, &[4]).unwrap();
        assert!((g.value(l).item() - 11f64.ln()).abs() < 1e-12);
        assert!(matches!(g.cross_entropy(u, &[11]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
        let mut r = rng(16);
        let z = random_tensor(&[7], &mut r).map(|v| 3.0 * v);
        let mut g = Graph::new();
        let zv = g.param(z);
        let p = g.softmax(zv).unwrap();
        let l = g.cross_entropy(p, &[2]).unwrap();
        let probs = g.value(p).clone();
        g.backward(l).unwrap();
        let grad = g.grad(zv).unwrap();
        for k in 0..7 {
            let expected = probs.data()[k] - if k == 2 { 1.0 } else { 0.0 };
            assert!((grad.data()[k] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn sum_gradient_is_ones_and_unused_leaf_is_zero() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let unused = g.param(Tensor::ones(&[4]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert!(g.grad(w).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.grad(unused).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_twice_needs_reset() {
        let mut g = Graph::new();
        let w = g.param(Tensor::ones(&[2]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
        g.reset_grads();
        g.backward(s).unwrap();
    }

    #[test]
    fn backward_rejects_non_scalar_and_nan() {
        let mut g = Graph::new();
        let w = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(w), Err(Error::NotScalar(_))));
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1.0, 1e200]));
        let c = g.constant(t(&[2], &[1.0, 1e200]));
        let m = g.mul(w, c).unwrap();
        let s = g.sum(m);
        let err = g.backward(s).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert!(err.to_string().contains("mul"), "{err}");
    }

    #[test]
    fn finite_diff_is_exact_for_linear_and_relu_away_from_zero() {
        let mut r = rng(17);
        let x = random_tensor(&[4, 4, 2], &mut r);
        let w = random_tensor(&[4, 4, 2], &mut r);
        let e = finite_diff_check(
            |g, v| {
                let wv = g.constant(w.clone());
                let p = g.mul(v, wv)?;
                Ok(g.sum(p))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(e < 1e-10, "{e}");
        let away = x.map(|v| if v.abs() < 0.1 { 0.5 } else { v });
        let e = finite_diff_check(
            |g, v| {
                let r = g.relu(v);
                let wv = g.constant(w.clone());
                let p = g.mul(r, wv)?;
                Ok(g.sum(p))
            },
            &away,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");
        assert!(matches!(finite_diff_check(|g, v| Ok(g.relu(v)), &x, DEFAULT_EPS), Err(Error::NotScalar(_))));
    }
}
