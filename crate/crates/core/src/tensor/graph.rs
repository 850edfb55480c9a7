//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends one node
//! holding its output value and whatever the backward rule needs; node ids are
//! therefore already a topological order, and [`Graph::backward`] is a single
//! reverse sweep.

use rand::Rng;

use super::conv::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    BceWithLogits,
    L1,
    Mse,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    InstanceNorm { x: Var, scale: Var, shift: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    Act { x: Var, kind: Activation },
    Concat { a: Var, b: Var },
    Loss { kind: LossKind, pred: Var, target: Var },
    Dropout { x: Var, multiplier: Vec<f32> },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f32 },
    Mean { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one optional gradient buffer per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Like [`Gradients::get`] but reports unreachable nodes as all-zero.
    pub fn get_or_zeros(&self, v: Var) -> Vec<f32> {
        self.get(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.requires_grad = needs_grad;
        value.grad = None;
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf node; gradients flow into it when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies `v`'s value into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn conv_geom(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Result<ConvGeom> {
        let [n, xc, h, wd] = self.value(x).dims4(op)?;
        let [w0, w1, kh, kw] = self.value(w).dims4(op)?;
        if kh != kw {
            return Err(shape_err(op, format!("kernel must be square, got {kh}x{kw}")));
        }
        let (wc_in, c_out) = if transposed { (w0, w1) } else { (w1, w0) };
        if xc != wc_in {
            return Err(shape_err(
                op,
                format!("input has {xc} channels, weight expects {wc_in}"),
            ));
        }
        if self.value(b).shape() != [c_out] {
            return Err(shape_err(
                op,
                format!("bias shape {:?}, expected [{c_out}]", self.value(b).shape()),
            ));
        }
        let k = kh;
        Ok(if transposed {
            let oh = conv::conv_transpose2d_output_size(h, k, stride, pad)?;
            let ow = conv::conv_transpose2d_output_size(wd, k, stride, pad)?;
            // Geometry of the adjoint convolution: its input is our output.
            ConvGeom { n, cin: c_out, cout: xc, h: oh, w: ow, oh: h, ow: wd, k, stride, pad }
        } else {
            let oh = conv::conv2d_output_size(h, k, stride, pad)?;
            let ow = conv::conv2d_output_size(wd, k, stride, pad)?;
            ConvGeom { n, cin: xc, cout: c_out, h, w: wd, oh, ow, k, stride, pad }
        })
    }

    /// 2-D cross-correlation with zero padding. `w` is `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom("conv2d", x, w, b, stride, pad, false)?;
        let y = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            Some(self.value(b).data()),
        );
        let out = Tensor::new(vec![geom.n, geom.cout, geom.oh, geom.ow], y)?;
        let needs = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, needs))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`]. `w` is `[Cin, Cout, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = self.conv_geom("conv_transpose2d", x, w, b, stride, pad, true)?;
        let mut y = conv::backward_input(&geom, self.value(x).data(), self.value(w).data());
        let bias = self.value(b).data();
        let plane = geom.h * geom.w;
        for (i, chunk) in y.chunks_mut(plane).enumerate() {
            let bv = bias[i % geom.cin];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let out = Tensor::new(vec![geom.n, geom.cin, geom.h, geom.w], y)?;
        let needs = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }, needs))
    }

    /// Per-sample, per-channel standardization followed by an affine map.
    pub fn instance_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(TensorError::Domain { op: "instance_norm", detail: format!("eps {eps}") });
        }
        let [n, c, h, w] = self.value(x).dims4("instance_norm")?;
        for p in [scale, shift] {
            if self.value(p).shape() != [c] {
                return Err(shape_err(
                    "instance_norm",
                    format!("affine parameter shape {:?}, expected [{c}]", self.value(p).shape()),
                ));
            }
        }
        let plane = h * w;
        let xs = self.value(x).data();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut xhat = vec![0.0f32; xs.len()];
        let mut inv_std = vec![0.0f32; n * c];
        let mut y = vec![0.0f32; xs.len()];
        for (i, chunk) in xs.chunks(plane).enumerate() {
            let ch = i % c;
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let var =
                chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            inv_std[i] = inv as f32;
            for j in 0..plane {
                let xh = ((chunk[j] as f64 - mean) * inv) as f32;
                xhat[i * plane + j] = xh;
                y[i * plane + j] = gamma[ch] * xh + beta[ch];
            }
        }
        let out = Tensor::new(vec![n, c, h, w], y)?;
        let needs = self.any_grad(&[x, scale, shift]);
        Ok(self.push(out, Op::InstanceNorm { x, scale, shift, xhat, inv_std }, needs))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        if let Activation::LeakyRelu(slope) = kind {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(TensorError::Domain {
                    op: "leaky_relu",
                    detail: format!("slope {slope} outside (0, 1)"),
                });
            }
        }
        let out = self.value(x).map(|v| match kind {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
        });
        let needs = self.any_grad(&[x]);
        Ok(self.push(out, Op::Act { x, kind }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4("concat_channels")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(shape_err(
                "concat_channels",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for s in 0..na {
            data.extend_from_slice(&da[s * ca * plane..(s + 1) * ca * plane]);
            data.extend_from_slice(&db[s * cb * plane..(s + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, needs))
    }

    /// Mean loss over all elements, returned as a one-element tensor.
    pub fn loss(&mut self, kind: LossKind, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(shape_err("loss", format!("pred {:?} vs target {:?}", p.shape(), t.shape())));
        }
        if kind == LossKind::BceWithLogits && t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(TensorError::Domain {
                op: "bce_with_logits",
                detail: "targets must lie in [0, 1]".into(),
            });
        }
        let sum: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&x, &y)| {
                let (x, y) = (x as f64, y as f64);
                match kind {
                    LossKind::BceWithLogits => x.max(0.0) - x * y + (-x.abs()).exp().ln_1p(),
                    LossKind::L1 => (x - y).abs(),
                    LossKind::Mse => (x - y) * (x - y),
                }
            })
            .sum();
        let value = (sum / p.len() as f64) as f32;
        let needs = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(value), Op::Loss { kind, pred, target }, needs))
    }

    pub fn bce_with_logits(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.loss(LossKind::BceWithLogits, pred, target)
    }

    pub fn l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.loss(LossKind::L1, pred, target)
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.loss(LossKind::Mse, pred, target)
    }

    /// Inverted dropout: in training mode zeroes each element with probability
    /// `p` and scales survivors by `1/(1-p)`; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f32,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Domain { op: "dropout", detail: format!("p = {p}") });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let multiplier: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&multiplier).map(|(v, m)| v * m).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        let needs = self.any_grad(&[x]);
        Ok(self.push(out, Op::Dropout { x, multiplier }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        let needs = self.any_grad(&[x]);
        Ok(self.push(out, Op::Scale { x, factor }, needs))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(m as f32), Op::Mean { x }, needs))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if root.needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut send = |v: Var, contrib: Vec<f32>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                if self.nodes[x.0].needs_grad {
                    send(*x, conv::backward_input(geom, g, val(*w)));
                }
                if self.nodes[w.0].needs_grad {
                    send(*w, conv::backward_weight(geom, val(*x), g));
                }
                send(*b, conv::backward_bias(geom.n, geom.cout, geom.oh * geom.ow, g));
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                // `geom` describes the adjoint conv, whose input is our output.
                if self.nodes[x.0].needs_grad {
                    send(*x, conv::forward(geom, g, val(*w), None));
                }
                if self.nodes[w.0].needs_grad {
                    send(*w, conv::backward_weight(geom, g, val(*x)));
                }
                send(*b, conv::backward_bias(geom.n, geom.cin, geom.h * geom.w, g));
            }
            Op::InstanceNorm { x, scale, shift, xhat, inv_std } => {
                let c = self.nodes[scale.0].value.len();
                let plane = xhat.len() / inv_std.len();
                let gamma = val(*scale);
                let mut g_gamma = vec![0.0f32; c];
                let mut g_beta = vec![0.0f32; c];
                let mut gx = vec![0.0f32; g.len()];
                let m = plane as f32;
                for (i, &inv) in inv_std.iter().enumerate() {
                    let ch = i % c;
                    let gs = &g[i * plane..][..plane];
                    let xs = &xhat[i * plane..][..plane];
                    let mut sum_g = 0.0f32;
                    let mut sum_gx = 0.0f32;
                    for (&gv, &xh) in gs.iter().zip(xs) {
                        sum_g += gv;
                        sum_gx += gv * xh;
                    }
                    g_beta[ch] += sum_g;
                    g_gamma[ch] += sum_gx;
                    let k = gamma[ch] * inv / m;
                    for j in 0..plane {
                        gx[i * plane + j] = k * (m * gs[j] - sum_g - xs[j] * sum_gx);
                    }
                }
                send(*x, gx);
                send(*scale, g_gamma);
                send(*shift, g_beta);
            }
            Op::Act { x, kind } => {
                let xs = val(*x);
                let ys = node.value.data();
                let gx = g
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(&gv, (&xv, &yv))| {
                        gv * match kind {
                            Activation::Relu => (xv > 0.0) as u8 as f32,
                            Activation::LeakyRelu(s) => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    *s
                                }
                            }
                            Activation::Tanh => 1.0 - yv * yv,
                            Activation::Sigmoid => yv * (1.0 - yv),
                        }
                    })
                    .collect();
                send(*x, gx);
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.nodes[a.0].value.dims4("concat").expect("rank 4");
                let cb = self.nodes[b.0].value.shape()[1];
                let plane = h * w;
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for s in 0..n {
                    let base = s * (ca + cb) * plane;
                    ga.extend_from_slice(&g[base..base + ca * plane]);
                    gb.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Loss { kind, pred, target } => {
                let (ps, ts) = (val(*pred), val(*target));
                let k = g[0] / ps.len() as f32;
                let (gp, gt): (Vec<f32>, Vec<f32>) = ps
                    .iter()
                    .zip(ts)
                    .map(|(&x, &y)| match kind {
                        LossKind::BceWithLogits => (k * (sigmoid(x) - y), -k * x),
                        LossKind::L1 => {
                            let s = sign(x - y);
                            (k * s, -k * s)
                        }
                        LossKind::Mse => (2.0 * k * (x - y), -2.0 * k * (x - y)),
                    })
                    .unzip();
                send(*pred, gp);
                send(*target, gt);
            }
            Op::Dropout { x, multiplier } => {
                send(*x, g.iter().zip(multiplier).map(|(a, m)| a * m).collect());
            }
            Op::Add { a, b } => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Scale { x, factor } => {
                send(*x, g.iter().map(|v| v * factor).collect());
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.len();
                send(*x, vec![g[0] / n as f32; n]);
            }
        }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
