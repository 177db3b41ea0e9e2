//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape: every operation stores its output value
//! and enough context to run its backward rule. Inputs always precede outputs,
//! so [`Graph::backward`] is a single reverse sweep that visits each node once.
//! A fresh graph is built for every forward pass.

pub mod gradcheck;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::conv::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running mean/variance buffers of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running buffers are updated.
    Train,
    /// Stored running statistics.
    Eval,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        mode: NormMode,
    },
    Prelu {
        x: Var,
        slope: Var,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    AddPrefix {
        shortcut: Var,
        main: Var,
    },
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    Square(Var),
    LogEps {
        x: Var,
        eps: T,
    },
    Sum(Var),
    DiffX(Var),
    DiffY(Var),
    AvgPool2(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Operation tape and value store for one forward/backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rank4_channels<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = t.dims4()?;
    Ok((b, c, h * w))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Learnable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, kept for `requires_grad` leaves.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clears stored gradients so that [`Graph::backward`] may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn check_finite(&self, name: &str, t: &Tensor<T>) -> Result<()> {
        if t.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "{name} produced a non-finite value"
            )))
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let out =
            conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }, &inputs))
    }

    /// Per-channel batch normalization over batch and spatial axes.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let input = self.value(x);
        let (nb, c, hw) = rank4_channels(input)?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim(format!(
                    "batch_norm {name} has shape {:?}, expected [{c}]",
                    self.value(v).shape()
                )));
            }
        }
        let n = nb * hw;
        if n == 0 {
            return Err(Error::Degenerate(
                "batch_norm channel has zero elements".into(),
            ));
        }
        let eps = T::c(BN_EPS);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        match mode {
            NormMode::Train => {
                let nf = T::c(n as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..nb {
                        s += input.data()[(b * c + ch) * hw..][..hw]
                            .iter()
                            .copied()
                            .sum::<T>();
                    }
                    let m = s / nf;
                    let mut v = T::zero();
                    for b in 0..nb {
                        for &xv in &input.data()[(b * c + ch) * hw..][..hw] {
                            v += (xv - m) * (xv - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / nf;
                }
                let mom = T::c(BN_MOMENTUM);
                let unbias = if n > 1 {
                    nf / T::c((n - 1) as f64)
                } else {
                    T::one()
                };
                for ch in 0..c {
                    let rm = &mut running.mean.data_mut()[ch];
                    *rm = (T::one() - mom) * *rm + mom * mean[ch];
                    let rv = &mut running.var.data_mut()[ch];
                    *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
                }
            }
            NormMode::Eval => {
                mean.copy_from_slice(running.mean.data());
                var.copy_from_slice(running.var.data());
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = input.clone();
        let mut out = input.clone();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        for b in 0..nb {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let h = (input.data()[i] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[i] = h;
                    out.data_mut()[i] = gs[ch] * h + bs[ch];
                }
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            &[x, gamma, beta],
        ))
    }

    /// Parametric ReLU with one learnable slope per channel.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let input = self.value(x);
        let (nb, c, hw) = rank4_channels(input)?;
        let sl = self.value(slope);
        if sl.shape() != [c] {
            return Err(Error::dim(format!(
                "prelu slope has shape {:?}, expected [{c}]",
                sl.shape()
            )));
        }
        let mut out = input.clone();
        for b in 0..nb {
            for ch in 0..c {
                let a = sl.data()[ch];
                for v in &mut out.data_mut()[(b * c + ch) * hw..][..hw] {
                    if *v <= T::zero() {
                        *v = a * *v;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Prelu { x, slope }, &[x, slope]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    /// Logistic function, evaluated in a form that cannot overflow.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Concatenates two rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (na, ca, ha, wa) = ta.dims4()?;
        let (nb, cb, hb, wb) = tb.dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::dim(format!(
                "concat_channels: {:?} and {:?} disagree outside the channel axis",
                ta.shape(),
                tb.shape()
            )));
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for n in 0..na {
            data.extend_from_slice(&ta.data()[n * ca * hw..][..ca * hw]);
            data.extend_from_slice(&tb.data()[n * cb * hw..][..cb * hw]);
        }
        let out = Tensor::from_vec(&[na, ca + cb, ha, wa], data)?;
        Ok(self.push(out, Op::Concat { a, b }, &[a, b]))
    }

    /// Channels `start..start + len` of a rank-4 tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (nb, c, h, w) = t.dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::dim(format!(
                "slice_channels {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(nb * len * hw);
        for n in 0..nb {
            data.extend_from_slice(&t.data()[(n * c + start) * hw..][..len * hw]);
        }
        let out = Tensor::from_vec(&[nb, len, h, w], data)?;
        Ok(self.push(out, Op::SliceChannels { x, start }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Skip connection: adds `shortcut` onto `main` over their shared channel
    /// prefix. Spatial extents and batch must match; the output has `main`'s shape.
    pub fn add_prefix(&mut self, shortcut: Var, main: Var) -> Result<Var> {
        let (ts, tm) = (self.value(shortcut), self.value(main));
        let (ns, cs, hs, ws) = ts.dims4()?;
        let (nm, cm, hm, wm) = tm.dims4()?;
        if (ns, hs, ws) != (nm, hm, wm) {
            return Err(Error::dim(format!(
                "skip connection between {:?} and {:?}",
                ts.shape(),
                tm.shape()
            )));
        }
        let hw = hm * wm;
        let shared = cs.min(cm);
        let mut out = tm.clone();
        for n in 0..nm {
            let src = &ts.data()[n * cs * hw..][..shared * hw];
            let dst = &mut out.data_mut()[n * cm * hw..][..shared * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        Ok(self.push(out, Op::AddPrefix { shortcut, main }, &[shortcut, main]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    /// `ln(x + eps)`; errors if any `x + eps` is not positive.
    pub fn log_eps(&mut self, x: Var, eps: T) -> Result<Var> {
        let out = self.value(x).map(|v| (v + eps).ln());
        self.check_finite("log", &out)?;
        Ok(self.push(out, Op::LogEps { x, eps }, &[x]))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::c(self.value(x).len().max(1) as f64);
        let s = self.sum(x);
        self.affine(s, T::one() / n, T::zero())
    }

    /// Forward differences along the width axis: `out[.., j] = x[.., j+1] - x[.., j]`.
    pub fn diff_x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (nb, c, h, w) = t.dims4()?;
        if w < 2 {
            return Err(Error::Degenerate("diff_x needs width >= 2".into()));
        }
        let mut out = Tensor::zeros(&[nb, c, h, w - 1]);
        let src = t.data();
        for (row, dst) in out.data_mut().chunks_mut(w - 1).enumerate() {
            let s = &src[row * w..][..w];
            for j in 0..w - 1 {
                dst[j] = s[j + 1] - s[j];
            }
        }
        Ok(self.push(out, Op::DiffX(x), &[x]))
    }

    /// Forward differences along the height axis: `out[.., i, :] = x[.., i+1, :] - x[.., i, :]`.
    pub fn diff_y(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (nb, c, h, w) = t.dims4()?;
        if h < 2 {
            return Err(Error::Degenerate("diff_y needs height >= 2".into()));
        }
        let mut out = Tensor::zeros(&[nb, c, h - 1, w]);
        let src = t.data();
        for (plane, dst) in out.data_mut().chunks_mut((h - 1) * w).enumerate() {
            let s = &src[plane * h * w..][..h * w];
            for i in 0..h - 1 {
                for j in 0..w {
                    dst[i * w + j] = s[(i + 1) * w + j] - s[i * w + j];
                }
            }
        }
        Ok(self.push(out, Op::DiffY(x), &[x]))
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (nb, c, h, w) = t.dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::dim(format!("avg_pool2 on {h}x{w} input")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[nb, c, ho, wo]);
        let quarter = T::c(0.25);
        let src = t.data();
        for (plane, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
            let s = &src[plane * h * w..][..h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let (r0, r1) = (2 * i * w, (2 * i + 1) * w);
                    dst[i * wo + j] = quarter
                        * (s[r0 + 2 * j] + s[r0 + 2 * j + 1] + s[r1 + 2 * j] + s[r1 + 2 * j + 1]);
                }
            }
        }
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    /// Reverse sweep from a scalar `loss`, storing `∂loss/∂leaf` on every
    /// `requires_grad` leaf. A second call requires [`Graph::zero_grad`] first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Autodiff(
                "loss does not depend on any requires_grad leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].requires_grad {
                    self.nodes[i].grad = Some(g);
                }
                continue;
            }
            for (input, gi) in self.backward_rule(i, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn backward_rule(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = conv::conv2d_backward(val(*x), val(*w), g, *geom)?;
                res.push((*x, gx));
                res.push((*w, gw));
                if let Some(b) = b {
                    res.push((*b, gb));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (gx, gw, gb) = conv::conv_transpose2d_backward(val(*x), val(*w), g, *geom)?;
                res.push((*x, gx));
                res.push((*w, gw));
                if let Some(b) = b {
                    res.push((*b, gb));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let (nb, c, hw) = rank4_channels(xhat)?;
                let gs = val(*gamma).data();
                let n = T::c((nb * hw) as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..nb {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for k in off..off + hw {
                            dgamma[ch] += g.data()[k] * xhat.data()[k];
                            dbeta[ch] += g.data()[k];
                        }
                    }
                }
                let mut gx = Tensor::zeros(xhat.shape());
                for b in 0..nb {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for k in off..off + hw {
                            let dxhat = g.data()[k] * gs[ch];
                            gx.data_mut()[k] = match mode {
                                NormMode::Eval => dxhat * inv_std[ch],
                                // dgamma/dbeta double as Σ g·x̂ and Σ g.
                                NormMode::Train => {
                                    inv_std[ch] / n
                                        * (n * dxhat
                                            - gs[ch] * dbeta[ch]
                                            - xhat.data()[k] * gs[ch] * dgamma[ch])
                                }
                            };
                        }
                    }
                }
                res.push((*x, gx));
                res.push((*gamma, Tensor::from_vec(&[c], dgamma)?));
                res.push((*beta, Tensor::from_vec(&[c], dbeta)?));
            }
            Op::Prelu { x, slope } => {
                let input = val(*x);
                let (nb, c, hw) = rank4_channels(input)?;
                let sl = val(*slope).data();
                let mut gx = g.clone();
                let mut gsl = vec![T::zero(); c];
                for b in 0..nb {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for k in off..off + hw {
                            let xv = input.data()[k];
                            if xv <= T::zero() {
                                gsl[ch] += g.data()[k] * xv;
                                gx.data_mut()[k] = g.data()[k] * sl[ch];
                            }
                        }
                    }
                }
                res.push((*x, gx));
                res.push((*slope, Tensor::from_vec(&[c], gsl)?));
            }
            Op::Relu(x) => {
                let gx =
                    val(*x).zip_map(g, |xv, gv| if xv > T::zero() { gv } else { T::zero() })?;
                res.push((*x, gx));
            }
            Op::Tanh(x) => {
                res.push((*x, out.zip_map(g, |y, gv| gv * (T::one() - y * y))?));
            }
            Op::Sigmoid(x) => {
                res.push((*x, out.zip_map(g, |y, gv| gv * y * (T::one() - y))?));
            }
            Op::Concat { a, b } => {
                let (na, ca, h, w) = val(*a).dims4()?;
                let cb = val(*b).shape()[1];
                let hw = h * w;
                let mut ga = Vec::with_capacity(na * ca * hw);
                let mut gb = Vec::with_capacity(na * cb * hw);
                for n in 0..na {
                    let base = n * (ca + cb) * hw;
                    ga.extend_from_slice(&g.data()[base..][..ca * hw]);
                    gb.extend_from_slice(&g.data()[base + ca * hw..][..cb * hw]);
                }
                res.push((*a, Tensor::from_vec(val(*a).shape(), ga)?));
                res.push((*b, Tensor::from_vec(val(*b).shape(), gb)?));
            }
            Op::SliceChannels { x, start } => {
                let (nb, c, h, w) = val(*x).dims4()?;
                let len = out.shape()[1];
                let hw = h * w;
                let mut gx = Tensor::zeros(val(*x).shape());
                for n in 0..nb {
                    gx.data_mut()[(n * c + start) * hw..][..len * hw]
                        .copy_from_slice(&g.data()[n * len * hw..][..len * hw]);
                }
                res.push((*x, gx));
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::AddPrefix { shortcut, main } => {
                let (ns, cs, h, w) = val(*shortcut).dims4()?;
                let cm = out.shape()[1];
                let hw = h * w;
                let shared = cs.min(cm);
                let mut gs = Tensor::zeros(val(*shortcut).shape());
                for n in 0..ns {
                    gs.data_mut()[n * cs * hw..][..shared * hw]
                        .copy_from_slice(&g.data()[n * cm * hw..][..shared * hw]);
                }
                res.push((*shortcut, gs));
                res.push((*main, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                res.push((*a, g.zip_map(val(*b), |gv, bv| gv * bv)?));
                res.push((*b, g.zip_map(val(*a), |gv, av| gv * av)?));
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                res.push((*x, g.map(|v| v * s)));
            }
            Op::Square(x) => {
                let two = T::c(2.0);
                res.push((*x, val(*x).zip_map(g, |xv, gv| two * xv * gv)?));
            }
            Op::LogEps { x, eps } => {
                let e = *eps;
                res.push((*x, val(*x).zip_map(g, |xv, gv| gv / (xv + e))?));
            }
            Op::Sum(x) => {
                res.push((*x, Tensor::full(val(*x).shape(), g.data()[0])));
            }
            Op::DiffX(x) => {
                let w = val(*x).shape()[3];
                let mut gx = Tensor::zeros(val(*x).shape());
                for (row, gr) in g.data().chunks(w - 1).enumerate() {
                    let dst = &mut gx.data_mut()[row * w..][..w];
                    for j in 0..w - 1 {
                        dst[j + 1] += gr[j];
                        dst[j] -= gr[j];
                    }
                }
                res.push((*x, gx));
            }
            Op::DiffY(x) => {
                let (_, _, h, w) = val(*x).dims4()?;
                let mut gx = Tensor::zeros(val(*x).shape());
                for (plane, gp) in g.data().chunks((h - 1) * w).enumerate() {
                    let dst = &mut gx.data_mut()[plane * h * w..][..h * w];
                    for i in 0..h - 1 {
                        for j in 0..w {
                            dst[(i + 1) * w + j] += gp[i * w + j];
                            dst[i * w + j] -= gp[i * w + j];
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::AvgPool2(x) => {
                let (_, _, h, w) = val(*x).dims4()?;
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::c(0.25);
                let mut gx = Tensor::zeros(val(*x).shape());
                for (plane, gp) in g.data().chunks(ho * wo).enumerate() {
                    let dst = &mut gx.data_mut()[plane * h * w..][..h * w];
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = quarter * gp[i * wo + j];
                            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                dst[(2 * i + di) * w + 2 * j + dj] += v;
                            }
                        }
                    }
                }
                res.push((*x, gx));
            }
        }
        Ok(res)
    }
}
