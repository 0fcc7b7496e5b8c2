use crate::error::{GraphError, Result};
use crate::kernels::{self, Window2d};
use crate::tensor::Tensor;
use crate::Real;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var, T),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Pad2d {
        x: Var,
        pad: [usize; 4],
    },
    Crop2d {
        x: Var,
        crop: [usize; 4],
    },
    BoxMean {
        x: Var,
        k: usize,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Leaf registered with [`Graph::param`].
    is_param: bool,
    /// Some parameter leaf reaches this node.
    needs_grad: bool,
}

/// Recorded forward computation for a single sample.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a parameter leaf; `None` for vars that are not
    /// parameters of the graph.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> GraphError {
    GraphError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn conv_out(extent: usize, kernel: usize, stride: usize) -> Option<usize> {
    if extent < kernel || stride == 0 {
        None
    } else {
        Some((extent - kernel) / stride + 1)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked through it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    /// Trainable leaf; [`Graph::backward`] returns its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, is_param: bool, needs_grad: bool) -> Var {
        self.consumed = false;
        self.nodes.push(Node {
            value,
            op,
            is_param,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, false, needs_grad)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(GraphError::UnknownVar(var.0))
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(mismatch(op, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.derived(out, make(a, b), &[a, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check(x)?;
        let out = self.nodes[x.0].value.map(f);
        Ok(self.derived(out, op, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn offset(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |v| v + s, Op::Offset(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            Op::Relu(x),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, coef: T) -> Result<Var> {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { v * coef },
            Op::LeakyRelu(x, coef),
        )
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if !(lo <= hi) {
            return Err(GraphError::InvalidArgument {
                op: "clamp",
                reason: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.nodes[x.0].value.sum();
        Ok(self.derived(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = &self.nodes[x.0].value;
        if v.is_empty() {
            return Err(GraphError::InvalidArgument {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let m = v.sum() / T::of(v.len() as f64);
        Ok(self.derived(Tensor::scalar(m), Op::Mean(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.nodes[x.0].value.clone().reshaped(shape)?;
        Ok(self.derived(out, Op::Reshape(x), &[x]))
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(GraphError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        for &x in xs {
            self.check(x)?;
        }
        let tail = self.nodes[first.0].value.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let v = &self.nodes[x.0].value;
            if v.shape()[1..] != tail[..] {
                return Err(mismatch(
                    "concat",
                    self.nodes[first.0].value.shape(),
                    v.shape(),
                ));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.derived(out, Op::Concat(xs.to_vec()), xs))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let v = &self.nodes[x.0].value;
        let lead = v.shape()[0];
        if start + len > lead || len == 0 {
            return Err(GraphError::InvalidArgument {
                op: "slice",
                reason: format!("rows {start}..{} out of 0..{lead}", start + len),
            });
        }
        let inner: usize = v.shape()[1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let data = v.data()[start * inner..(start + len) * inner].to_vec();
        let out = Tensor::new(shape, data)?;
        Ok(self.derived(out, Op::Slice { x, start, len }, &[x]))
    }

    /// `w[out×in] · x + b`, with `x` read as a flat vector.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if vw.shape().len() != 2 || vw.shape()[1] != vx.len() {
            return Err(mismatch("linear", vx.shape(), vw.shape()));
        }
        let (n_out, n_in) = (vw.shape()[0], vw.shape()[1]);
        if vb.shape() != [n_out] {
            return Err(mismatch("linear bias", vw.shape(), vb.shape()));
        }
        let wd = vw.data();
        let xd = vx.data();
        let data: Vec<T> = (0..n_out)
            .map(|o| kernels::dot(&wd[o * n_in..(o + 1) * n_in], xd) + vb.data()[o])
            .collect();
        let out = Tensor::new(vec![n_out], data)?;
        Ok(self.derived(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Valid (unpadded) strided convolution: `x[C×H×W]`, `w[O×C×KH×KW]`, `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let geo = conv_geometry(vx.shape(), vw.shape(), stride)
            .ok_or_else(|| mismatch("conv2d", vx.shape(), vw.shape()))?;
        let n_out = vw.shape()[0];
        if vb.shape() != [n_out] {
            return Err(mismatch("conv2d bias", vw.shape(), vb.shape()));
        }
        let p = geo.positions();
        let k = geo.patch_len();
        let mut cols = vec![T::zero(); k * p];
        kernels::im2col(vx.data(), &geo, &mut cols);
        let mut out = vec![T::zero(); n_out * p];
        for (o, chunk) in out.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v = vb.data()[o]);
        }
        kernels::matmul_acc(vw.data(), &cols, &mut out, n_out, k, p);
        let out = Tensor::new(vec![n_out, geo.out_rows, geo.out_cols], out)?;
        Ok(self.derived(out, Op::Conv2d { x, w, b, stride }, &[x, w, b]))
    }

    /// Transposed convolution: `x[C×H×W]`, `w[C×O×KH×KW]`, `b[O]`; output
    /// extent `(H−1)·stride + KH` by `(W−1)·stride + KW`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let geo = conv_transpose_geometry(vx.shape(), vw.shape(), stride)
            .ok_or_else(|| mismatch("conv_transpose2d", vx.shape(), vw.shape()))?;
        let c_in = vx.shape()[0];
        let n_out = geo.channels;
        if vb.shape() != [n_out] {
            return Err(mismatch("conv_transpose2d bias", vw.shape(), vb.shape()));
        }
        let hw = geo.positions();
        let k = geo.patch_len();
        let mut cols = vec![T::zero(); k * hw];
        kernels::matmul_at_b_acc(vw.data(), vx.data(), &mut cols, k, c_in, hw);
        let plane = geo.rows * geo.cols;
        let mut out = vec![T::zero(); n_out * plane];
        for (o, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = vb.data()[o]);
        }
        kernels::col2im_acc(&cols, &geo, &mut out);
        let out = Tensor::new(vec![n_out, geo.rows, geo.cols], out)?;
        Ok(self.derived(out, Op::ConvTranspose2d { x, w, b, stride }, &[x, w, b]))
    }

    /// Zero padding `[top, bottom, left, right]` of a `[C×H×W]` tensor.
    pub fn pad2d(&mut self, x: Var, pad: [usize; 4]) -> Result<Var> {
        self.check(x)?;
        let v = &self.nodes[x.0].value;
        let [c, h, w] = image_dims("pad2d", v.shape())?;
        let (nh, nw) = (h + pad[0] + pad[1], w + pad[2] + pad[3]);
        let mut out = vec![T::zero(); c * nh * nw];
        for ch in 0..c {
            for r in 0..h {
                let src = &v.data()[(ch * h + r) * w..(ch * h + r + 1) * w];
                let base = (ch * nh + r + pad[0]) * nw + pad[2];
                out[base..base + w].copy_from_slice(src);
            }
        }
        let out = Tensor::new(vec![c, nh, nw], out)?;
        Ok(self.derived(out, Op::Pad2d { x, pad }, &[x]))
    }

    /// Removes `[top, bottom, left, right]` borders of a `[C×H×W]` tensor.
    pub fn crop2d(&mut self, x: Var, crop: [usize; 4]) -> Result<Var> {
        self.check(x)?;
        let v = &self.nodes[x.0].value;
        let [c, h, w] = image_dims("crop2d", v.shape())?;
        if crop[0] + crop[1] >= h || crop[2] + crop[3] >= w {
            return Err(GraphError::InvalidArgument {
                op: "crop2d",
                reason: format!("crop {crop:?} leaves nothing of {h}×{w}"),
            });
        }
        let (nh, nw) = (h - crop[0] - crop[1], w - crop[2] - crop[3]);
        let mut out = Vec::with_capacity(c * nh * nw);
        for ch in 0..c {
            for r in 0..nh {
                let base = (ch * h + r + crop[0]) * w + crop[2];
                out.extend_from_slice(&v.data()[base..base + nw]);
            }
        }
        let out = Tensor::new(vec![c, nh, nw], out)?;
        Ok(self.derived(out, Op::Crop2d { x, crop }, &[x]))
    }

    /// Uniform `k×k` local mean per channel, stride 1, no padding.
    pub fn box_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check(x)?;
        let v = &self.nodes[x.0].value;
        let [c, h, w] = image_dims("box_mean", v.shape())?;
        if k == 0 || h < k || w < k {
            return Err(GraphError::InvalidArgument {
                op: "box_mean",
                reason: format!("window {k} larger than frame {h}×{w}"),
            });
        }
        let (oh, ow) = (h + 1 - k, w + 1 - k);
        let mut out = vec![T::zero(); c * oh * ow];
        kernels::box_mean(v.data(), c, h, w, k, &mut out);
        let out = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.derived(out, Op::BoxMean { x, k }, &[x]))
    }

    /// Which side of every non-smooth point (ReLU, leaky ReLU, clamp) each
    /// input element sits on. Two evaluations with equal patterns lie on the
    /// same smooth piece of the function.
    pub fn kink_pattern(&self) -> Vec<u8> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => pattern.extend(
                    self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .map(|&v| u8::from(v > T::zero())),
                ),
                Op::Clamp(x, lo, hi) => {
                    pattern.extend(self.nodes[x.0].value.data().iter().map(|&v| {
                        if v < lo {
                            0
                        } else if v > hi {
                            2
                        } else {
                            1
                        }
                    }))
                }
                _ => {}
            }
        }
        pattern
    }

    /// Index of the first node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.nodes.iter().position(|n| !n.value.all_finite())
    }

    /// Reverse pass from a scalar `loss`. Each node is visited once, in
    /// reverse creation order. A graph can be differentiated only once per
    /// forward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.consumed {
            return Err(GraphError::BackwardConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(GraphError::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if self.nodes[idx].is_param {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                if node.is_param {
                    Some(match g {
                        Some(data) => Tensor::new(node.value.shape().to_vec(), data)
                            .expect("gradient matches value shape"),
                        None => Tensor::zeros(node.value.shape()),
                    })
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        // Accumulates into the gradient buffer of `v`, allocating on first use.
        fn acc<T: Real>(grads: &mut [Option<Vec<T>>], len: usize, v: Var) -> &mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }
        let len_of = |v: Var| self.nodes[v.0].value.len();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if wants(v) {
                        let d = acc(grads, len_of(v), v);
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    let d = acc(grads, len_of(*a), *a);
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if wants(*b) {
                    let d = acc(grads, len_of(*b), *b);
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    let d = acc(grads, va.len(), *a);
                    for i in 0..g.len() {
                        d[i] += g[i] * vb[i];
                    }
                }
                if wants(*b) {
                    let d = acc(grads, vb.len(), *b);
                    for i in 0..g.len() {
                        d[i] += g[i] * va[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    let d = acc(grads, va.len(), *a);
                    for i in 0..g.len() {
                        d[i] += g[i] / vb[i];
                    }
                }
                if wants(*b) {
                    let d = acc(grads, vb.len(), *b);
                    for i in 0..g.len() {
                        d[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                }
            }
            Op::Scale(x, s) => {
                let d = acc(grads, len_of(*x), *x);
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s);
            }
            Op::Offset(x, _) | Op::Reshape(x) => {
                let d = acc(grads, len_of(*x), *x);
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            Op::Exp(x) => {
                let out = node.value.data();
                let d = acc(grads, len_of(*x), *x);
                for i in 0..g.len() {
                    d[i] += g[i] * out[i];
                }
            }
            Op::Log(x) => {
                let vx = val(*x);
                let d = acc(grads, vx.len(), *x);
                for i in 0..g.len() {
                    d[i] += g[i] / vx[i];
                }
            }
            Op::Sigmoid(x) => {
                let out = node.value.data();
                let d = acc(grads, len_of(*x), *x);
                for i in 0..g.len() {
                    d[i] += g[i] * out[i] * (T::one() - out[i]);
                }
            }
            Op::Tanh(x) => {
                let out = node.value.data();
                let d = acc(grads, len_of(*x), *x);
                for i in 0..g.len() {
                    d[i] += g[i] * (T::one() - out[i] * out[i]);
                }
            }
            Op::Relu(x) => {
                let vx = val(*x);
                let d = acc(grads, vx.len(), *x);
                for i in 0..g.len() {
                    if vx[i] > T::zero() {
                        d[i] += g[i];
                    }
                }
            }
            Op::LeakyRelu(x, coef) => {
                let vx = val(*x);
                let d = acc(grads, vx.len(), *x);
                for i in 0..g.len() {
                    d[i] += if vx[i] > T::zero() {
                        g[i]
                    } else {
                        g[i] * *coef
                    };
                }
            }
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x);
                let d = acc(grads, vx.len(), *x);
                for i in 0..g.len() {
                    if vx[i] >= *lo && vx[i] <= *hi {
                        d[i] += g[i];
                    }
                }
            }
            Op::Sum(x) => {
                let d = acc(grads, len_of(*x), *x);
                d.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = len_of(*x);
                let s = g[0] / T::of(n as f64);
                let d = acc(grads, n, *x);
                d.iter_mut().for_each(|d| *d += s);
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = len_of(x);
                    if wants(x) {
                        let d = acc(grads, n, x);
                        d.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, &g)| *d += g);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, start, len } => {
                let shape = self.nodes[x.0].value.shape();
                let inner: usize = shape[1..].iter().product();
                let d = acc(grads, len_of(*x), *x);
                d[start * inner..(start + len) * inner]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &g)| *d += g);
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let n_in = vx.len();
                if wants(*x) {
                    let d = acc(grads, n_in, *x);
                    for (o, &go) in g.iter().enumerate() {
                        if go != T::zero() {
                            let row = &vw[o * n_in..(o + 1) * n_in];
                            d.iter_mut().zip(row).for_each(|(d, &w)| *d += go * w);
                        }
                    }
                }
                if wants(*w) {
                    let d = acc(grads, vw.len(), *w);
                    for (o, &go) in g.iter().enumerate() {
                        if go != T::zero() {
                            d[o * n_in..(o + 1) * n_in]
                                .iter_mut()
                                .zip(vx)
                                .for_each(|(d, &x)| *d += go * x);
                        }
                    }
                }
                if wants(*b) {
                    let d = acc(grads, g.len(), *b);
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let geo =
                    conv_geometry(tx.shape(), tw.shape(), *stride).expect("checked in forward");
                let n_out = tw.shape()[0];
                let p = geo.positions();
                let k = geo.patch_len();
                if wants(*w) || wants(*x) {
                    let mut cols = vec![T::zero(); k * p];
                    if wants(*w) {
                        kernels::im2col(tx.data(), &geo, &mut cols);
                        let d = acc(grads, tw.len(), *w);
                        kernels::matmul_a_bt_acc(g, &cols, d, n_out, p, k);
                    }
                    if wants(*x) {
                        cols.iter_mut().for_each(|v| *v = T::zero());
                        kernels::matmul_at_b_acc(tw.data(), g, &mut cols, k, n_out, p);
                        let d = acc(grads, tx.len(), *x);
                        kernels::col2im_acc(&cols, &geo, d);
                    }
                }
                if wants(*b) {
                    let d = acc(grads, n_out, *b);
                    for (o, chunk) in g.chunks(p).enumerate() {
                        d[o] += chunk.iter().copied().sum();
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let geo = conv_transpose_geometry(tx.shape(), tw.shape(), *stride)
                    .expect("checked in forward");
                let c_in = tx.shape()[0];
                let hw = geo.positions();
                let k = geo.patch_len();
                if wants(*w) || wants(*x) {
                    let mut dcols = vec![T::zero(); k * hw];
                    kernels::im2col(g, &geo, &mut dcols);
                    if wants(*x) {
                        let d = acc(grads, tx.len(), *x);
                        kernels::matmul_acc(tw.data(), &dcols, d, c_in, k, hw);
                    }
                    if wants(*w) {
                        let d = acc(grads, tw.len(), *w);
                        kernels::matmul_a_bt_acc(tx.data(), &dcols, d, c_in, hw, k);
                    }
                }
                if wants(*b) {
                    let plane = geo.rows * geo.cols;
                    let d = acc(grads, geo.channels, *b);
                    for (o, chunk) in g.chunks(plane).enumerate() {
                        d[o] += chunk.iter().copied().sum();
                    }
                }
            }
            Op::Pad2d { x, pad } => {
                let [c, h, w] = dims3(self.nodes[x.0].value.shape());
                let nw = w + pad[2] + pad[3];
                let nh = h + pad[0] + pad[1];
                let d = acc(grads, c * h * w, *x);
                for ch in 0..c {
                    for r in 0..h {
                        let base = (ch * nh + r + pad[0]) * nw + pad[2];
                        d[(ch * h + r) * w..(ch * h + r + 1) * w]
                            .iter_mut()
                            .zip(&g[base..base + w])
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Crop2d { x, crop } => {
                let [c, h, w] = dims3(self.nodes[x.0].value.shape());
                let (nh, nw) = (h - crop[0] - crop[1], w - crop[2] - crop[3]);
                let d = acc(grads, c * h * w, *x);
                for ch in 0..c {
                    for r in 0..nh {
                        let base = (ch * h + r + crop[0]) * w + crop[2];
                        d[base..base + nw]
                            .iter_mut()
                            .zip(&g[(ch * nh + r) * nw..(ch * nh + r + 1) * nw])
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::BoxMean { x, k } => {
                let [c, h, w] = dims3(self.nodes[x.0].value.shape());
                let d = acc(grads, c * h * w, *x);
                kernels::box_mean_backward(g, c, h, w, *k, d);
            }
        }
    }
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    [shape[0], shape[1], shape[2]]
}

fn image_dims(op: &'static str, shape: &[usize]) -> Result<[usize; 3]> {
    if shape.len() != 3 {
        return Err(GraphError::InvalidArgument {
            op,
            reason: format!("expected [channels, rows, cols], got {shape:?}"),
        });
    }
    Ok(dims3(shape))
}

fn conv_geometry(x: &[usize], w: &[usize], stride: usize) -> Option<Window2d> {
    if x.len() != 3 || w.len() != 4 || x[0] != w[1] {
        return None;
    }
    Some(Window2d {
        channels: x[0],
        rows: x[1],
        cols: x[2],
        k_rows: w[2],
        k_cols: w[3],
        stride,
        out_rows: conv_out(x[1], w[2], stride)?,
        out_cols: conv_out(x[2], w[3], stride)?,
    })
}

/// Geometry of the *output* of a transposed convolution, viewed as the
/// input of the matching forward convolution.
fn conv_transpose_geometry(x: &[usize], w: &[usize], stride: usize) -> Option<Window2d> {
    if x.len() != 3 || w.len() != 4 || x[0] != w[0] || stride == 0 {
        return None;
    }
    Some(Window2d {
        channels: w[1],
        rows: (x[1] - 1) * stride + w[2],
        cols: (x[2] - 1) * stride + w[3],
        k_rows: w[2],
        k_cols: w[3],
        stride,
        out_rows: x[1],
        out_cols: x[2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(g: &mut Graph<f64>, v: f64) -> Var {
        g.param(Tensor::scalar(v))
    }

    #[test]
    fn leaky_relu_scales_negative_side() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(vec![-1.0, 2.0]));
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(y).data(), &[-0.2, 2.0]);
    }

    #[test]
    fn sigmoid_slope_at_zero_is_quarter() {
        let mut g = Graph::<f64>::new();
        let x = scalar_param(&mut g, 0.0);
        let y = g.sigmoid(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 0.25);
    }

    #[test]
    fn square_through_shared_operand() {
        let mut g = Graph::<f64>::new();
        let x = scalar_param(&mut g, 3.0);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = scalar_param(&mut g, 1.5);
        let y = g.exp(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(GraphError::BackwardConsumed)));
        // A fresh forward op re-arms the graph.
        let z = g.tanh(y).unwrap();
        assert!(g.backward(z).is_ok());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(GraphError::NonScalarLoss(s)) if s == vec![2]));
    }

    #[test]
    fn shape_error_names_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[3, 2]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(
            msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"),
            "{msg}"
        );
        let x = g.input(Tensor::zeros(&[2, 8, 8]));
        let w = g.param(Tensor::zeros(&[4, 3, 3, 3]));
        let bias = g.param(Tensor::zeros(&[4]));
        let msg = g.conv2d(x, w, bias, 1).unwrap_err().to_string();
        assert!(
            msg.contains("conv2d") && msg.contains("[2, 8, 8]") && msg.contains("[4, 3, 3, 3]"),
            "{msg}"
        );
    }

    #[test]
    fn inputs_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(2.0));
        let w = scalar_param(&mut g, 0.5);
        let y = g.mul(x, w).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.wrt(x).is_none());
        assert_eq!(grads.wrt(w).unwrap().item(), 2.0);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let unused = g.param(Tensor::from_vec(vec![1.0, 1.0]));
        let x = scalar_param(&mut g, 4.0);
        let y = g.log(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.wrt(x).unwrap().item(), 0.25);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(f64::from).collect();
        let x = g.input(Tensor::new(vec![2, 3, 4], data.clone()).unwrap());
        let p = g.pad2d(x, [1, 2, 3, 0]).unwrap();
        assert_eq!(g.shape(p), &[2, 6, 7]);
        let c = g.crop2d(p, [1, 2, 3, 0]).unwrap();
        assert_eq!(g.value(c).data(), &data[..]);
    }
}
