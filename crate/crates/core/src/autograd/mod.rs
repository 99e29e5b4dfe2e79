//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value; `backward` walks the
//! nodes in reverse, so each node is visited exactly once and fan-out
//! gradients accumulate additively. Leaf gradients persist across calls
//! until [`Tape::zero_grad`].

pub mod conv;
pub mod norm;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use conv::{conv_out_len, conv_transpose_out_len, ConvSpec, Padding};
pub use norm::NormMode;

use conv::{conv_shapes, conv_transpose_shapes};
use norm::NormCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Softplus(Var),
    Prelu { x: Var, alpha: Var },
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    ConvT { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Norm { x: Var, gain: Var, bias: Var, mode: NormMode, cache: NormCache<T> },
    Concat(Vec<Var>),
    FoldFreq(Var),
    UnfoldFreq(Var),
    Tile(Var),
    Magnitude { re: Var, im: Var },
    SumSq(Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    labels: Vec<(String, Var)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn finite<T: Real>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Attach a name to an intermediate so analysis tools can find it.
    pub fn label(&mut self, v: Var, name: impl Into<String>) {
        self.labels.push((name.into(), v));
    }

    pub fn labels(&self) -> &[(String, Var)] {
        &self.labels
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
        .expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = finite("add", self.zip(a, b, |p, q| p + q))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = finite("sub", self.zip(a, b, |p, q| p - q))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = finite("mul", self.zip(a, b, |p, q| p * q))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let v = finite("scale", self.value(a).map(|x| x * k))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Scale(a, k), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = finite("sigmoid", self.value(a).map(sigmoid))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Sigmoid(a), rg))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = finite("softplus", self.value(a).map(softplus))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Softplus(a), rg))
    }

    /// PReLU with one slope per channel (axis 1).
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(alpha) != [xs[1]] {
            return Err(Error::shape("prelu", &xs, self.shape(alpha)));
        }
        let c = xs[1];
        let plane: usize = xs[2..].iter().product();
        let a = self.value(alpha).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if *v < T::zero() {
                *v *= a[(i / plane) % c];
            }
        }
        let out = finite("prelu", out)?;
        let rg = self.rg(x) || self.rg(alpha);
        Ok(self.push(out, Op::Prelu { x, alpha }, rg))
    }

    /// 2-D convolution over (time, frequency). Kernel is `[cout, cin/groups, kt, kf]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let s = conv_shapes(self.shape(x), self.shape(w), &spec)?;
        if let Some(b) = b {
            if self.shape(b) != [s.cout] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[s.cout]));
            }
        }
        let out = conv::conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &s);
        let out = finite("conv2d", out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, w, b, spec }, rg))
    }

    /// Transposed 2-D convolution. Kernel is `[cin, cout/groups, kt, kf]`;
    /// `spec.padding` crops the full output.
    pub fn conv2d_transposed(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let s = conv_transpose_shapes(self.shape(x), self.shape(w), &spec)?;
        if let Some(b) = b {
            if self.shape(b) != [s.cout] {
                return Err(Error::shape("conv2d_transposed bias", self.shape(b), &[s.cout]));
            }
        }
        let out = conv::conv_transpose_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &s);
        let out = finite("conv2d_transposed", out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::ConvT { x, w, b, spec }, rg))
    }

    pub fn norm(&mut self, x: Var, gain: Var, bias: Var, mode: NormMode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gain) != [xs[1]] || self.shape(bias) != [xs[1]] {
            return Err(Error::shape("norm", &xs, self.shape(gain)));
        }
        let (y, cache) = norm::norm_forward(self.value(x), self.value(gain), self.value(bias), mode);
        let y = finite("norm", y)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(y, Op::Norm { x, gain, bias, mode, cache }, rg))
    }

    /// Concatenate 4-D tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(Error::shape("concat", &first, s));
            }
            c += s[1];
        }
        let (b, plane) = (first[0], first[2] * first[3]);
        let mut data = Vec::with_capacity(b * c * plane);
        for bi in 0..b {
            for &p in parts {
                let v = self.value(p);
                let pc = v.dim(1);
                data.extend_from_slice(&v.data()[bi * pc * plane..(bi + 1) * pc * plane]);
            }
        }
        let out = Tensor::new([b, c, first[2], first[3]], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// `[B, C, T, F] -> [B, C*F, T, 1]` with channel index `c*F + f`.
    pub fn fold_freq(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("fold_freq", &s, &[4]));
        }
        let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
        let src = self.value(x);
        let mut out = Tensor::zeros([b, c * f, t, 1]);
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    for fi in 0..f {
                        let o = ((bi * c * f + ci * f + fi) * t) + ti;
                        out.data_mut()[o] = src.data()[src.idx4(bi, ci, ti, fi)];
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::FoldFreq(x), rg))
    }

    /// Inverse of [`Tape::fold_freq`]: `[B, C*F, T, 1] -> [B, C, T, F]`.
    pub fn unfold_freq(&mut self, x: Var, freq: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[3] != 1 || freq == 0 || !s[1].is_multiple_of(freq) {
            return Err(Error::shape("unfold_freq", &s, &[freq]));
        }
        let (b, cf, t) = (s[0], s[1], s[2]);
        let c = cf / freq;
        let src = self.value(x);
        let mut out = Tensor::zeros([b, c, t, freq]);
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    for fi in 0..freq {
                        let i = ((bi * cf + ci * freq + fi) * t) + ti;
                        let o = out.idx4(bi, ci, ti, fi);
                        out.data_mut()[o] = src.data()[i];
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::UnfoldFreq(x), rg))
    }

    /// Repeat a tensor with leading extent 1 `reps` times along axis 0.
    pub fn tile(&mut self, x: Var, reps: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || s[0] != 1 || reps == 0 {
            return Err(Error::shape("tile", &s, &[reps]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * reps);
        for _ in 0..reps {
            data.extend_from_slice(src);
        }
        let mut shape = s;
        shape[0] = reps;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Tile(x), rg))
    }

    /// `sqrt(re^2 + im^2 + eps)` elementwise.
    pub fn magnitude(&mut self, re: Var, im: Var, eps: T) -> Result<Var> {
        self.same_shape("magnitude", re, im)?;
        let v = finite("magnitude", self.zip(re, im, |r, i| (r * r + i * i + eps).sqrt()))?;
        let rg = self.rg(re) || self.rg(im);
        Ok(self.push(v, Op::Magnitude { re, im }, rg))
    }

    /// Squared Frobenius norm, as a one-element tensor.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let v = finite("sum_sq", Tensor::scalar(self.value(x).sum_sq()))?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::SumSq(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = finite("sum", Tensor::scalar(self.value(x).sum()))?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Sum(x), rg))
    }

    /// Accumulate d(loss)/d(leaf) into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |v: Var, t: Tensor<T>| -> Result<()> {
            if !nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, zip_with(g, val(*b), |p, q| p * q))?;
                }
                if self.rg(*b) {
                    acc(*b, zip_with(g, val(*a), |p, q| p * q))?;
                }
            }
            Op::Scale(a, k) => acc(*a, g.map(|v| v * *k))?,
            Op::Sigmoid(a) => acc(*a, zip_with(g, out, |p, s| p * s * (T::one() - s)))?,
            Op::Softplus(a) => acc(*a, zip_with(g, val(*a), |p, x| p * sigmoid(x)))?,
            Op::Prelu { x, alpha } => {
                let xv = val(*x);
                let a = val(*alpha).data();
                let c = a.len();
                let plane: usize = xv.shape()[2..].iter().product();
                let mut dx = g.clone();
                let mut da = Tensor::zeros([c]);
                for (j, d) in dx.data_mut().iter_mut().enumerate() {
                    let xj = xv.data()[j];
                    if xj < T::zero() {
                        let ch = (j / plane) % c;
                        da.data_mut()[ch] += *d * xj;
                        *d *= a[ch];
                    }
                }
                acc(*x, dx)?;
                acc(*alpha, da)?;
            }
            Op::Conv { x, w, b, spec } => {
                let s = conv_shapes(val(*x).shape(), val(*w).shape(), spec)?;
                let (dx, dw, db) = conv::conv_backward(val(*x), val(*w), g, &s, self.rg(*x), self.rg(*w));
                if let Some(dx) = dx {
                    acc(*x, dx)?;
                }
                if let Some(dw) = dw {
                    acc(*w, dw)?;
                }
                if let Some(b) = b {
                    acc(*b, db)?;
                }
            }
            Op::ConvT { x, w, b, spec } => {
                let s = conv_transpose_shapes(val(*x).shape(), val(*w).shape(), spec)?;
                let (dx, dw, db) =
                    conv::conv_transpose_backward(val(*x), val(*w), g, &s, self.rg(*x), self.rg(*w));
                if let Some(dx) = dx {
                    acc(*x, dx)?;
                }
                if let Some(dw) = dw {
                    acc(*w, dw)?;
                }
                if let Some(b) = b {
                    acc(*b, db)?;
                }
            }
            Op::Norm { x, gain, bias, mode, cache } => {
                let (dx, dg, db) = norm::norm_backward(g, val(*gain), cache, *mode);
                acc(*x, dx)?;
                acc(*gain, dg)?;
                acc(*bias, db)?;
            }
            Op::Concat(parts) => {
                let s = g.shape();
                let (b, plane) = (s[0], s[2] * s[3]);
                let ctot = s[1];
                let mut off = 0;
                for &p in parts {
                    let ps = val(p).shape().to_vec();
                    let pc = ps[1];
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(b * pc * plane);
                        for bi in 0..b {
                            let start = (bi * ctot + off) * plane;
                            data.extend_from_slice(&g.data()[start..start + pc * plane]);
                        }
                        acc(p, Tensor::new(ps, data)?)?;
                    }
                    off += pc;
                }
            }
            Op::FoldFreq(x) => {
                let s = val(*x).shape().to_vec();
                let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
                let mut dx = Tensor::zeros(s);
                for bi in 0..b {
                    for ci in 0..c {
                        for ti in 0..t {
                            for fi in 0..f {
                                let o = ((bi * c * f + ci * f + fi) * t) + ti;
                                let d = dx.idx4(bi, ci, ti, fi);
                                dx.data_mut()[d] = g.data()[o];
                            }
                        }
                    }
                }
                acc(*x, dx)?;
            }
            Op::UnfoldFreq(x) => {
                let s = val(*x).shape().to_vec();
                let (b, cf, t) = (s[0], s[1], s[2]);
                let freq = g.dim(3);
                let c = cf / freq;
                let mut dx = Tensor::zeros(s);
                for bi in 0..b {
                    for ci in 0..c {
                        for ti in 0..t {
                            for fi in 0..freq {
                                let d = ((bi * cf + ci * freq + fi) * t) + ti;
                                dx.data_mut()[d] = g.data()[g.idx4(bi, ci, ti, fi)];
                            }
                        }
                    }
                }
                acc(*x, dx)?;
            }
            Op::Tile(x) => {
                let s = val(*x).shape().to_vec();
                let n = val(*x).len();
                let mut dx = Tensor::zeros(s);
                for chunk in g.data().chunks(n) {
                    for (d, &v) in dx.data_mut().iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                acc(*x, dx)?;
            }
            Op::Magnitude { re, im } => {
                if self.rg(*re) {
                    let q = zip_with(val(*re), out, |r, m| r / m);
                    acc(*re, zip_with(g, &q, |p, q| p * q))?;
                }
                if self.rg(*im) {
                    let q = zip_with(val(*im), out, |r, m| r / m);
                    acc(*im, zip_with(g, &q, |p, q| p * q))?;
                }
            }
            Op::SumSq(x) => {
                let k = g.item() + g.item();
                acc(*x, val(*x).map(|v| v * k))?;
            }
            Op::Sum(x) => {
                let k = g.item();
                acc(*x, Tensor::full(val(*x).shape().to_vec(), k))?;
            }
        }
        Ok(())
    }
}

fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect(),
    )
    .expect("same shape")
}

#[cfg(test)]
mod tests;
