//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and enough context to
//! propagate gradients. [`Tape::backward`] walks the nodes in exact reverse
//! order of execution and accumulates gradients additively where a value fans
//! out to several consumers. Parameter tensors are borrowed, not copied.

use std::borrow::Cow;

use super::conv::{self, ConvGeom};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        map: Vec<u32>,
        pix: usize,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        map: Vec<u32>,
        pix: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    LogSoftmax(Var),
    Softmax(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    BceWithLogitsSum(Var, Tensor),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that receives a gradient, borrowing its value.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        rec: Op,
    ) -> Result<Var, AutodiffError> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rec, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, rec: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, rec, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip(
            "minimum",
            a,
            b,
            |x, y| if x <= y { x } else { y },
            Op::Minimum(a, b),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// `a: [m, k]` times `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(mismatch("matmul", ta, tb)),
        };
        let out = conv::matmul(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds `b: [n]` to every row of `a: [m, n]`.
    pub fn add_row_bias(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (_, n) = rows_cols(ta);
        if ta.shape().len() != 2 || tb.shape() != [n] {
            return Err(mismatch("add_row_bias", ta, tb));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, bias) in row.iter_mut().zip(tb.data()) {
                *x += bias;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRowBias(a, b), rg))
    }

    /// Adds `b: [c]` to every channel of `a: [n, c, h, w]`.
    pub fn add_channel_bias(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [_, c, h, w] = *ta.shape() else {
            return Err(mismatch("add_channel_bias", ta, tb));
        };
        if tb.shape() != [c] {
            return Err(mismatch("add_channel_bias", ta, tb));
        }
        let mut out = ta.clone();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let bias = tb.data()[i % c];
            plane.iter_mut().for_each(|x| *x += bias);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddChannelBias(a, b), rg))
    }

    /// `x @ w + b` with `x: [m, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    /// Cross-correlation of `x: [n, c, h, w]` with `k: [o, c, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, g: ConvGeom) -> Result<Var, AutodiffError> {
        let (tx, tk) = (self.value(x), self.value(k));
        let (&[n, c, h, w], &[o, c2, kh, kw]) = (tx.shape(), tk.shape()) else {
            return Err(mismatch("conv2d", tx, tk));
        };
        let (Some(oh), Some(ow)) = (g.conv_out(h, kh), g.conv_out(w, kw)) else {
            return Err(mismatch("conv2d", tx, tk));
        };
        if c != c2 {
            return Err(mismatch("conv2d", tx, tk));
        }
        let map = conv::patch_map((c, h, w), (kh, kw), (oh, ow), g);
        let out = conv::conv_forward(tx.data(), n, (c, h, w), tk.data(), o, &map, oh * ow);
        let rg = self.rg(x) || self.rg(k);
        let t = Tensor::new(vec![n, o, oh, ow], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                k,
                map,
                pix: oh * ow,
            },
            rg,
        ))
    }

    /// Transposed convolution of `x: [n, ci, h, w]` with `k: [ci, co, kh, kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, g: ConvGeom) -> Result<Var, AutodiffError> {
        let (tx, tk) = (self.value(x), self.value(k));
        let (&[n, ci, h, w], &[ci2, co, kh, kw]) = (tx.shape(), tk.shape()) else {
            return Err(mismatch("conv_transpose2d", tx, tk));
        };
        let (Some(oh), Some(ow)) = (g.transpose_out(h, kh), g.transpose_out(w, kw)) else {
            return Err(mismatch("conv_transpose2d", tx, tk));
        };
        if ci != ci2 {
            return Err(mismatch("conv_transpose2d", tx, tk));
        }
        let map = conv::patch_map((co, oh, ow), (kh, kw), (h, w), g);
        let out = conv::conv_t_forward(tx.data(), n, ci, h * w, tk.data(), (co, oh, ow), &map);
        let rg = self.rg(x) || self.rg(k);
        let t = Tensor::new(vec![n, co, oh, ow], out)?;
        Ok(self.push(
            t,
            Op::ConvTranspose2d {
                x,
                k,
                map,
                pix: h * w,
            },
            rg,
        ))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (_, c) = rows_cols(t);
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Picks `a[i, idx[i]]` from a `[m, c]` tensor.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let [m, c] = *t.shape() else {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                left: t.shape().to_vec(),
                right: vec![idx.len()],
            });
        };
        if idx.len() != m || idx.iter().any(|&i| i >= c) {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                left: t.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| t.data()[r * c + i])
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::Gather(a, idx.to_vec()), rg))
    }

    /// Concatenates `a: [m, i]` and `b: [m, j]` along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, i], &[m2, j]) = (ta.shape(), tb.shape()) else {
            return Err(mismatch("concat_cols", ta, tb));
        };
        if m != m2 {
            return Err(mismatch("concat_cols", ta, tb));
        }
        let mut out = Vec::with_capacity(m * (i + j));
        for r in 0..m {
            out.extend_from_slice(ta.row(r));
            out.extend_from_slice(tb.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, i + j], out)?, Op::ConcatCols(a, b), rg))
    }

    /// `sum(softplus(l) - t * l)`, the Bernoulli negative log-likelihood of
    /// targets `t` under probabilities `sigmoid(l)`.
    pub fn bce_with_logits_sum(
        &mut self,
        logits: Var,
        target: &Tensor,
    ) -> Result<Var, AutodiffError> {
        let tl = self.value(logits);
        if tl.shape() != target.shape() {
            return Err(mismatch("bce_with_logits_sum", tl, target));
        }
        let s: f64 = tl
            .data()
            .iter()
            .zip(target.data())
            .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(s),
            Op::BceWithLogitsSum(logits, target.clone()),
            rg,
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.value(v).shape().to_vec(), data).expect("shape")
        };
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(
                    *a,
                    like(*a, gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect()),
                );
                acc(
                    *b,
                    like(*b, gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect()),
                );
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| c * x)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.nodes[a.0].requires_grad {
                    acc(*a, like(*a, conv::matmul_nt(gd, tb.data(), m, k, n)));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, like(*b, conv::matmul_tn(ta.data(), gd, m, k, n)));
                }
            }
            Op::AddRowBias(a, b) => {
                acc(*a, g.clone());
                let n = self.value(*b).len();
                let mut db = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                acc(*b, like(*b, db));
            }
            Op::AddChannelBias(a, b) => {
                acc(*a, g.clone());
                let s = self.value(*a).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut db = vec![0.0; c];
                for (j, plane) in gd.chunks(hw).enumerate() {
                    db[j % c] += plane.iter().sum::<f64>();
                }
                acc(*b, like(*b, db));
            }
            Op::Conv2d { x, k, map, pix } => {
                let (tx, tk) = (self.value(*x), self.value(*k));
                let s = tx.shape();
                let (dx, dk) = conv::conv_backward(
                    gd,
                    tx.data(),
                    s[0],
                    (s[1], s[2], s[3]),
                    tk.data(),
                    tk.shape()[0],
                    map,
                    *pix,
                    self.nodes[x.0].requires_grad,
                    self.nodes[k.0].requires_grad,
                );
                if let Some(dx) = dx {
                    acc(*x, like(*x, dx));
                }
                if let Some(dk) = dk {
                    acc(*k, like(*k, dk));
                }
            }
            Op::ConvTranspose2d { x, k, map, pix } => {
                let (tx, tk) = (self.value(*x), self.value(*k));
                let os = out.shape();
                let (dx, dk) = conv::conv_t_backward(
                    gd,
                    tx.data(),
                    tx.shape()[0],
                    tx.shape()[1],
                    *pix,
                    tk.data(),
                    (os[1], os[2], os[3]),
                    map,
                    self.nodes[x.0].requires_grad,
                    self.nodes[k.0].requires_grad,
                );
                if let Some(dx) = dx {
                    acc(*x, like(*x, dx));
                }
                if let Some(dk) = dk {
                    acc(*k, like(*k, dk));
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                acc(
                    *a,
                    like(
                        *a,
                        gd.iter()
                            .zip(ta.data())
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    ),
                );
            }
            Op::Sigmoid(a) => {
                acc(
                    *a,
                    like(
                        *a,
                        gd.iter()
                            .zip(out.data())
                            .map(|(g, s)| g * s * (1.0 - s))
                            .collect(),
                    ),
                );
            }
            Op::Exp(a) => {
                acc(
                    *a,
                    like(*a, gd.iter().zip(out.data()).map(|(g, e)| g * e).collect()),
                );
            }
            Op::Square(a) => {
                let ta = self.value(*a);
                acc(
                    *a,
                    like(
                        *a,
                        gd.iter().zip(ta.data()).map(|(g, x)| 2.0 * g * x).collect(),
                    ),
                );
            }
            Op::Clamp(a, lo, hi) => {
                let ta = self.value(*a);
                acc(
                    *a,
                    like(
                        *a,
                        gd.iter()
                            .zip(ta.data())
                            .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { 0.0 })
                            .collect(),
                    ),
                );
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let pick_a: Vec<bool> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| x <= y)
                    .collect();
                acc(
                    *a,
                    like(
                        *a,
                        gd.iter()
                            .zip(&pick_a)
                            .map(|(&g, &p)| if p { g } else { 0.0 })
                            .collect(),
                    ),
                );
                acc(
                    *b,
                    like(
                        *b,
                        gd.iter()
                            .zip(&pick_a)
                            .map(|(&g, &p)| if p { 0.0 } else { g })
                            .collect(),
                    ),
                );
            }
            Op::LogSoftmax(a) => {
                let (_, c) = rows_cols(out);
                let mut d = Vec::with_capacity(gd.len());
                for (grow, lrow) in gd.chunks(c).zip(out.data().chunks(c)) {
                    let gs: f64 = grow.iter().sum();
                    d.extend(grow.iter().zip(lrow).map(|(g, l)| g - l.exp() * gs));
                }
                acc(*a, like(*a, d));
            }
            Op::Softmax(a) => {
                let (_, c) = rows_cols(out);
                let mut d = Vec::with_capacity(gd.len());
                for (grow, srow) in gd.chunks(c).zip(out.data().chunks(c)) {
                    let inner: f64 = grow.iter().zip(srow).map(|(g, s)| g * s).sum();
                    d.extend(grow.iter().zip(srow).map(|(g, s)| s * (g - inner)));
                }
                acc(*a, like(*a, d));
            }
            Op::Gather(a, idx) => {
                let c = self.value(*a).shape()[1];
                let mut d = vec![0.0; self.value(*a).len()];
                for (r, (&j, &gv)) in idx.iter().zip(gd).enumerate() {
                    d[r * c + j] += gv;
                }
                acc(*a, like(*a, d));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(*a, like(*a, vec![gd[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, like(*a, vec![gd[0] / n as f64; n]));
            }
            Op::Reshape(a) => acc(*a, like(*a, gd.to_vec())),
            Op::ConcatCols(a, b) => {
                let i = self.value(*a).shape()[1];
                let j = self.value(*b).shape()[1];
                let mut da = Vec::with_capacity(self.value(*a).len());
                let mut db = Vec::with_capacity(self.value(*b).len());
                for row in gd.chunks(i + j) {
                    da.extend_from_slice(&row[..i]);
                    db.extend_from_slice(&row[i..]);
                }
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::BceWithLogitsSum(l, target) => {
                let tl = self.value(*l);
                acc(
                    *l,
                    like(
                        *l,
                        tl.data()
                            .iter()
                            .zip(target.data())
                            .map(|(&x, &t)| gd[0] * (sigmoid(x) - t))
                            .collect(),
                    ),
                );
            }
        }
    }
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let (_, c) = rows_cols(t);
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|x| *x = (*x - m).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    out
}

/// Logistic function, stable for large magnitudes.
pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}
