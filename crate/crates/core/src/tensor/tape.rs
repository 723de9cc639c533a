use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{split_axis, Scalar, Tensor};
use crate::error::{MpnError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule that [`Tape::inject_fault`] corrupts. Used only as a
/// negative control for the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultSite {
    Sigmoid,
    Softmax,
    MatMul,
    LayerNorm,
}

impl std::str::FromStr for FaultSite {
    type Err = MpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(FaultSite::Sigmoid),
            "softmax" => Ok(FaultSite::Softmax),
            "matmul" => Ok(FaultSite::MatMul),
            "layer_norm" => Ok(FaultSite::LayerNorm),
            other => Err(MpnError::Parameter(format!("unknown fault site {other:?}"))),
        }
    }
}

const FAULT_SCALE: f64 = 1.5;

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Abs(Var),
    MaxScalar(Var, F),
    Clamp(Var, F, F),
    Softmax { x: Var, tau: F },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Concat(Vec<Var>),
    SliceLast { x: Var, start: usize },
    Reshape(Var),
    MaxAxis { x: Var, argmax: Vec<usize> },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    RepeatRows { x: Var, times: usize },
    ScaleRows(Var, Var),
    GroupSum { x: Var, group: usize },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Define-by-run computation record. Build a fresh tape per forward pass.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    fault: Option<FaultSite>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for `v`, or zeros when nothing flowed into it.
    pub fn get(&self, v: Var) -> Tensor<F> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<F> {
        let shape = &self.shapes[v.0];
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Corrupt one backward rule. Negative control for gradient checking.
    pub fn inject_fault(&mut self, site: FaultSite) {
        self.fault = Some(site);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MpnError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[..., n] + bias[n]`, broadcasting over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(MpnError::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -F::one());
        self.add_scalar(neg, F::one())
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(MpnError::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Batched product: `a[B×m×k] · b[B×k×n]`, or `a · bᵀ` with
    /// `b[B×n×k]` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(MpnError::dim("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![F::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let ci = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(ai, bi, ci, m, k, n);
            } else {
                gemm_nn(ai, bi, ci, m, k, n);
            }
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(F::zero()))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| {
            if v >= F::zero() {
                F::one() / (F::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (F::one() + e)
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    /// Elementwise sign with `sign(0) = 0`. Carries no gradient.
    pub fn sign(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sign);
        self.constant(value)
    }

    /// `max(x, s)`; the gradient passes only where `x > s`.
    pub fn max_scalar(&mut self, x: Var, s: F) -> Var {
        self.unary(x, Op::MaxScalar(x, s), |v| if v > s { v } else { s })
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    /// Temperature softmax over the last axis: `exp(x/τ) / Σ exp(x/τ)`.
    pub fn softmax(&mut self, x: Var, tau: F) -> Result<Var> {
        if !(tau > F::zero()) {
            return Err(MpnError::Parameter(format!(
                "softmax temperature must be positive, got {tau:?}"
            )));
        }
        let value = softmax_rows(self.value(x), tau);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, tau }, rg))
    }

    /// Layer normalization over the last axis, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(MpnError::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let dn = F::from_f(d as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out = xhat
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &gv), &bv)| h * gv + bv))
            .collect();
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| MpnError::Shape("concat of zero tensors".into()))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(MpnError::dim("concat", self.shape(*first), s));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if len == 0 || start + len > d {
            return Err(MpnError::Shape(format!(
                "slice {start}..{} out of range for last axis {d}",
                start + len
            )));
        }
        let out = xv
            .data()
            .chunks_exact(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceLast { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Maximum over `axis`. Ties route the gradient to the first maximal index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.shape().len() {
            return Err(MpnError::Shape(format!("axis {axis} out of range for {:?}", xv.shape())));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let d = xv.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = d[o * len * inner + i];
                for l in 1..len {
                    let v = d[(o * len + l) * inner + i];
                    if v > best_v {
                        best_v = v;
                        best = l;
                    }
                }
                out.push(best_v);
                argmax.push((o * len + best) * inner + i);
            }
        }
        let value = Tensor::new(&reduced_shape(xv.shape(), axis), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxAxis { x, argmax }, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.shape().len() {
            return Err(MpnError::Shape(format!("axis {axis} out of range for {:?}", xv.shape())));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let value = Tensor::new(&reduced_shape(xv.shape(), axis), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| MpnError::Shape(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, F::one() / F::from_f(len as f64)))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::from_f(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, F::one() / n)
    }

    /// Repeat each row of `x[rows×n]` `times` times consecutively,
    /// giving `[rows·times × n]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || times == 0 {
            return Err(MpnError::Shape(format!("repeat_rows on {:?} x{times}", xv.shape())));
        }
        let (rows, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity(rows * times * n);
        for row in xv.data().chunks_exact(n) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let value = Tensor::new(&[rows * times, n], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::RepeatRows { x, times }, rg))
    }

    /// Multiply every row of `x[..., n]` by the matching entry of `s`,
    /// where `s` has the leading shape of `x`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.len() < 2 || &sx[..sx.len() - 1] != ss {
            return Err(MpnError::dim("scale_rows", sx, ss));
        }
        let n = self.value(x).last_dim();
        let sv = self.value(s).data();
        let out = self
            .value(x)
            .data()
            .chunks_exact(n)
            .zip(sv)
            .flat_map(|(row, &k)| row.iter().map(move |&v| v * k))
            .collect();
        let value = Tensor::new(sx, out)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScaleRows(x, s), rg))
    }

    /// Sum consecutive groups of `group` channels along the last axis.
    pub fn group_sum(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if group == 0 || d % group != 0 {
            return Err(MpnError::Shape(format!("group size {group} does not divide {d}")));
        }
        let out = xv
            .data()
            .chunks_exact(group)
            .map(|g| g.iter().copied().sum())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = d / group;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GroupSum { x, group }, rg))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(MpnError::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn faulty(&self, site: FaultSite) -> bool {
        self.fault == Some(site)
    }

    fn backprop(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |ga| {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gv * bv;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(va) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |gx| add_into(gx, g));
                self.acc(grads, *b, |gb| {
                    for row in g.chunks_exact(gb.len()) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v * *c;
                    }
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |gx| add_into(gx, g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |ga| gemm_nt(g, vb, ga, m, n, k));
                let fault = self.faulty(FaultSite::MatMul);
                self.acc(grads, *b, |gb| {
                    if fault {
                        let mut tmp = vec![F::zero(); k * n];
                        gemm_tn(va, g, &mut tmp, k, m, n);
                        let s = F::from_f(FAULT_SCALE);
                        for (o, t) in gb.iter_mut().zip(tmp) {
                            *o += t * s;
                        }
                    } else {
                        gemm_tn(va, g, gb, k, m, n);
                    }
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gi, bi, out, m, n, k);
                        } else {
                            gemm_nt(gi, bi, out, m, n, k);
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gi, ai, out, n, m, k);
                        } else {
                            gemm_tn(ai, gi, out, k, m, n);
                        }
                    }
                });
            }
            Op::Relu(x) => self.acc(grads, *x, |gx| {
                for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                    if yv > F::zero() {
                        *o += gv;
                    }
                }
            }),
            Op::Sigmoid(x) => {
                let s = if self.faulty(FaultSite::Sigmoid) {
                    F::from_f(FAULT_SCALE)
                } else {
                    F::one()
                };
                self.acc(grads, *x, |gx| {
                    for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (F::one() - yv) * s;
                    }
                })
            }
            Op::Tanh(x) => self.acc(grads, *x, |gx| {
                for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                    *o += gv * (F::one() - yv * yv);
                }
            }),
            Op::Log(x) => {
                let vx = val(*x);
                self.acc(grads, *x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        *o += gv / xv;
                    }
                })
            }
            Op::Abs(x) => {
                let vx = val(*x);
                self.acc(grads, *x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        *o += gv * sign(xv);
                    }
                })
            }
            Op::MaxScalar(x, s) => {
                let vx = val(*x);
                self.acc(grads, *x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        if xv > *s {
                            *o += gv;
                        }
                    }
                })
            }
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x);
                self.acc(grads, *x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        if xv >= *lo && xv <= *hi {
                            *o += gv;
                        }
                    }
                })
            }
            Op::Softmax { x, tau } => {
                let n = node.value.last_dim();
                let mut inv_tau = F::one() / *tau;
                if self.faulty(FaultSite::Softmax) {
                    inv_tau *= F::from_f(FAULT_SCALE);
                }
                self.acc(grads, *x, |gx| {
                    for ((orow, grow), yrow) in gx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += inv_tau * yv * (gv - dot);
                        }
                    }
                })
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = node.value.last_dim();
                let gn = val(*gain);
                self.acc(grads, *gain, |gg| {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((o, &gv), &hv) in gg.iter_mut().zip(grow).zip(hrow) {
                            *o += gv * hv;
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for grow in g.chunks_exact(d) {
                        add_into(gb, grow);
                    }
                });
                let fault = self.faulty(FaultSite::LayerNorm);
                self.acc(grads, *x, |gx| {
                    let dn = F::from_f(d as f64);
                    let mut dxhat = vec![F::zero(); d];
                    for (((orow, grow), hrow), &r) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .zip(rstd)
                    {
                        for ((dh, &gv), &gnv) in dxhat.iter_mut().zip(grow).zip(gn) {
                            *dh = gv * gnv;
                        }
                        let mean_d = dxhat.iter().copied().sum::<F>() / dn;
                        let mean_dh = dxhat.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<F>() / dn;
                        let r = if fault { r * F::from_f(FAULT_SCALE) } else { r };
                        for ((o, &dh), &hv) in orow.iter_mut().zip(&dxhat).zip(hrow) {
                            *o += r * (dh - mean_d - hv * mean_dh);
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    self.acc(grads, p, |gp| {
                        for (orow, grow) in gp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            add_into(orow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceLast { x, start } => {
                let len = node.value.last_dim();
                let d = self.nodes[x.0].value.last_dim();
                self.acc(grads, *x, |gx| {
                    for (orow, grow) in gx.chunks_exact_mut(d).zip(g.chunks_exact(len)) {
                        add_into(&mut orow[*start..*start + len], grow);
                    }
                })
            }
            Op::MaxAxis { x, argmax } => self.acc(grads, *x, |gx| {
                for (&idx, &gv) in argmax.iter().zip(g) {
                    gx[idx] += gv;
                }
            }),
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            add_into(&mut gx[(o * len + l) * inner..(o * len + l + 1) * inner], src);
                        }
                    }
                })
            }
            Op::SumAll(x) => self.acc(grads, *x, |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::RepeatRows { x, times } => {
                let n = node.value.last_dim();
                self.acc(grads, *x, |gx| {
                    for (orow, block) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n * times)) {
                        for grow in block.chunks_exact(n) {
                            add_into(orow, grow);
                        }
                    }
                })
            }
            Op::ScaleRows(x, s) => {
                let n = node.value.last_dim();
                let (vx, vs) = (val(*x), val(*s));
                self.acc(grads, *x, |gx| {
                    for ((orow, grow), &k) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(vs) {
                        for (o, &gv) in orow.iter_mut().zip(grow) {
                            *o += gv * k;
                        }
                    }
                });
                self.acc(grads, *s, |gs| {
                    for ((o, grow), xrow) in gs.iter_mut().zip(g.chunks_exact(n)).zip(vx.chunks_exact(n)) {
                        *o += grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<F>();
                    }
                })
            }
            Op::GroupSum { x, group } => self.acc(grads, *x, |gx| {
                for (block, &gv) in gx.chunks_exact_mut(*group).zip(g) {
                    for o in block {
                        *o += gv;
                    }
                }
            }),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
        f(slot);
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

fn sign<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn softmax_rows<F: Scalar>(x: &Tensor<F>, tau: F) -> Tensor<F> {
    let n = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(x.shape(), out).expect("softmax shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_row_sums() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let s = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_analytic_cases() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let s = tape.softmax(v, 1.0).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let v = tape.constant(t(&[2], &[0.0, 2f64.ln()]));
        let s = tape.softmax(v, 1.0).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12 && (d[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_high_temperature_matches_scalar_exp() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(t(&[3], &[3.0, 0.0, 0.0]));
        let s = tape.softmax(v, 30.0).unwrap();
        let z = (0.1f64).exp() + 2.0;
        let expected = [(0.1f64).exp() / z, 1.0 / z, 1.0 / z];
        for (a, b) in tape.value(s).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let d = tape.value(s).data();
        assert!((d[0] / d[1] - (0.1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.softmax(v, 0.0), Err(MpnError::Parameter(_))));
        assert!(tape.softmax(v, -1.0).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

        let g4 = tape.constant(Tensor::ones(&[4]));
        let b4 = tape.constant(Tensor::zeros(&[4]));
        let c = tape.constant(Tensor::full(&[4], 2.5));
        let y = tape.layer_norm(c, g4, b4, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_axis_ties_route_to_first_index() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3, 2], &[1.0, 5.0, 4.0, 5.0, 4.0, 0.0]));
        let m = tape.max_axis(x, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, 5.0]);
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap().get(x);
        assert_eq!(g.data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn group_sum_equals_binary_pooling_matrix() {
        // P has ones in row l at columns l*r .. (l+1)*r.
        let (k, r) = (3, 2);
        let x: Vec<f64> = (0..2 * k * r).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(t(&[2, k * r], &x));
        let gs = tape.group_sum(xv, r).unwrap();
        let mut pt = vec![0.0; k * r * k];
        for l in 0..k {
            for c in l * r..(l + 1) * r {
                pt[c * k + l] = 1.0;
            }
        }
        let ptv = tape.constant(t(&[k * r, k], &pt));
        let via_p = tape.matmul(xv, ptv).unwrap();
        assert_eq!(tape.value(gs), tape.value(via_p));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let p = tape.param(t(&[2], &[3.0, 4.0]));
        let m = tape.mul(c, p).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).data(), &[1.0, 2.0]);
        assert_eq!(g.get(c).data(), &[0.0, 0.0]);
    }
}
