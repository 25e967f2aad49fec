use std::borrow::Cow;

use super::{gemm, Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Matmul(usize, usize),
    Affine(usize, usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    RepeatRows(usize, usize),
    Gelu(usize),
    Silu(usize),
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: Option<usize>,
        bias: Option<usize>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        groups: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Mse(usize, usize),
    Sum(usize),
    Mean(usize),
    Concat {
        parts: Vec<usize>,
        widths: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Transpose(usize),
    Reshape(usize),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it.
/// Leaves may borrow their tensors (parameters) for the tape's lifetime.
/// A tape built with [`Tape::no_grad`] computes values only.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the tape's leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Tanh-approximation GELU and its derivative, written through
/// `0.5·(1 + tanh u) = σ(2u)`.
#[inline(always)]
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let two = T::lit(2.0);
    let s = sigmoid(two * c * (x + a * x * x * x));
    let value = x * s;
    let deriv = s + two * x * s * (T::one() - s) * c * (T::one() + T::lit(3.0) * a * x * x);
    (value, deriv)
}

#[inline(always)]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).fast_exp())
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A value-only tape; nothing on it ever requires gradient.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
            consumed: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf owning its tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(value), true)
    }

    /// Differentiable leaf borrowing a parameter tensor.
    pub fn param(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Whether an op on `inputs` will keep its backward rule.
    fn records(&self, inputs: &[usize]) -> bool {
        self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[usize],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = self.records(inputs);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_input_finite(&self, op: &'static str, v: Var) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(dim_err(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(dim_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::Matmul(a.0, b.0), &[a.0, b.0])
    }

    /// `x·w + b` with `b` added to every row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("affine", x)?;
        let (k2, n) = self.dims2("affine", w)?;
        if k != k2 {
            return Err(dim_err("affine", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let bv = self.value(b).data();
        if bv.len() != n {
            return Err(dim_err(
                "affine",
                format!("bias of {} elements for width {n}", bv.len()),
            ));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv);
        }
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            true,
        );
        let out = Tensor::from_parts(vec![m, n], out);
        self.push("affine", out, Op::Affine(x.0, w.0, b.0), &[x.0, w.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a.0, s), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.push("add_scalar", out, Op::AddScalar(a.0), &[a.0])
    }

    /// Adds a length-`c` row vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2("add_row", a)?;
        if self.value(row).numel() != c {
            return Err(dim_err(
                "add_row",
                format!("row of {} elements for width {c}", self.value(row).numel()),
            ));
        }
        let rv = self.value(row).data();
        let av = self.value(a).data();
        let mut out = av.to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &y) in chunk.iter_mut().zip(rv) {
                *o = *o + y;
            }
        }
        let out = Tensor::from_parts(vec![r, c], out);
        self.push("add_row", out, Op::AddRow(a.0, row.0), &[a.0, row.0])
    }

    /// Multiplies every row of `a` elementwise by `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2("mul_row", a)?;
        if self.value(row).numel() != c {
            return Err(dim_err(
                "mul_row",
                format!("row of {} elements for width {c}", self.value(row).numel()),
            ));
        }
        let rv = self.value(row).data();
        let av = self.value(a).data();
        let mut out = av.to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &y) in chunk.iter_mut().zip(rv) {
                *o = *o * y;
            }
        }
        let out = Tensor::from_parts(vec![r, c], out);
        self.push("mul_row", out, Op::MulRow(a.0, row.0), &[a.0, row.0])
    }

    /// Repeats each row `times` times consecutively: `[r×c] -> [r·times × c]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (r, c) = self.dims2("repeat_rows", a)?;
        if times == 0 {
            return Err(Error::Input("repeat_rows: times must be positive".into()));
        }
        if times == 1 {
            return Ok(a);
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(r * c * times);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(&av[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::from_parts(vec![r * times, c], out);
        self.push("repeat_rows", out, Op::RepeatRows(a.0, times), &[a.0])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| gelu_parts(x).0);
        self.push("gelu", out, Op::Gelu(a.0), &[a.0])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", out, Op::Silu(a.0), &[a.0])
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_input_finite("softmax", x)?;
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Input(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(xv[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let out = Tensor::from_parts(shape, out);
        self.push(
            "softmax",
            out,
            Op::Softmax {
                x: x.0,
                outer,
                len,
                inner,
            },
            &[x.0],
        )
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, then
    /// applies the optional affine `gain`/`bias`. Rows whose variance plus
    /// `eps` is zero normalize to zero, so the output is the bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        eps: T,
    ) -> Result<Var> {
        self.check_input_finite("layer_norm", x)?;
        if eps < T::zero() {
            return Err(Error::Input("layer_norm eps must be non-negative".into()));
        }
        let c = self.value(x).cols();
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).numel() != c {
                return Err(dim_err(
                    "layer_norm",
                    format!("affine of {} elements for width {c}", self.value(p).numel()),
                ));
            }
        }
        let xv = self.value(x).data();
        let rows = xv.len() / c;
        let cf = T::from_usize(c).expect("width");
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for ((row, xh), rs_out) in xv.chunks(c).zip(xhat.chunks_mut(c)).zip(rstd.iter_mut()) {
            let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) / cf;
            let var = row
                .iter()
                .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                / cf;
            let denom = var + eps;
            let rs = if denom > T::zero() {
                T::one() / denom.sqrt()
            } else {
                T::zero()
            };
            *rs_out = rs;
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
        }
        let g = gain.map(|v| self.value(v).data());
        let b = bias.map(|v| self.value(v).data());
        let mut inputs = vec![x.0];
        inputs.extend(gain.map(|v| v.0));
        inputs.extend(bias.map(|v| v.0));
        // The backward rule needs `xhat`; value-only graphs reuse its buffer.
        let (mut out, xhat, rstd) = if self.records(&inputs) {
            (xhat.clone(), xhat, rstd)
        } else {
            (xhat, Vec::new(), Vec::new())
        };
        for row in out.chunks_mut(c) {
            if let Some(g) = g {
                row.iter_mut().zip(g).for_each(|(h, &g)| *h = *h * g);
            }
            if let Some(b) = b {
                row.iter_mut().zip(b).for_each(|(h, &b)| *h = *h + b);
            }
        }
        let out = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.map(|v| v.0),
                bias: bias.map(|v| v.0),
                xhat,
                rstd,
            },
            &inputs,
        )
    }

    /// Multi-head scaled dot-product self-attention over row groups.
    ///
    /// `q`, `k`, `v` are `[groups·tokens × width]`; rows of one group attend
    /// only to each other. `width` is split into `heads` equal slices.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, width) = self.dims2("attention", q)?;
        if groups == 0 || rows % groups != 0 {
            return Err(dim_err(
                "attention",
                format!("{rows} rows into {groups} groups"),
            ));
        }
        if heads == 0 || width % heads != 0 {
            return Err(dim_err(
                "attention",
                format!("width {width} into {heads} heads"),
            ));
        }
        let tokens = rows / groups;
        let dh = width / heads;
        let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); groups * heads * tokens * tokens];
        let mut out = vec![T::zero(); rows * width];
        for g in 0..groups {
            let r0 = g * tokens;
            for h in 0..heads {
                let c0 = h * dh;
                let pbase = (g * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let p = &mut probs[pbase + i * tokens..pbase + (i + 1) * tokens];
                    let qi = &qv[(r0 + i) * width + c0..(r0 + i) * width + c0 + dh];
                    let mut max = T::neg_infinity();
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &kv[(r0 + j) * width + c0..(r0 + j) * width + c0 + dh];
                        let s = qi
                            .iter()
                            .zip(kj)
                            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
                            * scale;
                        *pj = s;
                        max = max.max(s);
                    }
                    let mut total = T::zero();
                    for pj in p.iter_mut() {
                        *pj = (*pj - max).exp();
                        total = total + *pj;
                    }
                    for pj in p.iter_mut() {
                        *pj = *pj / total;
                    }
                    let o = &mut out[(r0 + i) * width + c0..(r0 + i) * width + c0 + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vv[(r0 + j) * width + c0..(r0 + j) * width + c0 + dh];
                        for (od, &vd) in o.iter_mut().zip(vj) {
                            *od = *od + pj * vd;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![rows, width], out);
        self.push(
            "attention",
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                groups,
                heads,
                probs,
            },
            &[q.0, k.0, v.0],
        )
    }

    /// Mean over all elements of `(a - b)²`, as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = T::from_usize(av.len()).expect("numel");
        let total = av
            .iter()
            .zip(bv)
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        self.push(
            "mse",
            Tensor::scalar(total / n),
            Op::Mse(a.0, b.0),
            &[a.0, b.0],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        self.push("sum", Tensor::scalar(total), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).data();
        let n = T::from_usize(v.len()).expect("numel");
        let total = v.iter().fold(T::zero(), |acc, &x| acc + x);
        self.push("mean", Tensor::scalar(total / n), Op::Mean(a.0), &[a.0])
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat of zero tensors".into()));
        }
        let rows = self.dims2("concat", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat", p)?;
            if r != rows {
                return Err(dim_err("concat", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out = Tensor::from_parts(vec![rows, total], out);
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: idx.clone(),
                widths,
            },
            &idx,
        )
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice", x)?;
        if len == 0 || start + len > c {
            return Err(dim_err(
                "slice",
                format!("columns {start}..{} of {c}", start + len),
            ));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let out = Tensor::from_parts(vec![r, len], out);
        self.push("slice", out, Op::SliceCols { x: x.0, start }, &[x.0])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.dims2("transpose", x)?;
        let out = self.value(x).transpose()?;
        self.push("transpose", out, Op::Transpose(x.0), &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x.0), &[x.0])
    }

    /// Reverse sweep from a scalar loss. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; record a fresh tape".into(),
            ));
        }
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Contract(
                "loss is not connected to any differentiable leaf".into(),
            ));
        }
        self.consumed = true;

        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) if node.requires_grad => {
                        Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], idx: usize, contribution: Vec<T>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |idx: usize| self.nodes[idx].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (
                    self.nodes[*a].value.shape()[0],
                    self.nodes[*a].value.shape()[1],
                );
                let n = self.nodes[*b].value.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, val(*b), true, &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, val(*a), true, g, false, &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Affine(x, w, b) => {
                let (m, k) = (
                    self.nodes[*x].value.shape()[0],
                    self.nodes[*x].value.shape()[1],
                );
                let n = self.nodes[*w].value.shape()[1];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, val(*w), true, &mut dx, false);
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    gemm(k, m, n, val(*x), true, g, false, &mut dw, false);
                    self.accumulate(grads, *w, dw);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); n];
                    for chunk in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|&x| x * *s).collect());
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::MulRow(a, row) => {
                let (av, rv) = (val(*a), val(*row));
                let c = rv.len();
                if self.wants(*a) {
                    let da = g
                        .chunks(c)
                        .flat_map(|gr| gr.iter().zip(rv).map(|(&g, &r)| g * r))
                        .collect();
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*row) {
                    let mut dr = vec![T::zero(); c];
                    for (gr, ar) in g.chunks(c).zip(av.chunks(c)) {
                        for ((d, &g), &a) in dr.iter_mut().zip(gr).zip(ar) {
                            *d = *d + g * a;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.wants(*row) {
                    let c = self.nodes[*row].value.numel();
                    let mut dr = vec![T::zero(); c];
                    for chunk in g.chunks(c) {
                        for (d, &x) in dr.iter_mut().zip(chunk) {
                            *d = *d + x;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::RepeatRows(a, times) => {
                let c = self.nodes[*a].value.cols();
                let r = self.nodes[*a].value.rows();
                let mut da = vec![T::zero(); r * c];
                for (out_row, chunk) in g.chunks(c).enumerate() {
                    let src = out_row / times;
                    for (d, &x) in da[src * c..(src + 1) * c].iter_mut().zip(chunk) {
                        *d = *d + x;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let d = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| g * gelu_parts(x).1)
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        let s = sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for ii in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let dot = (0..*len).fold(T::zero(), |acc, j| acc + g[at(j)] * y[at(j)]);
                        for j in 0..*len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.nodes[*x].value.cols();
                let rows = rstd.len();
                let gv = gain.map(|p| val(p));
                if let Some(p) = gain.filter(|&p| self.wants(p)) {
                    let mut dg = vec![T::zero(); c];
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] = dg[j] + g[r * c + j] * xhat[r * c + j];
                        }
                    }
                    self.accumulate(grads, p, dg);
                }
                if let Some(p) = bias.filter(|&p| self.wants(p)) {
                    let mut db = vec![T::zero(); c];
                    for chunk in g.chunks(c) {
                        for (d, &x) in db.iter_mut().zip(chunk) {
                            *d = *d + x;
                        }
                    }
                    self.accumulate(grads, p, db);
                }
                if self.wants(*x) {
                    let cf = T::from_usize(c).expect("width");
                    let mut dx = vec![T::zero(); rows * c];
                    for r in 0..rows {
                        let dxhat: Vec<T> = (0..c)
                            .map(|j| gv.map_or(g[r * c + j], |gv| g[r * c + j] * gv[j]))
                            .collect();
                        let mean_d = dxhat.iter().fold(T::zero(), |a, &v| a + v) / cf;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xhat[r * c..(r + 1) * c])
                            .fold(T::zero(), |a, (&d, &h)| a + d * h)
                            / cf;
                        for j in 0..c {
                            dx[r * c + j] =
                                rstd[r] * (dxhat[j] - mean_d - xhat[r * c + j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let width = self.nodes[*q].value.cols();
                let rows = self.nodes[*q].value.rows();
                let tokens = rows / groups;
                let dh = width / heads;
                let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
                let mut dq = vec![T::zero(); rows * width];
                let mut dk = vec![T::zero(); rows * width];
                let mut dv = vec![T::zero(); rows * width];
                let mut dp = vec![T::zero(); tokens];
                for gi in 0..*groups {
                    let r0 = gi * tokens;
                    for h in 0..*heads {
                        let c0 = h * dh;
                        let pbase = (gi * heads + h) * tokens * tokens;
                        let at = |row: usize, d: usize| (r0 + row) * width + c0 + d;
                        for i in 0..tokens {
                            let p = &probs[pbase + i * tokens..pbase + (i + 1) * tokens];
                            for j in 0..tokens {
                                let mut acc = T::zero();
                                for d in 0..dh {
                                    dv[at(j, d)] = dv[at(j, d)] + p[j] * g[at(i, d)];
                                    acc = acc + g[at(i, d)] * vv[at(j, d)];
                                }
                                dp[j] = acc;
                            }
                            let dot = p.iter().zip(&dp).fold(T::zero(), |a, (&p, &d)| a + p * d);
                            for j in 0..tokens {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                for d in 0..dh {
                                    dq[at(i, d)] = dq[at(i, d)] + ds * kv[at(j, d)];
                                    dk[at(j, d)] = dk[at(j, d)] + ds * qv[at(i, d)];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = T::from_usize(av.len()).expect("numel");
                let coeff = T::lit(2.0) * g[0] / n;
                let d: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| coeff * (x - y)).collect();
                if self.wants(*b) {
                    self.accumulate(grads, *b, d.iter().map(|&x| -x).collect());
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel();
                let v = g[0] / T::from_usize(n).expect("numel");
                self.accumulate(grads, *a, vec![v; n]);
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.nodes[*x].value.cols();
                let r = self.nodes[*x].value.rows();
                let len = node.value.cols();
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let gt = Tensor::from_parts(vec![r, c], g.to_vec())
                    .transpose()
                    .expect("2-D");
                self.accumulate(grads, *x, gt.into_data());
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
        }
    }
}
