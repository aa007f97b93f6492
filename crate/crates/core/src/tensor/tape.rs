//! Wengert-list reverse-mode differentiation over dense tensors.
//!
//! Every operation evaluates eagerly and appends a node to the tape, so
//! node `i` only ever refers to nodes `j < i`. [`Tape::backward`] walks the
//! list in reverse and accumulates vector-Jacobian products.
//!
//! Broadcasting is restricted to leading-axis repetition: in a binary
//! elementwise op, either operand may have a shape that is a suffix of the
//! other's, in which case it is tiled over the missing leading axes.

use super::array::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadSide {
    Front,
    Back,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// How the operands of a matmul are batched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MatLayout {
    /// `[m,p] x [p,n]`
    Plain,
    /// `[m,p] x [b,p,n]`: one left matrix applied to every batch entry.
    SharedLeft { batch: usize },
    /// `[b,m,p] x [p,n]`
    SharedRight { batch: usize },
    /// `[b,m,p] x [b,p,n]`
    Batched { batch: usize },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        layout: MatLayout,
        m: usize,
        p: usize,
        n: usize,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    ZeroPad {
        x: Var,
        axis: usize,
        amount: usize,
        side: PadSide,
    },
    Reduce {
        x: Var,
        axis: Option<usize>,
        kind: Reduction,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Extents before, along and after `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// `c (+)= op(a) * op(b)` for row-major slices; `ta`/`tb` read the stored
/// operand transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the pointers cover exactly m*k, k*n and m*n elements laid out
    // with the strides given above, and `c` does not alias `a` or `b`.
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

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    /// Records a leaf. Gradients are only produced for leaves created with
    /// `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "{name} produced a non-finite value (output shape {:?})",
                value.shape()
            )));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul { a, b, .. } | Op::Binary { a, b, .. } => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::Concat { parts, .. } => parts.iter().any(|p| self.requires_grad(*p)),
            Op::Scale { x, .. }
            | Op::Activation { x, .. }
            | Op::Softmax { x, .. }
            | Op::Reshape { x }
            | Op::Slice { x, .. }
            | Op::ZeroPad { x, .. }
            | Op::Reduce { x, .. } => self.requires_grad(*x),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Matrix product.
    ///
    /// Accepts `[m,p]x[p,n]`, `[m,p]x[b,p,n]` (left operand shared across the
    /// batch), `[b,m,p]x[p,n]` and `[b,m,p]x[b,p,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::Dimension(format!("matmul: cannot multiply {:?} by {:?}", sa, sb));
        let (layout, m, p, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (MatLayout::Plain, sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (2, 3) if sa[1] == sb[1] => (
                MatLayout::SharedLeft { batch: sb[0] },
                sa[0],
                sa[1],
                sb[2],
                vec![sb[0], sa[0], sb[2]],
            ),
            (3, 2) if sa[2] == sb[0] => (
                MatLayout::SharedRight { batch: sa[0] },
                sa[1],
                sa[2],
                sb[1],
                vec![sa[0], sa[1], sb[1]],
            ),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (
                MatLayout::Batched { batch: sa[0] },
                sa[1],
                sa[2],
                sb[2],
                vec![sa[0], sa[1], sb[2]],
            ),
            _ => return Err(mismatch()),
        };
        let mut out = Tensor::zeros(&out_shape);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let c = out.data_mut();
            match layout {
                MatLayout::Plain => gemm(m, p, n, av, false, bv, false, c, false),
                MatLayout::SharedRight { batch } => {
                    gemm(batch * m, p, n, av, false, bv, false, c, false)
                }
                MatLayout::SharedLeft { batch } => {
                    for i in 0..batch {
                        gemm(
                            m,
                            p,
                            n,
                            av,
                            false,
                            &bv[i * p * n..(i + 1) * p * n],
                            false,
                            &mut c[i * m * n..(i + 1) * m * n],
                            false,
                        );
                    }
                }
                MatLayout::Batched { batch } => {
                    for i in 0..batch {
                        gemm(
                            m,
                            p,
                            n,
                            &av[i * m * p..(i + 1) * m * p],
                            false,
                            &bv[i * p * n..(i + 1) * p * n],
                            false,
                            &mut c[i * m * n..(i + 1) * m * n],
                            false,
                        );
                    }
                }
            }
        }
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                layout,
                m,
                p,
                n,
            },
            "matmul",
        )
    }

    /// Elementwise binary op with leading-axis broadcast in either direction.
    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = if is_suffix(sb, sa) {
            sa.to_vec()
        } else if is_suffix(sa, sb) {
            sb.to_vec()
        } else {
            return Err(Error::Dimension(format!(
                "{kind:?}: shapes {sa:?} and {sb:?} are not broadcastable"
            )));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let len: usize = out_shape.iter().product();
        let (la, lb) = (av.len(), bv.len());
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
        };
        let data: Vec<f64> = if la == lb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else if lb == 0 || la == 0 {
            Vec::new()
        } else {
            (0..len).map(|i| f(av[i % la], bv[i % lb])).collect()
        };
        let out = Tensor::new(out_shape, data)?;
        self.push(out, Op::Binary { a, b, kind }, "elementwise")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, "scale")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = match kind {
            Activation::Sigmoid => self.value(x).map(sigmoid),
            Activation::Tanh => self.value(x).map(f64::tanh),
        };
        self.push(out, Op::Activation { x, kind }, "activation")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    /// Softmax along `axis`, with the slice maximum subtracted first.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| src[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::Softmax { x, axis }, "softmax")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x).to_vec();
        let out =
            self.value(x).clone().reshape(shape).map_err(|_| {
                Error::Dimension(format!("reshape: cannot view {from:?} as {shape:?}"))
            })?;
        self.push(out, Op::Reshape { x }, "reshape")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension(format!(
                    "concat along axis {axis}: shape {s:?} does not match {base:?}"
                )));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Keeps indices `range` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, range: std::ops::Range<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || range.start > range.end || range.end > shape[axis] {
            return Err(Error::Dimension(format!(
                "slice {range:?} on axis {axis} out of bounds for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let width = range.end - range.start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + range.start) * inner;
            data.extend_from_slice(&src[base..base + width * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let out = Tensor::new(out_shape, data)?;
        self.push(
            out,
            Op::Slice {
                x,
                axis,
                start: range.start,
            },
            "slice",
        )
    }

    /// Inserts `amount` zero slices at the front or back of `axis`.
    pub fn zero_pad(&mut self, x: Var, axis: usize, amount: usize, side: PadSide) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "zero_pad axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (len + amount) * inner);
        for o in 0..outer {
            let body = &src[o * len * inner..(o + 1) * len * inner];
            if side == PadSide::Front {
                data.extend(std::iter::repeat_n(0.0, amount * inner));
            }
            data.extend_from_slice(body);
            if side == PadSide::Back {
                data.extend(std::iter::repeat_n(0.0, amount * inner));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] += amount;
        let out = Tensor::new(out_shape, data)?;
        self.push(
            out,
            Op::ZeroPad {
                x,
                axis,
                amount,
                side,
            },
            "zero_pad",
        )
    }

    /// Sum or mean over one axis (removed from the shape) or over everything
    /// (giving a rank-0 tensor).
    pub fn reduce(&mut self, x: Var, kind: Reduction, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let src = self.value(x).data();
        let out = match axis {
            None => {
                let s: f64 = src.iter().sum();
                let v = match kind {
                    Reduction::Sum => s,
                    Reduction::Mean => s / src.len() as f64,
                };
                Tensor::scalar(v)
            }
            Some(axis) => {
                if axis >= shape.len() {
                    return Err(Error::Dimension(format!(
                        "reduce axis {axis} out of range for shape {shape:?}"
                    )));
                }
                let (outer, len, inner) = split_at_axis(&shape, axis);
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
                if kind == Reduction::Mean {
                    let denom = len as f64;
                    data.iter_mut().for_each(|d| *d /= denom);
                }
                let mut out_shape = shape;
                out_shape.remove(axis);
                Tensor::new(out_shape, data)?
            }
        };
        self.push(out, Op::Reduce { x, axis, kind }, "reduce")
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, Reduction::Sum, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, Reduction::Mean, axis)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// The tape is not modified, so calling this twice yields identical
    /// gradients. Every leaf created with `requires_grad` gets a gradient of
    /// its own shape, zero when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "backward: variable {} is not on this tape",
                loss.0
            )));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, delta: Tensor) {
        if !self.requires_grad(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                layout,
                m,
                p,
                n,
            } => {
                let (m, p, n) = (*m, *p, *n);
                let av = self.value(*a);
                let bv = self.value(*b);
                let gd = g.data();
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    let d = da.data_mut();
                    match *layout {
                        MatLayout::Plain => gemm(m, n, p, gd, false, bv.data(), true, d, false),
                        MatLayout::SharedRight { batch } => {
                            gemm(batch * m, n, p, gd, false, bv.data(), true, d, false)
                        }
                        MatLayout::SharedLeft { batch } => {
                            for k in 0..batch {
                                gemm(
                                    m,
                                    n,
                                    p,
                                    &gd[k * m * n..(k + 1) * m * n],
                                    false,
                                    &bv.data()[k * p * n..(k + 1) * p * n],
                                    true,
                                    d,
                                    true,
                                );
                            }
                        }
                        MatLayout::Batched { batch } => {
                            for k in 0..batch {
                                gemm(
                                    m,
                                    n,
                                    p,
                                    &gd[k * m * n..(k + 1) * m * n],
                                    false,
                                    &bv.data()[k * p * n..(k + 1) * p * n],
                                    true,
                                    &mut d[k * m * p..(k + 1) * m * p],
                                    false,
                                );
                            }
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    let d = db.data_mut();
                    match *layout {
                        MatLayout::Plain => gemm(p, m, n, av.data(), true, gd, false, d, false),
                        MatLayout::SharedRight { batch } => {
                            gemm(p, batch * m, n, av.data(), true, gd, false, d, false)
                        }
                        MatLayout::SharedLeft { batch } => {
                            for k in 0..batch {
                                gemm(
                                    p,
                                    m,
                                    n,
                                    av.data(),
                                    true,
                                    &gd[k * m * n..(k + 1) * m * n],
                                    false,
                                    &mut d[k * p * n..(k + 1) * p * n],
                                    false,
                                );
                            }
                        }
                        MatLayout::Batched { batch } => {
                            for k in 0..batch {
                                gemm(
                                    p,
                                    m,
                                    n,
                                    &av.data()[k * m * p..(k + 1) * m * p],
                                    true,
                                    &gd[k * m * n..(k + 1) * m * n],
                                    false,
                                    &mut d[k * p * n..(k + 1) * p * n],
                                    false,
                                );
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Binary { a, b, kind } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let gd = g.data();
                let fold = |shape: &[usize], f: &dyn Fn(usize) -> f64| {
                    let mut out = Tensor::zeros(shape);
                    let len = out.len();
                    let o = out.data_mut();
                    if len == gd.len() {
                        for (idx, d) in o.iter_mut().enumerate() {
                            *d = f(idx);
                        }
                    } else if len > 0 {
                        for idx in 0..gd.len() {
                            o[idx % len] += f(idx);
                        }
                    }
                    out
                };
                let (la, lb) = (av.len().max(1), bv.len().max(1));
                if self.requires_grad(*a) {
                    let da = match kind {
                        BinaryKind::Add | BinaryKind::Sub => fold(av.shape(), &|i| gd[i]),
                        BinaryKind::Mul => fold(av.shape(), &|i| gd[i] * bv.data()[i % lb]),
                    };
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = match kind {
                        BinaryKind::Add => fold(bv.shape(), &|i| gd[i]),
                        BinaryKind::Sub => fold(bv.shape(), &|i| -gd[i]),
                        BinaryKind::Mul => fold(bv.shape(), &|i| gd[i] * av.data()[i % la]),
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::Activation { x, kind } => {
                let y = node.value.data();
                let data = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| match kind {
                        Activation::Sigmoid => gi * yi * (1.0 - yi),
                        Activation::Tanh => gi * (1.0 - yi * yi),
                    })
                    .collect();
                let dx = Tensor::new(node.value.shape().to_vec(), data)
                    .expect("activation gradient shape");
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let (outer, len, inner) = split_at_axis(shape, *axis);
                let y = node.value.data();
                let gd = g.data();
                let mut dx = Tensor::zeros(shape);
                let d = dx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => {
                let dx = g
                    .clone()
                    .reshape(self.shape(*x))
                    .expect("reshape gradient preserves element count");
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_at_axis(out_shape, *axis);
                let gd = g.data();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let width = ps[*axis];
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(outer * width * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&gd[base..base + width * inner]);
                        }
                        let dp = Tensor::new(ps, data).expect("concat gradient shape");
                        self.accumulate(grads, p, dp);
                    }
                    offset += width;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, len, inner) = split_at_axis(&xs, *axis);
                let width = node.value.shape()[*axis];
                let mut dx = Tensor::zeros(&xs);
                let d = dx.data_mut();
                let gd = g.data();
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * width * inner;
                    d[dst..dst + width * inner].copy_from_slice(&gd[src..src + width * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ZeroPad {
                x,
                axis,
                amount,
                side,
            } => {
                let xs = self.shape(*x).to_vec();
                let (outer, len, inner) = split_at_axis(&xs, *axis);
                let padded = len + amount;
                let skip = if *side == PadSide::Front { *amount } else { 0 };
                let gd = g.data();
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * padded + skip) * inner;
                    data.extend_from_slice(&gd[base..base + len * inner]);
                }
                let dx = Tensor::new(xs, data).expect("zero_pad gradient shape");
                self.accumulate(grads, *x, dx);
            }
            Op::Reduce { x, axis, kind } => {
                let xs = self.shape(*x).to_vec();
                let dx = match axis {
                    None => {
                        let n = xs.iter().product::<usize>().max(1) as f64;
                        let v = g.data()[0];
                        let v = if *kind == Reduction::Mean { v / n } else { v };
                        Tensor::full(&xs, v)
                    }
                    Some(axis) => {
                        let (outer, len, inner) = split_at_axis(&xs, *axis);
                        let scale = if *kind == Reduction::Mean {
                            1.0 / len as f64
                        } else {
                            1.0
                        };
                        let gd = g.data();
                        let mut dx = Tensor::zeros(&xs);
                        let d = dx.data_mut();
                        for o in 0..outer {
                            for j in 0..len {
                                let dst = (o * len + j) * inner;
                                for t in 0..inner {
                                    d[dst + t] = gd[o * inner + t] * scale;
                                }
                            }
                        }
                        dx
                    }
                };
                self.accumulate(grads, *x, dx);
            }
        }
    }
}
