//! Operator set and backward rules.
//!
//! Shape rules:
//!
//! | operator | shapes |
//! |---|---|
//! | `add`, `mul` | equal, or one operand's shape is a suffix of the other's (`[d]` against `[n, d]`, `[]` against anything) |
//! | `sub`, `div`, `maximum`, `minimum` | equal, or rhs shape is a suffix of lhs shape |
//! | `matmul` | `[.., k] x [k, n] -> [.., n]`, or batched `[b, m, k] x [b, k, n] -> [b, m, n]` |
//! | `transpose` | swaps the last two axes, rank >= 2 |
//! | `reshape` | same element count |
//! | `concat` | equal extents except along `axis` |
//! | `slice` | `start + len <= extent(axis)` |
//! | `gather_rows` (embedding lookup) | table `[v, ..]`, ids `< v` -> `[ids, ..]` |
//! | `select_per_row` | `[n, v]`, one index per row -> `[n]` |
//! | `softmax`, `log_softmax`, `layer_norm`, `l2_normalize` | act on the last axis |
//! | `gelu`, `exp`, `log`, `sigmoid`, `abs`, `relu`, `clamp`, `scale`, `add_scalar` | elementwise |
//! | `sum`, `mean` | any -> `[]` |
//! | `squared_error` | equal shapes -> `[]` (mean of squared differences) |
//!
//! GELU is the tanh form `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
//! `layer_norm` only standardizes; the affine part is a separate `mul`/`add`.

use std::rc::Rc;

use super::graph::{Node, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Exp,
    Log,
    Sigmoid,
    Gelu,
    Abs,
    Relu,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    AddScalar {
        a: usize,
    },
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    MatMul {
        a: usize,
        b: usize,
        batched: bool,
    },
    Transpose {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: usize,
        ids: Rc<Vec<usize>>,
    },
    SelectPerRow {
        a: usize,
        idx: Rc<Vec<usize>>,
    },
    Softmax {
        a: usize,
    },
    LogSoftmax {
        a: usize,
    },
    LayerNorm {
        a: usize,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        a: usize,
        norms: Vec<f64>,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    SquaredError {
        a: usize,
        b: usize,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } | Op::SquaredError { a, b } => {
                vec![*a, *b]
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::Unary { a, .. }
            | Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Clamp { a, .. }
            | Op::Transpose { a }
            | Op::Reshape { a }
            | Op::Slice { a, .. }
            | Op::SelectPerRow { a, .. }
            | Op::Softmax { a }
            | Op::LogSoftmax { a }
            | Op::LayerNorm { a, .. }
            | Op::L2Normalize { a, .. }
            | Op::Sum { a }
            | Op::Mean { a } => vec![*a],
        }
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

/// `c[m,n] (+)= a[m,k] * b[k,n]` with explicit strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strided views touch
    // (row-major or transposed views of dense buffers of the stated sizes).
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

impl<'g> Var<'g> {
    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands belong to different graphs"
        );
    }

    fn binary(self, other: Var<'g>, kind: BinaryKind, name: &'static str) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let commutative = matches!(kind, BinaryKind::Add | BinaryKind::Mul);
        if a.shape() != b.shape()
            && !is_suffix(a.shape(), b.shape())
            && commutative
            && is_suffix(b.shape(), a.shape())
        {
            return other.binary(self, kind, name);
        }
        if !is_suffix(a.shape(), b.shape()) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let bd = b.data();
        let bl = bd.len();
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
            BinaryKind::Max => |x, y| if x >= y { x } else { y },
            BinaryKind::Min => |x, y| if x <= y { x } else { y },
        };
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bl]))
            .collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        self.graph.push(
            name,
            out,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Max, "maximum")
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Min, "minimum")
    }

    fn unary(self, kind: UnaryKind, name: &'static str) -> Result<Var<'g>> {
        let a = self.value();
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            UnaryKind::Gelu => |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            UnaryKind::Abs => f64::abs,
            UnaryKind::Relu => |x| if x > 0.0 { x } else { 0.0 },
        };
        let out = Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect());
        self.graph.push(name, out, Op::Unary { kind, a: self.id })
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Exp, "exp")
    }

    pub fn log(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Log, "log")
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Sigmoid, "sigmoid")
    }

    pub fn gelu(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Gelu, "gelu")
    }

    pub fn abs(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Abs, "abs")
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Relu, "relu")
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        let a = self.value();
        let out = Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x * c).collect());
        self.graph.push("scale", out, Op::Scale { a: self.id, c })
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        let a = self.value();
        let out = Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x + c).collect());
        self.graph.push("add_scalar", out, Op::AddScalar { a: self.id })
    }

    /// Clamps into `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'g>> {
        let a = self.value();
        let out = Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().map(|x| x.clamp(lo, hi)).collect(),
        );
        self.graph.push("clamp", out, Op::Clamp { a: self.id, lo, hi })
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sb.len() == 2 && !sa.is_empty() {
            let (k, n) = (sb[0], sb[1]);
            if last_dim(sa) != k {
                return Err(mismatch());
            }
            let rows = a.len() / k;
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, &mut out, false);
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = n;
            let t = Tensor::from_parts(shape, out);
            return self.graph.push(
                "matmul",
                t,
                Op::MatMul {
                    a: self.id,
                    b: other.id,
                    batched: false,
                },
            );
        }
        if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1] {
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..],
                    k as isize,
                    1,
                    &b.data()[i * k * n..],
                    n as isize,
                    1,
                    &mut out[i * m * n..],
                    false,
                );
            }
            let t = Tensor::from_parts(vec![bs, m, n], out);
            return self.graph.push(
                "matmul",
                t,
                Op::MatMul {
                    a: self.id,
                    b: other.id,
                    batched: true,
                },
            );
        }
        Err(mismatch())
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let a = self.value();
        let s = a.shape();
        if s.len() < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: s.to_vec(),
                reason: "rank must be at least 2".into(),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_last2(a.data(), r, c);
        let mut shape = s.to_vec();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        self.graph
            .push("transpose", Tensor::from_parts(shape, out), Op::Transpose { a: self.id })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let n: usize = shape.iter().product();
        if n != a.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor::from_parts(shape.to_vec(), a.data().to_vec());
        self.graph.push("reshape", t, Op::Reshape { a: self.id })
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for (p, v) in parts.iter().zip(&values) {
            first.same_graph(p);
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let blk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        first.graph.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        )
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        let s = a.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: s.to_vec(),
                reason: format!("axis {axis}, range {start}..{}", start + len),
            });
        }
        let (outer, ext, inner) = split_axis(s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.graph.push(
            "slice",
            Tensor::from_parts(shape, out),
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
        )
    }

    /// Embedding lookup: picks rows (first-axis entries) of `self`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'g>> {
        let t = self.value();
        let s = t.shape();
        if s.is_empty() || ids.is_empty() {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: s.to_vec(),
                reason: "need a non-scalar table and at least one id".into(),
            });
        }
        let rows = s[0];
        let w = t.len() / rows;
        let mut out = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            if i >= rows {
                return Err(Error::InvalidShape {
                    op: "gather_rows",
                    shape: s.to_vec(),
                    reason: format!("row {i} out of range"),
                });
            }
            out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        let mut shape = s.to_vec();
        shape[0] = ids.len();
        self.graph.push(
            "gather_rows",
            Tensor::from_parts(shape, out),
            Op::GatherRows {
                table: self.id,
                ids: Rc::new(ids.to_vec()),
            },
        )
    }

    /// `out[i] = self[i, idx[i]]` for a `[n, v]` input.
    pub fn select_per_row(self, idx: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&j| j >= s[1]) {
            return Err(Error::InvalidShape {
                op: "select_per_row",
                shape: s.to_vec(),
                reason: format!("{} indices", idx.len()),
            });
        }
        let v = s[1];
        let out = idx.iter().enumerate().map(|(i, &j)| a.data()[i * v + j]).collect();
        self.graph.push(
            "select_per_row",
            Tensor::from_parts(vec![idx.len()], out),
            Op::SelectPerRow {
                a: self.id,
                idx: Rc::new(idx.to_vec()),
            },
        )
    }

    pub fn softmax(self) -> Result<Var<'g>> {
        let a = self.value();
        let w = last_dim(a.shape());
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(w) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.graph.push(
            "softmax",
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::Softmax { a: self.id },
        )
    }

    pub fn log_softmax(self) -> Result<Var<'g>> {
        let a = self.value();
        let w = last_dim(a.shape());
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(w) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.graph.push(
            "log_softmax",
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::LogSoftmax { a: self.id },
        )
    }

    /// Standardizes each last-axis row: `(x - mean) / sqrt(var + eps)`.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'g>> {
        let a = self.value();
        let w = last_dim(a.shape());
        let mut out = a.data().to_vec();
        let mut inv_std = Vec::with_capacity(a.len() / w);
        for row in out.chunks_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w as f64;
            let r = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            inv_std.push(r);
        }
        self.graph.push(
            "layer_norm",
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::LayerNorm { a: self.id, inv_std },
        )
    }

    /// Divides each last-axis row by its Euclidean norm.
    pub fn l2_normalize(self) -> Result<Var<'g>> {
        let a = self.value();
        let w = last_dim(a.shape());
        let mut out = a.data().to_vec();
        let mut norms = Vec::with_capacity(a.len() / w);
        for row in out.chunks_mut(w) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm("l2_normalize"));
            }
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        self.graph.push(
            "l2_normalize",
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::L2Normalize { a: self.id, norms },
        )
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let s = self.value().data().iter().sum();
        self.graph.push("sum", Tensor::scalar(s), Op::Sum { a: self.id })
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.graph.push("mean", Tensor::scalar(s), Op::Mean { a: self.id })
    }

    /// Mean of squared differences over all elements.
    pub fn squared_error(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "squared_error",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let s = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64;
        self.graph.push(
            "squared_error",
            Tensor::scalar(s),
            Op::SquaredError { a: self.id, b: other.id },
        )
    }
}

fn transpose_last2(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let blk = r * c;
    for (src, dst) in data.chunks(blk).zip(out.chunks_mut(blk)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// Gradient contributions `(input id, d loss / d input)` of node `id`.
pub(crate) fn backward(nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
    let node = &nodes[id];
    let needs = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| nodes[i].value.clone();
    let gd = g.data();
    let mut out = Vec::new();

    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (ad, bd) = (av.data(), bv.data());
            let bl = bd.len();
            if needs(*a) {
                let da: Vec<f64> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let (x, y) = (ad[i], bd[i % bl]);
                        match kind {
                            BinaryKind::Add | BinaryKind::Sub => g,
                            BinaryKind::Mul => g * y,
                            BinaryKind::Div => g / y,
                            BinaryKind::Max => if x >= y { g } else { 0.0 },
                            BinaryKind::Min => if x <= y { g } else { 0.0 },
                        }
                    })
                    .collect();
                out.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
            }
            if needs(*b) {
                let mut db = vec![0.0; bl];
                for (i, &g) in gd.iter().enumerate() {
                    let (x, y) = (ad[i], bd[i % bl]);
                    db[i % bl] += match kind {
                        BinaryKind::Add => g,
                        BinaryKind::Sub => -g,
                        BinaryKind::Mul => g * x,
                        BinaryKind::Div => -g * x / (y * y),
                        BinaryKind::Max => if x >= y { 0.0 } else { g },
                        BinaryKind::Min => if x <= y { 0.0 } else { g },
                    };
                }
                out.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
            }
        }
        Op::Unary { kind, a } => {
            let av = val(*a);
            let yd = node.value.data();
            let da = av
                .data()
                .iter()
                .zip(yd)
                .zip(gd)
                .map(|((&x, &y), &g)| match kind {
                    UnaryKind::Exp => g * y,
                    UnaryKind::Log => g / x,
                    UnaryKind::Sigmoid => g * y * (1.0 - y),
                    UnaryKind::Gelu => {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    }
                    UnaryKind::Abs => {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }
                    UnaryKind::Relu => if x > 0.0 { g } else { 0.0 },
                })
                .collect();
            out.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
        }
        Op::Scale { a, c } => {
            out.push((*a, Tensor::from_parts(g.shape().to_vec(), gd.iter().map(|x| x * c).collect())));
        }
        Op::AddScalar { a } => out.push((*a, g.clone())),
        Op::Clamp { a, lo, hi } => {
            let av = val(*a);
            let da = av
                .data()
                .iter()
                .zip(gd)
                .map(|(&x, &g)| if x >= *lo && x <= *hi { g } else { 0.0 })
                .collect();
            out.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
        }
        Op::MatMul { a, b, batched } => {
            let (av, bv) = (val(*a), val(*b));
            if !batched {
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let rows = av.len() / k;
                if needs(*a) {
                    let mut da = vec![0.0; rows * k];
                    // g[rows,n] * b^T
                    gemm(rows, n, k, gd, n as isize, 1, bv.data(), 1, n as isize, &mut da, false);
                    out.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    // a^T[k,rows] * g
                    gemm(k, rows, n, av.data(), 1, k as isize, gd, n as isize, 1, &mut db, false);
                    out.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
                }
            } else {
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                if needs(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..],
                            n as isize,
                            1,
                            &bv.data()[i * k * n..],
                            1,
                            n as isize,
                            &mut da[i * m * k..],
                            false,
                        );
                    }
                    out.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
                }
                if needs(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[i * m * k..],
                            1,
                            k as isize,
                            &gd[i * m * n..],
                            n as isize,
                            1,
                            &mut db[i * k * n..],
                            false,
                        );
                    }
                    out.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
                }
            }
        }
        Op::Transpose { a } => {
            let s = g.shape();
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let av = val(*a);
            out.push((*a, Tensor::from_parts(av.shape().to_vec(), transpose_last2(gd, r, c))));
        }
        Op::Reshape { a } => {
            let av = val(*a);
            out.push((*a, Tensor::from_parts(av.shape().to_vec(), gd.to_vec())));
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(g.shape(), *axis);
            let mut offset = 0;
            for &i in inputs {
                let iv = val(i);
                let ext = iv.shape()[*axis];
                if needs(i) {
                    let mut d = Vec::with_capacity(iv.len());
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        d.extend_from_slice(&gd[base..base + ext * inner]);
                    }
                    out.push((i, Tensor::from_parts(iv.shape().to_vec(), d)));
                }
                offset += ext;
            }
        }
        Op::Slice { a, axis, start } => {
            let av = val(*a);
            let (outer, ext, inner) = split_axis(av.shape(), *axis);
            let len = g.shape()[*axis];
            let mut d = vec![0.0; av.len()];
            for o in 0..outer {
                let dst = o * ext * inner + start * inner;
                let src = o * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            out.push((*a, Tensor::from_parts(av.shape().to_vec(), d)));
        }
        Op::GatherRows { table, ids } => {
            let tv = val(*table);
            let w = tv.len() / tv.shape()[0];
            let mut d = vec![0.0; tv.len()];
            for (r, &i) in ids.iter().enumerate() {
                for (x, y) in d[i * w..(i + 1) * w].iter_mut().zip(&gd[r * w..(r + 1) * w]) {
                    *x += y;
                }
            }
            out.push((*table, Tensor::from_parts(tv.shape().to_vec(), d)));
        }
        Op::SelectPerRow { a, idx } => {
            let av = val(*a);
            let v = av.shape()[1];
            let mut d = vec![0.0; av.len()];
            for (i, &j) in idx.iter().enumerate() {
                d[i * v + j] += gd[i];
            }
            out.push((*a, Tensor::from_parts(av.shape().to_vec(), d)));
        }
        Op::Softmax { a } => {
            let y = node.value.data();
            let w = last_dim(g.shape());
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d.chunks_mut(w).zip(y.chunks(w)).zip(gd.chunks(w)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((dx, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                    *dx = y * (g - dot);
                }
            }
            out.push((*a, Tensor::from_parts(g.shape().to_vec(), d)));
        }
        Op::LogSoftmax { a } => {
            let y = node.value.data();
            let w = last_dim(g.shape());
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d.chunks_mut(w).zip(y.chunks(w)).zip(gd.chunks(w)) {
                let s: f64 = gr.iter().sum();
                for ((dx, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                    *dx = g - y.exp() * s;
                }
            }
            out.push((*a, Tensor::from_parts(g.shape().to_vec(), d)));
        }
        Op::LayerNorm { a, inv_std } => {
            let y = node.value.data();
            let w = last_dim(g.shape());
            let mut d = vec![0.0; y.len()];
            for (r, ((dr, yr), gr)) in d.chunks_mut(w).zip(y.chunks(w)).zip(gd.chunks(w)).enumerate() {
                let mg = gr.iter().sum::<f64>() / w as f64;
                let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / w as f64;
                for ((dx, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                    *dx = inv_std[r] * (g - mg - y * mgy);
                }
            }
            out.push((*a, Tensor::from_parts(g.shape().to_vec(), d)));
        }
        Op::L2Normalize { a, norms } => {
            let y = node.value.data();
            let w = last_dim(g.shape());
            let mut d = vec![0.0; y.len()];
            for (r, ((dr, yr), gr)) in d.chunks_mut(w).zip(y.chunks(w)).zip(gd.chunks(w)).enumerate() {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((dx, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                    *dx = (g - y * dot) / norms[r];
                }
            }
            out.push((*a, Tensor::from_parts(g.shape().to_vec(), d)));
        }
        Op::Sum { a } => {
            let av = val(*a);
            out.push((*a, Tensor::full(av.shape(), gd[0])));
        }
        Op::Mean { a } => {
            let av = val(*a);
            out.push((*a, Tensor::full(av.shape(), gd[0] / av.len() as f64)));
        }
        Op::SquaredError { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let c = 2.0 * gd[0] / av.len() as f64;
            let diff: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| c * (x - y)).collect();
            if needs(*b) {
                out.push((*b, Tensor::from_parts(bv.shape().to_vec(), diff.iter().map(|x| -x).collect())));
            }
            if needs(*a) {
                out.push((*a, Tensor::from_parts(av.shape().to_vec(), diff)));
            }
        }
    }
    out
}
