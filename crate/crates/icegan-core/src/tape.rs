//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Values are recorded as arena nodes; `backward` walks the tape in reverse
//! applying hand-derived vector-Jacobian rules. Leaf gradients accumulate
//! across backward calls until `zero_grads`, matching the training-loop
//! convention of explicit gradient reset.

use crate::error::{Error, Result};
use crate::gemm;
use crate::kernels::{self, ConvGeom};
use crate::tensor::{broadcast_shapes, broadcast_strides, reduce_to_shape, Tensor};

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Square,
    Abs,
    Exp,
    Ln,
    Sqrt,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
    /// tanh forward with a wrong backward rule; negative control for the
    /// gradient checker.
    BuggyTanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary { kind: Unary, x: usize },
    Binary { kind: Binary, a: usize, b: usize },
    Matmul { a: usize, b: usize },
    Transpose2 { x: usize },
    Sum { x: usize },
    SumAxis { x: usize, axis: usize },
    Reshape { x: usize },
    Concat { parts: Vec<usize>, axis: usize },
    SliceAxis0 { x: usize, start: usize },
    SwapAxes { x: usize, ax1: usize, ax2: usize },
    SoftmaxLast { x: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    Deconv2d { x: usize, w: usize, geom: ConvGeom },
    CapsPredict { u: usize, w: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// Ordered record of operations; replaying backward rules in reverse
/// yields the same gradients as a single backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    pub fn leaf_data(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, shape, data, requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(Op::Leaf, shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(vec![1], vec![v])
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Gradient accumulated for `v` across all backward calls so far.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ---- elementwise ----

    /// Spec-level dispatch by op tag; binary tags require `b`.
    pub fn elementwise(&mut self, tag: &str, a: Var, b: Option<Var>) -> Result<Var> {
        match (tag, b) {
            ("add", Some(b)) => self.add(a, b),
            ("sub", Some(b)) => self.sub(a, b),
            ("mul", Some(b)) => self.mul(a, b),
            ("div", Some(b)) => self.div(a, b),
            ("relu", None) => Ok(self.relu(a)),
            ("sigmoid", None) => Ok(self.sigmoid(a)),
            ("tanh", None) => Ok(self.tanh_(a)),
            ("square", None) => Ok(self.square(a)),
            ("abs", None) => Ok(self.abs_(a)),
            _ => Err(Error::Config(format!(
                "unknown elementwise tag {tag:?} (arity {})",
                if b.is_some() { 2 } else { 1 }
            ))),
        }
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let xs = &self.nodes[x.0];
        let data: Vec<f64> = match kind {
            Unary::Relu => xs.data.iter().map(|&v| v.max(0.0)).collect(),
            Unary::LeakyRelu(s) => xs.data.iter().map(|&v| if v > 0.0 { v } else { s * v }).collect(),
            Unary::Sigmoid => xs.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
            Unary::Tanh => xs.data.iter().map(|&v| v.tanh()).collect(),
            Unary::Square => xs.data.iter().map(|&v| v * v).collect(),
            Unary::Abs => xs.data.iter().map(|&v| v.abs()).collect(),
            Unary::Exp => xs.data.iter().map(|&v| v.exp()).collect(),
            Unary::Ln => xs.data.iter().map(|&v| v.ln()).collect(),
            Unary::Sqrt => xs.data.iter().map(|&v| v.sqrt()).collect(),
            Unary::Neg => xs.data.iter().map(|&v| -v).collect(),
            Unary::Scale(c) => xs.data.iter().map(|&v| c * v).collect(),
            Unary::AddScalar(c) => xs.data.iter().map(|&v| c + v).collect(),
            Unary::Clamp(lo, hi) => xs.data.iter().map(|&v| v.clamp(lo, hi)).collect(),
            Unary::BuggyTanh => xs.data.iter().map(|&v| v.tanh()).collect(),
        };
        let shape = xs.shape.clone();
        let rg = xs.requires_grad;
        self.push(Op::Unary { kind, x: x.0 }, shape, data, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn tanh_(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }
    pub fn abs_(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }
    pub fn exp_(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }
    pub fn ln_(&mut self, x: Var) -> Var {
        self.unary(Unary::Ln, x)
    }
    pub fn sqrt_(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }
    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), x)
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), x)
    }
    /// tanh whose backward rule is intentionally wrong (uses 1 - y instead
    /// of 1 - y^2). Exists so the gradient checker has a guaranteed-red case.
    pub fn buggy_tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::BuggyTanh, x)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        match kind {
            Binary::Add => self.binary_with(kind, a, b, |x, y| x + y),
            Binary::Sub => self.binary_with(kind, a, b, |x, y| x - y),
            Binary::Mul => self.binary_with(kind, a, b, |x, y| x * y),
            Binary::Div => self.binary_with(kind, a, b, |x, y| x / y),
        }
    }

    fn binary_with<F: Fn(f64, f64) -> f64 + Copy>(
        &mut self,
        kind: Binary,
        a: Var,
        b: Var,
        f: F,
    ) -> Result<Var> {
        let (an, bn) = (&self.nodes[a.0], &self.nodes[b.0]);
        let out_shape = broadcast_shapes(&an.shape, &bn.shape).map_err(|_| Error::ShapeMismatch {
            context: format!("elementwise {kind:?}"),
            lhs: an.shape.clone(),
            rhs: bn.shape.clone(),
        })?;
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        if an.shape == bn.shape {
            for i in 0..numel {
                data[i] = f(an.data[i], bn.data[i]);
            }
        } else {
            // Row-wise broadcast: walk coordinates once per innermost row.
            let sa = broadcast_strides(&an.shape, &out_shape);
            let sb = broadcast_strides(&bn.shape, &out_shape);
            let rank = out_shape.len();
            let inner = out_shape[rank - 1];
            let (sa_in, sb_in) = (sa[rank - 1], sb[rank - 1]);
            let rows = numel / inner;
            let mut coords = vec![0usize; rank - 1];
            let (mut ia, mut ib) = (0usize, 0usize);
            for r in 0..rows {
                let dst = &mut data[r * inner..(r + 1) * inner];
                match (sa_in, sb_in) {
                    (1, 1) => {
                        let av = &an.data[ia..ia + inner];
                        let bv = &bn.data[ib..ib + inner];
                        for i in 0..inner {
                            dst[i] = f(av[i], bv[i]);
                        }
                    }
                    (1, 0) => {
                        let av = &an.data[ia..ia + inner];
                        let bv = bn.data[ib];
                        for i in 0..inner {
                            dst[i] = f(av[i], bv);
                        }
                    }
                    (0, 1) => {
                        let av = an.data[ia];
                        let bv = &bn.data[ib..ib + inner];
                        for i in 0..inner {
                            dst[i] = f(av, bv[i]);
                        }
                    }
                    _ => {
                        let v = f(an.data[ia], bn.data[ib]);
                        dst.fill(v);
                    }
                }
                for d in (0..rank - 1).rev() {
                    coords[d] += 1;
                    ia += sa[d];
                    ib += sb[d];
                    if coords[d] < out_shape[d] {
                        break;
                    }
                    coords[d] = 0;
                    ia -= sa[d] * out_shape[d];
                    ib -= sb[d] * out_shape[d];
                }
            }
        }
        let rg = an.requires_grad || bn.requires_grad;
        Ok(self.push(Op::Binary { kind, a: a.0, b: b.0 }, out_shape, data, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (an, bn) = (&self.nodes[a.0], &self.nodes[b.0]);
        if an.shape.len() != 2 || bn.shape.len() != 2 {
            return Err(Error::BadRank {
                op: "matmul",
                expected: "rank-2 operands",
                got: if an.shape.len() != 2 { an.shape.clone() } else { bn.shape.clone() },
            });
        }
        let (m, k) = (an.shape[0], an.shape[1]);
        let (k2, n) = (bn.shape[0], bn.shape[1]);
        if k != k2 {
            return Err(Error::InnerDimMismatch {
                lhs: an.shape.clone(),
                rhs: bn.shape.clone(),
            });
        }
        let mut data = vec![0.0; m * n];
        gemm::dgemm(m, k, n, &an.data, &bn.data, &mut data);
        let rg = an.requires_grad || bn.requires_grad;
        Ok(self.push(Op::Matmul { a: a.0, b: b.0 }, vec![m, n], data, rg))
    }

    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        let xn = &self.nodes[x.0];
        if xn.shape.len() != 2 {
            return Err(Error::BadRank {
                op: "transpose",
                expected: "rank-2 operand",
                got: xn.shape.clone(),
            });
        }
        let (r, c) = (xn.shape[0], xn.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xn.data[i * c + j];
            }
        }
        let rg = xn.requires_grad;
        Ok(self.push(Op::Transpose2 { x: x.0 }, vec![c, r], data, rg))
    }

    // ---- reductions and shape ----

    pub fn sum(&mut self, x: Var) -> Var {
        let xn = &self.nodes[x.0];
        let total: f64 = xn.data.iter().sum();
        let rg = xn.requires_grad;
        self.push(Op::Sum { x: x.0 }, vec![1], vec![total], rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums along `axis`, keeping it as extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xn = &self.nodes[x.0];
        if axis >= xn.shape.len() {
            return Err(Error::BadRank {
                op: "sum_axis",
                expected: "axis within rank",
                got: xn.shape.clone(),
            });
        }
        let mut out_shape = xn.shape.clone();
        let extent = out_shape[axis];
        out_shape[axis] = 1;
        let outer: usize = xn.shape[..axis].iter().product();
        let inner: usize = xn.shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    dst[i] += xn.data[base + i];
                }
            }
        }
        let rg = xn.requires_grad;
        Ok(self.push(Op::SumAxis { x: x.0, axis }, out_shape, data, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xn = &self.nodes[x.0];
        if shape.iter().product::<usize>() != xn.data.len() {
            return Err(Error::ShapeMismatch {
                context: "reshape".into(),
                lhs: xn.shape.clone(),
                rhs: shape,
            });
        }
        let data = xn.data.clone();
        let rg = xn.requires_grad;
        Ok(self.push(Op::Reshape { x: x.0 }, shape, data, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero parts".into()));
        }
        let first = &self.nodes[parts[0].0].shape;
        let rank = first.len();
        if axis >= rank {
            return Err(Error::BadRank {
                op: "concat",
                expected: "axis within rank",
                got: first.clone(),
            });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != rank
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::ShapeMismatch {
                    context: "concat".into(),
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut data = vec![0.0; outer * total_axis * inner];
        let mut offset = 0usize;
        for p in parts {
            let pn = &self.nodes[p.0];
            let pa = pn.shape[axis];
            for o in 0..outer {
                let src = &pn.data[o * pa * inner..(o + 1) * pa * inner];
                let dst_base = (o * total_axis + offset) * inner;
                data[dst_base..dst_base + pa * inner].copy_from_slice(src);
            }
            offset += pa;
        }
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            out_shape,
            data,
            rg,
        ))
    }

    /// Exchanges two axes, materializing the permuted layout.
    pub fn swap_axes(&mut self, x: Var, ax1: usize, ax2: usize) -> Result<Var> {
        let xn = &self.nodes[x.0];
        let rank = xn.shape.len();
        if ax1 >= rank || ax2 >= rank {
            return Err(Error::BadRank {
                op: "swap_axes",
                expected: "axes within rank",
                got: xn.shape.clone(),
            });
        }
        let mut shape = xn.shape.clone();
        shape.swap(ax1, ax2);
        let data = permute_swap(&xn.data, &xn.shape, ax1, ax2);
        let rg = xn.requires_grad;
        Ok(self.push(Op::SwapAxes { x: x.0, ax1, ax2 }, shape, data, rg))
    }

    /// Contiguous slice `[start, start+len)` along axis 0.
    pub fn slice_axis0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xn = &self.nodes[x.0];
        if xn.shape.is_empty() || start + len > xn.shape[0] || len == 0 {
            return Err(Error::BadRank {
                op: "slice_axis0",
                expected: "range within axis-0 extent",
                got: xn.shape.clone(),
            });
        }
        let inner: usize = xn.shape[1..].iter().product();
        let mut shape = xn.shape.clone();
        shape[0] = len;
        let data = xn.data[start * inner..(start + len) * inner].to_vec();
        let rg = xn.requires_grad;
        Ok(self.push(Op::SliceAxis0 { x: x.0, start }, shape, data, rg))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xn = &self.nodes[x.0];
        let inner = *xn.shape.last().expect("non-empty shape");
        let rows = xn.data.len() / inner;
        let mut data = vec![0.0; xn.data.len()];
        for r in 0..rows {
            let src = &xn.data[r * inner..(r + 1) * inner];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut data[r * inner..(r + 1) * inner];
            let mut z = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let shape = xn.shape.clone();
        let rg = xn.requires_grad;
        self.push(Op::SoftmaxLast { x: x.0 }, shape, data, rg)
    }

    // ---- structured ops ----

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let (xn, wn) = (&self.nodes[x.0], &self.nodes[w.0]);
        if xn.shape.len() != 4 || wn.shape.len() != 4 {
            return Err(Error::BadRank {
                op: "conv2d",
                expected: "x [b,c,h,w] and w [co,ci,k,k]",
                got: if xn.shape.len() != 4 { xn.shape.clone() } else { wn.shape.clone() },
            });
        }
        let (b, ci, h, wd) = (xn.shape[0], xn.shape[1], xn.shape[2], xn.shape[3]);
        let (co, wci) = (wn.shape[0], wn.shape[1]);
        if wci != ci {
            return Err(Error::ChannelMismatch { expected: wci, got: ci });
        }
        let (ho, wo) = match (geom.conv_out(h), geom.conv_out(wd)) {
            (Some(a), Some(bb)) if a >= 1 && bb >= 1 => (a, bb),
            _ => {
                return Err(Error::DegenerateExtent {
                    h,
                    w: wd,
                    k: geom.kernel,
                    s: geom.stride,
                    p: geom.pad,
                })
            }
        };
        let mut data = vec![0.0; b * co * ho * wo];
        kernels::conv2d_forward(&xn.data, b, ci, h, wd, &wn.data, co, geom, &mut data);
        let rg = xn.requires_grad || wn.requires_grad;
        Ok(self.push(
            Op::Conv2d { x: x.0, w: w.0, geom },
            vec![b, co, ho, wo],
            data,
            rg,
        ))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let (xn, wn) = (&self.nodes[x.0], &self.nodes[w.0]);
        if xn.shape.len() != 4 || wn.shape.len() != 4 {
            return Err(Error::BadRank {
                op: "deconv2d",
                expected: "x [b,c,h,w] and w [ci,co,k,k]",
                got: if xn.shape.len() != 4 { xn.shape.clone() } else { wn.shape.clone() },
            });
        }
        let (b, ci, h, wd) = (xn.shape[0], xn.shape[1], xn.shape[2], xn.shape[3]);
        let (wci, co) = (wn.shape[0], wn.shape[1]);
        if wci != ci {
            return Err(Error::ChannelMismatch { expected: wci, got: ci });
        }
        let (ho, wo) = match (geom.deconv_out(h), geom.deconv_out(wd)) {
            (Some(a), Some(bb)) if a >= 1 && bb >= 1 => (a, bb),
            _ => {
                return Err(Error::DegenerateExtent {
                    h,
                    w: wd,
                    k: geom.kernel,
                    s: geom.stride,
                    p: geom.pad,
                })
            }
        };
        let mut data = vec![0.0; b * co * ho * wo];
        kernels::deconv2d_forward(&xn.data, b, ci, h, wd, &wn.data, co, geom, &mut data);
        let rg = xn.requires_grad || wn.requires_grad;
        Ok(self.push(
            Op::Deconv2d { x: x.0, w: w.0, geom },
            vec![b, co, ho, wo],
            data,
            rg,
        ))
    }

    /// Per-capsule predictions: u `[b, l, d_in]`, w `[l, d_in, m]` →
    /// out `[b, l, m]` with out[b,l] = u[b,l] · w[l].
    pub fn caps_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let (un, wn) = (&self.nodes[u.0], &self.nodes[w.0]);
        if un.shape.len() != 3 || wn.shape.len() != 3 {
            return Err(Error::BadRank {
                op: "caps_predict",
                expected: "u [b,l,d] and w [l,d,m]",
                got: if un.shape.len() != 3 { un.shape.clone() } else { wn.shape.clone() },
            });
        }
        let (b, l, d) = (un.shape[0], un.shape[1], un.shape[2]);
        if wn.shape[0] != l || wn.shape[1] != d {
            return Err(Error::ShapeMismatch {
                context: "caps_predict".into(),
                lhs: un.shape.clone(),
                rhs: wn.shape.clone(),
            });
        }
        let m = wn.shape[2];
        let mut data = vec![0.0; b * l * m];
        let mut u_l = vec![0.0; b * d];
        let mut out_l = vec![0.0; b * m];
        for li in 0..l {
            for bi in 0..b {
                u_l[bi * d..(bi + 1) * d]
                    .copy_from_slice(&un.data[(bi * l + li) * d..(bi * l + li + 1) * d]);
            }
            gemm::dgemm(b, d, m, &u_l, &wn.data[li * d * m..(li + 1) * d * m], &mut out_l);
            for bi in 0..b {
                data[(bi * l + li) * m..(bi * l + li + 1) * m]
                    .copy_from_slice(&out_l[bi * m..(bi + 1) * m]);
            }
        }
        let rg = un.requires_grad || wn.requires_grad;
        Ok(self.push(Op::CapsPredict { u: u.0, w: w.0 }, vec![b, l, m], data, rg))
    }

    // ---- backward ----

    /// Propagates dLoss into every reachable `requires_grad` node and
    /// accumulates into the persistent per-node gradients. Repeated calls
    /// without `zero_grads` keep accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if !self.nodes[loss.0].requires_grad {
            // Constant loss: nothing reachable, nothing to assign.
            return Ok(());
        }
        let n = self.nodes.len();
        let mut t: Vec<Option<Vec<f64>>> = vec![None; n];
        t[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if t[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let gy = t[id].take().expect("checked above");
            self.apply_rule(id, &gy, &mut t);
            // Merge into persistent storage.
            match &mut self.grads[id] {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&gy) {
                        *a += g;
                    }
                }
                slot => *slot = Some(gy),
            }
        }
        Ok(())
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn acc(t: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
        t[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn apply_rule(&self, id: usize, gy: &[f64], t: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Unary { kind, x } => {
                if !self.needs(*x) {
                    return;
                }
                let xd = &self.nodes[*x].data;
                let yd = &node.data;
                let gx = Self::acc(t, *x, xd.len());
                match kind {
                    Unary::Relu => {
                        for i in 0..xd.len() {
                            if xd[i] > 0.0 {
                                gx[i] += gy[i];
                            }
                        }
                    }
                    Unary::LeakyRelu(s) => {
                        for i in 0..xd.len() {
                            gx[i] += gy[i] * if xd[i] > 0.0 { 1.0 } else { *s };
                        }
                    }
                    Unary::Sigmoid => {
                        for i in 0..xd.len() {
                            gx[i] += gy[i] * yd[i] * (1.0 - yd[i]);
                        }
                    }
                    Unary::Tanh => {
                        for i in 0..xd.len() {
                            gx[i] += gy[i] * (1.0 - yd[i] * yd[i]);
                        }
                    }
                    Unary::Square => {
                        for i in 0..xd.len() {
                            gx[i] += gy[i] * 2.0 * xd[i];
                        }
                    }
                    Unary::Abs => {
                        for i in 0..xd.len() {
                            gx[i] += gy[i] * if xd[i] > 0.0 { 1.0 } else if xd[i] < 0.0 { -1.0 } else { 0.0 };
                        }
                    }
                    Unary::Exp => {
                        for i in 0..xd.len() {
                            gx[i] += gy[i] * yd[i];
                        }
                    }
                    Unary::Ln => {
                        for i in 0..xd.len() {
                            gx[i] += gy[i] / xd[i];
                        }
                    }
                    Unary::Sqrt => {
                        for i in 0..xd.len() {
                            gx[i] += gy[i] * 0.5 / yd[i];
                        }
                    }
                    Unary::Neg => {
                        for i in 0..xd.len() {
                            gx[i] -= gy[i];
                        }
                    }
                    Unary::Scale(c) => {
                        for i in 0..xd.len() {
                            gx[i] += gy[i] * c;
                        }
                    }
                    Unary::AddScalar(_) => {
                        for i in 0..xd.len() {
                            gx[i] += gy[i];
                        }
                    }
                    Unary::Clamp(lo, hi) => {
                        for i in 0..xd.len() {
                            if xd[i] >= *lo && xd[i] <= *hi {
                                gx[i] += gy[i];
                            }
                        }
                    }
                    Unary::BuggyTanh => {
                        for i in 0..xd.len() {
                            gx[i] += gy[i] * (1.0 - yd[i]);
                        }
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let (an, bn) = (&self.nodes[*a], &self.nodes[*b]);
                let out_shape = &node.shape;
                let same = an.shape == bn.shape;
                // Raw per-output-element gradients for each operand.
                let make = |da: bool| -> Vec<f64> {
                    let mut g = vec![0.0; gy.len()];
                    match kind {
                        Binary::Add => g.copy_from_slice(gy),
                        Binary::Sub => {
                            if da {
                                g.copy_from_slice(gy);
                            } else {
                                for i in 0..gy.len() {
                                    g[i] = -gy[i];
                                }
                            }
                        }
                        Binary::Mul | Binary::Div => {
                            // Need the broadcast-expanded opposite operand.
                            let (src, own) = if da { (bn, an) } else { (an, bn) };
                            if same {
                                if *kind == Binary::Mul {
                                    for i in 0..gy.len() {
                                        g[i] = gy[i] * src.data[i];
                                    }
                                } else if da {
                                    for i in 0..gy.len() {
                                        g[i] = gy[i] / src.data[i];
                                    }
                                } else {
                                    // src is the numerator a, own the
                                    // denominator b: d(a/b)/db = -a/b^2.
                                    for i in 0..gy.len() {
                                        g[i] = -gy[i] * src.data[i] / (own.data[i] * own.data[i]);
                                    }
                                }
                            } else {
                                let ss = broadcast_strides(&src.shape, out_shape);
                                let so = broadcast_strides(&own.shape, out_shape);
                                let rank = out_shape.len();
                                let inner = out_shape[rank - 1];
                                let (ss_in, so_in) = (ss[rank - 1], so[rank - 1]);
                                let rows = g.len() / inner;
                                let mut coords = vec![0usize; rank - 1];
                                let (mut is, mut io) = (0usize, 0usize);
                                for r in 0..rows {
                                    let gyr = &gy[r * inner..(r + 1) * inner];
                                    let dst = &mut g[r * inner..(r + 1) * inner];
                                    if *kind == Binary::Mul {
                                        if ss_in == 0 {
                                            let sv = src.data[is];
                                            for i in 0..inner {
                                                dst[i] = gyr[i] * sv;
                                            }
                                        } else {
                                            let sv = &src.data[is..is + inner];
                                            for i in 0..inner {
                                                dst[i] = gyr[i] * sv[i];
                                            }
                                        }
                                    } else if da {
                                        for i in 0..inner {
                                            dst[i] = gyr[i] / src.data[is + i * ss_in];
                                        }
                                    } else {
                                        for i in 0..inner {
                                            let sv = src.data[is + i * ss_in];
                                            let ov = own.data[io + i * so_in];
                                            dst[i] = -gyr[i] * sv / (ov * ov);
                                        }
                                    }
                                    for d in (0..rank - 1).rev() {
                                        coords[d] += 1;
                                        is += ss[d];
                                        io += so[d];
                                        if coords[d] < out_shape[d] {
                                            break;
                                        }
                                        coords[d] = 0;
                                        is -= ss[d] * out_shape[d];
                                        io -= so[d] * out_shape[d];
                                    }
                                }
                            }
                        }
                    }
                    g
                };
                if self.needs(*a) {
                    let raw = make(true);
                    let reduced = reduce_to_shape(&raw, out_shape, &an.shape);
                    let ga = Self::acc(t, *a, an.data.len());
                    for (g, r) in ga.iter_mut().zip(&reduced) {
                        *g += r;
                    }
                }
                if self.needs(*b) {
                    let raw = make(false);
                    let reduced = reduce_to_shape(&raw, out_shape, &bn.shape);
                    let gb = Self::acc(t, *b, bn.data.len());
                    for (g, r) in gb.iter_mut().zip(&reduced) {
                        *g += r;
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (an, bn) = (&self.nodes[*a], &self.nodes[*b]);
                let (m, k) = (an.shape[0], an.shape[1]);
                let n = bn.shape[1];
                if self.needs(*a) {
                    // dA += gy · B'
                    let ga = Self::acc(t, *a, m * k);
                    gemm::dgemm_bt_acc(m, n, k, 1.0, gy, &bn.data, ga);
                }
                if self.needs(*b) {
                    // dB += A' · gy
                    let gb = Self::acc(t, *b, k * n);
                    gemm::dgemm_at_acc(k, m, n, 1.0, &an.data, gy, gb);
                }
            }
            Op::Transpose2 { x } => {
                if !self.needs(*x) {
                    return;
                }
                let (c, r) = (node.shape[0], node.shape[1]);
                let gx = Self::acc(t, *x, r * c);
                for i in 0..c {
                    for j in 0..r {
                        gx[j * c + i] += gy[i * r + j];
                    }
                }
            }
            Op::Sum { x } => {
                if !self.needs(*x) {
                    return;
                }
                let len = self.nodes[*x].data.len();
                let gx = Self::acc(t, *x, len);
                let g = gy[0];
                for v in gx.iter_mut() {
                    *v += g;
                }
            }
            Op::SumAxis { x, axis } => {
                if !self.needs(*x) {
                    return;
                }
                let xs = &self.nodes[*x].shape;
                let extent = xs[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let gx = Self::acc(t, *x, outer * extent * inner);
                for o in 0..outer {
                    let src = &gy[o * inner..(o + 1) * inner];
                    for e in 0..extent {
                        let dst = &mut gx[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        for i in 0..inner {
                            dst[i] += src[i];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if !self.needs(*x) {
                    return;
                }
                let gx = Self::acc(t, *x, gy.len());
                for (g, y) in gx.iter_mut().zip(gy) {
                    *g += y;
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = &node.shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0usize;
                for p in parts {
                    let pa = self.nodes[*p].shape[*axis];
                    if self.needs(*p) {
                        let plen = self.nodes[*p].data.len();
                        let gp = Self::acc(t, *p, plen);
                        for o in 0..outer {
                            let src_base = (o * total_axis + offset) * inner;
                            let dst = &mut gp[o * pa * inner..(o + 1) * pa * inner];
                            for (d, s) in dst.iter_mut().zip(&gy[src_base..src_base + pa * inner]) {
                                *d += s;
                            }
                        }
                    }
                    offset += pa;
                }
            }
            Op::SliceAxis0 { x, start } => {
                if !self.needs(*x) {
                    return;
                }
                let xn = &self.nodes[*x];
                let inner: usize = xn.shape[1..].iter().product();
                let gx = Self::acc(t, *x, xn.data.len());
                let base = start * inner;
                for (i, g) in gy.iter().enumerate() {
                    gx[base + i] += g;
                }
            }
            Op::SwapAxes { x, ax1, ax2 } => {
                if !self.needs(*x) {
                    return;
                }
                // Swapping is an involution: permute the gradient back.
                let back = permute_swap(gy, &node.shape, *ax1, *ax2);
                let gx = Self::acc(t, *x, back.len());
                for (g, b) in gx.iter_mut().zip(&back) {
                    *g += b;
                }
            }
            Op::SoftmaxLast { x } => {
                if !self.needs(*x) {
                    return;
                }
                let inner = *node.shape.last().expect("non-empty");
                let rows = node.data.len() / inner;
                let gx = Self::acc(t, *x, node.data.len());
                for r in 0..rows {
                    let y = &node.data[r * inner..(r + 1) * inner];
                    let gyr = &gy[r * inner..(r + 1) * inner];
                    let dot: f64 = y.iter().zip(gyr).map(|(a, b)| a * b).sum();
                    let dst = &mut gx[r * inner..(r + 1) * inner];
                    for i in 0..inner {
                        dst[i] += y[i] * (gyr[i] - dot);
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (xn, wn) = (&self.nodes[*x], &self.nodes[*w]);
                let (b, ci, h, wd) = (xn.shape[0], xn.shape[1], xn.shape[2], xn.shape[3]);
                let co = wn.shape[0];
                if self.needs(*x) {
                    let gx = Self::acc(t, *x, xn.data.len());
                    kernels::conv2d_backward_data(gy, b, ci, h, wd, &wn.data, co, *geom, gx);
                }
                if self.needs(*w) {
                    let gw = Self::acc(t, *w, wn.data.len());
                    kernels::conv2d_backward_weights(gy, &xn.data, b, ci, h, wd, co, *geom, gw);
                }
            }
            Op::Deconv2d { x, w, geom } => {
                let (xn, wn) = (&self.nodes[*x], &self.nodes[*w]);
                let (b, ci, h, wd) = (xn.shape[0], xn.shape[1], xn.shape[2], xn.shape[3]);
                let co = wn.shape[1];
                if self.needs(*x) {
                    let gx = Self::acc(t, *x, xn.data.len());
                    kernels::deconv2d_backward_data(gy, b, ci, h, wd, &wn.data, co, *geom, gx);
                }
                if self.needs(*w) {
                    let gw = Self::acc(t, *w, wn.data.len());
                    kernels::deconv2d_backward_weights(gy, &xn.data, b, ci, h, wd, co, *geom, gw);
                }
            }
            Op::CapsPredict { u, w } => {
                let (un, wn) = (&self.nodes[*u], &self.nodes[*w]);
                let (b, l, d) = (un.shape[0], un.shape[1], un.shape[2]);
                let m = wn.shape[2];
                let mut u_l = vec![0.0; b * d];
                let mut gy_l = vec![0.0; b * m];
                let needs_u = self.needs(*u);
                let needs_w = self.needs(*w);
                for li in 0..l {
                    for bi in 0..b {
                        gy_l[bi * m..(bi + 1) * m]
                            .copy_from_slice(&gy[(bi * l + li) * m..(bi * l + li + 1) * m]);
                    }
                    if needs_u {
                        // du_l = gy_l · w_l'
                        let mut gu_l = vec![0.0; b * d];
                        gemm::dgemm_bt_acc(
                            b,
                            m,
                            d,
                            1.0,
                            &gy_l,
                            &wn.data[li * d * m..(li + 1) * d * m],
                            &mut gu_l,
                        );
                        let gu = Self::acc(t, *u, un.data.len());
                        for bi in 0..b {
                            let dst = &mut gu[(bi * l + li) * d..(bi * l + li + 1) * d];
                            for (a, g) in dst.iter_mut().zip(&gu_l[bi * d..(bi + 1) * d]) {
                                *a += g;
                            }
                        }
                    }
                    if needs_w {
                        for bi in 0..b {
                            u_l[bi * d..(bi + 1) * d]
                                .copy_from_slice(&un.data[(bi * l + li) * d..(bi * l + li + 1) * d]);
                        }
                        let gw = Self::acc(t, *w, wn.data.len());
                        // dw_l += u_l' · gy_l
                        gemm::dgemm_at_acc(d, b, m, 1.0, &u_l, &gy_l, &mut gw[li * d * m..(li + 1) * d * m]);
                    }
                }
            }
        }
    }
}

/// Copies `data` (shaped `in_shape`) with axes `ax1` and `ax2` exchanged.
fn permute_swap(data: &[f64], in_shape: &[usize], ax1: usize, ax2: usize) -> Vec<f64> {
    if ax1 == ax2 {
        return data.to_vec();
    }
    let rank = in_shape.len();
    let mut out_shape = in_shape.to_vec();
    out_shape.swap(ax1, ax2);
    let mut out_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        out_strides[d] = out_strides[d + 1] * out_shape[d + 1];
    }
    // Stride in the output for each *input* axis.
    let mut map = vec![0usize; rank];
    for d in 0..rank {
        let out_d = if d == ax1 { ax2 } else if d == ax2 { ax1 } else { d };
        map[d] = out_strides[out_d];
    }
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; rank];
    let mut oi = 0usize;
    for &v in data {
        out[oi] = v;
        for d in (0..rank).rev() {
            coords[d] += 1;
            oi += map[d];
            if coords[d] < in_shape[d] {
                break;
            }
            coords[d] = 0;
            oi -= map[d] * in_shape[d];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        tape.leaf_data(shape.to_vec(), data.to_vec(), true)
    }

    #[test]
    fn swap_axes_matches_manual_transpose() {
        let mut tape = Tape::new();
        // [2,3,2] tensor; swap axes 1,2 -> [2,2,3].
        let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let x = leaf(&mut tape, &[2, 3, 2], &data);
        let y = tape.swap_axes(x, 1, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 3]);
        let v = tape.value(y);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..2 {
                    assert_eq!(v[(a * 2 + c) * 3 + b], data[(a * 3 + b) * 2 + c]);
                }
            }
        }
        // Gradient flows back through the inverse permutation.
        let w: Vec<f64> = (0..12).map(|i| (i as f64 + 1.0) * 0.5).collect();
        let wv = tape.constant(vec![2, 2, 3], w.clone());
        let p = tape.mul(y, wv).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        let gx = tape.grad(x).unwrap();
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..2 {
                    assert_eq!(gx[(a * 3 + b) * 2 + c], w[(a * 2 + c) * 3 + b]);
                }
            }
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], &[1.0, 2.0]);
        let b = leaf(&mut tape, &[2], &[3.0, 4.0]);
        let s = tape.elementwise("add", a, Some(b)).unwrap();
        assert_eq!(tape.value(s), &[4.0, 6.0]);

        let x = leaf(&mut tape, &[3], &[-1.0, 0.0, 2.0]);
        let r = tape.elementwise("relu", x, None).unwrap();
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn product_rule_gradient() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1], &[2.0]);
        let b = leaf(&mut tape, &[1], &[5.0]);
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[5.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], &[0.0; 6]);
        let b = leaf(&mut tape, &[2, 4], &[0.0; 8]);
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 4]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[1.0, 2.0, 3.0]);
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        assert_eq!(tape.value(loss), &[14.0]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_assigns_nothing() {
        let mut tape = Tape::new();
        let c = tape.constant(vec![1], vec![7.0]);
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_identity_selection() {
        let mut tape = Tape::new();
        let i2 = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = leaf(&mut tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let prod = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(prod), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(vec![1, 2], vec![1.0, 0.0]);
        let col = tape.constant(vec![2, 1], vec![2.0, 3.0]);
        let sel = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(sel), &[2.0]);
    }

    #[test]
    fn matmul_inner_dim_error() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], &[0.0; 6]);
        let b = leaf(&mut tape, &[2, 3], &[0.0; 6]);
        assert!(matches!(tape.matmul(a, b), Err(Error::InnerDimMismatch { .. })));
    }

    #[test]
    fn matmul_identity_associativity_exact() {
        // (A·I)·B == A·(I·B) == A·B bitwise.
        let mut tape = Tape::new();
        let a_data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.731).sin() * 3.0).collect();
        let b_data: Vec<f64> = (0..20).map(|i| (i as f64 * 1.13).cos() * 2.0).collect();
        let a = leaf(&mut tape, &[3, 4], &a_data);
        let b = leaf(&mut tape, &[4, 5], &b_data);
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let i4 = tape.constant(vec![4, 4], eye);

        let ai = tape.matmul(a, i4).unwrap();
        let left = tape.matmul(ai, b).unwrap();
        let ib = tape.matmul(i4, b).unwrap();
        let right = tape.matmul(a, ib).unwrap();
        let direct = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(left), tape.value(direct));
        assert_eq!(tape.value(right), tape.value(direct));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        // Grad of (l1 + l2) equals backward(l1) then backward(l2).
        let run_fused = || {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, &[2], &[1.5, -0.5]);
            let s1 = tape.square(x);
            let l1 = tape.sum(s1);
            let t1 = tape.tanh_(x);
            let l2 = tape.sum(t1);
            let total = tape.add(l1, l2).unwrap();
            tape.backward(total).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let run_split = || {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, &[2], &[1.5, -0.5]);
            let s1 = tape.square(x);
            let l1 = tape.sum(s1);
            let t1 = tape.tanh_(x);
            let l2 = tape.sum(t1);
            tape.backward(l1).unwrap();
            tape.backward(l2).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let (f, s) = (run_fused(), run_split());
        for (a, b) in f.iter().zip(&s) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bias = leaf(&mut tape, &[3], &[10.0, 20.0, 30.0]);
        let y = tape.add(x, bias).unwrap();
        assert_eq!(tape.value(y), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(bias).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1, 2, 1, 1], &[1.0, 2.0]);
        let b = leaf(&mut tape, &[1, 3, 1, 1], &[3.0, 4.0, 5.0]);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 5, 1, 1]);
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let w = tape.constant(vec![1, 5, 1, 1], vec![1.0, 10.0, 100.0, 1000.0, 10000.0]);
        let p = tape.mul(c, w).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 10.0]);
        assert_eq!(tape.grad(b).unwrap(), &[100.0, 1000.0, 10000.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let s = tape.softmax_last(x);
        let v = tape.value(s);
        for r in 0..2 {
            let sum: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_axis_keeps_axis() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = tape.sum_axis(x, 1).unwrap();
        assert_eq!(tape.shape(s), &[2, 1]);
        assert_eq!(tape.value(s), &[6.0, 15.0]);
        let s0 = tape.sum_axis(x, 0).unwrap();
        assert_eq!(tape.shape(s0), &[1, 3]);
        assert_eq!(tape.value(s0), &[5.0, 7.0, 9.0]);
    }
}
