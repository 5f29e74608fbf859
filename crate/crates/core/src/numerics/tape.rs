//! Reverse-mode differentiation over a per-forward-pass operation tape.
//!
//! Every op appends a node holding its output value. Node ids are assigned in
//! creation order, so walking the tape backwards is a valid reverse
//! topological order. The tape is consumed by [`Tape::backward`]; graphs never
//! outlive one forward/backward pass.

use super::kernels::{col2im_add, gemm, im2col, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Stack {
        xs: Vec<Var>,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    NllProb {
        probs: Var,
        labels: Vec<usize>,
        floor: f64,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    L2Norm(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` requires grad.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each element of `out_shape` (row-major), the flat offset of the
/// corresponding element in a tensor of `in_shape` broadcast to `out_shape`.
fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let in_strides = Tensor::strides(in_shape);
    let mut strides = vec![0; rank];
    for i in 0..in_shape.len() {
        let o = i + rank - in_shape.len();
        if in_shape[i] != 1 {
            strides[o] = in_strides[i];
        }
    }
    let numel: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Adds an input tensor. Gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Adds a tensor that never receives gradients.
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
        self.rg(v)
    }

    // ---------------------------------------------------------------- binary

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb)
            .ok_or_else(|| shape_err("broadcast", format!("{sa:?} and {sb:?} are not broadcastable")))?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = broadcast_offsets(&out_shape, sa);
            let ob = broadcast_offsets(&out_shape, sb);
            oa.iter().zip(&ob).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Binary { kind, a, b }, rg))
    }

    /// Elementwise sum with trailing-axis broadcasting.
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

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect());
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |e| e * factor)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |e| e + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |e| e.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |e| 1.0 / (1.0 + (-e).exp()))
    }

    /// Natural log; inputs must be positive.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |e| e * e)
    }

    // ---------------------------------------------------------- linear algebra

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Fully connected layer: `x[n,in] · w[out,in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(shape_err("linear", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (n, i, o) = (sx[0], sx[1], sw[0]);
        let bias = self.value(b).data();
        let mut out: Vec<f64> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![n, o], out), Op::Linear { x, w, b }, rg))
    }

    /// 2-D cross-correlation over `x[N,C,H,W]` with `w[O,C,kh,kw]` and an
    /// optional bias `b[O]`, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("x {sx:?}, w {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {} filters", self.shape(b), sw[0]),
                ));
            }
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {h}×{wd}"),
            ));
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; n * rows * ncols];
        let mut out = vec![0.0; n * o * ncols];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            let col = &mut cols[s * rows * ncols..(s + 1) * rows * ncols];
            im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], &geom, col);
            let dst = &mut out[s * o * ncols..(s + 1) * o * ncols];
            if let Some(b) = b {
                for (f, &bv) in self.value(b).data().iter().enumerate() {
                    dst[f * ncols..(f + 1) * ncols].fill(bv);
                }
            }
            gemm(o, rows, ncols, wv, false, col, false, 1.0, dst);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let shape = vec![n, o, geom.out_h, geom.out_w];
        // Columns are only needed to form the weight gradient.
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Non-overlapping `size×size` max pooling over `x[N,C,H,W]`; trailing
    /// rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(shape_err("max_pool2d", format!("input {s:?}, window {size}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / size, w / size);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let i = base + (oy * size + dy) * w + ox * size + dx;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    argmax.push(best);
                    out.push(xv[best]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![s[0], s[1], oh, ow], out),
            Op::MaxPool2d { x, argmax },
            rg,
        ))
    }

    /// Maximum over the last two (spatial) axes; ties resolve to the first
    /// position in row-major order. `[..., H, W] → [...]`.
    pub fn global_max(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err("global_max", format!("needs rank ≥ 2, got {s:?}")));
        }
        let area = s[s.len() - 2] * s[s.len() - 1];
        let lead: Vec<usize> = if s.len() == 2 {
            vec![1]
        } else {
            s[..s.len() - 2].to_vec()
        };
        let xv = self.value(x).data();
        let planes = xv.len() / area;
        let mut out = Vec::with_capacity(planes);
        let mut argmax = Vec::with_capacity(planes);
        for p in 0..planes {
            let mut best = p * area;
            for i in p * area..(p + 1) * area {
                if xv[i] > xv[best] {
                    best = i;
                }
            }
            argmax.push(best);
            out.push(xv[best]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(lead, out), Op::GlobalMax { x, argmax }, rg))
    }

    // ------------------------------------------------------------ reductions

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        if len == 0 {
            return Err(Error::EmptyAxis { op: "softmax", axis });
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..len {
                    max = max.max(xv[at(k)]);
                }
                let mut total = 0.0;
                for k in 0..len {
                    let e = (xv[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(s, out), Op::Softmax { x, axis }, rg))
    }

    /// Sum along `axis`; the axis is kept with extent 1 when `keepdim`.
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("sum", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &xv[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut shape = s.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sum { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| shape_err("mean", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Euclidean norm along the last axis: `[..., D] → [...]`.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut shape = s[..s.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::L2Norm(x), rg)
    }

    /// Scales every row (last axis) to unit L2 norm. Rows whose norm is below
    /// `eps` become exactly zero and pass no gradient.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        let mut norms = Vec::with_capacity(xv.len() / d);
        for (r, row) in xv.chunks(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            if norm >= eps {
                for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(s, out), Op::NormalizeRows { x, norms, eps }, rg)
    }

    // ------------------------------------------------------------ reshaping

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err(
                "permute",
                format!("{perm:?} is not a permutation of {} axes", s.len()),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let in_strides = Tensor::strides(&s);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let offsets = strided_offsets(&out_shape, &src_strides);
        let xv = self.value(x).data();
        let out: Vec<f64> = offsets.iter().map(|&o| xv[o]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute { x, perm: perm.to_vec() },
            rg,
        ))
    }

    /// Slice `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || index >= s[axis] {
            return Err(shape_err("select", format!("index {index} on axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * len + index) * inner..(o * len + index + 1) * inner]);
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Select { x, axis, index }, rg))
    }

    /// Stacks same-shape tensors along a new axis inserted at `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err("stack", "no inputs"))?;
        let s = self.shape(*first).to_vec();
        if axis > s.len() {
            return Err(shape_err("stack", format!("axis {axis} for rank {}", s.len())));
        }
        if let Some(bad) = xs.iter().find(|&&v| self.shape(v) != s.as_slice()) {
            return Err(shape_err("stack", format!("{:?} vs {s:?}", self.shape(*bad))));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * inner * xs.len());
        for o in 0..outer {
            for &v in xs {
                out.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s;
        shape.insert(axis, xs.len());
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Stack { xs: xs.to_vec(), axis }, rg))
    }

    // ---------------------------------------------------------------- losses

    /// Mean softmax cross-entropy of `logits[n,c]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {s:?}, {} labels", labels.len()),
            ));
        }
        let (n, c) = (s[0], s[1]);
        check_labels(labels, c)?;
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            total += max + z.ln() - row[y];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of probability rows `probs[n,c]`, with
    /// each probability floored at `floor` inside the log.
    pub fn nll_prob(&mut self, probs: Var, labels: &[usize], floor: f64) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("nll_prob", format!("probs {s:?}, {} labels", labels.len())));
        }
        let (n, c) = (s[0], s[1]);
        check_labels(labels, c)?;
        let pv = self.value(probs).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -pv[i * c + y].max(floor).ln())
            .sum();
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::NllProb {
                probs,
                labels: labels.to_vec(),
                floor,
            },
            rg,
        ))
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a one-element `loss`. Returns gradients for every
    /// node that requires grad; leaves the loss does not reach get zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let out = self
            .nodes
            .into_iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.numel();
        macro_rules! target {
            ($v:expr) => {
                accumulate(&mut grads[$v.0], len($v))
            };
        }
        match &node.op {
            Op::Leaf => {}
            &Op::Binary { kind, a, b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (va, vb) = (val(a), val(b));
                let same = sa == sb;
                let (oa, ob) = if same {
                    (Vec::new(), Vec::new())
                } else {
                    (broadcast_offsets(out.shape(), sa), broadcast_offsets(out.shape(), sb))
                };
                let ia = |i: usize| if same { i } else { oa[i] };
                let ib = |i: usize| if same { i } else { ob[i] };
                if self.rg(a) {
                    let ga = target!(a);
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ia(i)] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * vb[ib(i)],
                            Binary::Div => gi / vb[ib(i)],
                        };
                    }
                }
                if self.rg(b) {
                    let gb = target!(b);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[ib(i)] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * va[ia(i)],
                            Binary::Div => {
                                let y = vb[ib(i)];
                                -gi * va[ia(i)] / (y * y)
                            }
                        };
                    }
                }
            }
            &Op::Scale(x, f) => {
                for (d, &gi) in target!(x).iter_mut().zip(g) {
                    *d += gi * f;
                }
            }
            &Op::AddScalar(x) => {
                for (d, &gi) in target!(x).iter_mut().zip(g) {
                    *d += gi;
                }
            }
            &Op::Relu(x) => {
                let xv = val(x);
                for ((d, &gi), &xi) in target!(x).iter_mut().zip(g).zip(xv) {
                    if xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            &Op::Sigmoid(x) => {
                for ((d, &gi), &y) in target!(x).iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y * (1.0 - y);
                }
            }
            &Op::Log(x) => {
                let xv = val(x);
                for ((d, &gi), &xi) in target!(x).iter_mut().zip(g).zip(xv) {
                    *d += gi / xi;
                }
            }
            &Op::Exp(x) => {
                for ((d, &gi), &y) in target!(x).iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y;
                }
            }
            &Op::Abs(x) => {
                let xv = val(x);
                for ((d, &gi), &xi) in target!(x).iter_mut().zip(g).zip(xv) {
                    if xi > 0.0 {
                        *d += gi;
                    } else if xi < 0.0 {
                        *d -= gi;
                    }
                }
            }
            &Op::Square(x) => {
                let xv = val(x);
                for ((d, &gi), &xi) in target!(x).iter_mut().zip(g).zip(xv) {
                    *d += 2.0 * gi * xi;
                }
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(a) {
                    let bv = val(b);
                    gemm(m, n, k, g, false, bv, true, 1.0, target!(a));
                }
                if self.rg(b) {
                    let av = val(a);
                    gemm(k, m, n, av, true, g, false, 1.0, target!(b));
                }
            }
            &Op::Linear { x, w, b } => {
                let (n, i) = (self.shape(x)[0], self.shape(x)[1]);
                let o = self.shape(w)[0];
                if self.rg(x) {
                    let wv = val(w);
                    gemm(n, o, i, g, false, wv, false, 1.0, target!(x));
                }
                if self.rg(w) {
                    let xv = val(x);
                    gemm(o, n, i, g, true, xv, false, 1.0, target!(w));
                }
                if self.rg(b) {
                    let gb = target!(b);
                    for row in g.chunks(o) {
                        for (d, &gi) in gb.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (x, w) = (*x, *w);
                let n = self.shape(x)[0];
                let o = self.shape(w)[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.channels * geom.height * geom.width;
                if self.rg(w) {
                    let gw = target!(w);
                    for s in 0..n {
                        let gs = &g[s * o * ncols..(s + 1) * o * ncols];
                        let col = &cols[s * rows * ncols..(s + 1) * rows * ncols];
                        gemm(o, ncols, rows, gs, false, col, true, 1.0, gw);
                    }
                }
                if let Some(b) = *b {
                    if self.rg(b) {
                        let gb = target!(b);
                        for s in 0..n {
                            for (f, d) in gb.iter_mut().enumerate() {
                                let start = (s * o + f) * ncols;
                                *d += g[start..start + ncols].iter().sum::<f64>();
                            }
                        }
                    }
                }
                if self.rg(x) {
                    let wv = val(w);
                    let mut dcol = vec![0.0; rows * ncols];
                    let gx = target!(x);
                    for s in 0..n {
                        let gs = &g[s * o * ncols..(s + 1) * o * ncols];
                        gemm(rows, o, ncols, wv, true, gs, false, 0.0, &mut dcol);
                        col2im_add(&dcol, geom, &mut gx[s * in_len..(s + 1) * in_len]);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } | Op::GlobalMax { x, argmax } => {
                let gx = target!(*x);
                for (&src, &gi) in argmax.iter().zip(g) {
                    gx[src] += gi;
                }
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), axis);
                let y = out.data();
                let gx = target!(x);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            }
            &Op::Sum { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(x), axis);
                let gx = target!(x);
                for o in 0..outer {
                    for k in 0..len {
                        let dst = &mut gx[(o * len + k) * inner..(o * len + k + 1) * inner];
                        for (d, &gi) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += gi;
                        }
                    }
                }
            }
            &Op::SumAll(x) => {
                for d in target!(x).iter_mut() {
                    *d += g[0];
                }
            }
            &Op::Reshape(x) => {
                for (d, &gi) in target!(x).iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Permute { x, perm } => {
                let s = self.shape(*x);
                let in_strides = Tensor::strides(s);
                let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let offsets = strided_offsets(out.shape(), &src_strides);
                let gx = target!(*x);
                for (&off, &gi) in offsets.iter().zip(g) {
                    gx[off] += gi;
                }
            }
            &Op::Select { x, axis, index } => {
                let (outer, len, inner) = split_axis(self.shape(x), axis);
                let gx = target!(x);
                for o in 0..outer {
                    let dst = &mut gx[(o * len + index) * inner..(o * len + index + 1) * inner];
                    for (d, &gi) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                        *d += gi;
                    }
                }
            }
            Op::Stack { xs, axis } => {
                let s = self.shape(xs[0]);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis..].iter().product();
                for (j, &v) in xs.iter().enumerate() {
                    if !self.rg(v) {
                        continue;
                    }
                    let gv = target!(v);
                    for o in 0..outer {
                        let src = &g[(o * xs.len() + j) * inner..(o * xs.len() + j + 1) * inner];
                        for (d, &gi) in gv[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let gl = target!(*logits);
                for (i, &y) in labels.iter().enumerate() {
                    for k in 0..c {
                        let onehot = if k == y { 1.0 } else { 0.0 };
                        gl[i * c + k] += scale * (probs[i * c + k] - onehot);
                    }
                }
            }
            Op::NllProb { probs, labels, floor } => {
                let n = labels.len();
                let pv = val(*probs);
                let c = pv.len() / n;
                let scale = g[0] / n as f64;
                let gp = target!(*probs);
                for (i, &y) in labels.iter().enumerate() {
                    let p = pv[i * c + y];
                    if p > *floor {
                        gp[i * c + y] -= scale / p;
                    }
                }
            }
            Op::NormalizeRows { x, norms, eps } => {
                let d = *out.shape().last().unwrap();
                let y = out.data();
                let gx = target!(*x);
                for (r, &norm) in norms.iter().enumerate() {
                    if norm < *eps {
                        continue;
                    }
                    let span = r * d..(r + 1) * d;
                    let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                    for k in span {
                        gx[k] += (g[k] - y[k] * dot) / norm;
                    }
                }
            }
            &Op::L2Norm(x) => {
                let xv = val(x);
                let d = *self.shape(x).last().unwrap();
                let gx = target!(x);
                for (r, &norm) in out.data().iter().enumerate() {
                    if norm == 0.0 {
                        continue;
                    }
                    for k in r * d..(r + 1) * d {
                        gx[k] += g[r] * xv[k] / norm;
                    }
                }
            }
        }
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= num_classes) {
        Some(&label) => Err(Error::InvalidLabel { label, num_classes }),
        None => Ok(()),
    }
}

/// Flat source offsets when walking `shape` in row-major order with the given
/// per-axis source strides.
fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let rank = shape.len();
    let mut offsets = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}
