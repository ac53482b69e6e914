//! Reverse-mode differentiation over a linear operation tape.
//!
//! Values live on the tape and are addressed by opaque [`Val`] handles.
//! Binary elementwise ops broadcast on trailing axes only: shapes must be
//! equal, or the smaller shape must be a suffix of the larger one (a rank-0
//! scalar broadcasts against anything).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Exp,
    Log,
    Square,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Binary { kind: BinaryKind, a: usize, b: usize },
    Unary { kind: UnaryKind, a: usize },
    Scale { a: usize, factor: f64 },
    SoftmaxAxis { a: usize, axis: usize },
    Reduce { a: usize, axis: usize, mean: bool },
    ReduceAll { a: usize, mean: bool },
    Conv2dSame { input: usize, kernels: usize, bias: usize },
    Reshape { a: usize },
    Transpose { a: usize },
    GatherRows { a: usize, idx: std::sync::Arc<Vec<usize>> },
    ConcatCols { a: usize, b: usize },
    ConcatRows { parts: std::sync::Arc<Vec<usize>> },
    SliceCols { a: usize, start: usize, end: usize },
}

struct Node {
    dims: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Single-writer record of executed differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    min_abs_relu_input: f64,
}

fn dims_str(d: &[usize]) -> String {
    format!("{d:?}")
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            min_abs_relu_input: f64::INFINITY,
        }
    }

    /// Smallest |preactivation| seen by any relu so far; used to flag
    /// kink-adjacent points during finite-difference checks.
    pub fn min_abs_relu_input(&self) -> f64 {
        self.min_abs_relu_input
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, dims: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Val {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            dims,
            data,
            requires_grad,
            grad: None,
            op,
        });
        Val(self.nodes.len() - 1)
    }

    /// Records a tensor as a tape leaf, inheriting its `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Val {
        self.push(
            t.dims().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, dims: Vec<usize>, data: Vec<f64>) -> Val {
        self.push(dims, data, false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Val {
        self.constant(vec![], vec![v])
    }

    pub fn data(&self, v: Val) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn dims(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn requires_grad(&self, v: Val) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Val) -> Tensor {
        Tensor::new(self.nodes[v.0].dims.clone(), self.nodes[v.0].data.clone())
            .expect("tape node is internally consistent")
    }

    /// Accumulated gradient for `v`, if backward has run and `v` required it.
    pub fn grad(&self, v: Val) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ── Elementwise and broadcast ───────────────────────────────────

    fn binary(&mut self, kind: BinaryKind, a: Val, b: Val) -> Result<Val> {
        let (da, db) = (&self.nodes[a.0].dims, &self.nodes[b.0].dims);
        let op_name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        // Output takes the larger shape; the smaller must be a trailing suffix.
        let (out_dims, a_small, b_small) = if da == db {
            (da.clone(), false, false)
        } else if db.len() <= da.len() && da[da.len() - db.len()..] == db[..] {
            (da.clone(), false, true)
        } else if da.len() < db.len() && db[db.len() - da.len()..] == da[..] {
            (db.clone(), true, false)
        } else {
            return Err(Error::Shape {
                op: op_name,
                lhs: dims_str(da),
                rhs: dims_str(db),
            });
        };
        let n: usize = out_dims.iter().product();
        let mut data = vec![0.0; n];
        {
            let av = &self.nodes[a.0].data;
            let bv = &self.nodes[b.0].data;
            let apply = |x: f64, y: f64| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
            if !a_small && !b_small {
                for ((out, x), y) in data.iter_mut().zip(av).zip(bv) {
                    *out = apply(*x, *y);
                }
            } else if b_small {
                // b repeats as a contiguous trailing block.
                let lb = bv.len();
                for (block_out, block_a) in data.chunks_mut(lb).zip(av.chunks(lb)) {
                    for ((out, x), y) in block_out.iter_mut().zip(block_a).zip(bv) {
                        *out = apply(*x, *y);
                    }
                }
            } else {
                let la = av.len();
                for (block_out, block_b) in data.chunks_mut(la).zip(bv.chunks(la)) {
                    for ((out, y), x) in block_out.iter_mut().zip(block_b).zip(av) {
                        *out = apply(*x, *y);
                    }
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out_dims, data, rg, Op::Binary { kind, a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Val) -> Result<Val> {
        if kind == UnaryKind::Log {
            if let Some(bad) = self.nodes[a.0].data.iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("log of nonpositive value {bad}"),
                });
            }
        }
        if kind == UnaryKind::Relu {
            for v in &self.nodes[a.0].data {
                let av = v.abs();
                if av < self.min_abs_relu_input {
                    self.min_abs_relu_input = av;
                }
            }
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| match kind {
                UnaryKind::Relu => x.max(0.0),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Square => x * x,
                UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
                UnaryKind::Tanh => x.tanh(),
            })
            .collect();
        let dims = self.nodes[a.0].dims.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(dims, data, rg, Op::Unary { kind, a: a.0 }))
    }

    pub fn relu(&mut self, a: Val) -> Result<Val> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn exp(&mut self, a: Val) -> Result<Val> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Val) -> Result<Val> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn square(&mut self, a: Val) -> Result<Val> {
        self.unary(UnaryKind::Square, a)
    }

    pub fn sigmoid(&mut self, a: Val) -> Result<Val> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Val) -> Result<Val> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn scale(&mut self, a: Val, factor: f64) -> Result<Val> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * factor).collect();
        let dims = self.nodes[a.0].dims.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(dims, data, rg, Op::Scale { a: a.0, factor }))
    }

    // ── Matrix product ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (da, db) = (&self.nodes[a.0].dims, &self.nodes[b.0].dims);
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: dims_str(da),
                rhs: dims_str(db),
            });
        }
        let (p, q, r) = (da[0], da[1], db[1]);
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, p, q, r);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(vec![p, r], data, rg, Op::Matmul { a: a.0, b: b.0 }))
    }

    // ── Softmax and reductions ──────────────────────────────────────

    fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer: usize = dims[..axis].iter().product();
        let n = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        (outer, n, inner)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax_axis(&mut self, a: Val, axis: usize) -> Result<Val> {
        let dims = self.nodes[a.0].dims.clone();
        if axis >= dims.len() {
            return Err(Error::Shape {
                op: "softmax_axis",
                lhs: dims_str(&dims),
                rhs: format!("axis {axis}"),
            });
        }
        let (outer, n, inner) = Self::split_axis(&dims, axis);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..n {
                    max = max.max(src[at(k)]);
                }
                let mut sum = 0.0;
                for k in 0..n {
                    let e = (src[at(k)] - max).exp();
                    data[at(k)] = e;
                    sum += e;
                }
                for k in 0..n {
                    data[at(k)] /= sum;
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(dims, data, rg, Op::SoftmaxAxis { a: a.0, axis }))
    }

    fn reduce(&mut self, a: Val, axis: usize, mean: bool) -> Result<Val> {
        let dims = self.nodes[a.0].dims.clone();
        if axis >= dims.len() {
            return Err(Error::Shape {
                op: "reduce",
                lhs: dims_str(&dims),
                rhs: format!("axis {axis}"),
            });
        }
        let (outer, n, inner) = Self::split_axis(&dims, axis);
        let mut out_dims = dims.clone();
        out_dims.remove(axis);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    data[o * inner + i] += src[o * n * inner + k * inner + i];
                }
            }
        }
        if mean {
            let nf = n as f64;
            for v in &mut data {
                *v /= nf;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out_dims, data, rg, Op::Reduce { a: a.0, axis, mean }))
    }

    pub fn reduce_sum(&mut self, a: Val, axis: usize) -> Result<Val> {
        self.reduce(a, axis, false)
    }

    pub fn reduce_mean(&mut self, a: Val, axis: usize) -> Result<Val> {
        self.reduce(a, axis, true)
    }

    fn reduce_all(&mut self, a: Val, mean: bool) -> Val {
        let src = &self.nodes[a.0].data;
        let mut s: f64 = src.iter().sum();
        if mean {
            s /= src.len() as f64;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![], vec![s], rg, Op::ReduceAll { a: a.0, mean })
    }

    pub fn sum_all(&mut self, a: Val) -> Val {
        self.reduce_all(a, false)
    }

    pub fn mean_all(&mut self, a: Val) -> Val {
        self.reduce_all(a, true)
    }

    // ── Convolution ─────────────────────────────────────────────────

    /// 3x3 same-size convolution, stride 1, zero padding 1.
    pub fn conv2d_same(&mut self, input: Val, kernels: Val, bias: Val) -> Result<Val> {
        let di = self.nodes[input.0].dims.clone();
        let dk = self.nodes[kernels.0].dims.clone();
        let db = self.nodes[bias.0].dims.clone();
        if di.len() != 3 || dk.len() != 4 || dk[0] != 3 || dk[1] != 3 {
            return Err(Error::Shape {
                op: "conv2d_same",
                lhs: dims_str(&di),
                rhs: dims_str(&dk),
            });
        }
        let (h, w, cin) = (di[0], di[1], di[2]);
        let cout = dk[3];
        if dk[2] != cin || db != [cout] {
            return Err(Error::Shape {
                op: "conv2d_same",
                lhs: format!("input channels {cin}"),
                rhs: format!("kernels {:?}, bias {:?}", dk, db),
            });
        }
        let src = &self.nodes[input.0].data;
        let ker = &self.nodes[kernels.0].data;
        let bia = &self.nodes[bias.0].data;
        let mut data = vec![0.0; h * w * cout];
        for y in 0..h {
            for x in 0..w {
                let out_base = (y * w + x) * cout;
                data[out_base..out_base + cout].copy_from_slice(bia);
                for ky in 0..3usize {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_base = (iy as usize * w + ix as usize) * cin;
                        let k_base = (ky * 3 + kx) * cin * cout;
                        for ci in 0..cin {
                            let v = src[in_base + ci];
                            let kk = k_base + ci * cout;
                            for co in 0..cout {
                                data[out_base + co] += v * ker[kk + co];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.nodes[input.0].requires_grad
            || self.nodes[kernels.0].requires_grad
            || self.nodes[bias.0].requires_grad;
        Ok(self.push(
            vec![h, w, cout],
            data,
            rg,
            Op::Conv2dSame {
                input: input.0,
                kernels: kernels.0,
                bias: bias.0,
            },
        ))
    }

    // ── Shape manipulation ──────────────────────────────────────────

    pub fn reshape(&mut self, a: Val, dims: Vec<usize>) -> Result<Val> {
        let n: usize = dims.iter().product();
        if n != self.nodes[a.0].data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: dims_str(&self.nodes[a.0].dims),
                rhs: dims_str(&dims),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(dims, data, rg, Op::Reshape { a: a.0 }))
    }

    pub fn transpose(&mut self, a: Val) -> Result<Val> {
        let d = &self.nodes[a.0].dims;
        if d.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: dims_str(d),
                rhs: "rank-2 required".into(),
            });
        }
        let (r, c) = (d[0], d[1]);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![c, r], data, rg, Op::Transpose { a: a.0 }))
    }

    /// Selects rows of a rank-2 value; indices may repeat.
    pub fn gather_rows(&mut self, a: Val, idx: &[usize]) -> Result<Val> {
        let d = &self.nodes[a.0].dims;
        if d.len() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: dims_str(d),
                rhs: "rank-2 required".into(),
            });
        }
        let (r, c) = (d[0], d[1]);
        if let Some(bad) = idx.iter().find(|i| **i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: format!("{r} rows"),
                rhs: format!("index {bad}"),
            });
        }
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            vec![idx.len(), c],
            data,
            rg,
            Op::GatherRows {
                a: a.0,
                idx: std::sync::Arc::new(idx.to_vec()),
            },
        ))
    }

    pub fn concat_cols(&mut self, a: Val, b: Val) -> Result<Val> {
        let (da, db) = (&self.nodes[a.0].dims, &self.nodes[b.0].dims);
        if da.len() != 2 || db.len() != 2 || da[0] != db[0] {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: dims_str(da),
                rhs: dims_str(db),
            });
        }
        let (r, c1, c2) = (da[0], da[1], db[1]);
        let mut data = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            data.extend_from_slice(&self.nodes[a.0].data[i * c1..(i + 1) * c1]);
            data.extend_from_slice(&self.nodes[b.0].data[i * c2..(i + 1) * c2]);
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(
            vec![r, c1 + c2],
            data,
            rg,
            Op::ConcatCols { a: a.0, b: b.0 },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::DegenerateInput("concat_rows of zero parts".into()));
        }
        let c = self.nodes[parts[0].0].dims[1];
        let mut rows = 0;
        for p in parts {
            let d = &self.nodes[p.0].dims;
            if d.len() != 2 || d[1] != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: format!("[_, {c}]"),
                    rhs: dims_str(d),
                });
            }
            rows += d[0];
        }
        let mut data = Vec::with_capacity(rows * c);
        let mut rg = false;
        for p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
            rg |= self.nodes[p.0].requires_grad;
        }
        Ok(self.push(
            vec![rows, c],
            data,
            rg,
            Op::ConcatRows {
                parts: std::sync::Arc::new(parts.iter().map(|p| p.0).collect()),
            },
        ))
    }

    pub fn slice_cols(&mut self, a: Val, start: usize, end: usize) -> Result<Val> {
        let d = &self.nodes[a.0].dims;
        if d.len() != 2 || start >= end || end > d[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: dims_str(d),
                rhs: format!("cols {start}..{end}"),
            });
        }
        let (r, c) = (d[0], d[1]);
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.nodes[a.0].data[i * c + start..i * c + end]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            vec![r, w],
            data,
            rg,
            Op::SliceCols { a: a.0, start, end },
        ))
    }

    // ── Backward pass ───────────────────────────────────────────────

    /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    /// node with `requires_grad`. Visits each node exactly once, after
    /// all of its consumers, by walking the tape in reverse.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: dims_str(&self.nodes[loss.0].dims),
                rhs: "scalar loss required".into(),
            });
        }
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.data.len()]);
            } else {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            // Constant loss: every gradient is zero; leaf zeros already set.
            return Ok(());
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            // Detach this node's gradient while propagating; inputs have
            // strictly smaller indices, so nothing reads it meanwhile.
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (p, q) = (self.nodes[a].dims[0], self.nodes[a].dims[1]);
                    let r = self.nodes[b].dims[1];
                    if self.nodes[a].requires_grad {
                        // dA = G @ B^T
                        let bt = transpose_raw(&self.nodes[b].data, q, r);
                        let da = matmul_raw(&grad, &bt, p, r, q);
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        // dB = A^T @ G
                        let at = transpose_raw(&self.nodes[a].data, p, q);
                        let db = matmul_raw(&at, &grad, q, p, r);
                        self.accumulate(b, &db);
                    }
                }
                Op::Binary { kind, a, b } => {
                    let la = self.nodes[a].data.len();
                    let lb = self.nodes[b].data.len();
                    if self.nodes[a].requires_grad {
                        let mut da = vec![0.0; la];
                        {
                            let bv = &self.nodes[b].data;
                            let a_contrib = |g: f64, y: f64| match kind {
                                BinaryKind::Add | BinaryKind::Sub => g,
                                BinaryKind::Mul => g * y,
                                BinaryKind::Div => g / y,
                            };
                            if la == grad.len() && lb == grad.len() {
                                for ((d, g), y) in da.iter_mut().zip(&grad).zip(bv) {
                                    *d += a_contrib(*g, *y);
                                }
                            } else if la == grad.len() {
                                for (block_d, block_g) in
                                    da.chunks_mut(lb).zip(grad.chunks(lb))
                                {
                                    for ((d, g), y) in block_d.iter_mut().zip(block_g).zip(bv) {
                                        *d += a_contrib(*g, *y);
                                    }
                                }
                            } else {
                                // a broadcast: fold every block into it.
                                for (block_g, block_b) in
                                    grad.chunks(la).zip(bv.chunks(la))
                                {
                                    for ((d, g), y) in da.iter_mut().zip(block_g).zip(block_b) {
                                        *d += a_contrib(*g, *y);
                                    }
                                }
                            }
                        }
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        let mut db = vec![0.0; lb];
                        {
                            let av = &self.nodes[a].data;
                            let bv = &self.nodes[b].data;
                            let b_contrib = |g: f64, x: f64, y: f64| match kind {
                                BinaryKind::Add => g,
                                BinaryKind::Sub => -g,
                                BinaryKind::Mul => g * x,
                                BinaryKind::Div => -g * x / (y * y),
                            };
                            if la == grad.len() && lb == grad.len() {
                                for (i, d) in db.iter_mut().enumerate() {
                                    *d += b_contrib(grad[i], av[i], bv[i]);
                                }
                            } else if lb < grad.len() {
                                // b broadcast: fold every block into it.
                                for (block_g, block_a) in
                                    grad.chunks(lb).zip(av.chunks(lb))
                                {
                                    for (i, d) in db.iter_mut().enumerate() {
                                        *d += b_contrib(block_g[i], block_a[i], bv[i]);
                                    }
                                }
                            } else {
                                // a broadcast: it repeats per block of b.
                                for ((block_g, block_db), block_b) in grad
                                    .chunks(la)
                                    .zip(db.chunks_mut(la))
                                    .zip(bv.chunks(la))
                                {
                                    for (i, d) in block_db.iter_mut().enumerate() {
                                        *d += b_contrib(block_g[i], av[i], block_b[i]);
                                    }
                                }
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::Unary { kind, a } => {
                    if !self.nodes[a].requires_grad {
                        continue;
                    }
                    let dg: Vec<f64> = match kind {
                        UnaryKind::Relu => grad
                            .iter()
                            .zip(&self.nodes[a].data)
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                            .collect(),
                        UnaryKind::Exp => grad
                            .iter()
                            .zip(&self.nodes[i].data)
                            .map(|(g, &e)| g * e)
                            .collect(),
                        UnaryKind::Log => grad
                            .iter()
                            .zip(&self.nodes[a].data)
                            .map(|(g, &x)| g / x)
                            .collect(),
                        UnaryKind::Square => grad
                            .iter()
                            .zip(&self.nodes[a].data)
                            .map(|(g, &x)| g * 2.0 * x)
                            .collect(),
                        UnaryKind::Sigmoid => grad
                            .iter()
                            .zip(&self.nodes[i].data)
                            .map(|(g, &s)| g * s * (1.0 - s))
                            .collect(),
                        UnaryKind::Tanh => grad
                            .iter()
                            .zip(&self.nodes[i].data)
                            .map(|(g, &t)| g * (1.0 - t * t))
                            .collect(),
                    };
                    self.accumulate(a, &dg);
                }
                Op::Scale { a, factor } => {
                    if self.nodes[a].requires_grad {
                        let dg: Vec<f64> = grad.iter().map(|g| g * factor).collect();
                        self.accumulate(a, &dg);
                    }
                }
                Op::SoftmaxAxis { a, axis } => {
                    if !self.nodes[a].requires_grad {
                        continue;
                    }
                    let dims = self.nodes[i].dims.clone();
                    let (outer, n, inner) = Self::split_axis(&dims, axis);
                    let out = &self.nodes[i].data;
                    let mut dg = vec![0.0; out.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |k: usize| o * n * inner + k * inner + ii;
                            let mut dot = 0.0;
                            for k in 0..n {
                                dot += grad[at(k)] * out[at(k)];
                            }
                            for k in 0..n {
                                dg[at(k)] = out[at(k)] * (grad[at(k)] - dot);
                            }
                        }
                    }
                    self.accumulate(a, &dg);
                }
                Op::Reduce { a, axis, mean } => {
                    if !self.nodes[a].requires_grad {
                        continue;
                    }
                    let dims = self.nodes[a].dims.clone();
                    let (outer, n, inner) = Self::split_axis(&dims, axis);
                    let scale = if mean { 1.0 / n as f64 } else { 1.0 };
                    let mut dg = vec![0.0; self.nodes[a].data.len()];
                    for o in 0..outer {
                        for k in 0..n {
                            for ii in 0..inner {
                                dg[o * n * inner + k * inner + ii] =
                                    grad[o * inner + ii] * scale;
                            }
                        }
                    }
                    self.accumulate(a, &dg);
                }
                Op::ReduceAll { a, mean } => {
                    if !self.nodes[a].requires_grad {
                        continue;
                    }
                    let n = self.nodes[a].data.len();
                    let g = grad[0] * if mean { 1.0 / n as f64 } else { 1.0 };
                    let dg = vec![g; n];
                    self.accumulate(a, &dg);
                }
                Op::Conv2dSame {
                    input,
                    kernels,
                    bias,
                } => {
                    let di = self.nodes[input].dims.clone();
                    let (h, w, cin) = (di[0], di[1], di[2]);
                    let cout = self.nodes[kernels].dims[3];
                    let need_in = self.nodes[input].requires_grad;
                    let need_k = self.nodes[kernels].requires_grad;
                    let need_b = self.nodes[bias].requires_grad;
                    let mut d_in = vec![0.0; h * w * cin];
                    let mut d_k = vec![0.0; 9 * cin * cout];
                    let mut d_b = vec![0.0; cout];
                    {
                        let src = &self.nodes[input].data;
                        let ker = &self.nodes[kernels].data;
                        for y in 0..h {
                            for x in 0..w {
                                let g_base = (y * w + x) * cout;
                                if need_b {
                                    for co in 0..cout {
                                        d_b[co] += grad[g_base + co];
                                    }
                                }
                                for ky in 0..3usize {
                                    let iy = y as isize + ky as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let ix = x as isize + kx as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let in_base = (iy as usize * w + ix as usize) * cin;
                                        let k_base = (ky * 3 + kx) * cin * cout;
                                        for ci in 0..cin {
                                            let kk = k_base + ci * cout;
                                            if need_in {
                                                let mut acc = 0.0;
                                                for co in 0..cout {
                                                    acc += grad[g_base + co] * ker[kk + co];
                                                }
                                                d_in[in_base + ci] += acc;
                                            }
                                            if need_k {
                                                let v = src[in_base + ci];
                                                for co in 0..cout {
                                                    d_k[kk + co] += v * grad[g_base + co];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if need_in {
                        self.accumulate(input, &d_in);
                    }
                    if need_k {
                        self.accumulate(kernels, &d_k);
                    }
                    if need_b {
                        self.accumulate(bias, &d_b);
                    }
                }
                Op::Reshape { a } => {
                    if self.nodes[a].requires_grad {
                        self.accumulate(a, &grad);
                    }
                }
                Op::Transpose { a } => {
                    if self.nodes[a].requires_grad {
                        let (c, r) = (self.nodes[i].dims[0], self.nodes[i].dims[1]);
                        let dg = transpose_raw(&grad, c, r);
                        self.accumulate(a, &dg);
                    }
                }
                Op::GatherRows { a, idx } => {
                    if self.nodes[a].requires_grad {
                        let c = self.nodes[a].dims[1];
                        let mut dg = vec![0.0; self.nodes[a].data.len()];
                        for (row, &src_row) in idx.iter().enumerate() {
                            for j in 0..c {
                                dg[src_row * c + j] += grad[row * c + j];
                            }
                        }
                        self.accumulate(a, &dg);
                    }
                }
                Op::ConcatCols { a, b } => {
                    let (r, c1) = (self.nodes[a].dims[0], self.nodes[a].dims[1]);
                    let c2 = self.nodes[b].dims[1];
                    if self.nodes[a].requires_grad {
                        let mut da = vec![0.0; r * c1];
                        for row in 0..r {
                            da[row * c1..(row + 1) * c1].copy_from_slice(
                                &grad[row * (c1 + c2)..row * (c1 + c2) + c1],
                            );
                        }
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        let mut db = vec![0.0; r * c2];
                        for row in 0..r {
                            db[row * c2..(row + 1) * c2].copy_from_slice(
                                &grad[row * (c1 + c2) + c1..(row + 1) * (c1 + c2)],
                            );
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::ConcatRows { parts } => {
                    let c = self.nodes[i].dims[1];
                    let mut offset = 0;
                    for &p in parts.iter() {
                        let rows = self.nodes[p].dims[0];
                        if self.nodes[p].requires_grad {
                            let dg = grad[offset * c..(offset + rows) * c].to_vec();
                            self.accumulate(p, &dg);
                        }
                        offset += rows;
                    }
                }
                Op::SliceCols { a, start, end } => {
                    if self.nodes[a].requires_grad {
                        let (r, c) = (self.nodes[a].dims[0], self.nodes[a].dims[1]);
                        let w = end - start;
                        let mut dg = vec![0.0; r * c];
                        for row in 0..r {
                            dg[row * c + start..row * c + end]
                                .copy_from_slice(&grad[row * w..(row + 1) * w]);
                        }
                        self.accumulate(a, &dg);
                    }
                }
            }
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, node: usize, delta: &[f64]) {
        if let Some(g) = self.nodes[node].grad.as_mut() {
            for (t, d) in g.iter_mut().zip(delta) {
                *t += d;
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for k in 0..q {
            let v = a[i * q + k];
            if v == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            let orow = &mut out[i * r..(i + 1) * r];
            for (o, bb) in orow.iter_mut().zip(brow) {
                *o += v * bb;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    /// Independent triple-loop product, deliberately written in ijk order
    /// (the tape kernel runs ikj).
    fn matmul_oracle(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                let mut s = 0.0;
                for k in 0..q {
                    s += a[i * q + k] * b[k * r + j];
                }
                out[i * r + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = t.matmul(i2, m).unwrap();
        assert_eq!(t.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_rows() {
        let mut t = Tape::new();
        let a = t.constant(vec![1, 2], vec![1.0, 0.0]);
        let b = t.constant(vec![2, 1], vec![0.0, 1.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = rand_vec(&mut rng, 12);
        let b = rand_vec(&mut rng, 8);
        let mut t = Tape::new();
        let av = t.constant(vec![3, 4], a.clone());
        let bv = t.constant(vec![4, 2], b.clone());
        let c = t.matmul(av, bv).unwrap();
        let expect = matmul_oracle(&a, &b, 3, 4, 2);
        for (x, y) in t.data(c).iter().zip(&expect) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]);
        let b = t.constant(vec![2, 2], vec![0.0; 4]);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn relu_sign_cases() {
        let mut t = Tape::new();
        let a = t.constant(vec![3], vec![-1.0, 0.0, 2.0]);
        let r = t.relu(a).unwrap();
        assert_eq!(t.data(r), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn exp_of_zero() {
        let mut t = Tape::new();
        let a = t.constant(vec![1], vec![0.0]);
        let e = t.exp(a).unwrap();
        assert_eq!(t.data(e), &[1.0]);
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut t = Tape::new();
        let a = t.constant(vec![2], vec![1.0, -3.0]);
        assert!(matches!(
            t.log(a),
            Err(Error::Domain { op: "log", .. })
        ));
    }

    /// Explicit tiling oracle for the trailing-axes broadcast.
    #[test]
    fn add_broadcast_matches_tiling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_vec(&mut rng, 6);
        let b = rand_vec(&mut rng, 3);
        let mut tiled = Vec::new();
        for row in 0..2 {
            for col in 0..3 {
                tiled.push(a[row * 3 + col] + b[col]);
            }
        }
        let mut t = Tape::new();
        let av = t.constant(vec![2, 3], a);
        let bv = t.constant(vec![3], b);
        let s = t.add(av, bv).unwrap();
        assert_eq!(t.dims(s), &[2, 3]);
        assert_eq!(t.data(s), &tiled[..]);
    }

    #[test]
    fn broadcast_rejects_non_suffix() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]);
        let b = t.constant(vec![2], vec![0.0; 2]);
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut t = Tape::new();
        let a = t.constant(vec![3], vec![0.0, 0.0, 0.0]);
        let s = t.softmax_axis(a, 0).unwrap();
        for v in t.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let b = t.constant(vec![2], vec![1000.0, 0.0]);
        let s2 = t.softmax_axis(b, 0).unwrap();
        let d = t.data(s2);
        assert!(d[0].is_finite() && (d[0] - 1.0).abs() < 1e-12);
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let a = t.constant(vec![2, 3], rand_vec(&mut rng, 6));
        let s = t.softmax_axis(a, 1).unwrap();
        let d = t.data(s);
        for row in 0..2 {
            let sum: f64 = d[row * 3..(row + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reduce_hand_sums() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let s = t.reduce_sum(a, 0).unwrap();
        assert_eq!(t.data(s), &[4.0, 6.0]);
        let c = t.constant(vec![3, 2], vec![7.0; 6]);
        let m = t.reduce_mean(c, 0).unwrap();
        assert_eq!(t.data(m), &[7.0, 7.0]);
    }

    /// Pairwise-tree summation oracle.
    fn tree_sum(v: &[f64]) -> f64 {
        match v.len() {
            0 => 0.0,
            1 => v[0],
            n => tree_sum(&v[..n / 2]) + tree_sum(&v[n / 2..]),
        }
    }

    #[test]
    fn reduce_matches_tree_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = rand_vec(&mut rng, 20);
        let mut t = Tape::new();
        let a = t.constant(vec![4, 5], data.clone());
        let s = t.reduce_sum(a, 1).unwrap();
        for (row, got) in t.data(s).iter().enumerate() {
            let expect = tree_sum(&data[row * 5..(row + 1) * 5]);
            assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    /// Direct six-loop convolution oracle.
    fn conv_oracle(
        input: &[f64],
        ker: &[f64],
        bias: &[f64],
        h: usize,
        w: usize,
        cin: usize,
        cout: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; h * w * cout];
        for y in 0..h {
            for x in 0..w {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            for ci in 0..cin {
                                let iy = y as isize + ky as isize - 1;
                                let ix = x as isize + kx as isize - 1;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += input[(iy as usize * w + ix as usize) * cin + ci]
                                    * ker[((ky * 3 + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[(y * w + x) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = rand_vec(&mut rng, 16);
        let mut ker = vec![0.0; 9];
        ker[4] = 1.0; // center tap
        let mut t = Tape::new();
        let iv = t.constant(vec![4, 4, 1], img.clone());
        let kv = t.constant(vec![3, 3, 1, 1], ker);
        let bv = t.constant(vec![1], vec![0.0]);
        let o = t.conv2d_same(iv, kv, bv).unwrap();
        assert_eq!(t.data(o), &img[..]);
    }

    #[test]
    fn conv_padding_counts() {
        let mut t = Tape::new();
        let iv = t.constant(vec![3, 3, 1], vec![1.0; 9]);
        let kv = t.constant(vec![3, 3, 1, 1], vec![1.0; 9]);
        let bv = t.constant(vec![1], vec![0.0]);
        let o = t.conv2d_same(iv, kv, bv).unwrap();
        let d = t.data(o);
        assert_eq!(d[4], 9.0); // center sees all nine taps
        assert_eq!(d[0], 4.0); // corner sees four
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (h, w, cin, cout) = (5, 4, 2, 3);
        let img = rand_vec(&mut rng, h * w * cin);
        let ker = rand_vec(&mut rng, 9 * cin * cout);
        let bias = rand_vec(&mut rng, cout);
        let mut t = Tape::new();
        let iv = t.constant(vec![h, w, cin], img.clone());
        let kv = t.constant(vec![3, 3, cin, cout], ker.clone());
        let bv = t.constant(vec![cout], bias.clone());
        let o = t.conv2d_same(iv, kv, bv).unwrap();
        let expect = conv_oracle(&img, &ker, &bias, h, w, cin, cout);
        for (x, y) in t.data(o).iter().zip(&expect) {
            assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0));
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad(true));
        let sq = t.square(x).unwrap();
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_unused_leaf_gets_zeros() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad(true));
        let y = t.leaf(&Tensor::new(vec![2], vec![3.0, 4.0]).unwrap().with_grad(true));
        let sq = t.square(x).unwrap();
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(y).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad(true));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn gather_and_concat_round() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let g = t.gather_rows(a, &[1, 0, 1]).unwrap();
        assert_eq!(t.data(g), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let b = t.constant(vec![3, 1], vec![9.0, 8.0, 7.0]);
        let c = t.concat_cols(g, b).unwrap();
        assert_eq!(t.dims(c), &[3, 3]);
        assert_eq!(t.data(c), &[3.0, 4.0, 9.0, 1.0, 2.0, 8.0, 3.0, 4.0, 7.0]);
        let s = t.slice_cols(c, 2, 3).unwrap();
        assert_eq!(t.data(s), &[9.0, 8.0, 7.0]);
    }

    #[test]
    fn determinism_same_seed_same_bits() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let a = rand_vec(&mut rng, 12);
            let b = rand_vec(&mut rng, 8);
            let mut t = Tape::new();
            let av = t.constant(vec![3, 4], a);
            let bv = t.constant(vec![4, 2], b);
            let c = t.matmul(av, bv).unwrap();
            let s = t.softmax_axis(c, 1).unwrap();
            t.data(s).to_vec()
        };
        assert_eq!(run(), run());
    }
}
