//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! return [`Var`] handles; [`Tape::backward`] walks the recorded nodes in
//! reverse creation order exactly once and returns the gradients of every
//! leaf that requires them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arithmetic used for activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Full 64-bit floats.
    #[default]
    Wide,
    /// Every op output is rounded to the nearest binary16 value.
    Half,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    MaskedSoftmax { x: Var, allowed: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, means: Vec<f64>, rstds: Vec<f64> },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    ChannelAffine { x: Var, gain: Var, bias: Var, factor: f64 },
    GlobalAvgPool(Var),
    Sum(Var),
    SumSquares(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    Pick { x: Var, index: usize },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    spent: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `like`'s shape when nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn add_into(dst: &mut Option<Tensor>, shape: &[usize], src: &[f64]) {
    match dst {
        Some(t) => {
            for (d, s) in t.data_mut().iter_mut().zip(src) {
                *d += s;
            }
        }
        None => *dst = Some(Tensor::from_parts(shape.to_vec(), src.to_vec())),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.spent = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, mut data: Vec<f64>, node_op: Op, inputs: &[Var]) -> Result<Var> {
        if self.precision == Precision::Half {
            for x in data.iter_mut() {
                *x = kernels::round_half(*x);
            }
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2().map_err(|_| dim_err("matmul", ta, tb))?;
        let (k2, n) = tb.dims2().map_err(|_| dim_err("matmul", ta, tb))?;
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2().map_err(|_| dim_err("matmul_bt", ta, tb))?;
        let (n, k2) = tb.dims2().map_err(|_| dim_err("matmul_bt", ta, tb))?;
        if k != k2 {
            return Err(dim_err("matmul_bt", ta, tb));
        }
        let out = kernels::matmul_bt(ta.data(), tb.data(), m, k, n);
        self.push("matmul_bt", vec![m, n], out, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let shape = t.shape().to_vec();
        self.push("transpose", shape, t.into_data(), Op::Transpose(a), &[a])
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(op, ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push(op, shape, out, node, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector to every row (broadcast over the last axis).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let cols = *tx.shape().last().unwrap();
        if tb.numel() != cols || tb.rank() != 1 {
            return Err(dim_err("add_bias", tx, tb));
        }
        let b = tb.data();
        let out = tx
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let shape = tx.shape().to_vec();
        self.push("add_bias", shape, out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push("scale", shape, out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        self.push("relu", shape, out, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = t.shape().to_vec();
        self.push("gelu", shape, out, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        let out = kernels::softmax(t.data(), outer, len, inner);
        let shape = t.shape().to_vec();
        self.push("softmax", shape, out, Op::Softmax { x, outer, len, inner }, &[x])
    }

    /// Row softmax of a matrix restricted to `allowed` entries.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.dims2()?;
        if allowed.len() != rows * cols {
            return Err(Error::Dimension {
                op: "masked_softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![allowed.len()],
            });
        }
        let out = kernels::masked_softmax_rows(t.data(), allowed, rows, cols)
            .map_err(|row| Error::FullyMasked { row })?;
        let shape = t.shape().to_vec();
        let op = Op::MaskedSoftmax {
            x,
            allowed: allowed.to_vec(),
        };
        self.push("masked_softmax", shape, out, op, &[x])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be positive, got {eps}")));
        }
        self.layer_norm_unchecked(x, gain, bias, eps)
    }

    pub(crate) fn layer_norm_unchecked(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let cols = *tx.shape().last().unwrap();
        if tg.numel() != cols || tb.numel() != cols {
            return Err(dim_err("layer_norm", tx, tg));
        }
        let rows = tx.numel() / cols;
        let (out, means, rstds) = kernels::layer_norm_rows(tx.data(), tg.data(), tb.data(), rows, cols, eps);
        let shape = tx.shape().to_vec();
        let op = Op::LayerNorm { x, gain, bias, means, rstds };
        self.push("layer_norm", shape, out, op, &[x, gain, bias])
    }

    /// Cross-correlation of a `[C_in×H×W]` input with `[C_out×C_in×kh×kw]` kernels.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        let (xs, ks) = (tx.shape(), tk.shape());
        if xs.len() != 3 || ks.len() != 4 || xs[0] != ks[1] {
            return Err(dim_err("conv2d", tx, tk));
        }
        let geom = ConvGeom {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw().ok_or_else(|| Error::Shape {
            shape: xs.to_vec(),
            reason: format!("conv output extent < 1 for kernel {ks:?}, stride {stride}, padding {pad}"),
        })?;
        let out = kernels::conv2d(tx.data(), tk.data(), &geom);
        self.push("conv2d", vec![geom.c_out, oh, ow], out, Op::Conv2d { x, k, geom }, &[x, k])
    }

    /// Per-channel `x · factor · gain[c] + bias[c]` over a `[C×H×W]` input.
    pub fn channel_affine(&mut self, x: Var, gain: Var, bias: Var, factor: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.shape()[0];
        if tx.rank() != 3 || tg.numel() != c || tb.numel() != c {
            return Err(dim_err("channel_affine", tx, tg));
        }
        let plane = tx.numel() / c;
        let mut out = tx.data().to_vec();
        for ch in 0..c {
            let (g, b) = (tg.data()[ch] * factor, tb.data()[ch]);
            for v in &mut out[ch * plane..(ch + 1) * plane] {
                *v = *v * g + b;
            }
        }
        let shape = tx.shape().to_vec();
        let op = Op::ChannelAffine { x, gain, bias, factor };
        self.push("channel_affine", shape, out, op, &[x, gain, bias])
    }

    /// Channel-wise spatial mean of a `[C×H×W]` input.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 {
            return Err(Error::Shape {
                shape: t.shape().to_vec(),
                reason: "global_avg_pool expects [C×H×W]".into(),
            });
        }
        let c = t.shape()[0];
        let plane = t.numel() / c;
        let out = t
            .data()
            .chunks(plane)
            .map(|p| p.iter().fold(0.0, |a, &v| a + v) / plane as f64)
            .collect();
        self.push("global_avg_pool", vec![c], out, Op::GlobalAvgPool(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_squares();
        self.push("sum_squares", vec![1], vec![s], Op::SumSquares(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.dims2()?;
        if len == 0 || start + len > cols {
            return Err(Error::Shape {
                shape: t.shape().to_vec(),
                reason: format!("column slice {start}+{len} out of range"),
            });
        }
        let out = t
            .data()
            .chunks(cols)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        self.push("slice_cols", vec![rows, len], out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| crate::error::invalid("nothing to concatenate"))?;
        let (rows, _) = self.value(first).dims2()?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(dim_err("concat_cols", self.value(first), self.value(p)));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push("concat_cols", vec![rows, total], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = t.dims2()?;
        if ids.is_empty() {
            return Err(crate::error::invalid("gather_rows with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!("row {bad} out of range for table with {rows} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let op = Op::GatherRows { table, ids: ids.to_vec() };
        self.push("gather_rows", vec![ids.len(), cols], out, op, &[table])
    }

    /// Summed negative log-likelihood of `targets` under row-softmax of
    /// `logits`; `None` targets are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = t.dims2()?;
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; rows * cols];
        let mut nll = 0.0;
        for (r, tgt) in targets.iter().enumerate() {
            let Some(y) = *tgt else { continue };
            if y >= cols {
                return Err(Error::InvalidArgument(format!("target {y} out of range for {cols} classes")));
            }
            let ls = kernels::log_softmax_row(t.row(r));
            nll -= ls[y];
            for (p, l) in probs[r * cols..(r + 1) * cols].iter_mut().zip(&ls) {
                *p = libm::exp(*l);
            }
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", vec![1], vec![nll], op, &[logits])
    }

    /// One element (by flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.numel() {
            return Err(Error::InvalidArgument(format!("index {index} out of range")));
        }
        let v = t.data()[index];
        self.push("pick", vec![1], vec![v], Op::Pick { x, index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push("reshape", shape.to_vec(), t.into_data(), Op::Reshape(x), &[x])
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// leaf that requires grad. May be called once per recording.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        let seed = Tensor::from_parts(lt.shape().to_vec(), vec![1.0]);
        self.spent = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(seed);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[id].op, Op::Leaf) || !self.nodes[id].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let need = |v: &Var| self.nodes[v.0].requires_grad;
        let val = |v: &Var| &self.nodes[v.0].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2().unwrap();
                let n = val(b).shape()[1];
                if need(a) {
                    let ga = kernels::matmul_bt(gd, val(b).data(), m, n, k);
                    add_into(&mut grads[a.0], &[m, k], &ga);
                }
                if need(b) {
                    let gb = kernels::matmul_at(val(a).data(), gd, m, k, n);
                    add_into(&mut grads[b.0], &[k, n], &gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = val(a).dims2().unwrap();
                let n = val(b).shape()[0];
                if need(a) {
                    let ga = kernels::matmul(gd, val(b).data(), m, n, k);
                    add_into(&mut grads[a.0], &[m, k], &ga);
                }
                if need(b) {
                    let gb = kernels::matmul_at(gd, val(a).data(), m, n, k);
                    add_into(&mut grads[b.0], &[n, k], &gb);
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose().unwrap();
                add_into(&mut grads[a.0], val(a).shape(), gt.data());
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if need(v) {
                        add_into(&mut grads[v.0], g.shape(), gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    add_into(&mut grads[a.0], g.shape(), gd);
                }
                if need(b) {
                    let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                    add_into(&mut grads[b.0], g.shape(), &neg);
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    let ga: Vec<f64> = gd.iter().zip(val(b).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], g.shape(), &ga);
                }
                if need(b) {
                    let gb: Vec<f64> = gd.iter().zip(val(a).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], g.shape(), &gb);
                }
            }
            Op::AddBias(x, bias) => {
                if need(x) {
                    add_into(&mut grads[x.0], g.shape(), gd);
                }
                if need(bias) {
                    let cols = val(bias).numel();
                    let mut gb = vec![0.0; cols];
                    for row in gd.chunks(cols) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    add_into(&mut grads[bias.0], &[cols], &gb);
                }
            }
            Op::Scale(x, c) => {
                let gx: Vec<f64> = gd.iter().map(|v| v * c).collect();
                add_into(&mut grads[x.0], g.shape(), &gx);
            }
            Op::Relu(x) => {
                let gx: Vec<f64> = gd
                    .iter()
                    .zip(val(x).data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], g.shape(), &gx);
            }
            Op::Gelu(x) => {
                let gx: Vec<f64> = gd
                    .iter()
                    .zip(val(x).data())
                    .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                add_into(&mut grads[x.0], g.shape(), &gx);
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = self.nodes[id].value.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..*len {
                            dot += gd[idx(j)] * y[idx(j)];
                        }
                        for j in 0..*len {
                            gx[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                add_into(&mut grads[x.0], g.shape(), &gx);
            }
            Op::MaskedSoftmax { x, allowed } => {
                let y = self.nodes[id].value.data();
                let cols = g.shape()[1];
                let mut gx = vec![0.0; y.len()];
                for (r, (yr, gr)) in y.chunks(cols).zip(gd.chunks(cols)).enumerate() {
                    let ok = &allowed[r * cols..(r + 1) * cols];
                    let mut dot = 0.0;
                    for c in 0..cols {
                        if ok[c] {
                            dot += gr[c] * yr[c];
                        }
                    }
                    for c in 0..cols {
                        if ok[c] {
                            gx[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                }
                add_into(&mut grads[x.0], g.shape(), &gx);
            }
            Op::LayerNorm { x, gain, bias, means, rstds } => {
                let xs = val(x).data();
                let gn = val(gain).data();
                let cols = gn.len();
                let n = cols as f64;
                let mut gx = vec![0.0; xs.len()];
                let mut gg = vec![0.0; cols];
                let mut gb = vec![0.0; cols];
                for (r, (&mean, &rstd)) in means.iter().zip(rstds).enumerate() {
                    let xr = &xs[r * cols..(r + 1) * cols];
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..cols {
                        let xhat = (xr[c] - mean) * rstd;
                        let dxhat = gr[c] * gn[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        gg[c] += gr[c] * xhat;
                        gb[c] += gr[c];
                    }
                    for c in 0..cols {
                        let xhat = (xr[c] - mean) * rstd;
                        let dxhat = gr[c] * gn[c];
                        gx[r * cols + c] = rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
                if need(x) {
                    add_into(&mut grads[x.0], g.shape(), &gx);
                }
                if need(gain) {
                    add_into(&mut grads[gain.0], val(gain).shape(), &gg);
                }
                if need(bias) {
                    add_into(&mut grads[bias.0], val(bias).shape(), &gb);
                }
            }
            Op::Conv2d { x, k, geom } => {
                let (gx, gk) = kernels::conv2d_backward(val(x).data(), val(k).data(), gd, geom);
                if need(x) {
                    add_into(&mut grads[x.0], val(x).shape(), &gx);
                }
                if need(k) {
                    add_into(&mut grads[k.0], val(k).shape(), &gk);
                }
            }
            Op::ChannelAffine { x, gain, bias, factor } => {
                let xs = val(x).data();
                let gn = val(gain).data();
                let c = gn.len();
                let plane = xs.len() / c;
                let mut gx = vec![0.0; xs.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    for i in ch * plane..(ch + 1) * plane {
                        gx[i] = gd[i] * gn[ch] * factor;
                        gg[ch] += gd[i] * xs[i] * factor;
                        gb[ch] += gd[i];
                    }
                }
                if need(x) {
                    add_into(&mut grads[x.0], val(x).shape(), &gx);
                }
                if need(gain) {
                    add_into(&mut grads[gain.0], val(gain).shape(), &gg);
                }
                if need(bias) {
                    add_into(&mut grads[bias.0], val(bias).shape(), &gb);
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = val(x).shape();
                let plane = shape[1] * shape[2];
                let gx: Vec<f64> = (0..val(x).numel()).map(|i| gd[i / plane] / plane as f64).collect();
                add_into(&mut grads[x.0], shape, &gx);
            }
            Op::Sum(x) => {
                let gx = vec![gd[0]; val(x).numel()];
                add_into(&mut grads[x.0], val(x).shape(), &gx);
            }
            Op::SumSquares(x) => {
                let gx: Vec<f64> = val(x).data().iter().map(|v| 2.0 * v * gd[0]).collect();
                add_into(&mut grads[x.0], val(x).shape(), &gx);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = val(x).dims2().unwrap();
                let len = g.shape()[1];
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                add_into(&mut grads[x.0], val(x).shape(), &gx);
            }
            Op::ConcatCols(parts) => {
                let total = g.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = val(p).dims2().unwrap();
                    if need(p) {
                        let mut gp = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            gp.extend_from_slice(&gd[r * total + offset..r * total + offset + cols]);
                        }
                        add_into(&mut grads[p.0], val(p).shape(), &gp);
                    }
                    offset += cols;
                }
            }
            Op::GatherRows { table, ids } => {
                let (rows, cols) = val(table).dims2().unwrap();
                let mut gt = vec![0.0; rows * cols];
                for (k, &i) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gt[i * cols + c] += gd[k * cols + c];
                    }
                }
                add_into(&mut grads[table.0], val(table).shape(), &gt);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = val(logits).shape()[1];
                let mut gl = vec![0.0; probs.len()];
                for (r, tgt) in targets.iter().enumerate() {
                    let Some(y) = *tgt else { continue };
                    for c in 0..cols {
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        gl[r * cols + c] = gd[0] * (probs[r * cols + c] - onehot);
                    }
                }
                add_into(&mut grads[logits.0], val(logits).shape(), &gl);
            }
            Op::Pick { x, index } => {
                let mut gx = vec![0.0; val(x).numel()];
                gx[*index] = gd[0];
                add_into(&mut grads[x.0], val(x).shape(), &gx);
            }
            Op::Reshape(x) => {
                add_into(&mut grads[x.0], val(x).shape(), gd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let i = tape.constant(Tensor::identity(2));
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
        let ia = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(ia).data(), tape.value(a).data());
        let za = tape.matmul(z, a).unwrap();
        assert_eq!(tape.value(za).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[1], &[5.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
        // exp(k)/sum exp evaluated at high precision
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        let expect = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (a, b) in tape.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[1, 3], &[4.0, 4.0, 4.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        // direct mean/variance: mean 2, var 2/3
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = tape.layer_norm_unchecked(x, g, b, 0.0).unwrap();
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, e) in tape.value(y).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }

        let g2 = tape.constant(Tensor::ones(&[2]));
        let b2 = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, g2, b2, 1e-12).unwrap();
        for (a, e) in tape.value(y).data().iter().zip([1.0, -1.0]) {
            assert!((a - e).abs() < 1e-9);
        }
        assert!(matches!(tape.layer_norm(x, g2, b2, 0.0), Err(Error::InvalidArgument(_))));
        assert!(tape.layer_norm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn conv2d_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let unit = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, unit, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let zero = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let y = tape.conv2d(x, zero, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let ones = tape.constant(Tensor::ones(&[1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(ones, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
        let big = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
        assert!(matches!(tape.conv2d(ones, big, 1, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let c = tape.constant(Tensor::full(&[3, 2, 5], 2.5));
        let y = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, 2.5, 2.5]);
        let z = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let y = tape.global_avg_pool(z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_sum_and_half_square() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.5]));
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 6]);

        let mut tape = Tape::new();
        let w = tape.param(t(&[3], &[1.0, -2.0, 0.25]));
        let sq = tape.sum_squares(w).unwrap();
        let loss = tape.scale(sq, 0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), tape.value(w));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
        let c = tape.constant(Tensor::ones(&[2]));
        let s = tape.sum(c).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), Error::Detached);
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), Error::BackwardTwice);
        tape.reset();
        let w = tape.param(Tensor::ones(&[2]));
        let s = tape.sum(w).unwrap();
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn leaves_accumulate_over_paths_and_constants_get_nothing() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let a = tape.mul(w, c).unwrap();
        let b = tape.add(a, w).unwrap();
        let s = tape.sum(b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[4.0, 5.0]);
        assert!(g.get(c).is_none());
        assert!(g.get(a).is_none());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1e300]));
        assert_eq!(tape.scale(x, 1e300).unwrap_err(), Error::NonFinite { op: "scale" });
    }

    #[test]
    fn half_precision_rounds_activations() {
        let mut tape = Tape::with_precision(Precision::Half);
        let x = tape.constant(t(&[1], &[0.1]));
        let y = tape.scale(x, 1.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0999755859375]);
        let big = tape.constant(t(&[1], &[60000.0]));
        assert!(tape.scale(big, 2.0).is_err());
    }
}
