use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Gelu(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations over tensors so that gradients can be propagated back
/// to every leaf created with `requires_grad`.
///
/// Calling [`Tape::backward`] more than once adds into the existing leaf
/// gradients; [`Tape::zero_grad`] clears them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_matrix(op: &str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::Dimension(format!(
            "{op}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `out += A · B` for an `m×k` matrix `A` and a `k×n` matrix `B` given by
/// row and column strides; `out` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), out: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() == m * n);
    assert!((m - 1) * rsa + (k - 1) * csa < a.len() && (k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn transpose_buf(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf. Gradients are collected iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_matrix("matmul", ta)?;
        check_matrix("matmul", tb)?;
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions disagree for {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(&[a]);
        Ok(self.push(t, Op::Scale(a, c), needs))
    }

    /// Adds a vector to every trailing-dimension slice of `x` (bias broadcast).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.numel() != n || tb.rank() > 2 || (tb.rank() == 2 && tb.shape()[0] != 1) {
            return Err(Error::Dimension(format!(
                "add_bias: bias {:?} does not match trailing dimension of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let bd = tb.data();
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(x, b)| x + b))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        check_matrix("transpose", tx)?;
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let t = Tensor::new(vec![c, r], transpose_buf(tx.data(), r, c))?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::Transpose(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, n, inner) = axis_split(tx.shape(), axis)?;
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, needs))
    }

    /// Normalises each trailing-dimension row to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm: eps must be > 0, got {eps}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.numel() != n || tb.numel() != n {
            return Err(Error::Dimension(format!(
                "layer_norm: gain {:?} / bias {:?} do not match trailing dimension of {:?}",
                tg.shape(),
                tb.shape(),
                tx.shape()
            )));
        }
        let rows = tx.numel() / n;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Arithmetic mean along `axis`; the axis is dropped from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, n, inner) = axis_split(tx.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += tx.data()[o * n * inner + j * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::Mean { x, axis }, needs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), needs))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::Gelu(x), needs))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`,
    /// computed as `softplus(z) - z*t` so that no logit magnitude overflows.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let tz = self.value(logits);
        check_same_shape("bce_with_logits", tz, targets)?;
        if let Some(bad) = targets.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!(
                "bce_with_logits: target {bad} outside [0, 1]"
            )));
        }
        let n = tz.numel() as f64;
        let total: f64 = tz
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| softplus(z) - z * t)
            .sum();
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            needs,
        ))
    }

    /// Gathers rows of a `V×d` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        check_matrix("gather_rows", tt)?;
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Domain("gather_rows: no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!(
                    "id {id} out of range for table with {v} rows"
                )));
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let needs = self.needs(&[table]);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain("concat_rows: no parts".into()))?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            check_matrix("concat_rows", t)?;
            if t.cols() != cols {
                return Err(Error::Dimension(format!(
                    "concat_rows: width {} does not match {cols}",
                    t.cols()
                )));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        let needs = self.needs(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain("concat_cols: no parts".into()))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            check_matrix("concat_cols", t)?;
            if t.rows() != rows {
                return Err(Error::Dimension(format!(
                    "concat_cols: {} rows do not match {rows}",
                    t.rows()
                )));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let needs = self.needs(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        check_matrix("slice_cols", tx)?;
        if start >= end || end > tx.cols() {
            return Err(Error::Dimension(format!(
                "slice_cols: range {start}..{end} invalid for {:?}",
                tx.shape()
            )));
        }
        let out = (0..tx.rows())
            .flat_map(|r| tx.row(r)[start..end].iter().copied())
            .collect();
        let t = Tensor::new(vec![tx.rows(), end - start], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, needs))
    }

    /// Propagates `d loss / d node` back through the tape and adds the result
    /// into the gradient buffer of every leaf that requires it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be a scalar, got shape {:?}",
                lt.shape()
            )));
        }
        self.backward_from(loss, &[1.0])
    }

    /// Back-propagates an upstream gradient `seed` (same size as `out`)
    /// instead of starting from a scalar loss.
    pub fn backward_from(&mut self, out: Var, seed: &[f64]) -> Result<()> {
        let n = self.value(out).numel();
        if seed.len() != n {
            return Err(Error::Shape(format!(
                "backward_from: seed of length {} for a value of {n} elements",
                seed.len()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.to_vec());
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            if node.value.requires_grad() {
                node.value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(m, n, k, g, (n, 1), tb.data(), (1, n), &mut ga);
                    send(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_acc(k, m, n, ta.data(), (1, k), g, (n, 1), &mut gb);
                    send(*b, gb);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    send(*a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::AddBias(x, bias) => {
                send(*x, g.to_vec());
                if wants(*bias) {
                    let n = self.value(*bias).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    send(*bias, gb);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                send(*x, transpose_buf(g, r, c));
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) =
                    axis_split(node.value.shape(), *axis).expect("validated in forward");
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gd = self.value(*gain).data();
                if wants(*gain) {
                    let mut gg = vec![0.0; n];
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                    send(*gain, gg);
                }
                if wants(*bias) {
                    let mut gb = vec![0.0; n];
                    for grow in g.chunks(n) {
                        gb.iter_mut().zip(grow).for_each(|(a, v)| *a += v);
                    }
                    send(*bias, gb);
                }
                if wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    let nf = n as f64;
                    for (r, inv) in inv_std.iter().enumerate() {
                        let grow = &g[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = grow.iter().zip(gd).map(|(g, w)| g * w).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] = inv / nf * (nf * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                    send(*x, gx);
                }
            }
            Op::Mean { x, axis } => {
                let tx = self.value(*x);
                let (outer, n, inner) = axis_split(tx.shape(), *axis).expect("validated in forward");
                let mut gx = vec![0.0; tx.numel()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[o * n * inner + j * inner + i] = g[o * inner + i] / n as f64;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Gelu(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| {
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    })
                    .collect();
                send(*x, gx);
            }
            Op::BceWithLogits { logits, targets } => {
                let n = targets.len() as f64;
                let gz = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| g[0] * (sigmoid(z) - t) / n)
                    .collect();
                send(*logits, gz);
            }
            Op::Gather { table, ids } => {
                if !wants(*table) {
                    return;
                }
                let tt = self.value(*table);
                let d = tt.cols();
                // accumulate in place: the table can be far larger than the rows read
                let gt = grads[table.0].get_or_insert_with(|| vec![0.0; tt.numel()]);
                for (r, &id) in ids.iter().enumerate() {
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, v)| *a += v);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    send(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if wants(p) {
                        let gp = (0..rows)
                            .flat_map(|r| g[r * total + col..r * total + col + w].iter().copied())
                            .collect();
                        send(p, gp);
                    }
                    col += w;
                }
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (rows, cols) = (tx.rows(), tx.cols());
                let w = node.value.cols();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(*x, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let x = tape.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(m(&[vec![1.0, 2.0]]));
        let z = tape.constant(m(&[vec![0.0], vec![0.0]]));
        let y = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1]);
        assert_eq!(tape.value(y).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 1.0);
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(m(&[vec![5.0, 5.0, 5.0]]));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let x = tape.constant(m(&[vec![1.0, -4.0, 9.0]]));
        let g0 = tape.constant(Tensor::zeros(&[3]));
        let b = tape.constant(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let y = tape.layer_norm(x, g0, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.layer_norm(x, g, b, 0.0), Err(Error::Config(_))));
        assert!(matches!(tape.layer_norm(x, g, b, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn mean_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(m(&[vec![1.0, 3.0], vec![5.0, 7.0]]));
        let y = tape.mean(x, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[2]);
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);

        let r = tape.constant(m(&[vec![0.25, -1.5, 8.0]]));
        let y = tape.mean(r, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -1.5, 8.0]);
        assert!(tape.mean(r, 2).is_err());
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0).with_requires_grad(true));
        let loss = tape.bce_with_logits(z, &Tensor::scalar(0.5)).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(z).unwrap(), &[0.0]);

        let z = tape.constant(Tensor::scalar(40.0));
        let loss = tape.bce_with_logits(z, &Tensor::scalar(1.0)).unwrap();
        let v = tape.value(loss).item();
        assert!(v.is_finite() && (0.0..1e-16).contains(&v));

        let z = tape.constant(Tensor::scalar(-1e6));
        let loss = tape.bce_with_logits(z, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(tape.value(loss).item(), 1e6);

        assert!(matches!(
            tape.bce_with_logits(z, &Tensor::scalar(1.5)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones_and_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 6]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn gather_scatters_additively() {
        let mut tape = Tape::new();
        let t = tape.leaf(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]).with_requires_grad(true));
        let y = tape.gather_rows(t, &[0]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
        let y = tape.gather_rows(t, &[1, 1]).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(t).unwrap(), &[0.0, 0.0, 2.0, 2.0]);
        let err = tape.gather_rows(t, &[2]).unwrap_err();
        assert!(matches!(err, Error::Index(ref s) if s.contains('2')));
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(m(&[vec![5.0], vec![6.0]]));
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = tape.slice_cols(c, 2, 3).unwrap();
        assert_eq!(tape.value(s).data(), &[5.0, 6.0]);
        let r = tape.concat_rows(&[a, a]).unwrap();
        assert_eq!(tape.value(r).shape(), &[4, 2]);
    }
}
