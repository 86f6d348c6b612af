use super::kernels::{self, gemm, MatRef};
use super::{Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Keeps the tanh of every input for the backward pass.
    Gelu(Var, Vec<f64>),
    Relu(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        blocks: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    RowNorms(Var),
    Sum(Var),
    MulConst(Var, Vec<f64>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of operations. Nodes are pushed in evaluation order,
/// so every node's parents precede it and a reverse sweep is a valid
/// topological order for the backward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Gradients of a scalar root with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `None` for nodes that are not tracked or not reachable from the root.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient, or zeros of the node's shape when the root does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Leaf whose gradient is recorded.
    pub fn param(&mut self, mut value: Tensor) -> Var {
        value.round_to(self.precision);
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.round_to(self.precision);
        self.push_raw(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, mut value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        value.round_to(self.precision);
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        Ok(self.push_raw(value, op, tracked))
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect())?;
        self.push(name, value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let tanh: Vec<f64> = ta.data().iter().map(|&x| kernels::gelu_tanh(x)).collect();
        let data = ta.data().iter().zip(&tanh).map(|(&x, &t)| kernels::gelu_from_tanh(x, t)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("gelu", value, Op::Gelu(a, tanh), &[a])
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `a[m×n] + row[n]`, broadcasting the row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, cols) = ta.matrix_dims();
        if tr.len() != cols {
            return Err(Error::dim("add_row", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_exact_mut(cols) {
            for (x, b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_row", value, Op::AddRow(a, row), &[a, row])
    }

    /// `a[k·m × n] + tile[m×n]`, adding `tile` to each of the `k` row blocks.
    pub fn add_tiled(&mut self, a: Var, tile: Var) -> Result<Var> {
        let (ta, tt) = (self.value(a), self.value(tile));
        let (_, cols) = ta.matrix_dims();
        let (_, tcols) = tt.matrix_dims();
        if cols != tcols || ta.len() % tt.len() != 0 {
            return Err(Error::dim("add_tiled", ta.shape(), tt.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_exact_mut(tt.len()) {
            for (x, b) in chunk.iter_mut().zip(tt.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_tiled", value, Op::AddTiled(a, tile), &[a, tile])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = kernels::transpose(self.value(a))?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, cols) = ta.matrix_dims();
        let mut data = ta.data().to_vec();
        kernels::softmax_rows_inplace(&mut data, cols);
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("softmax", value, Op::SoftmaxRows(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (_, cols) = tx.matrix_dims();
        if tg.len() != cols || tb.len() != cols {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let (out, xhat, inv_std) = kernels::layer_norm_forward(tx.data(), cols, tg.data(), tb.data());
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", value, op, &[x, gain, bias])
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, cols) = ta.matrix_dims();
        if rows.is_empty() {
            return Err(Error::EmptyInput("gather_rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", ta.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &i in rows {
            data.extend_from_slice(&ta.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![rows.len(), cols], data)?;
        self.push("gather_rows", value, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput("concat_rows"))?;
        let (_, cols) = self.value(*first).matrix_dims();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            let (r, c) = t.matrix_dims();
            if c != cols {
                return Err(Error::dim("concat_rows", self.value(*first).shape(), t.shape()));
            }
            data.extend_from_slice(t.data());
            rows += r;
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.matrix_dims();
        if width == 0 || start + width > cols {
            return Err(Error::dim("slice_cols", ta.shape(), &[start, width]));
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * cols + start..r * cols + start + width]);
        }
        let value = Tensor::new(vec![rows, width], data)?;
        self.push("slice_cols", value, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput("concat_cols"))?;
        let (rows, _) = self.value(*first).matrix_dims();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            let (r, c) = t.matrix_dims();
            if r != rows {
                return Err(Error::dim("concat_cols", self.value(*first).shape(), t.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Multi-head scaled dot-product attention over `blocks` independent
    /// sequences. `q` is `[blocks·tq × d]`, `k` and `v` are `[blocks·tk × d]`;
    /// head `h` uses columns `h·d/heads .. (h+1)·d/heads` and is scaled by
    /// `1/sqrt(d/heads)`. Returns the concatenated heads, `[blocks·tq × d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, blocks: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (qr, d) = tq.matrix_dims();
        let (kr, kd) = tk.matrix_dims();
        if kd != d || tv.shape() != tk.shape() {
            return Err(Error::dim("attention", tq.shape(), tk.shape()));
        }
        if blocks == 0 || heads == 0 || qr % blocks != 0 || kr % blocks != 0 || d % heads != 0 {
            return Err(Error::dim("attention", tq.shape(), &[blocks, heads]));
        }
        let (nq, nk, dh) = (qr / blocks, kr / blocks, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; blocks * heads * nq * nk];
        let mut out = vec![0.0; qr * d];
        for b in 0..blocks {
            for h in 0..heads {
                let p_off = (b * heads + h) * nq * nk;
                let qv = MatRef::rows(tq.data(), b * nq * d + h * dh, d);
                let kv = MatRef::rows(tk.data(), b * nk * d + h * dh, d);
                gemm(nq, dh, nk, scale, qv, kv.t(), 0.0, &mut probs, p_off, nk);
                kernels::softmax_rows_inplace(&mut probs[p_off..p_off + nq * nk], nk);
                let pv = MatRef::rows(&probs, p_off, nk);
                let vv = MatRef::rows(tv.data(), b * nk * d + h * dh, d);
                gemm(nq, nk, dh, 1.0, pv, vv, 0.0, &mut out, b * nq * d + h * dh, d);
            }
        }
        let value = Tensor::new(vec![qr, d], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            blocks,
            heads,
            probs,
        };
        self.push("attention", value, op, &[q, k, v])
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node, laid
    /// out as `[blocks][heads][tq][tk]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// L2 norm of each row, `[m×n] → [m]`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, cols) = ta.matrix_dims();
        let data: Vec<f64> = ta.data().chunks_exact(cols).map(kernels::norm).collect();
        let value = Tensor::vector(data);
        self.push("row_norms", value, Op::RowNorms(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    /// Elementwise product with a fixed, non-differentiable tensor.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != c.len() {
            return Err(Error::dim("mul_const", ta.shape(), c.shape()));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul_const", value, Op::MulConst(a, c.data().to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if rt.len() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                shape: rt.shape().to_vec(),
            });
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].tracked {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.tracked {
                *slot = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn grad_target<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if self.nodes[v.0].tracked {
            Some(acc(&mut grads[v.0], self.nodes[v.0].value.len()))
        } else {
            None
        }
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (p, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(t) = self.grad_target(grads, p) {
                        t.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (p, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(t) = self.grad_target(grads, p) {
                        t.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).to_vec(), val(*b).to_vec());
                if let Some(t) = self.grad_target(grads, *a) {
                    for i in 0..t.len() {
                        t[i] += g[i] * vb[i];
                    }
                }
                if let Some(t) = self.grad_target(grads, *b) {
                    for i in 0..t.len() {
                        t[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(t) = self.grad_target(grads, *a) {
                    t.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(t) = self.grad_target(grads, *a) {
                    t.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(t) = self.grad_target(grads, *a) {
                    t.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let cols = self.nodes[row.0].value.len();
                if let Some(t) = self.grad_target(grads, *row) {
                    for chunk in g.chunks_exact(cols) {
                        t.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddTiled(a, tile) => {
                if let Some(t) = self.grad_target(grads, *a) {
                    t.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let len = self.nodes[tile.0].value.len();
                if let Some(t) = self.grad_target(grads, *tile) {
                    for chunk in g.chunks_exact(len) {
                        t.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA = G · Bᵀ, dB = Aᵀ · G
                if let Some(t) = self.grad_target(grads, *a) {
                    let bv = MatRef::rows(val(*b), 0, n);
                    gemm(m, n, k, 1.0, MatRef::rows(g, 0, n), bv.t(), 1.0, t, 0, k);
                }
                if let Some(t) = self.grad_target(grads, *b) {
                    let av = MatRef::rows(val(*a), 0, k);
                    gemm(k, m, n, 1.0, av.t(), MatRef::rows(g, 0, n), 1.0, t, 0, n);
                }
            }
            Op::Transpose(a) => {
                let s = self.nodes[a.0].value.shape();
                let (r, c) = (s[0], s[1]);
                if let Some(t) = self.grad_target(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            t[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let (_, cols) = node.value.matrix_dims();
                if let Some(t) = self.grad_target(grads, *a) {
                    for ((yr, gr), tr) in y
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(t.chunks_exact_mut(cols))
                    {
                        let s = kernels::dot(yr, gr);
                        for c in 0..cols {
                            tr[c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (_, cols) = node.value.matrix_dims();
                let gv = val(*gain).to_vec();
                if let Some(t) = self.grad_target(grads, *gain) {
                    for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for c in 0..cols {
                            t[c] += gr[c] * hr[c];
                        }
                    }
                }
                if let Some(t) = self.grad_target(grads, *bias) {
                    for gr in g.chunks_exact(cols) {
                        t.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(t) = self.grad_target(grads, *x) {
                    let nf = cols as f64;
                    for (r, ((gr, hr), tr)) in g
                        .chunks_exact(cols)
                        .zip(xhat.chunks_exact(cols))
                        .zip(t.chunks_exact_mut(cols))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / nf;
                        let mean_dh_h = kernels::dot(&dh, hr) / nf;
                        for c in 0..cols {
                            tr[c] += inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(a, tanh) => {
                let x = val(*a).to_vec();
                if let Some(t) = self.grad_target(grads, *a) {
                    for i in 0..t.len() {
                        t[i] += g[i] * kernels::gelu_grad_from_tanh(x[i], tanh[i]);
                    }
                }
            }
            Op::Relu(a) => {
                let x = val(*a).to_vec();
                if let Some(t) = self.grad_target(grads, *a) {
                    for i in 0..t.len() {
                        if x[i] > 0.0 {
                            t[i] += g[i];
                        }
                    }
                }
            }
            Op::GatherRows(a, rows) => {
                let (_, cols) = node.value.matrix_dims();
                if let Some(t) = self.grad_target(grads, *a) {
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            t[r * cols + c] += g[k * cols + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(t) = self.grad_target(grads, *p) {
                        t.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y);
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, width) = node.value.matrix_dims();
                let (_, cols) = self.nodes[a.0].value.matrix_dims();
                if let Some(t) = self.grad_target(grads, *a) {
                    for r in 0..rows {
                        for c in 0..width {
                            t[r * cols + start + c] += g[r * width + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.matrix_dims();
                let mut col = 0;
                for p in parts {
                    let (_, w) = self.nodes[p.0].value.matrix_dims();
                    if let Some(t) = self.grad_target(grads, *p) {
                        for r in 0..rows {
                            for c in 0..w {
                                t[r * w + c] += g[r * total + col + c];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                blocks,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *blocks, *heads, probs, grads),
            Op::RowNorms(a) => {
                let x = val(*a).to_vec();
                let (_, cols) = self.nodes[a.0].value.matrix_dims();
                let norms = node.value.data();
                if let Some(t) = self.grad_target(grads, *a) {
                    for (r, &nr) in norms.iter().enumerate() {
                        // Zero rows have no direction; their gradient is taken as 0.
                        if nr > 0.0 {
                            for c in 0..cols {
                                t[r * cols + c] += g[r] * x[r * cols + c] / nr;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(t) = self.grad_target(grads, *a) {
                    t.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MulConst(a, c) => {
                if let Some(t) = self.grad_target(grads, *a) {
                    for i in 0..t.len() {
                        t[i] += g[i] * c[i];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        blocks: usize,
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let (qr, d) = tq.matrix_dims();
        let (kr, _) = tk.matrix_dims();
        let (nq, nk, dh) = (qr / blocks, kr / blocks, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qr * d];
        let mut dk = vec![0.0; kr * d];
        let mut dv = vec![0.0; kr * d];
        let mut dp = vec![0.0; nq * nk];
        for b in 0..blocks {
            for h in 0..heads {
                let p_off = (b * heads + h) * nq * nk;
                let q_off = b * nq * d + h * dh;
                let k_off = b * nk * d + h * dh;
                let p = MatRef::rows(probs, p_off, nk);
                let go = MatRef::rows(g, q_off, d);
                // dV = Pᵀ · dO
                gemm(nk, nq, dh, 1.0, p.t(), go, 0.0, &mut dv, k_off, d);
                // dP = dO · Vᵀ
                let vv = MatRef::rows(tv.data(), k_off, d);
                gemm(nq, dh, nk, 1.0, go, vv.t(), 0.0, &mut dp, 0, nk);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                let pr = &probs[p_off..p_off + nq * nk];
                for (dpr, prr) in dp.chunks_exact_mut(nk).zip(pr.chunks_exact(nk)) {
                    let s = kernels::dot(dpr, prr);
                    for c in 0..nk {
                        dpr[c] = prr[c] * (dpr[c] - s);
                    }
                }
                let ds = MatRef::rows(&dp, 0, nk);
                // dQ = scale · dS · K, dK = scale · dSᵀ · Q
                gemm(nq, nk, dh, scale, ds, MatRef::rows(tk.data(), k_off, d), 0.0, &mut dq, q_off, d);
                gemm(nk, nq, dh, scale, ds.t(), MatRef::rows(tq.data(), q_off, d), 0.0, &mut dk, k_off, d);
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(t) = self.grad_target(grads, var) {
                t.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
            }
        }
    }
}
