use super::{argmax, gemm, Layout, Reduce, Result, Tensor, TensorError};

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
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Relu(Var),
    Silu(Var),
    Softmax(Var, usize),
    Sum(Var, Reduce),
    Max(Var, Vec<usize>),
    LayerNorm(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ReplaceCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Stack(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Wengert list of tensor operations.
///
/// Nodes are appended in evaluation order, so parents always precede their
/// children. Values pushed with [`Tape::constant`] and anything computed only
/// from constants are untracked: they carry no gradient.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tracked ancestor.
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

    /// Number of nodes that received a gradient.
    pub fn filled(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input treated as constant by [`Tape::backward`].
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let tracked = self.tracked_any(&[x]);
        self.push(value, op, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let tracked = self.tracked_any(&[a, b]);
        self.push(value, op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims("matmul_nt")?;
        let (n, k2) = self.value(b).matrix_dims("matmul_nt")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::N, self.value(b).data(), Layout::T, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.binary(a, b, value, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.unary(x, value, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        Ok(self.binary(a, b, value, Op::Div(a, b)))
    }

    fn row_broadcast(&self, a: Var, row: Var, op: &'static str) -> Result<(usize, usize)> {
        let (m, n) = self.value(a).matrix_dims(op)?;
        if self.value(row).shape() != [n] {
            return Err(TensorError::Shape {
                op,
                lhs: vec![m, n],
                rhs: self.value(row).shape().to_vec(),
            });
        }
        Ok((m, n))
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast(a, row, "add_row")?;
        let r = self.value(row).data();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(x, y)| *x += y);
        }
        Ok(self.binary(a, row, value, Op::AddRow(a, row)))
    }

    /// Multiplies every row of an m×n matrix elementwise by a length-n vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast(a, row, "mul_row")?;
        let r = self.value(row).data();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(x, y)| *x *= y);
        }
        Ok(self.binary(a, row, value, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        self.unary(x, value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.unary(x, value, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.unary(x, value, Op::Square(x))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.unary(x, value, Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.unary(x, value, Op::Silu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax(axis)?;
        Ok(self.unary(x, value, Op::Softmax(x, axis)))
    }

    pub fn sum(&mut self, x: Var, scope: Reduce) -> Result<Var> {
        let value = self.value(x).sum(scope)?;
        Ok(self.unary(x, value, Op::Sum(x, scope)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x, Reduce::All)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Maximum with the subgradient routed to the first argmax.
    pub fn max(&mut self, x: Var, scope: Reduce) -> Result<Var> {
        let input = self.value(x);
        let (value, winners) = match scope {
            Reduce::All => {
                if input.is_empty() {
                    return Err(TensorError::EmptyReduction { op: "max" });
                }
                let i = argmax(input.data());
                (Tensor::scalar(input.data()[i]), vec![i])
            }
            Reduce::Axis(axis) => {
                let (outer, len, inner) = input.split_axis(axis, "max")?;
                if len == 0 {
                    return Err(TensorError::EmptyReduction { op: "max" });
                }
                let mut out = Vec::with_capacity(outer * inner);
                let mut winners = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = (o * len) * inner + i;
                        for a in 1..len {
                            let idx = (o * len + a) * inner + i;
                            if input.data()[idx] > input.data()[best] {
                                best = idx;
                            }
                        }
                        out.push(input.data()[best]);
                        winners.push(best);
                    }
                }
                let mut shape = input.shape().to_vec();
                shape.remove(axis);
                (Tensor::new(&shape, out)?, winners)
            }
        };
        Ok(self.unary(x, value, Op::Max(x, winners)))
    }

    /// Normalizes each row of a matrix to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).matrix_dims("layer_norm")?;
        let mut value = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(m);
        for row in value.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        Ok(self.unary(x, value, Op::LayerNorm(x, inv_std)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).matrix_dims("slice_cols")?;
        if start > end || end > n {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: end,
                extent: n,
            });
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for row in src.chunks(n) {
            out.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::new(&[m, w], out)?;
        Ok(self.unary(x, value, Op::SliceCols(x, start)))
    }

    /// Column `j` of a matrix as a vector.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let c = self.slice_cols(x, j, j + 1)?;
        let m = self.value(c).shape()[0];
        self.reshape(c, &[m])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::EmptyReduction { op: "concat_cols" })?;
        let (m, _) = self.value(first).matrix_dims("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).matrix_dims("concat_cols")?;
            if pm != m {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(&[m, total], out)?;
        let tracked = self.tracked_any(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Overwrites whole columns with constant vectors. Replaced columns pass
    /// no gradient back to `x`.
    pub fn replace_cols(&mut self, x: Var, cols: &[(usize, &[f64])]) -> Result<Var> {
        let (m, n) = self.value(x).matrix_dims("replace_cols")?;
        let mut value = self.value(x).clone();
        for &(j, col) in cols {
            if j >= n {
                return Err(TensorError::Index {
                    op: "replace_cols",
                    index: j,
                    extent: n,
                });
            }
            if col.len() != m {
                return Err(TensorError::Shape {
                    op: "replace_cols",
                    lhs: vec![m, n],
                    rhs: vec![col.len()],
                });
            }
            for (r, &c) in col.iter().enumerate() {
                value.data_mut()[r * n + j] = c;
            }
        }
        let idx = cols.iter().map(|&(j, _)| j).collect();
        Ok(self.unary(x, value, Op::ReplaceCols(x, idx)))
    }

    /// Rows of `table` selected by `ids`, in order.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.value(table).matrix_dims("gather_rows")?;
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    extent: rows,
                });
            }
            out.extend_from_slice(&self.value(table).data()[id * n..(id + 1) * n]);
        }
        let value = Tensor::new(&[ids.len(), n], out)?;
        Ok(self.unary(table, value, Op::GatherRows(table, ids.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::EmptyReduction { op: "stack" })?;
        let inner = self.value(first).shape().to_vec();
        let mut out = Vec::with_capacity(parts.len() * self.value(first).len());
        for &p in parts {
            if self.value(p).shape() != inner.as_slice() {
                return Err(TensorError::Shape {
                    op: "stack",
                    lhs: inner,
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let value = Tensor::new(&shape, out)?;
        let tracked = self.tracked_any(parts);
        Ok(self.push(value, Op::Stack(parts.to_vec()), tracked))
    }

    /// Reverse pass from a scalar. Every tracked node the loss depends on gets
    /// a gradient; all other nodes get none.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: node.value.shape().to_vec(),
            });
        }
        if !node.tracked {
            return Err(TensorError::Untracked);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = dims(&self.nodes[a.0].value);
                let n = self.nodes[b.0].value.shape()[1];
                if let Some(da) = self.slot(grads, a) {
                    gemm(m, n, k, g, Layout::N, self.value(b).data(), Layout::T, da, true);
                }
                if let Some(db) = self.slot(grads, b) {
                    gemm(k, m, n, self.value(a).data(), Layout::T, g, Layout::N, db, true);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = dims(&self.nodes[a.0].value);
                let n = self.nodes[b.0].value.shape()[0];
                if let Some(da) = self.slot(grads, a) {
                    gemm(m, n, k, g, Layout::N, self.value(b).data(), Layout::N, da, true);
                }
                if let Some(db) = self.slot(grads, b) {
                    gemm(n, m, k, g, Layout::T, self.value(a).data(), Layout::N, db, true);
                }
            }
            &Op::Transpose(x) => {
                let (m, n) = dims(&self.nodes[x.0].value);
                if let Some(dx) = self.slot(grads, x) {
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    axpy(da, g, 1.0);
                }
                if let Some(db) = self.slot(grads, b) {
                    axpy(db, g, 1.0);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    axpy(da, g, 1.0);
                }
                if let Some(db) = self.slot(grads, b) {
                    axpy(db, g, -1.0);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    let bv = self.value(b).data();
                    da.iter_mut().zip(g).zip(bv).for_each(|((d, g), y)| *d += g * y);
                }
                if let Some(db) = self.slot(grads, b) {
                    let av = self.value(a).data();
                    db.iter_mut().zip(g).zip(av).for_each(|((d, g), x)| *d += g * x);
                }
            }
            &Op::Div(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(da) = self.slot(grads, a) {
                    da.iter_mut().zip(g).zip(bv).for_each(|((d, g), y)| *d += g / y);
                }
                if let Some(db) = self.slot(grads, b) {
                    for (k, d) in db.iter_mut().enumerate() {
                        *d -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                }
            }
            &Op::AddRow(a, row) => {
                let n = self.value(row).len();
                if let Some(da) = self.slot(grads, a) {
                    axpy(da, g, 1.0);
                }
                if let Some(dr) = self.slot(grads, row) {
                    for chunk in g.chunks(n) {
                        axpy(dr, chunk, 1.0);
                    }
                }
            }
            &Op::MulRow(a, row) => {
                let n = self.value(row).len();
                let rv = self.value(row).data();
                if let Some(da) = self.slot(grads, a) {
                    for (dchunk, gchunk) in da.chunks_mut(n).zip(g.chunks(n)) {
                        for c in 0..n {
                            dchunk[c] += gchunk[c] * rv[c];
                        }
                    }
                }
                if let Some(dr) = self.slot(grads, row) {
                    let av = self.value(a).data();
                    for (gchunk, achunk) in g.chunks(n).zip(av.chunks(n)) {
                        for c in 0..n {
                            dr[c] += gchunk[c] * achunk[c];
                        }
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(dx) = self.slot(grads, x) {
                    axpy(dx, g, c);
                }
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    axpy(dx, g, 1.0);
                }
            }
            &Op::Square(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    let xv = self.value(x).data();
                    dx.iter_mut().zip(g).zip(xv).for_each(|((d, g), x)| *d += 2.0 * g * x);
                }
            }
            &Op::Relu(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    let xv = self.value(x).data();
                    for (k, d) in dx.iter_mut().enumerate() {
                        if xv[k] > 0.0 {
                            *d += g[k];
                        }
                    }
                }
            }
            &Op::Silu(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    let xv = self.value(x).data();
                    for (k, d) in dx.iter_mut().enumerate() {
                        let s = sigmoid(xv[k]);
                        *d += g[k] * s * (1.0 + xv[k] * (1.0 - s));
                    }
                }
            }
            &Op::Softmax(x, axis) => {
                let (outer, len, inner) = self.value(x).split_axis(axis, "softmax").expect("recorded axis");
                if let Some(dx) = self.slot(grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for a in 0..len {
                                let idx = base + a * inner;
                                dot += g[idx] * out[idx];
                            }
                            for a in 0..len {
                                let idx = base + a * inner;
                                dx[idx] += out[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }
            &Op::Sum(x, scope) => {
                let input = &self.nodes[x.0].value;
                let split = match scope {
                    Reduce::All => None,
                    Reduce::Axis(axis) => Some(input.split_axis(axis, "sum").expect("recorded axis")),
                };
                if let Some(dx) = self.slot(grads, x) {
                    match split {
                        None => dx.iter_mut().for_each(|d| *d += g[0]),
                        Some((outer, len, inner)) => {
                            for o in 0..outer {
                                for a in 0..len {
                                    for i in 0..inner {
                                        dx[(o * len + a) * inner + i] += g[o * inner + i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Max(x, winners) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (k, &w) in winners.iter().enumerate() {
                        dx[w] += g[k];
                    }
                }
            }
            Op::LayerNorm(x, inv_std) => {
                let n = out.len() / inv_std.len();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gy = &g[r * n..(r + 1) * n];
                        let y = &out[r * n..(r + 1) * n];
                        let mean_g = gy.iter().sum::<f64>() / n as f64;
                        let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            dx[r * n + c] += inv * (gy[c] - mean_g - y[c] * mean_gy);
                        }
                    }
                }
            }
            &Op::SliceCols(x, start) => {
                let (_, n) = dims(&self.nodes[x.0].value);
                let w = node.value.shape()[1];
                if let Some(dx) = self.slot(grads, x) {
                    for (r, gchunk) in g.chunks(w).enumerate() {
                        axpy(&mut dx[r * n + start..r * n + start + w], gchunk, 1.0);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if let Some(dp) = self.slot(grads, p) {
                        for (r, gchunk) in g.chunks(total).enumerate() {
                            axpy(&mut dp[r * w..(r + 1) * w], &gchunk[offset..offset + w], 1.0);
                        }
                    }
                    offset += w;
                }
            }
            Op::ReplaceCols(x, cols) => {
                let n = node.value.shape()[1];
                if let Some(dx) = self.slot(grads, *x) {
                    for (k, d) in dx.iter_mut().enumerate() {
                        if !cols.contains(&(k % n)) {
                            *d += g[k];
                        }
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                let n = node.value.shape()[1];
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * n..(id + 1) * n], &g[r * n..(r + 1) * n], 1.0);
                    }
                }
            }
            Op::Stack(parts) => {
                let size = self.nodes[parts[0].0].value.len();
                for (k, &p) in parts.iter().enumerate() {
                    if let Some(dp) = self.slot(grads, p) {
                        axpy(dp, &g[k * size..(k + 1) * size], 1.0);
                    }
                }
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += c * s);
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
