//! Define-by-run gradient tape.
//!
//! Every operation appends a node holding its output value and the handles of
//! its inputs, so parents always precede children and a single reverse sweep
//! over the node list is a valid topological traversal. A tape lives for one
//! forward/backward pass and is then dropped.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
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
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    MeanRows(Var),
    MeanCols(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SoftmaxRows(Var),
    L2NormalizeRows(Var, Vec<f64>),
    BroadcastRows(Var),
    BroadcastCols(Var),
    MaxRows(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Squared-norm floor inside the square root of [`Tape::l2_normalize_rows`].
pub const L2_EPS: f64 = 1e-24;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` if the loss does
    /// not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros shaped like `value` for
    /// unreachable nodes.
    pub fn get_or_zeros(&self, var: Var, value: &Tensor) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()))
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let _ = name;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers an input; gradients are accumulated for it on backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push("add_scalar", out, Op::AddScalar(a))
    }

    /// `1 - a`, the complement used by gates and convex weights.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push("relu", out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push("log", out, Op::Log(a))
    }

    /// Mean over rows: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("mean_rows")?;
        if m == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        self.push("mean_rows", Tensor::row(out), Op::MeanRows(a))
    }

    /// Mean over columns: `m×n → m×1`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("mean_cols")?;
        if n == 0 {
            return Err(Error::shape("mean_cols", "no columns"));
        }
        let out = (0..m).map(|i| t.row_slice(i).iter().sum::<f64>() / n as f64).collect();
        self.push("mean_cols", Tensor::matrix(m, 1, out)?, Op::MeanCols(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    /// Concatenation along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.value(*first).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        self.push("concat_cols", Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks matrices with equal widths on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.value(*first).dims2("concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2("concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("widths {cols} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(t.data());
        }
        self.push("concat_rows", Tensor::matrix(rows, cols, out)?, Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("slice_cols")?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", format!("range {start}..{end} of width {n}")));
        }
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&t.row_slice(i)[start..end]);
        }
        self.push("slice_cols", Tensor::matrix(m, end - start, out)?, Op::SliceCols(a, start))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("slice_rows")?;
        if start >= end || end > m {
            return Err(Error::shape("slice_rows", format!("range {start}..{end} of {m} rows")));
        }
        let out = t.data()[start * n..end * n].to_vec();
        self.push("slice_rows", Tensor::matrix(end - start, n, out)?, Op::SliceRows(a, start))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a))?;
        self.push("softmax_rows", out, Op::SoftmaxRows(a))
    }

    /// Scales each row to unit L2 norm; `sqrt(|x|² + L2_EPS)` keeps zero rows finite.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("l2_normalize_rows")?;
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = t.row_slice(i);
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + L2_EPS).sqrt();
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        self.push("l2_normalize_rows", Tensor::matrix(m, n, out)?, Op::L2NormalizeRows(a, norms))
    }

    /// Repeats a `1×n` row `m` times.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, n) = t.dims2("broadcast_rows")?;
        if r != 1 || m == 0 {
            return Err(Error::shape("broadcast_rows", format!("need 1×n source, got {r}×{n}")));
        }
        let out = t.data().repeat(m);
        self.push("broadcast_rows", Tensor::matrix(m, n, out)?, Op::BroadcastRows(a))
    }

    /// Repeats an `m×1` column `n` times.
    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, c) = t.dims2("broadcast_cols")?;
        if c != 1 || n == 0 {
            return Err(Error::shape("broadcast_cols", format!("need m×1 source, got {m}×{c}")));
        }
        let out = t.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        self.push("broadcast_cols", Tensor::matrix(m, n, out)?, Op::BroadcastCols(a))
    }

    /// Row-wise maximum `m×n → m×1`; the gradient goes to the first maximal entry.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("max_rows")?;
        if n == 0 {
            return Err(Error::shape("max_rows", "no columns"));
        }
        let mut arg = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = t.row_slice(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            out.push(row[best]);
        }
        self.push("max_rows", Tensor::matrix(m, 1, out)?, Op::MaxRows(a, arg))
    }

    /// Row lookup `table[ids]`, the embedding-layer primitive.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, n) = t.dims2("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "no indices"));
        }
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= v {
                return Err(Error::shape("gather_rows", format!("index {id} out of {v} rows")));
            }
            out.extend_from_slice(t.row_slice(id));
        }
        self.push("gather_rows", Tensor::matrix(ids.len(), n, out)?, Op::GatherRows(table, ids.to_vec()))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                accumulate(grads, *a, g.matmul(&bv.transpose()?)?);
                accumulate(grads, *b, av.transpose()?.matmul(g)?);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()?),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), "mul", |g, b| g * b)?;
                let gb = g.zip_map(self.value(*a), "mul", |g, a| g * a)?;
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => accumulate(grads, *a, g.zip_map(y, "tanh", |g, y| g * (1.0 - y * y))?),
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(y, "sigmoid", |g, y| g * y * (1.0 - y))?),
            Op::Relu(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, g.zip_map(x, "relu", |g, x| if x > 0.0 { g } else { 0.0 })?);
            }
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(y, "exp", |g, y| g * y)?),
            Op::Log(a) => accumulate(grads, *a, g.zip_map(self.value(*a), "log", |g, x| g / x)?),
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2("mean_rows")?;
                let row: Vec<f64> = g.data().iter().map(|v| v / m as f64).collect();
                accumulate(grads, *a, Tensor::matrix(m, n, row.repeat(m))?);
            }
            Op::MeanCols(a) => {
                let (m, n) = self.value(*a).dims2("mean_cols")?;
                let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v / n as f64, n)).collect();
                accumulate(grads, *a, Tensor::matrix(m, n, data)?);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, Tensor::filled(x.shape(), g.data()[0]));
            }
            Op::ConcatCols(parts) => {
                let rows = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut data = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(grads, p, Tensor::matrix(rows, w, data)?);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let data = g.data()[offset * cols..(offset + r) * cols].to_vec();
                    accumulate(grads, p, Tensor::matrix(r, cols, data)?);
                    offset += r;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2("slice_cols")?;
                let w = y.cols();
                let mut ga = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    ga.data_mut()[i * n + start..i * n + start + w].copy_from_slice(g.row_slice(i));
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let (m, n) = self.value(*a).dims2("slice_rows")?;
                let mut ga = Tensor::zeros(&[m, n]);
                ga.data_mut()[start * n..start * n + g.numel()].copy_from_slice(g.data());
                accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = y.dims2("softmax_rows")?;
                let mut ga = Vec::with_capacity(m * n);
                for i in 0..m {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    ga.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                accumulate(grads, *a, Tensor::matrix(m, n, ga)?);
            }
            Op::L2NormalizeRows(a, norms) => {
                let (m, n) = y.dims2("l2_normalize_rows")?;
                let mut ga = Vec::with_capacity(m * n);
                for (i, norm) in norms.iter().enumerate() {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    ga.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * dot) / norm));
                }
                accumulate(grads, *a, Tensor::matrix(m, n, ga)?);
            }
            Op::BroadcastRows(a) => {
                let (m, n) = g.dims2("broadcast_rows")?;
                let mut row = vec![0.0; n];
                for i in 0..m {
                    for (r, v) in row.iter_mut().zip(g.row_slice(i)) {
                        *r += v;
                    }
                }
                accumulate(grads, *a, Tensor::row(row));
            }
            Op::BroadcastCols(a) => {
                let (m, _) = g.dims2("broadcast_cols")?;
                let col = (0..m).map(|i| g.row_slice(i).iter().sum()).collect();
                accumulate(grads, *a, Tensor::matrix(m, 1, col)?);
            }
            Op::MaxRows(a, arg) => {
                let (m, n) = self.value(*a).dims2("max_rows")?;
                let mut ga = Tensor::zeros(&[m, n]);
                for (i, &j) in arg.iter().enumerate() {
                    ga.set(i, j, g.data()[i]);
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherRows(table, ids) => {
                let (v, n) = self.value(*table).dims2("gather_rows")?;
                let mut ga = Tensor::zeros(&[v, n]);
                for (i, &id) in ids.iter().enumerate() {
                    for (dst, src) in ga.data_mut()[id * n..(id + 1) * n].iter_mut().zip(g.row_slice(i)) {
                        *dst += src;
                    }
                }
                accumulate(grads, *table, ga);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Value-level row softmax shared by the tape op and by callers that do not
/// need gradients.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let (m, n) = t.dims2("softmax_rows")?;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = t.row_slice(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let total: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    Tensor::matrix(m, n, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_permutation() {
        let mut tape = Tape::new();
        let i = tape.leaf(Tensor::eye(2));
        let ii = tape.matmul(i, i).unwrap();
        assert_eq!(tape.value(ii), &Tensor::eye(2));

        let a = tape.leaf(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = tape.leaf(m(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        let ap = tape.matmul(a, p).unwrap();
        assert_eq!(tape.value(ap), &m(&[vec![2.0, 1.0], vec![4.0, 3.0]]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[1, 3]));
        let s = tape.softmax_rows(a).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let out = softmax_rows(&m(&[vec![1000.0, 1000.0, -1000.0]])).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(out.data()[2], 0.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 5.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.get(s).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let y = tape.tanh(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused, tape.value(unused)).data(), &[0.0]);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn log_of_zero_is_caught() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn max_rows_picks_first_maximum() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(&[vec![1.0, 3.0, 3.0], vec![-1.0, -2.0, -3.0]]));
        let mx = tape.max_rows(x).unwrap();
        assert_eq!(tape.value(mx).data(), &[3.0, -1.0]);
        let s = tape.sum(mx).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let mut tape = Tape::new();
        let table = tape.leaf(m(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let rows = tape.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(rows).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(rows).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(tape.gather_rows(table, &[3]).is_err());
    }
}
