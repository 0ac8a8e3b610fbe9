//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; [`Tape::backward`] walks it once from the loss down to
//! the first node. Only nodes that depend on a registered parameter carry
//! gradients, which keeps frozen backbone weights out of the backward pass.

use super::{Matrix, Scalar};
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
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `n×d + 1×d`, broadcast over rows
    AddRow(Var, Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    GatherRows { table: Var, indices: Vec<usize> },
    Sum(Var),
    Mse { x: Var, target: Matrix<T> },
    CrossEntropy { x: Var, labels: Vec<usize>, probs: Matrix<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<Var>,
}

/// Gradients of one backward pass, addressable by parameter handle.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; exact zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Matrix<T> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix<T> {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape { op, left: a, right: b }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    /// Clears all nodes so the tape can record a fresh computation.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let value = self.value(a).matmul_unchecked(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`, the layout of a linear layer with `b` stored as out×in.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(shape_err("matmul_bt", sa, sb));
        }
        let value = self.value(a).matmul_bt_unchecked(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulBt(a, b), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let value = self.value(a).zip_map(self.value(b), f);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.0 != 1 || sb.1 != sx.1 {
            return Err(shape_err("add_row", sx, sb));
        }
        let b = self.value(bias).data().to_vec();
        let xv = self.value(x);
        let value = Matrix::from_fn(sx.0, sx.1, |i, j| xv.get(i, j) + b[j]);
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRow(x, bias), ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::tanh);
        let ng = self.needs(x);
        self.push(value, Op::Tanh(x), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let ng = self.needs(x);
        self.push(value, Op::Softmax(x), ng)
    }

    /// Row-wise normalization to zero mean and unit variance, no affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let dn = T::from_usize(d).expect("usize fits");
        let mut out = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let value = Matrix::from_vec_unchecked(n, d, out);
        let ng = self.needs(x);
        self.push(value, Op::LayerNorm { x, inv_std }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.shape(x);
        if start + len > d || len == 0 {
            return Err(Error::ShapeMsg(format!(
                "slice_cols [{start}, {}) out of range for {n}x{d}",
                start + len
            )));
        }
        let xv = self.value(x);
        let value = Matrix::from_fn(n, len, |i, j| xv.get(i, start + j));
        let ng = self.needs(x);
        Ok(self.push(value, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(parts[0]).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != n) {
            return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(bad)));
        }
        let d: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Matrix::from_vec_unchecked(n, d, data), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.shape(parts[0]).1;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).1 != d) {
            return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(bad)));
        }
        let n: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut data = Vec::with_capacity(n * d);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Matrix::from_vec_unchecked(n, d, data), Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Column means, `n×d → 1×d`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let dn = T::from_usize(n).expect("usize fits");
        let value = Matrix::from_fn(1, d, |_, j| (0..n).map(|i| xv.get(i, j)).sum::<T>() / dn);
        let ng = self.needs(x);
        self.push(value, Op::MeanRows(x), ng)
    }

    /// Embedding lookup.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, _) = self.shape(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::ShapeMsg(format!("gather index {bad} out of range for {rows} rows")));
        }
        let value = self.value(table).select_rows(indices);
        let ng = self.needs(table);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64_lossless()).sum();
        let ng = self.needs(x);
        self.push(Matrix::full(1, 1, T::from_f64_lossy(s)), Op::Sum(x), ng)
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, x: Var, target: &Matrix<T>) -> Result<Var> {
        let sx = self.shape(x);
        if sx != target.shape() {
            return Err(shape_err("mse", sx, target.shape()));
        }
        let n = target.len().max(1) as f64;
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = (a - b).to_f64_lossless();
                d * d
            })
            .sum();
        let ng = self.needs(x);
        Ok(self.push(
            Matrix::full(1, 1, T::from_f64_lossy(s / n)),
            Op::Mse {
                x,
                target: target.clone(),
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy of row logits against class labels.
    pub fn cross_entropy(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.shape(x);
        if labels.len() != n {
            return Err(shape_err("cross_entropy", (n, k), (labels.len(), 1)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Argument(format!("label {bad} out of range for {k} classes")));
        }
        let xv = self.value(x);
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = xv.row(i);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v)).to_f64_lossless();
            let lse = max
                + row
                    .iter()
                    .map(|&v| (v.to_f64_lossless() - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - row[label].to_f64_lossless();
        }
        let probs = softmax_rows(xv);
        let ng = self.needs(x);
        Ok(self.push(
            Matrix::full(1, 1, T::from_f64_lossy(total / n.max(1) as f64)),
            Op::CrossEntropy {
                x,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Propagates `∂loss/∂node` to every node that depends on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::full(1, 1, T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        // only parameter gradients are handed out
        let mut out: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for &p in &self.params {
            out[p.0] = grads[p.0].take();
        }
        Ok(Gradients { grads: out, shapes })
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let mut acc = |v: Var, contrib: Matrix<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_in_place_unchecked(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul_bt_unchecked(val(*b)));
                }
                if needs(*b) {
                    acc(*b, val(*a).matmul_at_unchecked(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul_unchecked(val(*b)));
                }
                if needs(*b) {
                    acc(*b, g.matmul_at_unchecked(val(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if needs(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * *s)),
            Op::AddRow(x, bias) => {
                acc(*x, g.clone());
                if needs(*bias) {
                    let (n, d) = g.shape();
                    let cols = Matrix::from_fn(1, d, |_, j| (0..n).map(|i| g.get(i, j)).sum());
                    acc(*bias, cols);
                }
            }
            Op::Tanh(x) => {
                acc(*x, g.zip_map(&node.value, |gv, y| gv * (T::one() - y * y)));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (n, d) = y.shape();
                let mut out = Vec::with_capacity(n * d);
                for i in 0..n {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    out.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                acc(*x, Matrix::from_vec_unchecked(n, d, out));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let (n, d) = y.shape();
                let dn = T::from_usize(d).expect("usize fits");
                let mut out = Vec::with_capacity(n * d);
                for i in 0..n {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let mean_g = gr.iter().copied().sum::<T>() / dn;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    out.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(&gv, &yv)| inv_std[i] * (gv - mean_g - yv * mean_gy)),
                    );
                }
                acc(*x, Matrix::from_vec_unchecked(n, d, out));
            }
            Op::SliceCols { x, start } => {
                let (n, d) = val(*x).shape();
                let len = g.cols();
                let s = *start;
                acc(
                    *x,
                    Matrix::from_fn(n, d, |i, j| {
                        if j >= s && j < s + len {
                            g.get(i, j - s)
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (n, w) = val(p).shape();
                    if needs(p) {
                        let o = offset;
                        acc(p, Matrix::from_fn(n, w, |i, j| g.get(i, o + j)));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (h, d) = val(p).shape();
                    if needs(p) {
                        let data = g.data()[offset * d..(offset + h) * d].to_vec();
                        acc(p, Matrix::from_vec_unchecked(h, d, data));
                    }
                    offset += h;
                }
            }
            Op::MeanRows(x) => {
                let (n, d) = val(*x).shape();
                let dn = T::from_usize(n).expect("usize fits");
                acc(*x, Matrix::from_fn(n, d, |_, j| g.get(0, j) / dn));
            }
            Op::GatherRows { table, indices } => {
                let (r, d) = val(*table).shape();
                let mut out = Matrix::zeros(r, d);
                for (row, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        let cur = out.get(idx, j);
                        out.set(idx, j, cur + g.get(row, j));
                    }
                }
                acc(*table, out);
            }
            Op::Sum(x) => {
                let (n, d) = val(*x).shape();
                acc(*x, Matrix::full(n, d, g.get(0, 0)));
            }
            Op::Mse { x, target } => {
                let n = T::from_usize(target.len().max(1)).expect("usize fits");
                let two = T::one() + T::one();
                let scale = g.get(0, 0) * two / n;
                acc(*x, val(*x).zip_map(target, |a, b| (a - b) * scale));
            }
            Op::CrossEntropy { x, labels, probs } => {
                let n = T::from_usize(labels.len().max(1)).expect("usize fits");
                let scale = g.get(0, 0) / n;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    let v = d.get(i, l);
                    d.set(i, l, v - T::one());
                }
                acc(*x, d.map(|v| v * scale));
            }
        }
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let (n, d) = x.shape();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = x.row(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Matrix::from_vec_unchecked(n, d, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn linear_sum_gradient_is_outer_product_of_ones_and_x() {
        // loss = sum(W x) ⇒ ∂loss/∂W[i][j] = x[j]
        let mut tape = Tape::new();
        let w = tape.param(m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let x = tape.constant(m(&[&[0.5], &[-1.0], &[2.0]]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap().get(w);
        assert_eq!(g, m(&[&[0.5, -1.0, 2.0], &[0.5, -1.0, 2.0]]));
    }

    #[test]
    fn unused_parameter_gets_exact_zeros() {
        let mut tape = Tape::new();
        let used = tape.param(m(&[&[2.0]]));
        let unused = tape.param(m(&[&[7.0, 8.0]]));
        let sq = tape.mul(used, used).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(used), m(&[&[4.0]]));
        assert_eq!(grads.get(unused), Matrix::zeros(1, 2));
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let w = tape.param(m(&[&[1.0, 2.0]]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_do_not_need_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(m(&[&[1.0]]));
        let b = tape.constant(m(&[&[2.0]]));
        let c = tape.mul(a, b).unwrap();
        assert!(!tape.needs(c));
    }

    #[test]
    fn reset_makes_tape_reusable() {
        let mut tape = Tape::new();
        let w = tape.param(m(&[&[3.0]]));
        let l = tape.sum(w);
        tape.backward(l).unwrap();
        tape.reset();
        assert!(tape.is_empty());
        let w = tape.param(m(&[&[3.0]]));
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq);
        assert_eq!(tape.backward(l).unwrap().get(w).get(0, 0), 6.0);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::<f64>::zeros(3, 5));
        let l = tape.cross_entropy(x, &[0, 2, 4]).unwrap();
        assert!((tape.value(l).get(0, 0) - 5f64.ln()).abs() < 1e-12);
    }
}
