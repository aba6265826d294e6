use std::sync::Arc;

use crate::array::{mm_acc, mm_nt_acc, mm_tn_acc};
use crate::{AdError, DenseArray, GradStore, ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddN(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    Transpose01 { x: Var, a: usize, b: usize, c: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    OuterAdd(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    SumAll(Var),
}

struct Node {
    value: Arc<DenseArray>,
    op: Op,
}

/// Eager computation record. Every op computes its value immediately and is
/// appended in order, so the node list is already topologically sorted.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims(op: &'static str, a: &DenseArray) -> Result<(usize, usize), AdError> {
    a.dims2().ok_or_else(|| AdError::Shape { op, shapes: vec![a.shape().to_vec()] })
}

fn mismatch(op: &'static str, arrays: &[&DenseArray]) -> AdError {
    AdError::Shape { op, shapes: arrays.iter().map(|a| a.shape().to_vec()).collect() }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
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

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: DenseArray, op: Op) -> Var {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&mut self, value: Arc<DenseArray>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, a: DenseArray) -> Var {
        self.push(a, Op::Leaf)
    }

    pub fn constant_arc(&mut self, a: Arc<DenseArray>) -> Var {
        self.push_arc(a, Op::Leaf)
    }

    /// A parameter leaf; shares storage with the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push_arc(Arc::clone(store.value(id)), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = dims("matmul", x)?;
        let (k2, n) = dims("matmul", y)?;
        if k != k2 {
            return Err(mismatch("matmul", &[x, y]));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(x.data(), y.data(), &mut out, m, k, n);
        Ok(self.push(DenseArray::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = dims("matmul_nt", x)?;
        let (n, k2) = dims("matmul_nt", y)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", &[x, y]));
        }
        let mut out = vec![0.0; m * n];
        mm_nt_acc(x.data(), y.data(), &mut out, m, k, n);
        Ok(self.push(DenseArray::new(&[m, n], out)?, Op::MatMulNT(a, b)))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var, AdError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch(op, &[x, y]));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        let out = DenseArray::new(x.shape(), data)?;
        Ok(self.push(out, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.zip_same("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.zip_same("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` array.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AdError> {
        let (x, r) = (self.value(a), self.value(row));
        let (m, n) = dims("add_row", x)?;
        if r.len() != n {
            return Err(mismatch("add_row", &[x, r]));
        }
        let mut data = x.data().to_vec();
        for i in 0..m {
            for (d, b) in data[i * n..(i + 1) * n].iter_mut().zip(r.data()) {
                *d += b;
            }
        }
        Ok(self.push(DenseArray::new(&[m, n], data)?, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var, AdError> {
        let first = xs.first().ok_or(AdError::Shape { op: "add_n", shapes: vec![] })?;
        let mut out = self.value(*first).clone();
        for v in &xs[1..] {
            let y = self.value(*v);
            if y.shape() != out.shape() {
                return Err(mismatch("add_n", &[&out, y]));
            }
            out.add_assign(y);
        }
        Ok(self.push(out, Op::AddN(xs.to_vec())))
    }

    pub fn mean_n(&mut self, xs: &[Var]) -> Result<Var, AdError> {
        let s = self.add_n(xs)?;
        Ok(self.scale(s, 1.0 / xs.len() as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AdError> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AdError> {
        let x = self.value(a);
        let (m, n) = dims("transpose", x)?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x.data()[i * n + j];
            }
        }
        Ok(self.push(DenseArray::new(&[n, m], data)?, Op::Transpose(a)))
    }

    /// Treats the data as `[a, b, c]` and swaps the first two axes.
    pub fn transpose01(&mut self, x: Var, a: usize, b: usize, c: usize) -> Result<Var, AdError> {
        let v = self.value(x);
        if v.len() != a * b * c {
            return Err(mismatch("transpose01", &[v]));
        }
        let data = permute01(v.data(), a, b, c);
        Ok(self.push(DenseArray::new(&[b, a, c], data)?, Op::Transpose01 { x, a, b, c }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, AdError> {
        let arrays: Vec<&DenseArray> = xs.iter().map(|v| self.value(*v)).collect();
        let m = arrays.first().map(|a| a.rows()).unwrap_or(0);
        if arrays.iter().any(|a| a.dims2().is_none() || a.rows() != m) {
            return Err(mismatch("concat_cols", &arrays));
        }
        let n: usize = arrays.iter().map(|a| a.cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for a in &arrays {
                data.extend_from_slice(a.row_slice(i));
            }
        }
        Ok(self.push(DenseArray::new(&[m, n], data)?, Op::ConcatCols(xs.to_vec())))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, AdError> {
        let arrays: Vec<&DenseArray> = xs.iter().map(|v| self.value(*v)).collect();
        let n = arrays.first().map(|a| a.cols()).unwrap_or(0);
        if arrays.iter().any(|a| a.dims2().is_none() || a.cols() != n) {
            return Err(mismatch("concat_rows", &arrays));
        }
        let m: usize = arrays.iter().map(|a| a.rows()).sum();
        let mut data = Vec::with_capacity(m * n);
        for a in &arrays {
            data.extend_from_slice(a.data());
        }
        Ok(self.push(DenseArray::new(&[m, n], data)?, Op::ConcatRows(xs.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AdError> {
        let v = self.value(x);
        let (m, n) = dims("slice_rows", v)?;
        if start + len > m {
            return Err(mismatch("slice_rows", &[v]));
        }
        let data = v.data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(DenseArray::new(&[len, n], data)?, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AdError> {
        let v = self.value(x);
        let (m, n) = dims("slice_cols", v)?;
        if start + len > n {
            return Err(mismatch("slice_cols", &[v]));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&v.data()[i * n + start..i * n + start + len]);
        }
        Ok(self.push(DenseArray::new(&[m, len], data)?, Op::SliceCols { x, start }))
    }

    /// Row lookup; also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, AdError> {
        let v = self.value(x);
        let (m, n) = dims("gather_rows", v)?;
        if idx.iter().any(|&i| i >= m) {
            return Err(mismatch("gather_rows", &[v]));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(v.row_slice(i));
        }
        Ok(self.push(DenseArray::new(&[idx.len(), n], data)?, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Row-wise softmax. Masked entries get probability 0; a fully masked row is all zeros.
    /// `mask` has one flag per column (shared by all rows) or one per element.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, AdError> {
        let v = self.value(x);
        let (m, n) = dims("softmax", v)?;
        if let Some(mk) = mask {
            if mk.len() != n && mk.len() != m * n {
                return Err(AdError::Shape { op: "softmax", shapes: vec![v.shape().to_vec(), vec![mk.len()]] });
            }
        }
        let allowed = |i: usize, j: usize| match mask {
            None => true,
            Some(mk) if mk.len() == n => mk[j],
            Some(mk) => mk[i * n + j],
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = v.row_slice(i);
            let max = (0..n).filter(|&j| allowed(i, j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..n {
                if allowed(i, j) {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    z += e;
                }
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= z;
            }
        }
        Ok(self.push(DenseArray::new(&[m, n], out)?, Op::Softmax(x)))
    }

    /// Per-row normalisation with learned `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, AdError> {
        let (v, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = dims("layer_norm", v)?;
        if g.len() != n || b.len() != n {
            return Err(mismatch("layer_norm", &[v, g, b]));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = v.row_slice(i);
            let (mean, inv) = moments(row, eps);
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv * g.data()[j] + b.data()[j];
            }
        }
        Ok(self.push(DenseArray::new(&[m, n], out)?, Op::LayerNorm { x, gamma, beta, eps }))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| f(t)).collect();
        let out = DenseArray::new(v.shape(), data).expect("same shape");
        self.push(out, op)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, |t| 0.5 * t * (1.0 + (GELU_C * (t + GELU_A * t * t * t)).tanh()), Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// `out[r * L + l] = a[r] + b[l]` for `a: [R, H]`, `b: [L, H]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (x, y) = (self.value(a), self.value(b));
        let (r, h) = dims("outer_add", x)?;
        let (l, h2) = dims("outer_add", y)?;
        if h != h2 {
            return Err(mismatch("outer_add", &[x, y]));
        }
        let mut data = Vec::with_capacity(r * l * h);
        for i in 0..r {
            let xr = x.row_slice(i);
            for j in 0..l {
                data.extend(xr.iter().zip(y.row_slice(j)).map(|(p, q)| p + q));
            }
        }
        Ok(self.push(DenseArray::new(&[r * l, h], data)?, Op::OuterAdd(a, b)))
    }

    /// Summed token cross-entropy of `[T, V]` logits against `T` target ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AdError> {
        let v = self.value(logits);
        let (t, n) = dims("cross_entropy", v)?;
        if targets.len() != t || targets.iter().any(|&k| k >= n) {
            return Err(AdError::Shape { op: "cross_entropy", shapes: vec![v.shape().to_vec(), vec![targets.len()]] });
        }
        let loss: f64 = (0..t).map(|i| -log_softmax(v.row_slice(i))[targets[i]]).sum();
        Ok(self.push(DenseArray::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec() }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(DenseArray::scalar(s), Op::SumAll(x))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AdError> {
        if loss.0 >= self.nodes.len() {
            return Err(AdError::NoForward);
        }
        if self.value(loss).len() != 1 {
            return Err(AdError::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DenseArray::filled(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &DenseArray, grads: &mut [Option<DenseArray>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, d: DenseArray| match &mut grads[v.0] {
            Some(a) => a.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k) = x.dims2().expect("2-D");
                let n = y.cols();
                let mut da = vec![0.0; m * k];
                mm_nt_acc(g.data(), y.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                mm_tn_acc(x.data(), g.data(), &mut db, m, k, n);
                acc(*a, DenseArray::new(&[m, k], da).expect("shape"));
                acc(*b, DenseArray::new(&[k, n], db).expect("shape"));
            }
            Op::MatMulNT(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k) = x.dims2().expect("2-D");
                let n = y.rows();
                let mut da = vec![0.0; m * k];
                mm_acc(g.data(), y.data(), &mut da, m, n, k);
                let mut db = vec![0.0; n * k];
                mm_tn_acc(g.data(), x.data(), &mut db, m, n, k);
                acc(*a, DenseArray::new(&[m, k], da).expect("shape"));
                acc(*b, DenseArray::new(&[n, k], db).expect("shape"));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                let n = g.cols();
                let mut dr = vec![0.0; n];
                for i in 0..g.rows() {
                    for (d, x) in dr.iter_mut().zip(g.row_slice(i)) {
                        *d += x;
                    }
                }
                let shape = self.value(*r).shape().to_vec();
                acc(*r, DenseArray::new(&shape, dr).expect("shape"));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
                let db = g.data().iter().zip(x.data()).map(|(p, q)| p * q).collect();
                acc(*a, DenseArray::new(x.shape(), da).expect("shape"));
                acc(*b, DenseArray::new(y.shape(), db).expect("shape"));
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale_in_place(*s);
                acc(*a, d);
            }
            Op::AddN(xs) => {
                for x in xs {
                    acc(*x, g.clone());
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, g.clone().reshaped(&shape).expect("same size"));
            }
            Op::Transpose(a) => {
                let (n, m) = g.dims2().expect("2-D");
                let mut d = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        d[j * n + i] = g.data()[i * m + j];
                    }
                }
                acc(*a, DenseArray::new(&[m, n], d).expect("shape"));
            }
            Op::Transpose01 { x, a, b, c } => {
                let d = permute01(g.data(), *b, *a, *c);
                let shape = self.value(*x).shape().to_vec();
                acc(*x, DenseArray::new(&shape, d).expect("shape"));
            }
            Op::ConcatCols(xs) => {
                let (m, n) = g.dims2().expect("2-D");
                let mut off = 0;
                for x in xs {
                    let w = self.value(*x).cols();
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&g.data()[i * n + off..i * n + off + w]);
                    }
                    acc(*x, DenseArray::new(&[m, w], d).expect("shape"));
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let n = g.cols();
                let mut off = 0;
                for x in xs {
                    let r = self.value(*x).rows();
                    let d = g.data()[off * n..(off + r) * n].to_vec();
                    acc(*x, DenseArray::new(&[r, n], d).expect("shape"));
                    off += r;
                }
            }
            Op::SliceRows { x, start } => {
                let shape = self.value(*x).shape().to_vec();
                let n = shape[1];
                let mut d = DenseArray::zeros(&shape);
                d.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                acc(*x, d);
            }
            Op::SliceCols { x, start } => {
                let shape = self.value(*x).shape().to_vec();
                let (m, n) = (shape[0], shape[1]);
                let w = g.cols();
                let mut d = DenseArray::zeros(&shape);
                for i in 0..m {
                    d.data_mut()[i * n + start..i * n + start + w].copy_from_slice(g.row_slice(i));
                }
                acc(*x, d);
            }
            Op::GatherRows { x, idx } => {
                let shape = self.value(*x).shape().to_vec();
                let n = shape[1];
                let mut d = DenseArray::zeros(&shape);
                for (k, &r) in idx.iter().enumerate() {
                    for (t, s) in d.data_mut()[r * n..(r + 1) * n].iter_mut().zip(g.row_slice(k)) {
                        *t += s;
                    }
                }
                acc(*x, d);
            }
            Op::Softmax(x) => {
                let (m, n) = out.dims2().expect("2-D");
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let y = out.row_slice(i);
                    let gy = g.row_slice(i);
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = y[j] * (gy[j] - dot);
                    }
                }
                acc(*x, DenseArray::new(&[m, n], d).expect("shape"));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (v, gm) = (self.value(*x), self.value(*gamma));
                let (m, n) = v.dims2().expect("2-D");
                let mut dx = vec![0.0; m * n];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for i in 0..m {
                    let row = v.row_slice(i);
                    let gr = g.row_slice(i);
                    let (mean, inv) = moments(row, *eps);
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * inv;
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                        dxhat[j] = gr[j] * gm.data()[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[i * n + j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                let gshape = gm.shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                acc(*x, DenseArray::new(&[m, n], dx).expect("shape"));
                acc(*gamma, DenseArray::new(&gshape, dg).expect("shape"));
                acc(*beta, DenseArray::new(&bshape, db).expect("shape"));
            }
            Op::Gelu(x) => {
                let v = self.value(*x);
                let d = v
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&t, &gy)| {
                        let th = (GELU_C * (t + GELU_A * t * t * t)).tanh();
                        let dt = 0.5 * (1.0 + th) + 0.5 * t * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * t * t);
                        gy * dt
                    })
                    .collect();
                acc(*x, DenseArray::new(v.shape(), d).expect("shape"));
            }
            Op::Tanh(x) => {
                let d = out.data().iter().zip(g.data()).map(|(y, gy)| gy * (1.0 - y * y)).collect();
                acc(*x, DenseArray::new(out.shape(), d).expect("shape"));
            }
            Op::Sigmoid(x) => {
                let d = out.data().iter().zip(g.data()).map(|(y, gy)| gy * y * (1.0 - y)).collect();
                acc(*x, DenseArray::new(out.shape(), d).expect("shape"));
            }
            Op::OuterAdd(a, b) => {
                let (r, h) = self.value(*a).dims2().expect("2-D");
                let l = self.value(*b).rows();
                let mut da = vec![0.0; r * h];
                let mut db = vec![0.0; l * h];
                for i in 0..r {
                    for j in 0..l {
                        let gr = g.row_slice(i * l + j);
                        for k in 0..h {
                            da[i * h + k] += gr[k];
                            db[j * h + k] += gr[k];
                        }
                    }
                }
                acc(*a, DenseArray::new(&[r, h], da).expect("shape"));
                acc(*b, DenseArray::new(&[l, h], db).expect("shape"));
            }
            Op::CrossEntropy { logits, targets } => {
                let v = self.value(*logits);
                let (t, n) = v.dims2().expect("2-D");
                let scale = g.item();
                let mut d = Vec::with_capacity(t * n);
                for (i, &target) in targets.iter().enumerate() {
                    let ls = log_softmax(v.row_slice(i));
                    for (j, l) in ls.iter().enumerate() {
                        let onehot = if j == target { 1.0 } else { 0.0 };
                        d.push(scale * (l.exp() - onehot));
                    }
                }
                acc(*logits, DenseArray::new(&[t, n], d).expect("shape"));
            }
            Op::SumAll(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, DenseArray::filled(&shape, g.item()));
            }
        }
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn permute01(src: &[f64], a: usize, b: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; a * b * c];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * c..(j * a + i + 1) * c].copy_from_slice(&src[(i * b + j) * c..(i * b + j + 1) * c]);
        }
    }
    out
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseArray> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter leaf's gradient into `out`. A parameter used by
    /// several leaves accumulates all of them.
    pub fn accumulate_params(&self, tape: &Tape, out: &mut GradStore) {
        for (i, g) in self.grads.iter().enumerate() {
            if let (Some(g), Op::Param(id)) = (g, &tape.nodes[i].op) {
                out.accumulate(*id, g);
            }
        }
    }
}
