use std::borrow::Cow;
use std::cmp::Ordering;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
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
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    MaskRows {
        x: Var,
        fill: Var,
        flags: Vec<bool>,
    },
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        probs: Vec<f64>,
        keep: Option<Vec<f64>>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Dynamic tape. Values are appended in evaluation order, so node indices
/// are already a topological order for the backward sweep.
///
/// Leaves created with [`Graph::param`] borrow their storage, which keeps
/// per-sample graphs cheap to build over a shared parameter set.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Tensor>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf borrowing `value`.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Leaf borrowing `value` that never receives a gradient.
    pub fn frozen(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

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
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    fn dims(&self, v: Var) -> Result<[usize; 2]> {
        self.value(v).matrix_dims()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`; the usual form of a linear layer with an `out×in` weight.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.dims(a)?;
        let [n, k2] = self.dims(b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(out, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transposed()?;
        Ok(self.derived(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.derived(out, Op::Reshape(x), &[x]))
    }

    fn zip_with(&self, a: Var, b: Var, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb, op)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.derived(out, Op::Scale(x, s), &[x])
    }

    /// Adds a length-`n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let [m, n] = self.dims(x)?;
        let r = self.value(row);
        if r.len() != n {
            return Err(Error::Shape(format!(
                "row broadcast needs {n} entries, got shape {:?}",
                r.shape()
            )));
        }
        let rd = r.data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, &b) in data[i * n..(i + 1) * n].iter_mut().zip(rd) {
                *o += b;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.derived(out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let data = kernels::softmax_axis(t.data(), t.shape(), axis);
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let rows = t.rows();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Shape(format!(
                "layer norm over {n} features got gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.derived(out, op, &[x, gain, bias]))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * kernels::normal_cdf(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.derived(out, Op::Gelu(x), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims(parts[0])?[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let [r, c] = self.dims(p)?;
            if c != cols {
                return Err(Error::Shape(format!(
                    "row concat needs {cols} columns, got {:?}",
                    self.shape(p)
                )));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.derived(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims(parts[0])?[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let [r, c] = self.dims(p)?;
            if r != rows {
                return Err(Error::Shape(format!(
                    "column concat needs {rows} rows, got {:?}",
                    self.shape(p)
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let [m, n] = self.dims(x)?;
        if start >= end || end > m {
            return Err(Error::Shape(format!("row slice {start}..{end} of {m} rows")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let out = Tensor::new(vec![end - start, n], data)?;
        Ok(self.derived(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let [m, n] = self.dims(x)?;
        if start >= end || end > n {
            return Err(Error::Shape(format!("column slice {start}..{end} of {n} columns")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let out = Tensor::new(vec![m, end - start], data)?;
        Ok(self.derived(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let [m, n] = self.dims(x)?;
        if index.is_empty() {
            return Err(Error::Shape("gather needs at least one row".into()));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::Shape(format!("gather row {bad} of {m} rows")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![index.len(), n], data)?;
        let op = Op::GatherRows {
            x,
            index: index.to_vec(),
        };
        Ok(self.derived(out, op, &[x]))
    }

    /// Row `r` of the result is `fill[r]` where `flags[r]` holds, else `x[r]`.
    pub fn mask_rows(&mut self, x: Var, fill: Var, flags: &[bool]) -> Result<Var> {
        let [m, n] = self.dims(x)?;
        if self.shape(fill) != [m, n] || flags.len() != m {
            return Err(Error::Shape(format!(
                "row mask over {:?} got fill {:?} and {} flags",
                self.shape(x),
                self.shape(fill),
                flags.len()
            )));
        }
        let (tx, tf) = (self.value(x), self.value(fill));
        let mut data = Vec::with_capacity(m * n);
        for (i, &f) in flags.iter().enumerate() {
            data.extend_from_slice(if f { tf.row(i) } else { tx.row(i) });
        }
        let out = Tensor::new(vec![m, n], data)?;
        let op = Op::MaskRows {
            x,
            fill,
            flags: flags.to_vec(),
        };
        Ok(self.derived(out, op, &[x, fill]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.derived(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Scaled dot-product attention for one head.
    ///
    /// Keys are visited in ascending score order (ties broken on the value
    /// row) when accumulating the softmax normalizer and the weighted sum, so
    /// permuting the key/value rows leaves every output bit unchanged.
    /// `keep`, when given, multiplies the attention weights elementwise
    /// (inverted dropout).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        keep: Option<Vec<f64>>,
    ) -> Result<Var> {
        let [n, dh] = self.dims(q)?;
        let [m, dk] = self.dims(k)?;
        let [mv, dv] = self.dims(v)?;
        if dk != dh || mv != m {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if keep.as_ref().is_some_and(|kp| kp.len() != n * m) {
            return Err(Error::Shape("attention keep mask size".into()));
        }
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let mut scores = gemm_nt(tq.data(), tk.data(), n, dh, m);
        scores.iter_mut().for_each(|s| *s *= scale);
        let mut probs = vec![0.0; n * m];
        let mut out = vec![0.0; n * dv];
        let mut order: Vec<usize> = (0..m).collect();
        for i in 0..n {
            let s = &scores[i * m..(i + 1) * m];
            order.sort_by(|&a, &b| {
                s[a].total_cmp(&s[b]).then_with(|| lex_cmp(tv.row(a), tv.row(b)))
            });
            let max = s[order[m - 1]];
            let p = &mut probs[i * m..(i + 1) * m];
            let mut denom = 0.0;
            for &j in &order {
                p[j] = (s[j] - max).exp();
                denom += p[j];
            }
            for &j in &order {
                p[j] /= denom;
            }
            let orow = &mut out[i * dv..(i + 1) * dv];
            for &j in &order {
                let w = match &keep {
                    Some(kp) => p[j] * kp[i * m + j],
                    None => p[j],
                };
                for (o, &x) in orow.iter_mut().zip(tv.row(j)) {
                    *o += w * x;
                }
            }
        }
        let out = Tensor::new(vec![n, dv], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            scale,
            probs,
            keep,
        };
        Ok(self.derived(out, op, &[q, k, v]))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        p.same_shape(target, "mse")?;
        let s = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.len() as f64;
        let op = Op::Mse {
            pred,
            target: target.data().to_vec(),
        };
        Ok(self.derived(Tensor::scalar(s), op, &[pred]))
    }

    /// Mean cross-entropy of `rows×K` logits against zero-based class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [rows, k] = self.dims(logits)?;
        if labels.len() != rows {
            return Err(Error::Shape(format!("{rows} logit rows, {} labels", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("class index {bad} with {k} logits")));
        }
        let t = self.value(logits);
        let probs = kernels::softmax_axis(t.data(), t.shape(), 1);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let row = t.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[l]
            })
            .sum::<f64>()
            / rows as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.derived(Tensor::scalar(loss), op, &[logits]))
    }

    /// Accumulates `∂loss/∂leaf` into every trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = local[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[idx] {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(idx, &g, &mut local);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let buf = local[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        let add_into = |buf: &mut [f64], src: &[f64]| {
            buf.iter_mut().zip(src).for_each(|(b, s)| *b += s);
        };
        let out = &nodes[idx].value;

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = dims(val(*a));
                let n = dims(val(*b))[1];
                if nodes[a.0].requires_grad {
                    let da = gemm_nt(g, val(*b).data(), m, n, k);
                    acc(*a, &mut |buf| add_into(buf, &da));
                }
                if nodes[b.0].requires_grad {
                    let db = gemm_tn(val(*a).data(), g, k, m, n);
                    acc(*b, &mut |buf| add_into(buf, &db));
                }
            }
            Op::MatMulNT(a, b) => {
                let [m, k] = dims(val(*a));
                let n = dims(val(*b))[0];
                if nodes[a.0].requires_grad {
                    let da = gemm_nn(g, val(*b).data(), m, n, k);
                    acc(*a, &mut |buf| add_into(buf, &da));
                }
                if nodes[b.0].requires_grad {
                    let db = gemm_tn(g, val(*a).data(), n, m, k);
                    acc(*b, &mut |buf| add_into(buf, &db));
                }
            }
            Op::Transpose(x) => {
                let [m, n] = dims(val(*x));
                acc(*x, &mut |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, s)| *o -= s));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(o, v)| *o += s * v)
            }),
            Op::AddRow(x, row) => {
                acc(*x, &mut |buf| add_into(buf, g));
                let n = val(*row).len();
                acc(*row, &mut |buf| {
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = out.data();
                let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                buf[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = val(*gain).len();
                let gv = val(*gain).data();
                let rows = inv_std.len();
                acc(*x, &mut |buf| {
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let c = inv_std[r] / n as f64;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            buf[r * n + j] += c * (n as f64 * dh - s1 - hr[j] * s2);
                        }
                    }
                });
                acc(*gain, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..n {
                            buf[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*bias, &mut |buf| {
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        let z = xv[i];
                        buf[i] += g[i] * (kernels::normal_cdf(z) + z * kernels::normal_pdf(z));
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |buf| {
                        for i in 0..rows {
                            add_into(
                                &mut buf[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = out.cols();
                acc(*x, &mut |buf| add_into(&mut buf[start * n..start * n + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let w = out.cols();
                let n = val(*x).cols();
                acc(*x, &mut |buf| {
                    for i in 0..out.rows() {
                        add_into(
                            &mut buf[i * n + start..i * n + start + w],
                            &g[i * w..(i + 1) * w],
                        );
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let n = out.cols();
                acc(*x, &mut |buf| {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut buf[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::MaskRows { x, fill, flags } => {
                let n = out.cols();
                acc(*x, &mut |buf| {
                    for (i, _) in flags.iter().enumerate().filter(|(_, f)| !**f) {
                        add_into(&mut buf[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
                acc(*fill, &mut |buf| {
                    for (i, _) in flags.iter().enumerate().filter(|(_, f)| **f) {
                        add_into(&mut buf[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|b| *b += g[0])),
            Op::Mean(x) => {
                let s = g[0] / val(*x).len() as f64;
                acc(*x, &mut |buf| buf.iter_mut().for_each(|b| *b += s));
            }
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
                keep,
            } => {
                let [n, dh] = dims(val(*q));
                let m = val(*k).rows();
                let dv = val(*v).cols();
                let weights: Cow<[f64]> = match keep {
                    Some(kp) => Cow::Owned(probs.iter().zip(kp).map(|(p, k)| p * k).collect()),
                    None => Cow::Borrowed(probs),
                };
                if nodes[v.0].requires_grad {
                    let dvv = gemm_tn(&weights, g, m, n, dv);
                    acc(*v, &mut |buf| add_into(buf, &dvv));
                }
                if !nodes[q.0].requires_grad && !nodes[k.0].requires_grad {
                    return;
                }
                let mut dp = gemm_nt(g, val(*v).data(), n, dv, m);
                if let Some(kp) = keep {
                    dp.iter_mut().zip(kp).for_each(|(d, k)| *d *= k);
                }
                let mut ds = vec![0.0; n * m];
                for i in 0..n {
                    let p = &probs[i * m..(i + 1) * m];
                    let d = &dp[i * m..(i + 1) * m];
                    let dot: f64 = p.iter().zip(d).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        ds[i * m + j] = scale * p[j] * (d[j] - dot);
                    }
                }
                if nodes[q.0].requires_grad {
                    let dq = gemm_nn(&ds, val(*k).data(), n, m, dh);
                    acc(*q, &mut |buf| add_into(buf, &dq));
                }
                if nodes[k.0].requires_grad {
                    let dk = gemm_tn(&ds, val(*q).data(), m, n, dh);
                    acc(*k, &mut |buf| add_into(buf, &dk));
                }
            }
            Op::Mse { pred, target } => {
                let p = val(*pred).data();
                let c = 2.0 * g[0] / p.len() as f64;
                acc(*pred, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += c * (p[i] - target[i]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = val(*logits).cols();
                let c = g[0] / labels.len() as f64;
                acc(*logits, &mut |buf| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            buf[i * k + j] += c * (probs[i * k + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn dims(t: &Tensor) -> [usize; 2] {
    t.matrix_dims().expect("validated at construction")
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = g.constant(Tensor::identity(2));
        let b = g.constant(t(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let ai = g.matmul(a, i).unwrap();
        assert_eq!(g.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
        let az = g.matmul(a, z).unwrap();
        assert!(g.value(az).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let cases: [([f64; 2], [f64; 2]); 3] = [
            ([0.0, 0.0], [0.5, 0.5]),
            ([0.0, 3f64.ln()], [0.25, 0.75]),
            ([1000.0, 1000.0], [0.5, 0.5]),
        ];
        for (input, want) in cases {
            let x = g.constant(Tensor::new(vec![2], input.to_vec()).unwrap());
            let y = g.softmax(x, 0).unwrap();
            for (a, b) in g.value(y).data().iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::filled(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let c = g.constant(Tensor::filled(&[1, 3], 4.2));
        let y = g.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(t(&[&[2.0, 4.0, 6.0]]));
        let y = g.layer_norm(x, gain, bias, 1e-14).unwrap();
        let d = g.value(y).data();
        let mean = d.iter().sum::<f64>() / 3.0;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);

        let gain2 = g.constant(Tensor::filled(&[2], 1.0));
        let bias2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[&[1.0, -1.0]]));
        let y = g.layer_norm(x, gain2, bias2, 1e-14).unwrap();
        assert!(g.value(y).max_abs_diff(&t(&[&[1.0, -1.0]])) < 1e-9);
    }

    #[test]
    fn gelu_limits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 30.0]).unwrap());
        let y = g.gelu(x);
        assert_eq!(g.value(y).data()[0], 0.0);
        assert!((g.value(y).data()[1] - 30.0).abs() < 1e-12);
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
        // a second sweep accumulates
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[12.0]);

        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let b = g.leaf(Tensor::new(vec![3], vec![-4.0, 5.0, 0.5]).unwrap(), true);
        let ab = g.mul(a, b).unwrap();
        let loss = g.sum(ab);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), g.value(b).data());
        assert_eq!(g.grad(b).unwrap().data(), g.value(a).data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn attention_is_key_order_independent() {
        let mut g = Graph::new();
        let q = g.constant(t(&[&[0.3, -1.2], &[0.9, 0.1]]));
        let k = g.constant(t(&[&[1.0, 0.5], &[-0.2, 0.7], &[0.4, -0.9]]));
        let v = g.constant(t(&[&[0.1, 0.2], &[0.3, -0.4], &[2.5, 1.0]]));
        let kp = g.constant(t(&[&[0.4, -0.9], &[1.0, 0.5], &[-0.2, 0.7]]));
        let vp = g.constant(t(&[&[2.5, 1.0], &[0.1, 0.2], &[0.3, -0.4]]));
        let o1 = g.attention(q, k, v, 0.7, None).unwrap();
        let o2 = g.attention(q, kp, vp, 0.7, None).unwrap();
        assert_eq!(g.value(o1), g.value(o2));
    }
}
