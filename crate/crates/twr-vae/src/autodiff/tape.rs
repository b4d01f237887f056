//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive application in execution order; each
//! node stores its operator, input node ids and forward value. [`Tape::backward`]
//! replays the list in reverse, applying hand-written vector-Jacobian products
//! and accumulating gradients per node. The tape is rebuilt for every
//! training step and dropped after its backward pass, and exclusive ownership
//! (`&mut Tape`) makes a second concurrent writer impossible by construction.
//!
//! The primitive set is deliberately small — matrix multiply, elementwise
//! add/subtract/multiply, broadcast bias add, concatenate, column slice,
//! `tanh`, `sigmoid`, `exp`, `log`, fused softmax cross-entropy, sum/mean/row-sum
//! reductions, scalar scale and embedding-row gather — everything else in the
//! crate is composed from these, so certifying their VJPs certifies the whole
//! model. [`grad_check`] performs that certification against central finite
//! differences for any objective expressible as a closure over the tape.

use crate::autodiff::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`]. Plain index; `Copy` on purpose so model
/// code can thread handles around freely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `[m,n] + [n]`, bias broadcast over rows.
    AddBias(usize, usize),
    /// Column-wise concatenation (rank 1: plain concatenation).
    Concat(usize, usize),
    SliceCols { x: usize, start: usize, len: usize },
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    /// Fused log-sum-exp-stabilised softmax + cross-entropy, one loss per row.
    SoftmaxXent { logits: usize, targets: Vec<usize> },
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Scale(usize, f64),
    Gather { table: usize, ids: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    /// True for leaves registered as trainable parameters.
    param: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any path reached it.
    /// Parameter leaves are always present (zero-filled when unreached).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, param: bool) -> Var {
        self.nodes.push(Node { op, value, param });
        Var(self.nodes.len() - 1)
    }

    /// Register a trainable leaf; it will always receive a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Register a non-trainable leaf (inputs, masks, frozen noise).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    // ── primitives ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Ok(self.push(Op::Matmul(a.0, b.0), Tensor::new(vec![m, n], out)?, false))
    }

    fn binary_same_shape(&mut self, name: &str, a: Var, b: Var) -> Result<(Vec<usize>,)> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{name} of {sa:?} and {sb:?}")));
        }
        Ok((sa.to_vec(),))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape,) = self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a.0, b.0), Tensor::new(shape, data)?, false))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape,) = self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::Sub(a.0, b.0), Tensor::new(shape, data)?, false))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape,) = self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul(a.0, b.0), Tensor::new(shape, data)?, false))
    }

    /// `[m,n] + [n]` with the bias broadcast over every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(bias).shape().to_vec());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::shape(format!("add_bias of {sa:?} and {sb:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let (da, db) = (self.value(a).data(), self.value(bias).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = da[i * n + j] + db[j];
            }
        }
        Ok(self.push(Op::AddBias(a.0, bias.0), Tensor::new(vec![m, n], out)?, false))
    }

    /// Concatenate along the last axis: `[p] ++ [q] -> [p+q]`, or
    /// `[m,p] ++ [m,q] -> [m,p+q]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let out = match (sa.as_slice(), sb.as_slice()) {
            ([p], [q]) => {
                let mut data = Vec::with_capacity(p + q);
                data.extend_from_slice(self.value(a).data());
                data.extend_from_slice(self.value(b).data());
                Tensor::vector(data)
            }
            ([m, p], [m2, q]) if m == m2 => {
                let mut data = Vec::with_capacity(m * (p + q));
                let (da, db) = (self.value(a).data(), self.value(b).data());
                for i in 0..*m {
                    data.extend_from_slice(&da[i * p..(i + 1) * p]);
                    data.extend_from_slice(&db[i * q..(i + 1) * q]);
                }
                Tensor::new(vec![*m, p + q], data)?
            }
            _ => return Err(Error::shape(format!("concat of {sa:?} and {sb:?}"))),
        };
        Ok(self.push(Op::Concat(a.0, b.0), out, false))
    }

    /// Slice `len` entries of the last axis starting at `start`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let out = match sx.as_slice() {
            [n] => {
                if start + len > *n {
                    return Err(Error::shape(format!(
                        "slice [{start}, {}) out of range for {sx:?}",
                        start + len
                    )));
                }
                Tensor::vector(self.value(x).data()[start..start + len].to_vec())
            }
            [m, n] => {
                if start + len > *n {
                    return Err(Error::shape(format!(
                        "slice [{start}, {}) out of range for {sx:?}",
                        start + len
                    )));
                }
                let d = self.value(x).data();
                let mut data = Vec::with_capacity(m * len);
                for i in 0..*m {
                    data.extend_from_slice(&d[i * n + start..i * n + start + len]);
                }
                Tensor::new(vec![*m, len], data)?
            }
            _ => return Err(Error::shape(format!("slice of rank-{} tensor", sx.len()))),
        };
        Ok(self.push(Op::SliceCols { x: x.0, start, len }, out, false))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let shape = self.value(x).shape().to_vec();
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.push(op, Tensor::new(shape, data).expect("unary preserves shape"), false)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x.0), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x.0), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        // f64 overflows past exp(709.78...); report instead of producing inf.
        for (i, &v) in self.value(x).data().iter().enumerate() {
            if v > 709.0 {
                return Err(Error::domain(format!("exp overflow: input {v} at flat index {i}")));
            }
        }
        Ok(self.unary(x, Op::Exp(x.0), f64::exp))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        for (i, &v) in self.value(x).data().iter().enumerate() {
            if v <= 0.0 {
                return Err(Error::domain(format!(
                    "log of non-positive value {v} at flat index {i}"
                )));
            }
        }
        Ok(self.unary(x, Op::Log(x.0), f64::ln))
    }

    /// Fused softmax + cross-entropy. `logits` is `[rows, classes]`; the
    /// result is one loss per row: `logsumexp(row) - row[target]`, stabilised
    /// by subtracting the row maximum inside the log-sum-exp.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("softmax_xent expects rank 2, got {s:?}")));
        }
        let (m, v) = (s[0], s[1]);
        if targets.len() != m {
            return Err(Error::shape(format!("{m} logit rows but {} targets", targets.len())));
        }
        if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= v) {
            return Err(Error::invalid(format!(
                "target id {t} at row {i} out of range for {v} classes"
            )));
        }
        let d = self.value(logits).data();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &d[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            out.push(lse - row[targets[i]]);
        }
        Ok(self.push(
            Op::SoftmaxXent { logits: logits.0, targets: targets.to_vec() },
            Tensor::vector(out),
            false,
        ))
    }

    /// Sum of every element; the result is a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum(x.0), Tensor::scalar(s), false)
    }

    /// Mean of every element; the result is a rank-0 scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s: f64 = self.value(x).data().iter().sum();
        Ok(self.push(Op::Mean(x.0), Tensor::scalar(s / n as f64), false))
    }

    /// Per-row sum of a `[m,n]` tensor, producing `[m]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("row_sum expects rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let d = self.value(x).data();
        let out = (0..m).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect();
        Ok(self.push(Op::RowSum(x.0), Tensor::vector(out), false))
    }

    /// Multiply every element by a compile-time-known scalar (not a node).
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let shape = self.value(x).shape().to_vec();
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        self.push(Op::Scale(x.0, c), Tensor::new(shape, data).expect("scale keeps shape"), false)
    }

    /// Gather rows of an embedding table: `table[v,e][ids] -> [len(ids), e]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.value(table).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("gather expects rank-2 table, got {s:?}")));
        }
        let (v, e) = (s[0], s[1]);
        if let Some((i, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= v) {
            return Err(Error::invalid(format!(
                "gather id {id} at position {i} out of range for table with {v} rows"
            )));
        }
        let d = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            data.extend_from_slice(&d[id * e..(id + 1) * e]);
        }
        Ok(self.push(
            Op::Gather { table: table.0, ids: ids.to_vec() },
            Tensor::new(vec![ids.len(), e], data)?,
            false,
        ))
    }

    // ── composites (no backward rules of their own) ─────────────────────

    /// `x·w + b`, the ubiquitous affine map.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Reverse-accumulate gradients of a scalar `loss` through the recorded
    /// list. The tape itself is untouched, so calling twice yields bitwise
    /// identical results. Every parameter leaf is present in the output,
    /// zero-filled if no path from the loss reaches it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep leaf gradients
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    let gd = g.data();
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gd[i * n + j] * tb.data()[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let aip = ta.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * gd[i * n + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![m, k], da)?)?;
                    accumulate(&mut grads, *b, Tensor::new(vec![k, n], db)?)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    let neg = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().map(|v| -v).collect(),
                    )?;
                    accumulate(&mut grads, *a, g)?;
                    accumulate(&mut grads, *b, neg)?;
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(tb.data()).map(|(gv, bv)| gv * bv).collect(),
                    )?;
                    let db = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(ta.data()).map(|(gv, av)| gv * av).collect(),
                    )?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::AddBias(a, b) => {
                    let (m, n) = (g.shape()[0], g.shape()[1]);
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g.data()[i * n + j];
                        }
                    }
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, Tensor::vector(db))?;
                }
                Op::Concat(a, b) => {
                    let (sa, sb) =
                        (self.nodes[*a].value.shape().to_vec(), self.nodes[*b].value.shape().to_vec());
                    match (sa.as_slice(), sb.as_slice()) {
                        ([p], [_q]) => {
                            let da = Tensor::vector(g.data()[..*p].to_vec());
                            let db = Tensor::vector(g.data()[*p..].to_vec());
                            accumulate(&mut grads, *a, da)?;
                            accumulate(&mut grads, *b, db)?;
                        }
                        ([m, p], [_, q]) => {
                            let total = p + q;
                            let mut da = Vec::with_capacity(m * p);
                            let mut db = Vec::with_capacity(m * q);
                            for i in 0..*m {
                                da.extend_from_slice(&g.data()[i * total..i * total + p]);
                                db.extend_from_slice(&g.data()[i * total + p..(i + 1) * total]);
                            }
                            accumulate(&mut grads, *a, Tensor::new(vec![*m, *p], da)?)?;
                            accumulate(&mut grads, *b, Tensor::new(vec![*m, *q], db)?)?;
                        }
                        _ => unreachable!("concat forward validated shapes"),
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let sx = self.nodes[*x].value.shape().to_vec();
                    let mut dx = Tensor::zeros(&sx);
                    match sx.as_slice() {
                        [_n] => {
                            dx.data_mut()[*start..start + len].copy_from_slice(g.data());
                        }
                        [m, n] => {
                            for i in 0..*m {
                                dx.data_mut()[i * n + start..i * n + start + len]
                                    .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                            }
                        }
                        _ => unreachable!("slice forward validated shapes"),
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[id].value;
                    let dx = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(gv, yv)| gv * (1.0 - yv * yv))
                            .collect(),
                    )?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[id].value;
                    let dx = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(gv, yv)| gv * yv * (1.0 - yv))
                            .collect(),
                    )?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Exp(x) => {
                    let y = &self.nodes[id].value;
                    let dx = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv).collect(),
                    )?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Log(x) => {
                    let tx = &self.nodes[*x].value;
                    let dx = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(tx.data()).map(|(gv, xv)| gv / xv).collect(),
                    )?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SoftmaxXent { logits, targets } => {
                    let tl = &self.nodes[*logits].value;
                    let (m, v) = (tl.shape()[0], tl.shape()[1]);
                    let mut dl = vec![0.0; m * v];
                    for i in 0..m {
                        let row = &tl.data()[i * v..(i + 1) * v];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                        let gi = g.data()[i];
                        for j in 0..v {
                            let p = (row[j] - max).exp() / denom;
                            let indicator = if j == targets[i] { 1.0 } else { 0.0 };
                            dl[i * v + j] = gi * (p - indicator);
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::new(vec![m, v], dl)?)?;
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    let sx = self.nodes[*x].value.shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::full(&sx, gv))?;
                }
                Op::Mean(x) => {
                    let n = self.nodes[*x].value.numel() as f64;
                    let gv = g.data()[0] / n;
                    let sx = self.nodes[*x].value.shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::full(&sx, gv))?;
                }
                Op::RowSum(x) => {
                    let sx = self.nodes[*x].value.shape().to_vec();
                    let (m, n) = (sx[0], sx[1]);
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let gi = g.data()[i];
                        for j in 0..n {
                            dx[i * n + j] = gi;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(sx, dx)?)?;
                }
                Op::Scale(x, c) => {
                    let dx = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().map(|gv| gv * c).collect(),
                    )?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Gather { table, ids } => {
                    let st = self.nodes[*table].value.shape().to_vec();
                    let e = st[1];
                    let mut dt = Tensor::zeros(&st);
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &g.data()[row * e..(row + 1) * e];
                        let dst = &mut dt.data_mut()[id * e..(id + 1) * e];
                        for j in 0..e {
                            dst[j] += src[j];
                        }
                    }
                    accumulate(&mut grads, *table, dt)?;
                }
            }
        }

        // Parameter leaves the loss never reached still get explicit zeros.
        for (id, node) in self.nodes.iter().enumerate() {
            if node.param && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) -> Result<()> {
    match &mut grads[id] {
        Some(existing) => {
            if existing.shape() != delta.shape() {
                return Err(Error::shape(format!(
                    "gradient accumulation shape mismatch: {:?} vs {:?}",
                    existing.shape(),
                    delta.shape()
                )));
            }
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

/// Worst coordinate found by [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max over coordinates of excess / (|central| + 1e-12)`, where `excess`
    /// is the part of `|analytic - central|` above the oracle's own
    /// resolution (see [`grad_check`]).
    pub max_rel_err: f64,
    /// `(parameter index, flat coordinate)` of the worst disagreement.
    pub worst_coord: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Smallest discrepancy the central-difference oracle can attest at all:
    /// `8·ε·max(|f|, 1)/step`, from rounding of the objective itself.
    pub noise_budget: f64,
}

/// Compare the tape's analytic gradient of an arbitrary scalar objective with
/// central finite differences, coordinate by coordinate.
///
/// `build` must be a pure function of the parameter values: any randomness
/// has to be frozen by the caller (pre-drawn noise passed in as constants).
///
/// A central difference `(f(x+h) − f(x−h)) / 2h` carries irreducible rounding
/// noise of order `ε·|f|/h` — the objective's own last-bit rounding divided
/// by the step — so no oracle in 64-bit arithmetic can attest gradient
/// coordinates to a finer absolute resolution. Discrepancies inside that
/// budget (`8·ε·max(|f|,1)/step`, factor 8 for accumulated rounding along the
/// perturbed path) are therefore reported as zero; anything above it is
/// scored as `(|analytic − central| − budget) / (|central| + 1e-12)` and the
/// maximum over all coordinates is returned. Genuine gradient bugs surface
/// orders of magnitude above the budget.
pub fn grad_check<F>(params: &[Tensor], step: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::invalid(format!(
            "grad_check objective must be scalar, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    tape.value(loss).check_finite("grad_check objective")?;
    let objective_scale = tape.value(loss).item()?.abs().max(1.0);
    let noise_budget = 8.0 * f64::EPSILON * objective_scale / step;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.wrt(v).expect("parameter leaves always carry gradients").clone())
        .collect();
    drop(tape);

    // Forward-only evaluation at perturbed points.
    let mut eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let l = build(&mut t, &vs)?;
        let v = t.value(l).item()?;
        if !v.is_finite() {
            return Err(Error::domain(format!("objective is {v} at perturbed point")));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        noise_budget,
    };
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[p].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let central = (up - down) / (2.0 * step);
            let a = analytic[p].data()[i];
            let excess = ((a - central).abs() - noise_budget).max(0.0);
            let rel = excess / (central.abs() + 1e-12);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_coord = (p, i);
                report.analytic_at_worst = a;
                report.numeric_at_worst = central;
            }
        }
    }
    Ok(report)
}
