//! Dense float64 tensors and a reverse-mode autodiff tape.
//!
//! Every differentiable computation in the toolkit is expressed through the
//! primitives here. A [`Tape`] records one example's forward pass as a flat
//! arena of nodes; [`Tape::backward`] replays the arena in reverse, so
//! identical tapes always produce bitwise-identical gradients. Tapes are
//! per-example and never shared across threads.

use crate::error::{Error, Result};
use rand::rngs::StdRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major float64 array with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::contract(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    /// Row vector 1xN.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    /// Glorot-uniform matrix, the standard init for weight matrices.
    pub fn glorot(rows: usize, cols: usize, rng: &mut StdRng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// True if the tensor has at most one extent greater than 1.
    pub fn is_vector_like(&self) -> bool {
        self.shape.iter().filter(|&&d| d > 1).count() <= 1
    }

    pub fn transposed(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    /// Concatenate 2-D tensors along `axis` (0 = rows, 1 = cols).
    Concat(Vec<Var>, usize),
    /// Pick one row of a matrix (embedding lookup, frame extraction).
    Lookup(Var, usize),
    /// Elementwise multiply by a fixed mask with inverted scaling baked in.
    Dropout(Var, Vec<f64>),
    /// Temperature softmax over a vector-like tensor.
    SoftmaxT(Var, f64),
    /// Log-softmax over a vector-like tensor.
    LogSoftmax(Var),
    /// Negative log-likelihood pick: -x[idx], a scalar.
    NllPick(Var, usize),
    /// Sum of squared entries, a scalar.
    FrobSq(Var),
    /// Sum of all entries, a scalar.
    Sum(Var),
    /// MxN plus a 1xN row broadcast over every row.
    AddRowBroadcast(Var, Var),
    /// Stack 1xN (or length-N) vectors into an MxN matrix.
    StackRows(Vec<Var>),
    Transpose(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Per-example record of primitive operations in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a constant or parameter value.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- primitives ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            let o = out.data_mut();
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut o[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
        }
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let shape = self.shape(a).to_vec();
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Tensor { shape, data }, op))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| c * x).collect(),
        };
        self.push(out, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| x.tanh()).collect(),
        };
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| sigmoid(x)).collect(),
        };
        self.push(out, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric(
                "log requires strictly positive inputs".into(),
            ));
        }
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| x.ln()).collect(),
        };
        Ok(self.push(out, Op::Log(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        if axis > 1 {
            return Err(Error::contract(format!("concat axis {axis} out of range")));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 2 {
            return Err(Error::contract("concat expects 2-D tensors"));
        }
        let fixed = 1 - axis;
        let mut along = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[fixed] != first[fixed] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            along += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = along;
        let (m, n) = (shape[0], shape[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let (pm, pn) = (t.rows(), t.cols());
            for i in 0..pm {
                for j in 0..pn {
                    let (oi, oj) = if axis == 0 {
                        (offset + i, j)
                    } else {
                        (i, offset + j)
                    };
                    out.data_mut()[oi * n + oj] = t.data()[i * pn + j];
                }
            }
            offset += t.shape()[axis];
        }
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    /// Row lookup: pick row `idx` of a matrix as a 1xD tensor.
    pub fn lookup(&mut self, table: Var, idx: usize) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.shape().len() != 2 || idx >= t.rows() {
            return Err(Error::contract(format!(
                "lookup row {idx} out of bounds for shape {:?}",
                t.shape()
            )));
        }
        let d = t.cols();
        let data = t.data()[idx * d..(idx + 1) * d].to_vec();
        Ok(self.push(Tensor::row(data), Op::Lookup(table, idx)))
    }

    /// Inverted-scaling dropout: sampled entries are zeroed, survivors are
    /// divided by the keep probability so inference needs no rescale.
    pub fn dropout(&mut self, a: Var, drop_prob: f64, rng: &mut StdRng) -> Result<Var> {
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(Error::contract(format!(
                "dropout probability {drop_prob} outside [0, 1)"
            )));
        }
        let t = &self.nodes[a.0].value;
        let keep = 1.0 - drop_prob;
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| {
                if rng.gen_range(0.0..1.0) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        };
        Ok(self.push(out, Op::Dropout(a, mask)))
    }

    /// Temperature softmax over a vector-like tensor, computed with
    /// max-subtraction for stability.
    pub fn softmax_temperature(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::contract(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let t = &self.nodes[a.0].value;
        if !t.is_vector_like() {
            return Err(Error::contract(format!(
                "softmax_temperature expects a vector, got shape {:?}",
                t.shape()
            )));
        }
        if t.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let scaled: Vec<f64> = t.data().iter().map(|&x| x / temperature).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: exps.iter().map(|&e| e / total).collect(),
        };
        Ok(self.push(out, Op::SoftmaxT(a, temperature)))
    }

    /// Log-softmax over a vector-like tensor (max-subtraction + log-sum-exp).
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if !t.is_vector_like() {
            return Err(Error::contract(format!(
                "log_softmax expects a vector, got shape {:?}",
                t.shape()
            )));
        }
        if t.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(
                "log_softmax input contains non-finite values".into(),
            ));
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = t
            .data()
            .iter()
            .map(|&x| (x - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| x - lse).collect(),
        };
        Ok(self.push(out, Op::LogSoftmax(a)))
    }

    /// Negative log-likelihood pick: scalar -x[idx].
    pub fn nll_pick(&mut self, a: Var, idx: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if idx >= t.numel() {
            return Err(Error::contract(format!(
                "nll_pick index {idx} out of bounds for {} entries",
                t.numel()
            )));
        }
        let v = -t.data()[idx];
        Ok(self.push(Tensor::scalar(v), Op::NllPick(a, idx)))
    }

    /// Squared Frobenius norm: scalar sum of squared entries.
    pub fn frobenius_norm_sq(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.shape().len() != 2 {
            return Err(Error::contract(format!(
                "frobenius_norm_sq expects a 2-D tensor, got shape {:?}",
                t.shape()
            )));
        }
        let v = t.data().iter().map(|&x| x * x).sum();
        Ok(self.push(Tensor::scalar(v), Op::FrobSq(a)))
    }

    /// Scalar sum of all entries.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(a))
    }

    /// MxN matrix plus a 1xN row added to every row.
    pub fn add_row_broadcast(&mut self, m: Var, row: Var) -> Result<Var> {
        let (sm, sr) = (self.shape(m), self.shape(row));
        if sm.len() != 2 || sr.len() != 2 || sr[0] != 1 || sr[1] != sm[1] {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                lhs: sm.to_vec(),
                rhs: sr.to_vec(),
            });
        }
        let (rows, cols) = (sm[0], sm[1]);
        let mut out = Tensor::zeros(vec![rows, cols]);
        {
            let mv = self.nodes[m.0].value.data();
            let rv = self.nodes[row.0].value.data();
            let o = out.data_mut();
            for i in 0..rows {
                for j in 0..cols {
                    o[i * cols + j] = mv[i * cols + j] + rv[j];
                }
            }
        }
        Ok(self.push(out, Op::AddRowBroadcast(m, row)))
    }

    /// Stack M vector-like tensors of length N into an MxN matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::contract("stack_rows of zero rows"));
        }
        let n = self.nodes[rows[0].0].value.numel();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let t = &self.nodes[r.0].value;
            if !t.is_vector_like() || t.numel() != n {
                return Err(Error::Shape {
                    op: "stack_rows",
                    lhs: vec![1, n],
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor {
            shape: vec![rows.len(), n],
            data,
        };
        Ok(self.push(out, Op::StackRows(rows.to_vec())))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.shape().len() != 2 {
            return Err(Error::contract(format!(
                "transpose expects a 2-D tensor, got shape {:?}",
                t.shape()
            )));
        }
        let out = t.transposed();
        Ok(self.push(out, Op::Transpose(a)))
    }

    // ---- backward --------------------------------------------------------

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let n = self.nodes[v.0].value.numel();
        debug_assert_eq!(delta.len(), n);
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.nodes[v.0].grad = Some(delta.to_vec()),
        }
    }

    /// Populate the grad field of every ancestor of `loss` with
    /// d(loss)/d(ancestor). `loss` must be a scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    // dA = g . B^T
                    let mut da = vec![0.0; m * k];
                    for i2 in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i2 * n + j] * bv.data()[p * n + j];
                            }
                            da[i2 * k + p] = acc;
                        }
                    }
                    self.accumulate(a, &da);
                    // dB = A^T . g
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i2 in 0..m {
                                acc += av.data()[i2 * k + p] * g[i2 * n + j];
                            }
                            db[p * n + j] = acc;
                        }
                    }
                    self.accumulate(b, &db);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|gi| c * gi).collect();
                    self.accumulate(a, &da);
                }
                Op::Tanh(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(gi, yi)| gi * (1.0 - yi * yi))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(gi, yi)| gi * yi * (1.0 - yi))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Log(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(gi, xi)| gi / xi)
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Concat(parts, axis) => {
                    let out_cols = self.nodes[i].value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let (pm, pn) = {
                            let t = &self.nodes[p.0].value;
                            (t.rows(), t.cols())
                        };
                        let mut dp = vec![0.0; pm * pn];
                        for r in 0..pm {
                            for c in 0..pn {
                                let (oi, oj) = if axis == 0 {
                                    (offset + r, c)
                                } else {
                                    (r, offset + c)
                                };
                                dp[r * pn + c] = g[oi * out_cols + oj];
                            }
                        }
                        self.accumulate(p, &dp);
                        offset += if axis == 0 { pm } else { pn };
                    }
                }
                Op::Lookup(table, idx) => {
                    let (rows, d) = {
                        let t = &self.nodes[table.0].value;
                        (t.rows(), t.cols())
                    };
                    let mut dt = vec![0.0; rows * d];
                    dt[idx * d..(idx + 1) * d].copy_from_slice(&g);
                    self.accumulate(table, &dt);
                }
                Op::Dropout(a, mask) => {
                    let da: Vec<f64> = g.iter().zip(&mask).map(|(gi, mi)| gi * mi).collect();
                    self.accumulate(a, &da);
                }
                Op::SoftmaxT(a, temperature) => {
                    let y = self.nodes[i].value.data();
                    let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(y)
                        .map(|(gi, yi)| yi * (gi - dot) / temperature)
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::LogSoftmax(a) => {
                    let y = self.nodes[i].value.data();
                    let gsum: f64 = g.iter().sum();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(y)
                        .map(|(gi, yi)| gi - yi.exp() * gsum)
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::NllPick(a, idx) => {
                    let n = self.nodes[a.0].value.numel();
                    let mut da = vec![0.0; n];
                    da[idx] = -g[0];
                    self.accumulate(a, &da);
                }
                Op::FrobSq(a) => {
                    let da: Vec<f64> = self.nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .map(|&x| 2.0 * x * g[0])
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Sum(a) => {
                    let da = vec![g[0]; self.nodes[a.0].value.numel()];
                    self.accumulate(a, &da);
                }
                Op::AddRowBroadcast(m, row) => {
                    let (rows, cols) = {
                        let t = &self.nodes[m.0].value;
                        (t.rows(), t.cols())
                    };
                    self.accumulate(m, &g);
                    let mut dr = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dr[c] += g[r * cols + c];
                        }
                    }
                    self.accumulate(row, &dr);
                }
                Op::StackRows(parts) => {
                    let n = self.nodes[i].value.cols();
                    for (r, p) in parts.iter().enumerate() {
                        self.accumulate(*p, &g[r * n..(r + 1) * n]);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = {
                        let t = &self.nodes[a.0].value;
                        (t.rows(), t.cols())
                    };
                    // output is n x m; transpose g back to m x n
                    let mut da = vec![0.0; m * n];
                    for r in 0..n {
                        for c in 0..m {
                            da[c * n + r] = g[r * m + c];
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
        }
        Ok(())
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

/// Numerically stable log(sum(exp(xs))).
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max
}
