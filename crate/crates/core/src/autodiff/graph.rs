use rand::Rng;

use super::tensor::{matmul_at_acc, matmul_bt_acc, matmul_into};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-12;
/// Vectors with a norm below this have cosine similarity 0 and no gradient.
pub const COSINE_EPS: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddBias(Var, Var),
    MulConst(Var, Vec<S>),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    LogSumExpRows(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Cosine {
        a: Var,
        b: Var,
        inv_a: Vec<S>,
        inv_b: Vec<S>,
    },
    Bilinear {
        zh: Var,
        zt: Var,
        w: Var,
        b: Var,
    },
    BceMean(Var, Vec<S>),
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only record of forward operations. Nodes are pushed after their
/// inputs, so the record is topologically ordered by construction.
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    // Branching keeps exp() from overflowing for large |x|.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the record for the next step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Reads a parameter's current value into the record.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Result<Var> {
        let value = store.get(id).value.clone();
        self.push("param", value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", &s, &[2]));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push("transpose", Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push("add", Tensor::from_parts(shape, data), Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", Tensor::from_parts(shape, data), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push("scale", v, Op::Scale(a, c), rg)
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if self.value(bias).len() != n {
            return Err(shape_err("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, &bv) in data[i * n..(i + 1) * n].iter_mut().zip(&b) {
                *x = *x + bv;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(bias);
        self.push("add_bias", Tensor::from_parts(shape, data), Op::AddBias(a, bias), rg)
    }

    /// Inverted dropout with keep probability `1 - rate`; identity when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let inv = S::lit(1.0 / keep);
        let mask: Vec<S> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < keep { inv } else { S::zero() })
            .collect();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push("dropout", Tensor::from_parts(shape, data), Op::MulConst(a, mask), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push("tanh", v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push("sigmoid", v, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(S::zero()));
        let rg = self.rg(a);
        self.push("relu", v, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let mx = row.iter().fold(S::neg_infinity(), |acc, &v| acc.max(v));
            let mut z = S::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push("softmax_rows", Tensor::from_parts(shape, data), Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nf = S::lit(n as f64);
        let eps = S::lit(LAYER_NORM_EPS);
        let mut xhat = vec![S::zero(); m * n];
        let mut rstd = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let r = S::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let xh = (row[j] - mean) * r;
                xhat[i * n + j] = xh;
                out[i * n + j] = xh * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Column-wise `log Σ_i exp(m[i][j])` over the `k` rows of `m`, shifted by the
    /// column maximum. Returns a length-`d` vector.
    pub fn logsumexp_rows(&mut self, m: Var) -> Result<Var> {
        let (k, d) = self.dims2(m);
        if k == 0 {
            return Err(Error::EmptyPool);
        }
        let src = self.value(m).data();
        let mut out = vec![S::zero(); d];
        for (j, o) in out.iter_mut().enumerate() {
            let mx = (0..k).fold(S::neg_infinity(), |acc, i| acc.max(src[i * d + j]));
            let s: S = (0..k).map(|i| (src[i * d + j] - mx).exp()).sum();
            *o = mx + s.ln();
        }
        let rg = self.rg(m);
        self.push("logsumexp_rows", Tensor::vector(out), Op::LogSumExpRows(m), rg)
    }

    /// Selects rows of a matrix (embedding lookup, mention selection).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table);
        if idx.is_empty() {
            return Err(shape_err("gather_rows", self.shape(table), &[0]));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i, rows });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![idx.len(), d], out),
            Op::GatherRows(table, idx.to_vec()),
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if len == 0 || start + len > n {
            return Err(shape_err("slice_cols", self.shape(a), &[start, len]));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        self.push("slice_cols", Tensor::from_parts(vec![m, len], out), Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p);
            if pm != m {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Stacks matrices (or vectors, as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p);
            if pn != n {
                return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += pm;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat_rows",
            Tensor::from_parts(vec![rows, n], out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        self.push("reshape", v, Op::Reshape(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: S = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Pairwise cosine similarity between rows: `a` is n×d, `b` is m×d, result n×m.
    /// Rows whose norm falls below [`COSINE_EPS`] score 0 and receive no gradient.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2(a);
        let (m, db) = self.dims2(b);
        if d != db {
            return Err(shape_err("cosine_matrix", self.shape(a), self.shape(b)));
        }
        let inv_norms = |t: &Tensor<S>, rows: usize| -> Vec<S> {
            (0..rows)
                .map(|i| {
                    let nrm = t.row(i).iter().map(|&v| v * v).sum::<S>().sqrt();
                    if nrm < S::lit(COSINE_EPS) {
                        S::zero()
                    } else {
                        S::one() / nrm
                    }
                })
                .collect()
        };
        let inv_a = inv_norms(self.value(a), n);
        let inv_b = inv_norms(self.value(b), m);
        let mut out = vec![S::zero(); n * m];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, n, d, m);
        for i in 0..n {
            for j in 0..m {
                let c = out[i * m + j] * inv_a[i] * inv_b[j];
                out[i * m + j] = c.max(-S::one()).min(S::one());
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "cosine_matrix",
            Tensor::from_parts(vec![n, m], out),
            Op::Cosine { a, b, inv_a, inv_b },
            rg,
        )
    }

    /// Cosine similarity of two vectors as a one-element tensor.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(shape_err("cosine_similarity", self.shape(a), self.shape(b)));
        }
        let ra = self.reshape(a, vec![1, la])?;
        let rb = self.reshape(b, vec![1, lb])?;
        let c = self.cosine_matrix(ra, rb)?;
        self.reshape(c, vec![1])
    }

    /// Per-row bilinear scores `s[p][c] = zh[p]ᵀ · W[c] · zt[p] + b[c]` with
    /// `zh`, `zt` of shape P×k, `W` of shape C×k×k and `b` of length C.
    pub fn bilinear(&mut self, zh: Var, zt: Var, w: Var, b: Var) -> Result<Var> {
        let (p, k) = self.dims2(zh);
        let ws = self.shape(w).to_vec();
        if self.dims2(zt) != (p, k) || ws.len() != 3 || ws[1] != k || ws[2] != k || self.value(b).len() != ws[0] {
            return Err(shape_err("bilinear", self.shape(zh), &ws));
        }
        let c = ws[0];
        let (hv, tv, wv, bv) = (
            self.value(zh).data(),
            self.value(zt).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![S::zero(); p * c];
        // u = zh · W_c (length k), then s = u · zt
        let mut u = vec![S::zero(); k];
        for r in 0..c {
            let wr = &wv[r * k * k..(r + 1) * k * k];
            for q in 0..p {
                u.iter_mut().for_each(|x| *x = S::zero());
                matmul_into(&hv[q * k..(q + 1) * k], wr, &mut u, 1, k, k);
                let s: S = u.iter().zip(&tv[q * k..(q + 1) * k]).map(|(&x, &y)| x * y).sum();
                out[q * c + r] = s + bv[r];
            }
        }
        let rg = self.rg(zh) || self.rg(zt) || self.rg(w) || self.rg(b);
        self.push(
            "bilinear",
            Tensor::from_parts(vec![p, c], out),
            Op::Bilinear { zh, zt, w, b },
            rg,
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `targets`.
    pub fn bce_mean(&mut self, p: Var, targets: &[S]) -> Result<Var> {
        let pv = self.value(p).data();
        if pv.len() != targets.len() {
            return Err(shape_err("bce_mean", self.shape(p), &[targets.len()]));
        }
        let total: S = pv.iter().zip(targets).map(|(&pi, &yi)| bce(pi, yi)).sum();
        let loss = total / S::lit(pv.len() as f64);
        let rg = self.rg(p);
        self.push("bce_mean", Tensor::scalar(loss), Op::BceMean(p, targets.to_vec()), rg)
    }

    /// Accumulates `∂loss/∂θ` into every parameter reachable from `loss`.
    /// A record can be differentiated once; call [`Graph::reset`] before reuse.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads, store);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>], store: &mut ParamStore<S>) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                for (acc, &gv) in store.get_mut(*id).grad.data_mut().iter_mut().zip(g) {
                    *acc = *acc + gv;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    self.acc(grads, *a, |ga| matmul_bt_acc(g, bv, ga, m, n, k));
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    self.acc(grads, *b, |gb| matmul_at_acc(av, g, gb, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims2(*a);
                self.acc(grads, *a, |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] = ga[r * n + c] + g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.acc(grads, v, |gv| add_into(gv, g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *x = *x + gi * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((x, &gi), &y) in gb.iter_mut().zip(g).zip(av) {
                        *x = *x + gi * y;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, |ga| {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x = *x + c * gi;
                    }
                });
            }
            Op::AddBias(a, bias) => {
                let (m, n) = self.dims2(*a);
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *bias, |gb| {
                    for r in 0..m {
                        add_into(gb, &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::MulConst(a, mask) => {
                self.acc(grads, *a, |ga| {
                    for ((x, &gi), &mk) in ga.iter_mut().zip(g).zip(mask) {
                        *x = *x + gi * mk;
                    }
                });
            }
            Op::Tanh(a) => self.acc(grads, *a, |ga| {
                for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                    *x = *x + gi * (S::one() - y * y);
                }
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |ga| {
                for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                    *x = *x + gi * y * (S::one() - y);
                }
            }),
            Op::Relu(a) => self.acc(grads, *a, |ga| {
                for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                    if y > S::zero() {
                        *x = *x + gi;
                    }
                }
            }),
            Op::SoftmaxRows(a) => {
                let (m, n) = self.dims2(*a);
                self.acc(grads, *a, |ga| {
                    for r in 0..m {
                        let (yr, gr) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: S = yr.iter().zip(gr).map(|(&y, &gi)| y * gi).sum();
                        for j in 0..n {
                            ga[r * n + j] = ga[r * n + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims2(*x);
                let gam = self.value(*gamma).data();
                self.acc(grads, *gamma, |gg| {
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] = gg[j] + g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for r in 0..m {
                        add_into(gb, &g[r * n..(r + 1) * n]);
                    }
                });
                let nf = S::lit(n as f64);
                self.acc(grads, *x, |gx| {
                    let mut dxhat = vec![S::zero(); n];
                    for r in 0..m {
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..n {
                            dxhat[j] = g[r * n + j] * gam[j];
                            s1 = s1 + dxhat[j];
                            s2 = s2 + dxhat[j] * xhat[r * n + j];
                        }
                        let k = rstd[r] / nf;
                        for j in 0..n {
                            let v = k * (nf * dxhat[j] - s1 - xhat[r * n + j] * s2);
                            gx[r * n + j] = gx[r * n + j] + v;
                        }
                    }
                });
            }
            Op::LogSumExpRows(mv) => {
                let (k, d) = self.dims2(*mv);
                let src = self.value(*mv).data();
                self.acc(grads, *mv, |gm| {
                    for r in 0..k {
                        for j in 0..d {
                            let w = (src[r * d + j] - out[j]).exp();
                            gm[r * d + j] = gm[r * d + j] + g[j] * w;
                        }
                    }
                });
            }
            Op::GatherRows(table, idx) => {
                let d = self.dims2(*table).1;
                self.acc(grads, *table, |gt| {
                    for (r, &row) in idx.iter().enumerate() {
                        add_into(&mut gt[row * d..(row + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims2(*a);
                let len = node.value.cols();
                self.acc(grads, *a, |ga| {
                    for r in 0..m {
                        add_into(&mut ga[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.dims2(p).1;
                    self.acc(grads, p, |gp| {
                        for r in 0..m {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::Reshape(a) => self.acc(grads, *a, |ga| add_into(ga, g)),
            Op::Sum(a) => {
                let g0 = g[0];
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x = *x + g0));
            }
            Op::Cosine { a, b, inv_a, inv_b } => {
                let (n, d) = self.dims2(*a);
                let m = self.dims2(*b).0;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for i in 0..n {
                        if inv_a[i] == S::zero() {
                            continue;
                        }
                        for j in 0..m {
                            if inv_b[j] == S::zero() {
                                continue;
                            }
                            let gij = g[i * m + j];
                            let c = out[i * m + j];
                            let s = inv_a[i] * inv_b[j];
                            let t = c * inv_a[i] * inv_a[i];
                            for k in 0..d {
                                let v = gij * (bv[j * d + k] * s - av[i * d + k] * t);
                                ga[i * d + k] = ga[i * d + k] + v;
                            }
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for j in 0..m {
                        if inv_b[j] == S::zero() {
                            continue;
                        }
                        for i in 0..n {
                            if inv_a[i] == S::zero() {
                                continue;
                            }
                            let gij = g[i * m + j];
                            let c = out[i * m + j];
                            let s = inv_a[i] * inv_b[j];
                            let t = c * inv_b[j] * inv_b[j];
                            for k in 0..d {
                                let v = gij * (av[i * d + k] * s - bv[j * d + k] * t);
                                gb[j * d + k] = gb[j * d + k] + v;
                            }
                        }
                    }
                });
            }
            Op::Bilinear { zh, zt, w, b } => {
                let (p, k) = self.dims2(*zh);
                let c = self.shape(*w)[0];
                let (hv, tv, wv) = (self.value(*zh).data(), self.value(*zt).data(), self.value(*w).data());
                self.acc(grads, *b, |gb| {
                    for q in 0..p {
                        add_into(gb, &g[q * c..(q + 1) * c]);
                    }
                });
                // dzh[q] = Σ_c g[q,c] · W_c · zt[q]
                self.acc(grads, *zh, |gh| {
                    for q in 0..p {
                        let t = &tv[q * k..(q + 1) * k];
                        for r in 0..c {
                            let gqr = g[q * c + r];
                            if gqr == S::zero() {
                                continue;
                            }
                            let wr = &wv[r * k * k..(r + 1) * k * k];
                            for i in 0..k {
                                let s: S = wr[i * k..(i + 1) * k].iter().zip(t).map(|(&x, &y)| x * y).sum();
                                gh[q * k + i] = gh[q * k + i] + gqr * s;
                            }
                        }
                    }
                });
                // dzt[q] = Σ_c g[q,c] · W_cᵀ · zh[q]
                self.acc(grads, *zt, |gt| {
                    for q in 0..p {
                        let h = &hv[q * k..(q + 1) * k];
                        for r in 0..c {
                            let gqr = g[q * c + r];
                            if gqr == S::zero() {
                                continue;
                            }
                            let wr = &wv[r * k * k..(r + 1) * k * k];
                            let dst = &mut gt[q * k..(q + 1) * k];
                            for i in 0..k {
                                let hi = gqr * h[i];
                                for (x, &wij) in dst.iter_mut().zip(&wr[i * k..(i + 1) * k]) {
                                    *x = *x + hi * wij;
                                }
                            }
                        }
                    }
                });
                // dW_c = Σ_q g[q,c] · zh[q] ⊗ zt[q]
                self.acc(grads, *w, |gw| {
                    for q in 0..p {
                        let (h, t) = (&hv[q * k..(q + 1) * k], &tv[q * k..(q + 1) * k]);
                        for r in 0..c {
                            let gqr = g[q * c + r];
                            if gqr == S::zero() {
                                continue;
                            }
                            let dst = &mut gw[r * k * k..(r + 1) * k * k];
                            for i in 0..k {
                                let hi = gqr * h[i];
                                for (x, &tj) in dst[i * k..(i + 1) * k].iter_mut().zip(t) {
                                    *x = *x + hi * tj;
                                }
                            }
                        }
                    }
                });
            }
            Op::BceMean(p, targets) => {
                let pv = self.value(*p).data();
                let eps = S::lit(BCE_EPS);
                let scale = g[0] / S::lit(pv.len() as f64);
                self.acc(grads, *p, |gp| {
                    for ((x, &pi), &yi) in gp.iter_mut().zip(pv).zip(targets) {
                        if pi <= eps || pi >= S::one() - eps {
                            continue;
                        }
                        let d = -yi / pi + (S::one() - yi) / (S::one() - pi);
                        *x = *x + scale * d;
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Binary cross-entropy of one probability against a 0/1 target, with `p`
/// clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce<S: Scalar>(p: S, y: S) -> S {
    let eps = S::lit(BCE_EPS);
    let p = p.max(eps).min(S::one() - eps);
    -(y * p.ln() + (S::one() - y) * (S::one() - p).ln())
}

/// Logistic function, overflow-safe in both tails.
pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    sigmoid(x)
}
