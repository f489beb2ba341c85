//! Reverse-mode autodiff over a recorded operation tape.
//!
//! Values are immutable once created; recording is single-writer. The
//! backward pass walks the tape once in reverse, accumulating adjoints in
//! fixed index order, so gradients are deterministic for any worker count
//! of the kernels underneath.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: ValueId, b: ValueId, transpose_b: bool },
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { a: ValueId, c: f64 },
    AddRowBroadcast { a: ValueId, row: ValueId },
    ConcatRows { parts: Vec<ValueId> },
    SliceRows { a: ValueId, start: usize, len: usize },
    LayerNorm { a: ValueId, gain: ValueId, bias: ValueId },
    Gelu { a: ValueId },
    Relu { a: ValueId },
    SoftmaxRows { a: ValueId, t: f64 },
    L2NormalizeRows { a: ValueId },
    MeanRows { a: ValueId },
    SumAll { a: ValueId },
    CrossEntropyFromProbs { probs: ValueId, labels: Vec<usize>, mask: Vec<bool> },
}

struct Node {
    op: Op,
    value: Tensor,
    learnable: bool,
    needs_grad: bool,
}

/// Gradients for the learnable leaves of one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<ValueId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn contains(&self, id: ValueId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Recorded computation graph in topological order.
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

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> [usize; 2] {
        self.nodes[id.0].value.shape()
    }

    /// All node shapes, in recording order. Test hook for shape laws.
    pub fn node_shapes(&self) -> Vec<[usize; 2]> {
        self.nodes.iter().map(|n| n.value.shape()).collect()
    }

    /// Learnable leaf: receives a gradient entry from [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> ValueId {
        self.push_leaf(value, true)
    }

    /// Frozen leaf: participates in the forward pass, never in gradients.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, learnable: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, value, learnable, needs_grad: learnable });
        id
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        let needs_grad = self.op_inputs(&op).iter().any(|i| self.nodes[i.0].needs_grad);
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { op, value, learnable: false, needs_grad });
        id
    }

    fn op_inputs(&self, op: &Op) -> Vec<ValueId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddRowBroadcast { a, row } => vec![*a, *row],
            Op::Scale { a, .. }
            | Op::SliceRows { a, .. }
            | Op::Gelu { a }
            | Op::Relu { a }
            | Op::SoftmaxRows { a, .. }
            | Op::L2NormalizeRows { a }
            | Op::MeanRows { a }
            | Op::SumAll { a } => vec![*a],
            Op::LayerNorm { a, gain, bias } => vec![*a, *gain, *bias],
            Op::ConcatRows { parts } => parts.clone(),
            Op::CrossEntropyFromProbs { probs, .. } => vec![*probs],
        }
    }

    fn dim_err(&self, context: &'static str, a: ValueId, b: ValueId) -> Error {
        Error::Dim {
            context,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    // ── primitives ───────────────────────────────────────────────────

    /// `A·B` with `A: m x k`, `B: k x n`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let ([m, k], [k2, n]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, false);
        Ok(self.push(Op::MatMul { a, b, transpose_b: false }, Tensor::new(m, n, data)?))
    }

    /// `A·Bᵀ` with `A: m x k`, `B: n x k`.
    pub fn matmul_tb(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let ([m, k], [n, k2]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(self.dim_err("matmul_tb", a, b));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, true);
        Ok(self.push(Op::MatMul { a, b, transpose_b: true }, Tensor::new(m, n, data)?))
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("add", a, b));
        }
        let [r, c] = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add { a, b }, Tensor::new(r, c, data)?))
    }

    /// Elementwise product; shapes must match.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("mul", a, b));
        }
        let [r, c] = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul { a, b }, Tensor::new(r, c, data)?))
    }

    /// Multiply every element by the constant `c`.
    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let [r, co] = self.shape(a);
        let data = self.value(a).data().iter().map(|x| x * c).collect::<Vec<_>>();
        self.push(Op::Scale { a, c }, Tensor::new(r, co, data).expect("shape preserved"))
    }

    /// Add a `1 x d` row vector to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: ValueId, row: ValueId) -> Result<ValueId> {
        let ([r, c], [rr, rc]) = (self.shape(a), self.shape(row));
        if rr != 1 || rc != c {
            return Err(self.dim_err("add_row_broadcast", a, row));
        }
        let rv = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(&rv) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRowBroadcast { a, row }, Tensor::new(r, c, data)?))
    }

    /// Stack parts vertically; all must share the column count.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let first = *parts.first().ok_or_else(|| {
            Error::Contract("concat_rows requires at least one part".into())
        })?;
        let cols = self.shape(first)[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let [r, c] = self.shape(p);
            if c != cols {
                return Err(self.dim_err("concat_rows", first, p));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, Tensor::new(rows, cols, data)?))
    }

    /// Rows `start .. start + len` of `a`.
    pub fn slice_rows(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let [r, c] = self.shape(a);
        if start + len > r {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of bounds for {r} rows",
                start + len
            )));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Op::SliceRows { a, start, len }, Tensor::new(len, c, data)?))
    }

    /// Per-row layer normalization with affine `gain`/`bias` (`1 x d`).
    pub fn layer_norm(&mut self, a: ValueId, gain: ValueId, bias: ValueId) -> Result<ValueId> {
        let ([r, c], [gr, gc], [br, bc]) =
            (self.shape(a), self.shape(gain), self.shape(bias));
        if gr != 1 || gc != c {
            return Err(self.dim_err("layer_norm gain", a, gain));
        }
        if br != 1 || bc != c {
            return Err(self.dim_err("layer_norm bias", a, bias));
        }
        let data = kernels::layer_norm_rows(
            self.value(a).data(),
            r,
            c,
            self.value(gain).data(),
            self.value(bias).data(),
            LAYER_NORM_EPS,
        );
        Ok(self.push(Op::LayerNorm { a, gain, bias }, Tensor::new(r, c, data)?))
    }

    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let [r, c] = self.shape(a);
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| kernels::gelu(x)).collect();
        self.push(Op::Gelu { a }, Tensor::new(r, c, data).expect("shape preserved"))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let [r, c] = self.shape(a);
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        self.push(Op::Relu { a }, Tensor::new(r, c, data).expect("shape preserved"))
    }

    /// Row softmax with temperature `t > 0` (max-subtracted per row).
    pub fn softmax_rows(&mut self, a: ValueId, t: f64) -> Result<ValueId> {
        let [r, c] = self.shape(a);
        let data = kernels::softmax_rows(self.value(a).data(), r, c, t)?;
        Ok(self.push(Op::SoftmaxRows { a, t }, Tensor::new(r, c, data)?))
    }

    /// Row-wise L2 normalization; zero rows are an error, not a silent fix.
    pub fn l2_normalize_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let [r, c] = self.shape(a);
        let data = kernels::l2_normalize_rows(self.value(a).data(), r, c)?;
        Ok(self.push(Op::L2NormalizeRows { a }, Tensor::new(r, c, data)?))
    }

    /// Column means: `m x d` to `1 x d`.
    pub fn mean_rows(&mut self, a: ValueId) -> ValueId {
        let [r, c] = self.shape(a);
        let mut data = vec![0.0; c];
        for row in self.value(a).data().chunks(c) {
            for (o, &v) in data.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut data {
            *o /= r as f64;
        }
        self.push(Op::MeanRows { a }, Tensor::new(1, c, data).expect("shape"))
    }

    /// Sum of all elements, as a `1x1` scalar.
    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll { a }, Tensor::scalar(s))
    }

    /// Mean over masked rows of `-ln(probs[i, labels[i]])`; `0` when the
    /// mask keeps nothing (empty-sum convention).
    pub fn cross_entropy_from_probs(
        &mut self,
        probs: ValueId,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<ValueId> {
        let [r, c] = self.shape(probs);
        if labels.len() != r || mask.len() != r {
            return Err(Error::Data(format!(
                "cross_entropy: {r} probability rows but {} labels / {} mask entries",
                labels.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let kept = mask.iter().filter(|&&m| m).count();
        let loss = if kept == 0 {
            0.0
        } else {
            let v = self.value(probs);
            let mut acc = 0.0;
            for i in 0..r {
                if mask[i] {
                    acc -= v.at(i, labels[i]).ln();
                }
            }
            acc / kept as f64
        };
        Ok(self.push(
            Op::CrossEntropyFromProbs { probs, labels: labels.to_vec(), mask: mask.to_vec() },
            Tensor::scalar(loss),
        ))
    }

    /// Cosine-similarity matrix between the rows of `a` (`m x d`) and the
    /// rows of `b` (`n x d`): normalize both, then `Â·B̂ᵀ`.
    pub fn cosine_sim(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a)[1] != self.shape(b)[1] {
            return Err(self.dim_err("cosine_sim", a, b));
        }
        let an = self.l2_normalize_rows(a)?;
        let bn = self.l2_normalize_rows(b)?;
        self.matmul_tb(an, bn)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from the scalar `loss`; returns gradients for every
    /// learnable leaf that the loss reaches. Frozen leaves get no entry.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        self.value(loss).scalar_value().map_err(|_| {
            Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            ))
        })?;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_op(idx, &g, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g); // keep leaf gradients for collection
            }
        }

        let mut map = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.learnable {
                if let Some(g) = grads[idx].take() {
                    let [r, c] = node.value.shape();
                    map.insert(ValueId(idx), Tensor::new(r, c, g)?);
                }
            }
        }
        Ok(Gradients { map })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: ValueId, contrib: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, &c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    fn backward_op(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let ([m, k], [_, n]) = (self.shape(*a), self.shape(ValueId(idx)));
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if *transpose_b {
                    // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                    if self.nodes[a.0].needs_grad {
                        let da = kernels::matmul(g, bv, m, n, k, false);
                        self.accumulate(grads, *a, &da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = matmul_ta(g, av, m, n, k);
                        self.accumulate(grads, *b, &db);
                    }
                } else {
                    // C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC
                    if self.nodes[a.0].needs_grad {
                        let da = kernels::matmul(g, bv, m, n, k, true);
                        self.accumulate(grads, *a, &da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = matmul_ta(av, g, m, k, n);
                        self.accumulate(grads, *b, &db);
                    }
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].needs_grad {
                    let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::AddRowBroadcast { a, row } => {
                self.accumulate(grads, *a, g);
                if self.nodes[row.0].needs_grad {
                    let c = self.shape(*row)[1];
                    let mut dr = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        for (o, &v) in dr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, &dr);
                }
            }
            Op::ConcatRows { parts } => {
                let cols = self.shape(ValueId(idx))[1];
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p)[0];
                    let span = rows * cols;
                    self.accumulate(grads, p, &g[offset..offset + span]);
                    offset += span;
                }
            }
            Op::SliceRows { a, start, len } => {
                let [r, c] = self.shape(*a);
                let mut da = vec![0.0; r * c];
                da[start * c..(start + len) * c].copy_from_slice(g);
                self.accumulate(grads, *a, &da);
            }
            Op::LayerNorm { a, gain, bias } => {
                let [r, c] = self.shape(*a);
                let (av, gv) = (self.value(*a).data(), self.value(*gain).data());
                let mut da = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..r {
                    let xr = &av[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let (_, rstd, xhat) = kernels::layer_norm_row(xr, LAYER_NORM_EPS);
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(dy, gn)| dy * gn).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(d, x)| d * x).sum::<f64>() / c as f64;
                    for j in 0..c {
                        da[i * c + j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                    }
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *gain, &dg);
                self.accumulate(grads, *bias, &db);
            }
            Op::Gelu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(dy, &x)| dy * kernels::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Relu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(dy, &x)| if x > 0.0 { *dy } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::SoftmaxRows { a, t } => {
                let [r, c] = self.shape(*a);
                let yv = self.value(ValueId(idx)).data();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let y = &yv[i * c..(i + 1) * c];
                    let dy = &g[i * c..(i + 1) * c];
                    let dots: f64 = dy.iter().zip(y).map(|(d, v)| d * v).sum();
                    for j in 0..c {
                        da[i * c + j] = y[j] * (dy[j] - dots) / t;
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::L2NormalizeRows { a } => {
                let [r, c] = self.shape(*a);
                let av = self.value(*a).data();
                let yv = self.value(ValueId(idx)).data();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let x = &av[i * c..(i + 1) * c];
                    let y = &yv[i * c..(i + 1) * c];
                    let dy = &g[i * c..(i + 1) * c];
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dots: f64 = dy.iter().zip(y).map(|(d, v)| d * v).sum();
                    for j in 0..c {
                        da[i * c + j] = (dy[j] - y[j] * dots) / norm;
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::MeanRows { a } => {
                let [r, c] = self.shape(*a);
                let inv = 1.0 / r as f64;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j] * inv;
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::SumAll { a } => {
                let [r, c] = self.shape(*a);
                self.accumulate(grads, *a, &vec![g[0]; r * c]);
            }
            Op::CrossEntropyFromProbs { probs, labels, mask } => {
                let kept = mask.iter().filter(|&&m| m).count();
                if kept == 0 {
                    return;
                }
                let [r, c] = self.shape(*probs);
                let pv = self.value(*probs).data();
                let mut dp = vec![0.0; r * c];
                let scale = g[0] / kept as f64;
                for i in 0..r {
                    if mask[i] {
                        let p = pv[i * c + labels[i]];
                        dp[i * c + labels[i]] = -scale / p;
                    }
                }
                self.accumulate(grads, *probs, &dp);
            }
        }
    }
}

/// `AᵀB` with `A: m x k`, `B: m x n`, output `k x n`.
fn matmul_ta(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}
