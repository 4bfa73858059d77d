//! Wengert tape: forward ops recorded eagerly, gradients by reverse replay.
//!
//! The op set is exactly what the few-shot model needs: affine layers, ReLU,
//! row softmax, multi-head self-attention building blocks, row pooling and
//! normalization, pairwise distances, and a mean negative-log-likelihood
//! head. Values are held in an arena; every op stores the arena ids of its
//! operands so the backward pass can replay in exact reverse order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numkernel::optim::ParamStore;
use crate::numkernel::tensor::Tensor2;

/// Arena index of a value recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// out = a @ b
    MatMul { a: usize, b: usize, out: usize },
    /// out = x^T
    Transpose { x: usize, out: usize },
    /// out[i,:] = x[i,:] + bias (bias is 1 x c)
    AddRowBroadcast { x: usize, bias: usize, out: usize },
    /// out = max(0, x)
    Relu { x: usize, out: usize },
    /// per-row softmax with max subtraction
    SoftmaxRows { x: usize, out: usize },
    /// out = c * x
    Scale { x: usize, c: f64, out: usize },
    /// out = [parts_0 | parts_1 | ...] along columns
    ConcatCols { parts: Vec<usize>, out: usize },
    /// out = x[:, from..to]
    SliceCols {
        x: usize,
        from: usize,
        to: usize,
        out: usize,
    },
    /// out (1 x c) = column means over rows
    MeanRows { x: usize, out: usize },
    /// out[i,:] = x[i,:] / ||x[i,:]||_2, norms saved for backward
    L2NormalizeRows {
        x: usize,
        out: usize,
        norms: Vec<f64>,
    },
    /// out[i,j] = d(q[i,:], p[j,:]), Euclidean or squared Euclidean
    PairwiseDistance {
        q: usize,
        p: usize,
        out: usize,
        squared: bool,
    },
    /// out (1 x 1) = mean over rows of -log softmax(logits)[target]
    MeanNll {
        logits: usize,
        targets: Vec<usize>,
        out: usize,
    },
    /// out (1 x 1) = sum of all entries
    Sum { x: usize, out: usize },
    /// out (1 x 1) = sum of squared entries
    SumSquares { x: usize, out: usize },
}

/// Arena ids of the eight multi-head attention parameter tensors.
#[derive(Debug, Clone, Copy)]
pub struct MhaParamIds {
    pub wq: ValueId,
    pub bq: ValueId,
    pub wk: ValueId,
    pub bk: ValueId,
    pub wv: ValueId,
    pub bv: ValueId,
    pub wo: ValueId,
    pub bo: ValueId,
}

/// Reverse-mode tape over dense 2-d values.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor2>,
    ops: Vec<Op>,
    grads: Vec<Option<Tensor2>>,
    // parameter name -> arena id, memoized so shared parameters are one node
    param_ids: HashMap<String, usize>,
    param_order: Vec<(String, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push_value(&mut self, t: Tensor2) -> usize {
        debug_assert!(t.all_finite(), "tape value must be finite");
        self.values.push(t);
        self.grads.push(None);
        self.values.len() - 1
    }

    /// Record a constant input (no gradient is exported for it).
    pub fn input(&mut self, t: Tensor2) -> ValueId {
        ValueId(self.push_value(t))
    }

    /// Record a named parameter, copying its current value from the store.
    ///
    /// Repeated registration of the same name returns the same node, so all
    /// uses of a shared parameter accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<ValueId> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(ValueId(id));
        }
        let value = store.value(name)?.clone();
        let id = self.push_value(value);
        self.param_ids.insert(name.to_string(), id);
        self.param_order.push((name.to_string(), id));
        Ok(ValueId(id))
    }

    pub fn value(&self, id: ValueId) -> &Tensor2 {
        &self.values[id.0]
    }

    /// Read a 1x1 value as a scalar.
    pub fn scalar(&self, id: ValueId) -> Result<f64> {
        let t = &self.values[id.0];
        if t.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "expected scalar node, got shape {}x{}",
                t.rows(),
                t.cols()
            )));
        }
        Ok(t.data()[0])
    }

    /// Gradient accumulated at a node by the last `backward`, if any flowed.
    pub fn grad(&self, id: ValueId) -> Option<&Tensor2> {
        self.grads[id.0].as_ref()
    }

    // ── forward ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ar, ac) = self.values[a.0].shape();
        let (br, bc) = self.values[b.0].shape();
        if ac != br {
            return Err(Error::DimMismatch {
                op: "matmul",
                expected: (ac, bc),
                got: (br, bc),
            });
        }
        let mut out = Tensor2::zeros(ar, bc);
        {
            let av = self.values[a.0].data();
            let bv = self.values[b.0].data();
            let ov = out.data_mut();
            for i in 0..ar {
                for k in 0..ac {
                    let aik = av[i * ac + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[k * bc..(k + 1) * bc];
                    let orow = &mut ov[i * bc..(i + 1) * bc];
                    for (o, b) in orow.iter_mut().zip(brow) {
                        *o += aik * b;
                    }
                }
            }
        }
        let out = self.push_value(out);
        self.ops.push(Op::MatMul { a: a.0, b: b.0, out });
        Ok(ValueId(out))
    }

    pub fn transpose(&mut self, x: ValueId) -> ValueId {
        let (r, c) = self.values[x.0].shape();
        let mut out = Tensor2::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.set(j, i, self.values[x.0].get(i, j));
            }
        }
        let out = self.push_value(out);
        self.ops.push(Op::Transpose { x: x.0, out });
        ValueId(out)
    }

    pub fn add_row_broadcast(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (r, c) = self.values[x.0].shape();
        let bs = self.values[bias.0].shape();
        if bs != (1, c) {
            return Err(Error::DimMismatch {
                op: "add_row_broadcast",
                expected: (1, c),
                got: bs,
            });
        }
        let mut out = self.values[x.0].clone();
        for i in 0..r {
            let brow = self.values[bias.0].row(0).to_vec();
            for (o, b) in out.row_mut(i).iter_mut().zip(&brow) {
                *o += b;
            }
        }
        let out = self.push_value(out);
        self.ops.push(Op::AddRowBroadcast {
            x: x.0,
            bias: bias.0,
            out,
        });
        Ok(ValueId(out))
    }

    /// out = x @ w + b, the affine layer.
    pub fn affine(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (_, xc) = self.values[x.0].shape();
        let (wr, wc) = self.values[w.0].shape();
        if xc != wr {
            return Err(Error::DimMismatch {
                op: "affine",
                expected: (xc, wc),
                got: (wr, wc),
            });
        }
        let prod = self.matmul(x, w)?;
        self.add_row_broadcast(prod, b)
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let out = self.push_value(out);
        self.ops.push(Op::Relu { x: x.0, out });
        ValueId(out)
    }

    /// Row-wise softmax with max subtraction for overflow safety.
    pub fn softmax_rows(&mut self, x: ValueId) -> ValueId {
        let (r, c) = self.values[x.0].shape();
        let mut out = Tensor2::zeros(r, c);
        for i in 0..r {
            let row = self.values[x.0].row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let orow = out.row_mut(i);
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let out = self.push_value(out);
        self.ops.push(Op::SoftmaxRows { x: x.0, out });
        ValueId(out)
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let out = self.push_value(out);
        self.ops.push(Op::Scale { x: x.0, c, out });
        ValueId(out)
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one part".into()));
        }
        let rows = self.values[parts[0].0].rows();
        let total: usize = parts.iter().map(|p| self.values[p.0].cols()).sum();
        let mut out = Tensor2::zeros(rows, total);
        let mut at = 0;
        for p in parts {
            let t = &self.values[p.0];
            if t.rows() != rows {
                return Err(Error::DimMismatch {
                    op: "concat_cols",
                    expected: (rows, t.cols()),
                    got: t.shape(),
                });
            }
            for i in 0..rows {
                out.row_mut(i)[at..at + t.cols()].copy_from_slice(t.row(i));
            }
            at += t.cols();
        }
        let out = self.push_value(out);
        self.ops.push(Op::ConcatCols {
            parts: parts.iter().map(|p| p.0).collect(),
            out,
        });
        Ok(ValueId(out))
    }

    pub fn slice_cols(&mut self, x: ValueId, from: usize, to: usize) -> Result<ValueId> {
        let (r, c) = self.values[x.0].shape();
        if from >= to || to > c {
            return Err(Error::Contract(format!(
                "slice_cols range {from}..{to} invalid for {c} columns"
            )));
        }
        let mut out = Tensor2::zeros(r, to - from);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&self.values[x.0].row(i)[from..to]);
        }
        let out = self.push_value(out);
        self.ops.push(Op::SliceCols {
            x: x.0,
            from,
            to,
            out,
        });
        Ok(ValueId(out))
    }

    pub fn mean_rows(&mut self, x: ValueId) -> ValueId {
        let (r, c) = self.values[x.0].shape();
        let mut out = Tensor2::zeros(1, c);
        for i in 0..r {
            for (o, v) in out.row_mut(0).iter_mut().zip(self.values[x.0].row(i)) {
                *o += v;
            }
        }
        for o in out.data_mut() {
            *o /= r as f64;
        }
        let out = self.push_value(out);
        self.ops.push(Op::MeanRows { x: x.0, out });
        ValueId(out)
    }

    /// Normalize each row to unit l2 norm. Errors if any row's norm is
    /// numerically zero (the direction would be arbitrary).
    pub fn l2_normalize_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let (r, _) = self.values[x.0].shape();
        let mut out = self.values[x.0].clone();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let norm = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::DegeneratePrototype { norm });
            }
            for v in out.row_mut(i) {
                *v /= norm;
            }
            norms.push(norm);
        }
        let out = self.push_value(out);
        self.ops.push(Op::L2NormalizeRows { x: x.0, out, norms });
        Ok(ValueId(out))
    }

    /// Pairwise distances between rows of `q` and rows of `p`.
    pub fn pairwise_distance(&mut self, q: ValueId, p: ValueId, squared: bool) -> Result<ValueId> {
        let (nq, dq) = self.values[q.0].shape();
        let (np, dp) = self.values[p.0].shape();
        if dq != dp {
            return Err(Error::DimMismatch {
                op: "pairwise_distance",
                expected: (np, dq),
                got: (np, dp),
            });
        }
        let mut out = Tensor2::zeros(nq, np);
        for i in 0..nq {
            for j in 0..np {
                let mut s = 0.0;
                for (a, b) in self.values[q.0].row(i).iter().zip(self.values[p.0].row(j)) {
                    let d = a - b;
                    s += d * d;
                }
                out.set(i, j, if squared { s } else { s.sqrt() });
            }
        }
        let out = self.push_value(out);
        self.ops.push(Op::PairwiseDistance {
            q: q.0,
            p: p.0,
            out,
            squared,
        });
        Ok(ValueId(out))
    }

    /// Mean negative log-likelihood over rows, computed through a stable
    /// log-sum-exp rather than an explicit softmax.
    pub fn mean_nll(&mut self, logits: ValueId, targets: &[usize]) -> Result<ValueId> {
        let (r, c) = self.values[logits.0].shape();
        if targets.len() != r {
            return Err(Error::Contract(format!(
                "{} targets for {r} logit rows",
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Contract(format!(
                    "target class {t} out of range for {c} classes"
                )));
            }
            let row = self.values[logits.0].row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = self.push_value(Tensor2::from_vec(1, 1, vec![total / r as f64])?);
        self.ops.push(Op::MeanNll {
            logits: logits.0,
            targets: targets.to_vec(),
            out,
        });
        Ok(ValueId(out))
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let s: f64 = self.values[x.0].data().iter().sum();
        let out = self.push_value(Tensor2::from_vec(1, 1, vec![s]).unwrap());
        self.ops.push(Op::Sum { x: x.0, out });
        ValueId(out)
    }

    pub fn sum_squares(&mut self, x: ValueId) -> ValueId {
        let s: f64 = self.values[x.0].data().iter().map(|v| v * v).sum();
        let out = self.push_value(Tensor2::from_vec(1, 1, vec![s]).unwrap());
        self.ops.push(Op::SumSquares { x: x.0, out });
        ValueId(out)
    }

    /// Scaled dot-product multi-head self-attention over the rows of `z`
    /// (queries = keys = values), heads concatenated and output-projected.
    ///
    /// No positional encoding: support sets are unordered, and the whole op
    /// is row-permutation equivariant.
    pub fn multi_head_self_attention(
        &mut self,
        z: ValueId,
        params: &MhaParamIds,
        heads: usize,
    ) -> Result<ValueId> {
        let (n, d) = self.values[z.0].shape();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {d} is not divisible by {heads} heads"
            )));
        }
        if n == 0 {
            return Err(Error::Contract("attention needs at least one row".into()));
        }
        let dh = d / heads;
        let q = self.affine(z, params.wq, params.bq)?;
        let k = self.affine(z, params.wk, params.bk)?;
        let v = self.affine(z, params.wv, params.bv)?;
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (from, to) = (h * dh, (h + 1) * dh);
            let qh = self.slice_cols(q, from, to)?;
            let kh = self.slice_cols(k, from, to)?;
            let vh = self.slice_cols(v, from, to)?;
            let kt = self.transpose(kh);
            let scores = self.matmul(qh, kt)?;
            let scaled = self.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = self.softmax_rows(scaled);
            head_outs.push(self.matmul(attn, vh)?);
        }
        let concat = self.concat_cols(&head_outs)?;
        self.affine(concat, params.wo, params.bo)
    }

    // ── backward ─────────────────────────────────────────────────────────

    fn add_grad(&mut self, id: usize, delta: Tensor2) {
        match &mut self.grads[id] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => self.grads[id] = Some(delta),
        }
    }

    fn out_grad(&self, id: usize) -> Option<Tensor2> {
        self.grads[id].clone()
    }

    /// Reverse sweep from a scalar loss node. Populates per-node gradients;
    /// use [`Tape::export_grads`] to push them into a parameter store.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        let shape = self.values[loss.0].shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}x{}",
                shape.0, shape.1
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor2::from_vec(1, 1, vec![1.0])?);

        for idx in (0..self.ops.len()).rev() {
            let op = self.ops[idx].clone();
            self.backward_op(&op);
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::MatMul { a, b, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let (ar, ac) = self.values[*a].shape();
                let (_, bc) = self.values[*b].shape();
                // dA = G @ B^T
                let mut da = Tensor2::zeros(ar, ac);
                for i in 0..ar {
                    for k in 0..ac {
                        let mut s = 0.0;
                        for j in 0..bc {
                            s += g.get(i, j) * self.values[*b].get(k, j);
                        }
                        da.set(i, k, s);
                    }
                }
                // dB = A^T @ G
                let mut db = Tensor2::zeros(ac, bc);
                for k in 0..ac {
                    for j in 0..bc {
                        let mut s = 0.0;
                        for i in 0..ar {
                            s += self.values[*a].get(i, k) * g.get(i, j);
                        }
                        db.set(k, j, s);
                    }
                }
                self.add_grad(*a, da);
                self.add_grad(*b, db);
            }
            Op::Transpose { x, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let (r, c) = self.values[*x].shape();
                let mut dx = Tensor2::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        dx.set(i, j, g.get(j, i));
                    }
                }
                self.add_grad(*x, dx);
            }
            Op::AddRowBroadcast { x, bias, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let (r, c) = g.shape();
                let mut db = Tensor2::zeros(1, c);
                for i in 0..r {
                    for (acc, gv) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                        *acc += gv;
                    }
                }
                self.add_grad(*x, g);
                self.add_grad(*bias, db);
            }
            Op::Relu { x, out } => {
                let Some(mut g) = self.out_grad(*out) else { return };
                for (gv, xv) in g.data_mut().iter_mut().zip(self.values[*x].data()) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.add_grad(*x, g);
            }
            Op::SoftmaxRows { x, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let y = self.values[*out].clone();
                let (r, c) = y.shape();
                let mut dx = Tensor2::zeros(r, c);
                for i in 0..r {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                self.add_grad(*x, dx);
            }
            Op::Scale { x, c, out } => {
                let Some(mut g) = self.out_grad(*out) else { return };
                for v in g.data_mut() {
                    *v *= c;
                }
                self.add_grad(*x, g);
            }
            Op::ConcatCols { parts, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let rows = g.rows();
                let mut at = 0;
                for p in parts {
                    let c = self.values[*p].cols();
                    let mut dp = Tensor2::zeros(rows, c);
                    for i in 0..rows {
                        dp.row_mut(i).copy_from_slice(&g.row(i)[at..at + c]);
                    }
                    self.add_grad(*p, dp);
                    at += c;
                }
            }
            Op::SliceCols { x, from, to, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let (r, c) = self.values[*x].shape();
                let mut dx = Tensor2::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i)[*from..*to].copy_from_slice(g.row(i));
                }
                self.add_grad(*x, dx);
            }
            Op::MeanRows { x, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let (r, c) = self.values[*x].shape();
                let inv = 1.0 / r as f64;
                let mut dx = Tensor2::zeros(r, c);
                for i in 0..r {
                    for (d, gv) in dx.row_mut(i).iter_mut().zip(g.row(0)) {
                        *d = gv * inv;
                    }
                }
                self.add_grad(*x, dx);
            }
            Op::L2NormalizeRows { x, out, norms } => {
                let Some(g) = self.out_grad(*out) else { return };
                let y = self.values[*out].clone();
                let (r, c) = y.shape();
                let mut dx = Tensor2::zeros(r, c);
                for i in 0..r {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx.set(i, j, (g.get(i, j) - y.get(i, j) * dot) / norms[i]);
                    }
                }
                self.add_grad(*x, dx);
            }
            Op::PairwiseDistance { q, p, out, squared } => {
                let Some(g) = self.out_grad(*out) else { return };
                let (nq, d) = self.values[*q].shape();
                let np = self.values[*p].rows();
                let mut dq = Tensor2::zeros(nq, d);
                let mut dp = Tensor2::zeros(np, d);
                for i in 0..nq {
                    for j in 0..np {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        // d(squared)/dq = 2(q - p); d(euclid)/dq = (q - p)/dist
                        let coeff = if *squared {
                            2.0 * gij
                        } else {
                            gij / self.values[*out].get(i, j).max(1e-30)
                        };
                        for k in 0..d {
                            let diff = self.values[*q].get(i, k) - self.values[*p].get(j, k);
                            *dq.row_mut(i).get_mut(k).unwrap() += coeff * diff;
                            *dp.row_mut(j).get_mut(k).unwrap() -= coeff * diff;
                        }
                    }
                }
                self.add_grad(*q, dq);
                self.add_grad(*p, dp);
            }
            Op::MeanNll { logits, targets, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let gs = g.data()[0];
                let (r, c) = self.values[*logits].shape();
                let inv = gs / r as f64;
                let mut dx = Tensor2::zeros(r, c);
                for (i, &t) in targets.iter().enumerate() {
                    let row = self.values[*logits].row(i);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for j in 0..c {
                        let soft = (row[j] - m).exp() / sum;
                        let one = if j == t { 1.0 } else { 0.0 };
                        dx.set(i, j, inv * (soft - one));
                    }
                }
                self.add_grad(*logits, dx);
            }
            Op::Sum { x, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let gs = g.data()[0];
                let (r, c) = self.values[*x].shape();
                let dx = Tensor2::from_vec(r, c, vec![gs; r * c]).unwrap();
                self.add_grad(*x, dx);
            }
            Op::SumSquares { x, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let gs = g.data()[0];
                let mut dx = self.values[*x].clone();
                for v in dx.data_mut() {
                    *v *= 2.0 * gs;
                }
                self.add_grad(*x, dx);
            }
        }
    }

    /// Push accumulated parameter gradients into the store's grad buffers.
    pub fn export_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (name, id) in &self.param_order {
            if let Some(g) = &self.grads[*id] {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_store(rng: &mut ChaCha8Rng, shapes: &[(&str, usize, usize)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, r, c) in shapes {
            s.insert(name, random_tensor(rng, *r, *c)).unwrap();
        }
        s
    }

    /// Central finite differences against the analytic gradient for a loss
    /// expressed as a pure function of the parameter store.
    fn gradcheck(store: &ParamStore, build: impl Fn(&mut Tape, &ParamStore) -> ValueId) -> f64 {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        tape.backward(loss).unwrap();
        let mut check = store.clone();
        check.zero_grads();
        tape.export_grads(&mut check).unwrap();

        let h = 1e-5;
        let mut worst = 0.0f64;
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        for name in &names {
            let n = store.get(name).unwrap().value.data().len();
            for i in 0..n {
                let mut plus = store.clone();
                plus.get_mut(name).unwrap().value.data_mut()[i] += h;
                let mut minus = store.clone();
                minus.get_mut(name).unwrap().value.data_mut()[i] -= h;
                let f = |s: &ParamStore| {
                    let mut t = Tape::new();
                    let l = build(&mut t, s);
                    t.scalar(l).unwrap()
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = check.get(name).unwrap().grad.data()[i];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max((fd - an).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn affine_identity_weights() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap())
            .unwrap();
        store.insert("b", Tensor2::row_vector(&[0.0, 0.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::row_vector(&[1.0, 2.0]));
        let w = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_hand_computed() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor2::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap())
            .unwrap();
        store.insert("b", Tensor2::row_vector(&[1.0, 1.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::row_vector(&[1.0, 1.0]));
        let w = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2::zeros(2, 2)).unwrap();
        store.insert("b", Tensor2::zeros(1, 2)).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::zeros(1, 3));
        let w = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let err = tape.affine(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3x2") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn relu_cases() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::row_vector(&[-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

        let z = tape.input(Tensor2::row_vector(&[0.0]));
        let yz = tape.relu(z);
        assert_eq!(tape.value(yz).data(), &[0.0]);

        let p = tape.input(Tensor2::row_vector(&[0.5, 3.0]));
        let yp = tape.relu(p);
        assert_eq!(tape.value(yp).data(), &[0.5, 3.0]);
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::row_vector(&[0.0, 0.0]));
        let y = tape.softmax_rows(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x2 = tape.input(Tensor2::row_vector(&[3.0f64.ln(), 0.0]));
        let y2 = tape.softmax_rows(x2);
        let got = tape.value(y2).data();
        assert!((got[0] - 0.75).abs() < 1e-15);
        assert!((got[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_values_do_not_overflow() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::row_vector(&[1000.0, 0.0]));
        let y = tape.softmax_rows(x);
        let got = tape.value(y).data();
        assert!(got[0] >= 1.0 - 1e-12 && got[1] <= 1e-12);
        assert!(got.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, 6, 5);
        let mut shifted = x.clone();
        for i in 0..6 {
            for v in shifted.row_mut(i) {
                *v += 13.25;
            }
        }
        let mut tape = Tape::new();
        let a = tape.input(x);
        let b = tape.input(shifted);
        let ya = tape.softmax_rows(a);
        let yb = tape.softmax_rows(b);
        for i in 0..6 {
            let sum: f64 = tape.value(ya).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for j in 0..5 {
                assert!((tape.value(ya).get(i, j) - tape.value(yb).get(i, j)).abs() < 1e-12);
            }
        }
    }

    fn mha_param_shapes(d: usize) -> Vec<(&'static str, usize, usize)> {
        vec![
            ("wq", d, d),
            ("bq", 1, d),
            ("wk", d, d),
            ("bk", 1, d),
            ("wv", d, d),
            ("bv", 1, d),
            ("wo", d, d),
            ("bo", 1, d),
        ]
    }

    fn mha_ids(tape: &mut Tape, store: &ParamStore) -> MhaParamIds {
        MhaParamIds {
            wq: tape.param(store, "wq").unwrap(),
            bq: tape.param(store, "bq").unwrap(),
            wk: tape.param(store, "wk").unwrap(),
            bk: tape.param(store, "bk").unwrap(),
            wv: tape.param(store, "wv").unwrap(),
            bv: tape.param(store, "bv").unwrap(),
            wo: tape.param(store, "wo").unwrap(),
            bo: tape.param(store, "bo").unwrap(),
        }
    }

    #[test]
    fn mha_single_row_reduces_to_value_path() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let store = random_store(&mut rng, &mha_param_shapes(d));
        let row = random_tensor(&mut rng, 1, d);

        let mut tape = Tape::new();
        let z = tape.input(row.clone());
        let ids = mha_ids(&mut tape, &store);
        let out = tape.multi_head_self_attention(z, &ids, 2).unwrap();

        // With one row, each head's attention weight is exactly 1, so the
        // output is affine(affine(row, wv, bv), wo, bo).
        let mut direct = Tape::new();
        let z2 = direct.input(row);
        let wv = direct.param(&store, "wv").unwrap();
        let bv = direct.param(&store, "bv").unwrap();
        let wo = direct.param(&store, "wo").unwrap();
        let bo = direct.param(&store, "bo").unwrap();
        let v = direct.affine(z2, wv, bv).unwrap();
        let expect = direct.affine(v, wo, bo).unwrap();

        for (a, b) in tape.value(out).data().iter().zip(direct.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_duplicate_rows_give_duplicate_outputs() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let store = random_store(&mut rng, &mha_param_shapes(d));
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = Tensor2::from_rows(&[row.clone(), row.clone(), row]).unwrap();

        let mut tape = Tape::new();
        let zid = tape.input(z);
        let ids = mha_ids(&mut tape, &store);
        let out = tape.multi_head_self_attention(zid, &ids, 2).unwrap();
        let o = tape.value(out);
        for i in 1..3 {
            for j in 0..d {
                assert!((o.get(0, j) - o.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mha_is_row_permutation_equivariant() {
        let d = 8;
        let n = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let store = random_store(&mut rng, &mha_param_shapes(d));
        let z = random_tensor(&mut rng, n, d);
        let perm = vec![3, 0, 4, 1, 2];
        let zp = z.permute_rows(&perm).unwrap();

        let run = |input: Tensor2| {
            let mut tape = Tape::new();
            let zid = tape.input(input);
            let ids = mha_ids(&mut tape, &store);
            let out = tape.multi_head_self_attention(zid, &ids, 2).unwrap();
            tape.value(out).clone()
        };
        let base = run(z);
        let permuted = run(zp);
        let expected = base.permute_rows(&perm).unwrap();
        for (a, b) in permuted.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn mha_rejects_indivisible_width() {
        let d = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let store = random_store(&mut rng, &mha_param_shapes(d));
        let mut tape = Tape::new();
        let z = tape.input(random_tensor(&mut rng, 3, d));
        let ids = mha_ids(&mut tape, &store);
        assert!(matches!(
            tape.multi_head_self_attention(z, &ids, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn backward_of_sum_gives_ones_for_bias() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap())
            .unwrap();
        store.insert("b", Tensor2::row_vector(&[0.0, 0.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::row_vector(&[1.0, 0.0]));
        let w = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let y = tape.affine(x, w, b).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        tape.export_grads(&mut store).unwrap();
        assert_eq!(store.get("b").unwrap().grad.data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_of_zero_scaled_loss_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut store = random_store(&mut rng, &[("w", 3, 3), ("b", 1, 3)]);
        let mut tape = Tape::new();
        let x = tape.input(random_tensor(&mut rng, 2, 3));
        let w = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let y = tape.affine(x, w, b).unwrap();
        let s = tape.sum(y);
        let loss = tape.scale(s, 0.0);
        tape.backward(loss).unwrap();
        tape.export_grads(&mut store).unwrap();
        assert!(store.get("w").unwrap().grad.data().iter().all(|v| *v == 0.0));
        assert!(store.get("b").unwrap().grad.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradcheck_affine_relu_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let store = random_store(&mut rng, &[("w1", 4, 4), ("b1", 1, 4), ("w2", 4, 4), ("b2", 1, 4)]);
        let x = random_tensor(&mut rng, 3, 4);
        let worst = gradcheck(&store, |tape, s| {
            let xi = tape.input(x.clone());
            let w1 = tape.param(s, "w1").unwrap();
            let b1 = tape.param(s, "b1").unwrap();
            let w2 = tape.param(s, "w2").unwrap();
            let b2 = tape.param(s, "b2").unwrap();
            let h = tape.affine(xi, w1, b1).unwrap();
            let h = tape.relu(h);
            let y = tape.affine(h, w2, b2).unwrap();
            tape.sum_squares(y)
        });
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradcheck_softmax_and_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let store = random_store(&mut rng, &[("w", 3, 4), ("b", 1, 4)]);
        let x = random_tensor(&mut rng, 5, 3);
        let targets = vec![0, 2, 1, 3, 0];
        let worst = gradcheck(&store, |tape, s| {
            let xi = tape.input(x.clone());
            let w = tape.param(s, "w").unwrap();
            let b = tape.param(s, "b").unwrap();
            let logits = tape.affine(xi, w, b).unwrap();
            tape.mean_nll(logits, &targets).unwrap()
        });
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradcheck_mha_block() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let store = random_store(&mut rng, &mha_param_shapes(d));
        let z = random_tensor(&mut rng, 4, d);
        let worst = gradcheck(&store, |tape, s| {
            let zi = tape.input(z.clone());
            let ids = mha_ids(tape, s);
            let out = tape.multi_head_self_attention(zi, &ids, 2).unwrap();
            tape.sum_squares(out)
        });
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradcheck_distance_and_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let store = random_store(&mut rng, &[("p", 2, 5), ("q", 3, 5)]);
        for squared in [false, true] {
            let worst = gradcheck(&store, |tape, s| {
                let p = tape.param(s, "p").unwrap();
                let q = tape.param(s, "q").unwrap();
                let pn = tape.l2_normalize_rows(p).unwrap();
                let d = tape.pairwise_distance(q, pn, squared).unwrap();
                let neg = tape.scale(d, -1.0);
                tape.mean_nll(neg, &[0, 1, 0]).unwrap()
            });
            assert!(worst < 1e-4, "squared={squared}: max relative error {worst}");
        }
    }

    #[test]
    fn gradcheck_mean_rows_and_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let store = random_store(&mut rng, &[("x", 4, 3), ("u", 3, 1)]);
        let worst = gradcheck(&store, |tape, s| {
            let x = tape.param(s, "x").unwrap();
            let u = tape.param(s, "u").unwrap();
            let scores = tape.matmul(x, u).unwrap();
            let st = tape.transpose(scores);
            let alpha = tape.softmax_rows(st);
            let pooled = tape.matmul(alpha, x).unwrap();
            let mean = tape.mean_rows(x);
            let both = tape.concat_cols(&[pooled, mean]).unwrap();
            tape.sum_squares(both)
        });
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let store = random_store(&mut rng, &mha_param_shapes(4));
        let z = random_tensor(&mut rng, 3, 4);
        let run = || {
            let mut tape = Tape::new();
            let zi = tape.input(z.clone());
            let ids = mha_ids(&mut tape, &store);
            let out = tape.multi_head_self_attention(zi, &ids, 2).unwrap();
            tape.value(out).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
