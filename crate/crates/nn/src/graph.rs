//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough context to push gradients back to its inputs. Parameters enter the
//! tape through [`Graph::param`] and receive their gradients in
//! [`Graph::backward`]; everything else is a constant.

use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, matmul, matmul_nt, matmul_tn, Tensor};
use crate::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AddGroup { x: Var, c: Var, group: usize },
    AddColPeriodic { x: Var, b: Var, period: usize },
    TokenMix { w: Var, x: Var, groups: usize },
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, rstd: Vec<f64> },
    Attention(Box<AttentionCtx>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    Mse(Var, Tensor),
    Sum(Var),
}

struct AttentionCtx {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    seq: usize,
    mask: Rc<[bool]>,
    probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients for every parameter of a [`ParamStore`], aligned by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Places a parameter on the tape; repeated calls for the same id return
    /// the same variable so gradients accumulate in one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(NnError::Shape(format!(
                "matmul {}x{} by {}x{}",
                av.rows(),
                av.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let out = matmul(av, bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NnError::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// `x[m,n] + bias[1,n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(NnError::Shape(format!(
                "add_row: bias {:?} for input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        let b = bv.row_slice(0).to_vec();
        for r in 0..out.rows() {
            for (o, bb) in out.row_slice_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// Adds row `r / group` of `c` to row `r` of `x`: one conditioning vector
    /// per consecutive block of `group` rows.
    pub fn add_group(&mut self, x: Var, c: Var, group: usize) -> Result<Var, NnError> {
        let (xv, cv) = (self.value(x), self.value(c));
        if group == 0 || cv.cols() != xv.cols() || cv.rows() * group != xv.rows() {
            return Err(NnError::Shape(format!(
                "add_group: cond {:?} x{group} for input {:?}",
                cv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let cr = cv.row_slice(r / group);
            for (o, cc) in out.row_slice_mut(r).iter_mut().zip(cr) {
                *o += cc;
            }
        }
        Ok(self.push(out, Op::AddGroup { x, c, group }))
    }

    /// Adds `b[i, 0]` to every column of row `g * period + i`.
    pub fn add_col_periodic(&mut self, x: Var, b: Var, period: usize) -> Result<Var, NnError> {
        let (xv, bv) = (self.value(x), self.value(b));
        if period == 0 || bv.shape() != (period, 1) || xv.rows() % period != 0 {
            return Err(NnError::Shape(format!(
                "add_col_periodic: bias {:?} period {period} for input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let bb = bv.get(r % period, 0);
            for o in out.row_slice_mut(r) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddColPeriodic { x, b, period }))
    }

    /// Block-diagonal left multiply: `x` stacks `groups` matrices of shape
    /// `[t, c]`; each is replaced by `w[m, t] * x_g`, giving `[groups * m, c]`.
    /// This is the token-mixing contraction of an MLP-Mixer.
    pub fn token_mix(&mut self, w: Var, x: Var, groups: usize) -> Result<Var, NnError> {
        let (wv, xv) = (self.value(w), self.value(x));
        let (m, t) = wv.shape();
        if groups == 0 || xv.rows() != groups * t {
            return Err(NnError::Shape(format!(
                "token_mix: weight {:?} over {groups} groups of input {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        let c = xv.cols();
        let mut out = Tensor::zeros(groups * m, c);
        for g in 0..groups {
            for i in 0..m {
                for p in 0..t {
                    let wip = wv.get(i, p);
                    let src = xv.row_slice(g * t + p);
                    let dst = out.row_slice_mut(g * m + i);
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wip * s;
                    }
                }
            }
        }
        Ok(self.push(out, Op::TokenMix { w, x, groups }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    /// Row-wise layer normalization with learned `gain[1,n]` and `bias[1,n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gain).shape() != (1, n) || self.value(bias).shape() != (1, n) {
            return Err(NnError::Shape("layer_norm: gain/bias width".into()));
        }
        let mut xhat = Tensor::zeros(xv.rows(), n);
        let mut rstd = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for (h, v) in xhat.row_slice_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let g = self.value(gain).row_slice(0).to_vec();
        let b = self.value(bias).row_slice(0).to_vec();
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for ((o, gg), bb) in out.row_slice_mut(r).iter_mut().zip(&g).zip(&b) {
                *o = *o * gg + bb;
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Multi-head scaled dot-product attention over `groups` independent
    /// sequences of length `seq`, stacked row-wise in `q`, `k`, `v`.
    ///
    /// `mask[i * seq + j]` allows query `i` to attend to key `j`. Disallowed
    /// logits are excluded from the softmax entirely (the `-inf` convention);
    /// every query row must allow at least one key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        mask: Rc<[bool]>,
    ) -> Result<Var, NnError> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let (rows, width) = self.value(q).shape();
        if heads == 0 || width % heads != 0 || seq == 0 || rows % seq != 0 {
            return Err(NnError::Shape(format!(
                "attention: {rows}x{width} with {heads} heads, seq {seq}"
            )));
        }
        if mask.len() != seq * seq {
            return Err(NnError::Shape(format!("attention: mask {} for seq {seq}", mask.len())));
        }
        if (0..seq).any(|i| !mask[i * seq..(i + 1) * seq].iter().any(|&m| m)) {
            return Err(NnError::Shape("attention: mask row with no allowed key".into()));
        }
        let groups = rows / seq;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(rows, width);
        let mut probs = vec![0.0; groups * heads * seq * seq];
        let mut logits = vec![0.0; seq];
        for g in 0..groups {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seq {
                    let qi = &qv.row_slice(g * seq + i)[cols.clone()];
                    let allowed = &mask[i * seq..(i + 1) * seq];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if allowed[j] {
                            let s = scale * dot(qi, &kv.row_slice(g * seq + j)[cols.clone()]);
                            logits[j] = s;
                            if s > max {
                                max = s;
                            }
                        }
                    }
                    let mut denom = 0.0;
                    for j in 0..seq {
                        if allowed[j] {
                            logits[j] = (logits[j] - max).exp();
                            denom += logits[j];
                        }
                    }
                    let prow = &mut probs[((g * heads + h) * seq + i) * seq..][..seq];
                    let orow = &mut out.row_slice_mut(g * seq + i)[cols.clone()];
                    for j in 0..seq {
                        if allowed[j] {
                            let p = logits[j] / denom;
                            prow[j] = p;
                            for (o, vj) in orow.iter_mut().zip(&vv.row_slice(g * seq + j)[cols.clone()]) {
                                *o += p * vj;
                            }
                        }
                    }
                }
            }
        }
        let ctx = AttentionCtx { q, k, v, heads, seq, mask, probs };
        Ok(self.push(out, Op::Attention(Box::new(ctx))))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let cols = parts.first().map(|&p| self.value(p).cols()).ok_or_else(|| {
            NnError::Shape("concat_rows: no inputs".into())
        })?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(NnError::Shape("concat_rows: width mismatch".into()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<[usize]>) -> Result<Var, NnError> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(NnError::Shape(format!("gather_rows: index {bad} of {}", xv.rows())));
        }
        let mut data = Vec::with_capacity(idx.len() * xv.cols());
        for &i in idx.iter() {
            data.extend_from_slice(xv.row_slice(i));
        }
        let out = Tensor::from_vec(idx.len(), xv.cols(), data)?;
        Ok(self.push(out, Op::GatherRows(x, idx)))
    }

    /// Mean squared error against a constant target, as a `1x1` scalar.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Result<Var, NnError> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || pv.is_empty() {
            return Err(NnError::Shape(format!(
                "mse: prediction {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let n = pv.len() as f64;
        let loss = pv.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        Ok(self.push(Tensor::filled(1, 1, loss), Op::Mse(pred, target)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::filled(1, 1, s), Op::Sum(x))
    }

    /// Back-propagates from the scalar `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients, NnError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(NnError::Shape(format!("backward: loss shape {:?}", lv.shape())));
        }
        if !lv.get(0, 0).is_finite() {
            return Err(NnError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        let mut out = Gradients::zeros_like(store);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.grads[id.index()].add_assign(&gy),
                Op::MatMul(a, b) => {
                    let ga = matmul_nt(&gy, self.value(*b));
                    let gb = matmul_tn(self.value(*a), &gy);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *b, gy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, gy.map(|v| -v));
                    accumulate(&mut grads, *a, gy);
                }
                Op::Mul(a, b) => {
                    let ga = gy.zip_map(self.value(*b), |g, y| g * y);
                    let gb = gy.zip_map(self.value(*a), |g, x| g * x);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, gy.map(|v| v * s)),
                Op::AddRow(x, bias) => {
                    let mut gb = Tensor::zeros(1, gy.cols());
                    for r in 0..gy.rows() {
                        for (o, g) in gb.row_slice_mut(0).iter_mut().zip(gy.row_slice(r)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *x, gy);
                }
                Op::AddGroup { x, c, group } => {
                    let cv = self.value(*c);
                    let mut gc = Tensor::zeros(cv.rows(), cv.cols());
                    for r in 0..gy.rows() {
                        for (o, g) in gc.row_slice_mut(r / group).iter_mut().zip(gy.row_slice(r)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, *c, gc);
                    accumulate(&mut grads, *x, gy);
                }
                Op::AddColPeriodic { x, b, period } => {
                    let mut gb = Tensor::zeros(*period, 1);
                    for r in 0..gy.rows() {
                        let s: f64 = gy.row_slice(r).iter().sum();
                        gb.data_mut()[r % period] += s;
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, gy);
                }
                Op::TokenMix { w, x, groups } => {
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    let (m, t) = wv.shape();
                    let mut gw = Tensor::zeros(m, t);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for g in 0..*groups {
                        for i in 0..m {
                            let gout = gy.row_slice(g * m + i);
                            for p in 0..t {
                                gw.data_mut()[i * t + p] += dot(gout, xv.row_slice(g * t + p));
                                let wip = wv.get(i, p);
                                for (d, s) in gx.row_slice_mut(g * t + p).iter_mut().zip(gout) {
                                    *d += wip * s;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let gx = gy.zip_map(self.value(*x), |g, v| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let n = xhat.cols();
                    let g = self.value(*gain).row_slice(0).to_vec();
                    let mut ggain = Tensor::zeros(1, n);
                    let mut gbias = Tensor::zeros(1, n);
                    let mut gx = Tensor::zeros(xhat.rows(), n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..xhat.rows() {
                        let gyr = gy.row_slice(r);
                        let xh = xhat.row_slice(r);
                        for c in 0..n {
                            ggain.data_mut()[c] += gyr[c] * xh[c];
                            gbias.data_mut()[c] += gyr[c];
                            dxhat[c] = gyr[c] * g[c];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(d, h)| d * h).sum();
                        let k = rstd[r] / n as f64;
                        for (c, o) in gx.row_slice_mut(r).iter_mut().enumerate() {
                            *o = k * (n as f64 * dxhat[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *bias, gbias);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Attention(ctx) => {
                    let (gq, gk, gv) = self.attention_backward(ctx, &gy);
                    accumulate(&mut grads, ctx.q, gq);
                    accumulate(&mut grads, ctx.k, gk);
                    accumulate(&mut grads, ctx.v, gv);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let slice = gy.data()[offset * c..(offset + r) * c].to_vec();
                        accumulate(&mut grads, p, Tensor::from_vec(r, c, slice)?);
                        offset += r;
                    }
                }
                Op::GatherRows(x, idx) => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for (o, &i) in idx.iter().enumerate() {
                        for (d, s) in gx.row_slice_mut(i).iter_mut().zip(gy.row_slice(o)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mse(pred, target) => {
                    let pv = self.value(*pred);
                    let s = 2.0 * gy.get(0, 0) / pv.len() as f64;
                    let gp = pv.zip_map(target, |p, t| s * (p - t));
                    accumulate(&mut grads, *pred, gp);
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut grads, *x, Tensor::filled(r, c, gy.get(0, 0)));
                }
            }
        }
        Ok(out)
    }

    fn attention_backward(&self, ctx: &AttentionCtx, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
        let (qv, kv, vv) = (self.value(ctx.q), self.value(ctx.k), self.value(ctx.v));
        let (rows, width) = qv.shape();
        let (heads, seq) = (ctx.heads, ctx.seq);
        let groups = rows / seq;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Tensor::zeros(rows, width);
        let mut gk = Tensor::zeros(rows, width);
        let mut gv = Tensor::zeros(rows, width);
        let mut dp = vec![0.0; seq];
        for g in 0..groups {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seq {
                    let allowed = &ctx.mask[i * seq..(i + 1) * seq];
                    let prow = &ctx.probs[((g * heads + h) * seq + i) * seq..][..seq];
                    let goi = &gy.row_slice(g * seq + i)[cols.clone()];
                    let mut weighted = 0.0;
                    for j in 0..seq {
                        if allowed[j] {
                            dp[j] = dot(goi, &vv.row_slice(g * seq + j)[cols.clone()]);
                            weighted += prow[j] * dp[j];
                            let gvj = &mut gv.row_slice_mut(g * seq + j)[cols.clone()];
                            for (d, o) in gvj.iter_mut().zip(goi) {
                                *d += prow[j] * o;
                            }
                        }
                    }
                    for j in 0..seq {
                        if allowed[j] {
                            let ds = prow[j] * (dp[j] - weighted) * scale;
                            let kj = &kv.row_slice(g * seq + j)[cols.clone()];
                            let gqi = &mut gq.row_slice_mut(g * seq + i)[cols.clone()];
                            for (d, kk) in gqi.iter_mut().zip(kj) {
                                *d += ds * kk;
                            }
                            let qi = &qv.row_slice(g * seq + i)[cols.clone()];
                            let gkj = &mut gk.row_slice_mut(g * seq + j)[cols.clone()];
                            for (d, qq) in gkj.iter_mut().zip(qi) {
                                *d += ds * qq;
                            }
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row(&[1.0, -2.0, 3.0]));
        let mut g = Graph::new();
        let _ = g.param(&store, p);
        let c = g.constant(Tensor::filled(1, 1, 4.2));
        let grads = g.backward(c, &store).unwrap();
        assert!(grads.get(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row(&[0.5, -1.5, 2.0, 7.0]));
        let mut g = Graph::new();
        let pv = g.param(&store, p);
        let sq = g.mul(pv, pv).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss, &store).unwrap();
        assert_eq!(grads.get(p).data(), store.get(p).data());
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let c = g.constant(Tensor::filled(1, 1, f64::NAN));
        assert!(matches!(g.backward(c, &store), Err(NnError::NonFinite(_))));
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        assert!(g.matmul(a, b).is_err());
        let c = g.constant(Tensor::zeros(3, 2));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn attention_rejects_empty_mask_row() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(2, 2));
        let mask: Rc<[bool]> = vec![true, false, false, false].into();
        assert!(g.attention(q, q, q, 1, 2, mask).is_err());
    }
}
