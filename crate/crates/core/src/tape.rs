//! Reverse-mode differentiation over the model's operations.
//!
//! A [`Graph`] records each operation with its forward value; [`Graph::backward`]
//! walks the records in reverse. The heavy operations (causal attention, the
//! delta-rule fold, state readout, layer norm, cross-entropy) are single
//! records with hand-derived adjoints rather than compositions of scalars.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::numerics::{self, dot, matmul, matmul_nt, matmul_tn, sigmoid, softmax_masked_rows, Tensor, LN_EPS};
use crate::state::decay_gate;

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x · s` for a single-element `s`.
    ScaleBy(Var, Var),
    AddRowBias(Var, Var),
    Sigmoid(Var),
    ReluSquared(Var),
    DecayGate(Var),
    NormalizeRows(Var),
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
    },
    /// Causal attention within consecutive blocks of `seg` rows.
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        seg: usize,
    },
    ConcatCols(Vec<Var>),
    /// Delta-rule fold over per-token `w, a, κ̂, k, v` rows, restarting from
    /// zero every `seg` rows; value is the rank-3 stack of states.
    Recurrence {
        w: Var,
        a: Var,
        kappa: Var,
        k: Var,
        v: Var,
        seg: usize,
    },
    /// Row `t` is `q[t] · S_t`.
    StateRead {
        states: Var,
        q: Var,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<f64>,
        denom: f64,
    },
    SumSquares(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    /// Forward by-products reused by the adjoint (softmax weights, normalized
    /// inputs).
    aux: Option<Tensor>,
}

/// Recording of one forward evaluation.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<(String, Var)>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, aux: Option<Tensor>) -> Var {
        self.nodes.push(Node { value, op, aux });
        Var(self.nodes.len() - 1)
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

    /// A learnable leaf borrowed from the caller. Its gradient is reported by
    /// [`Graph::param_grads`].
    pub fn param(&mut self, name: String, t: &'a Tensor) -> Var {
        let v = self.push(Cow::Borrowed(t), Op::Leaf, None);
        self.params.push((name, v));
        v
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Cow::Owned(v), Op::MatMul(a, b), None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Cow::Owned(v), Op::Add(a, b), None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Cow::Owned(v), Op::Sub(a, b), None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Cow::Owned(v), Op::Mul(a, b), None))
    }

    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let st = self.value(s);
        if st.len() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.value(x).dims().to_vec(),
                rhs: st.dims().to_vec(),
            });
        }
        let v = self.value(x).scale(st.item());
        Ok(self.push(Cow::Owned(v), Op::ScaleBy(x, s), None))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(b));
        if bt.len() != xt.cols() {
            return Err(Error::Shape {
                op: "add_row_bias",
                lhs: xt.dims().to_vec(),
                rhs: bt.dims().to_vec(),
            });
        }
        let mut out = xt.clone();
        for i in 0..out.rows() {
            for (o, bv) in out.row_mut(i).iter_mut().zip(bt.data()) {
                *o += bv;
            }
        }
        Ok(self.push(Cow::Owned(out), Op::AddRowBias(x, b), None))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(Cow::Owned(v), Op::Sigmoid(x), None)
    }

    pub fn relu_squared(&mut self, x: Var) -> Var {
        let v = numerics::activation(numerics::Activation::ReluSquared, self.value(x));
        self.push(Cow::Owned(v), Op::ReluSquared(x), None)
    }

    /// `exp(−softplus(x))` elementwise.
    pub fn decay_gate(&mut self, x: Var) -> Var {
        let v = self.value(x).map(decay_gate);
        self.push(Cow::Owned(v), Op::DecayGate(x), None)
    }

    /// Unit-normalizes each row; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let mut out = xt.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let norm = dot(row, row).sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        self.push(Cow::Owned(out), Op::NormalizeRows(x), None)
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xt = self.value(x);
        let out = numerics::layer_norm_rows(xt, self.value(scale), self.value(shift), LN_EPS)?;
        // aux holds x̂ followed by one 1/σ per row.
        let (n, d) = (xt.rows(), xt.cols());
        let mut aux = Vec::with_capacity(n * (d + 1));
        let mut inv = Vec::with_capacity(n);
        for i in 0..n {
            let row = xt.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            aux.extend(row.iter().map(|v| (v - mean) * is));
            inv.push(is);
        }
        aux.extend(inv);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm { x, scale, shift },
            Some(Tensor::vector(aux)),
        ))
    }

    /// Causal attention applied independently to each block of `seg`
    /// consecutive rows (one block per sequence in a batch).
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seg: usize) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        if qt.dims() != kt.dims() || qt.rows() != vt.rows() || seg == 0 || qt.rows() % seg != 0 {
            return Err(Error::Shape {
                op: "causal_attention",
                lhs: qt.dims().to_vec(),
                rhs: kt.dims().to_vec(),
            });
        }
        let (n, d, e) = (qt.rows(), qt.cols(), vt.cols());
        let scale = 1.0 / (d as f64).sqrt();
        // Row t of `weights` holds its softmax over the block prefix.
        let mut weights = vec![0.0; n * seg];
        let mut out = vec![0.0; n * e];
        for t in 0..n {
            let base = t - t % seg;
            let qrow = qt.row(t);
            let wrow = &mut weights[t * seg..(t + 1) * seg];
            let visible = t - base + 1;
            let mut max = f64::NEG_INFINITY;
            for j in 0..visible {
                let l = dot(qrow, kt.row(base + j)) * scale;
                wrow[j] = l;
                max = max.max(l);
            }
            let mut total = 0.0;
            for w in &mut wrow[..visible] {
                *w = (*w - max).exp();
                total += *w;
            }
            let orow = &mut out[t * e..(t + 1) * e];
            for j in 0..visible {
                wrow[j] /= total;
                let pj = wrow[j];
                for (o, vv) in orow.iter_mut().zip(vt.row(base + j)) {
                    *o += pj * vv;
                }
            }
        }
        let value = Tensor::matrix(n, e, out)?;
        let weights = Tensor::matrix(n, seg, weights)?;
        Ok(self.push(Cow::Owned(value), Op::CausalAttention { q, k, v, seg }, Some(weights)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&refs)?;
        Ok(self.push(Cow::Owned(v), Op::ConcatCols(parts.to_vec()), None))
    }

    /// Runs the delta-rule fold, restarting from a zero state at every
    /// multiple of `seg`. All inputs are `n × d_k`.
    pub fn recurrence(&mut self, w: Var, a: Var, kappa: Var, k: Var, v: Var, seg: usize) -> Result<Var> {
        let wt = self.value(w);
        let (n, d) = (wt.rows(), wt.cols());
        for x in [a, kappa, k, v] {
            if self.value(x).dims() != wt.dims() {
                return Err(Error::Shape {
                    op: "recurrence",
                    lhs: wt.dims().to_vec(),
                    rhs: self.value(x).dims().to_vec(),
                });
            }
        }
        if seg == 0 || n % seg != 0 {
            return Err(Error::Shape {
                op: "recurrence",
                lhs: wt.dims().to_vec(),
                rhs: vec![seg],
            });
        }
        let (at, kap, kt, vt) = (self.value(a), self.value(kappa), self.value(k), self.value(v));
        let dd = d * d;
        let mut out = vec![0.0; n * dd];
        let mut b = vec![0.0; d];
        for t in 0..n {
            let (wr, kr, rk, vr) = (wt.row(t), kap.row(t), kt.row(t), vt.row(t));
            for ((bj, a), kj) in b.iter_mut().zip(at.row(t)).zip(kr) {
                *bj = a * kj;
            }
            let (done, rest) = out.split_at_mut(t * dd);
            let next = &mut rest[..dd];
            if t % seg == 0 {
                for i in 0..d {
                    for j in 0..d {
                        next[i * d + j] = vr[i] * rk[j];
                    }
                }
            } else {
                let prev = &done[(t - 1) * dd..];
                for i in 0..d {
                    let row = &prev[i * d..(i + 1) * d];
                    let u = dot(row, kr);
                    let orow = &mut next[i * d..(i + 1) * d];
                    for j in 0..d {
                        orow[j] = row[j] * wr[j] - u * b[j] + vr[i] * rk[j];
                    }
                }
            }
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericOverflow { token: t % seg });
            }
        }
        let value = Tensor::new(vec![n, d, d], out)?;
        Ok(self.push(Cow::Owned(value), Op::Recurrence { w, a, kappa, k, v, seg }, None))
    }

    pub fn state_read(&mut self, states: Var, q: Var) -> Result<Var> {
        let (st, qt) = (self.value(states), self.value(q));
        let d = qt.cols();
        if st.rank() != 3 || st.dims()[0] != qt.rows() || st.dims()[1] != d {
            return Err(Error::Shape {
                op: "state_read",
                lhs: st.dims().to_vec(),
                rhs: qt.dims().to_vec(),
            });
        }
        let e = st.dims()[2];
        let mut out = vec![0.0; qt.rows() * e];
        for t in 0..qt.rows() {
            let s = &st.data()[t * d * e..(t + 1) * d * e];
            let orow = &mut out[t * e..(t + 1) * e];
            for (i, &qi) in qt.row(t).iter().enumerate() {
                for (o, sv) in orow.iter_mut().zip(&s[i * e..(i + 1) * e]) {
                    *o += qi * sv;
                }
            }
        }
        let value = Tensor::matrix(qt.rows(), e, out)?;
        Ok(self.push(Cow::Owned(value), Op::StateRead { states, q }, None))
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let vocab = tt.rows();
        let mut rows = Vec::with_capacity(ids.len() * tt.cols());
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            rows.extend_from_slice(tt.row(id));
        }
        let value = Tensor::matrix(ids.len(), tt.cols(), rows)?;
        Ok(self.push(
            Cow::Owned(value),
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            None,
        ))
    }

    /// `Σ_t mask_t · CE(logits_t, target_t) / denom`.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[f64], denom: f64) -> Result<Var> {
        let lt = self.value(logits);
        if lt.rows() != targets.len() || targets.len() != mask.len() {
            return Err(Error::Shape {
                op: "masked_cross_entropy",
                lhs: lt.dims().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let probs = softmax_masked_rows(lt, false);
        let mut total = 0.0;
        for (t, (&y, &m)) in targets.iter().zip(mask).enumerate() {
            if m == 0.0 {
                continue;
            }
            total += m * cross_entropy_row(lt.row(t), y);
        }
        let value = Tensor::scalar(total / denom);
        Ok(self.push(
            Cow::Owned(value),
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                denom,
            },
            Some(probs),
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(dot(t.data(), t.data()));
        self.push(Cow::Owned(v), Op::SumSquares(x), None)
    }

    /// Gradients of the scalar `root` with respect to every recorded value.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.value(root).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.value(root).dims().to_vec(),
                rhs: vec![1],
            });
        }
        grads[root.0] = Some(Tensor::filled(self.value(root).dims(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = matmul_nt(g, self.value(*b))?;
                let gb = matmul_tn(self.value(*a), g)?;
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(self.value(*b))?);
                accumulate(grads, *b, g.mul(self.value(*a))?);
            }
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                accumulate(grads, *x, g.scale(sv));
                let gs = dot(g.data(), self.value(*x).data());
                accumulate(grads, *s, Tensor::new(self.value(*s).dims().to_vec(), vec![gs])?);
            }
            Op::AddRowBias(x, b) => {
                accumulate(grads, *x, g.clone());
                let mut gb = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (o, v) in gb.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                accumulate(grads, *b, Tensor::new(self.value(*b).dims().to_vec(), gb)?);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                accumulate(grads, *x, g.zip_with(y, "sigmoid", |gv, s| gv * s * (1.0 - s))?);
            }
            Op::ReluSquared(x) => {
                let xv = self.value(*x);
                accumulate(
                    grads,
                    *x,
                    g.zip_with(xv, "relu_squared", |gv, v| gv * 2.0 * v.max(0.0))?,
                );
            }
            Op::DecayGate(x) => {
                let y = &node.value;
                accumulate(grads, *x, g.zip_with(y, "decay_gate", |gv, w| -gv * w * (1.0 - w))?);
            }
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let y = &node.value;
                let mut out = Tensor::zeros(xv.dims());
                for i in 0..xv.rows() {
                    let norm = dot(xv.row(i), xv.row(i)).sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let yg = dot(y.row(i), g.row(i));
                    let orow = out.row_mut(i);
                    for j in 0..orow.len() {
                        orow[j] = (g.row(i)[j] - y.row(i)[j] * yg) / norm;
                    }
                }
                accumulate(grads, *x, out);
            }
            Op::LayerNorm { x, scale, shift } => {
                let xv = self.value(*x);
                let (n, d) = (xv.rows(), xv.cols());
                let aux = node.aux.as_ref().expect("layer norm cache").data();
                let (xhat, inv) = aux.split_at(n * d);
                let gamma = self.value(*scale).data();
                let mut gx = vec![0.0; n * d];
                let mut gscale = vec![0.0; d];
                let mut gshift = vec![0.0; d];
                for i in 0..n {
                    let gr = g.row(i);
                    let xr = &xhat[i * d..(i + 1) * d];
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for j in 0..d {
                        gscale[j] += gr[j] * xr[j];
                        gshift[j] += gr[j];
                        let dxh = gr[j] * gamma[j];
                        mean_g += dxh;
                        mean_gx += dxh * xr[j];
                    }
                    mean_g /= d as f64;
                    mean_gx /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gamma[j];
                        gx[i * d + j] = inv[i] * (dxh - mean_g - xr[j] * mean_gx);
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.dims().to_vec(), gx)?);
                accumulate(grads, *scale, Tensor::new(self.value(*scale).dims().to_vec(), gscale)?);
                accumulate(grads, *shift, Tensor::new(self.value(*shift).dims().to_vec(), gshift)?);
            }
            Op::CausalAttention { q, k, v, seg } => {
                let p = node.aux.as_ref().expect("attention weights");
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let seg = *seg;
                let (n, d, e) = (qv.rows(), qv.cols(), vv.cols());
                let scale = 1.0 / (d as f64).sqrt();
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; n * d];
                let mut gvv = vec![0.0; n * e];
                let mut gs = vec![0.0; seg];
                for t in 0..n {
                    let base = t - t % seg;
                    let visible = t - base + 1;
                    let pr = &p.row(t)[..visible];
                    let gr = g.row(t);
                    let mut inner = 0.0;
                    for j in 0..visible {
                        let gp = dot(gr, vv.row(base + j));
                        gs[j] = gp;
                        inner += pr[j] * gp;
                        let pj = pr[j];
                        for (o, gv) in gvv[(base + j) * e..(base + j + 1) * e].iter_mut().zip(gr) {
                            *o += pj * gv;
                        }
                    }
                    let qrow = qv.row(t);
                    let gqrow = &mut gq[t * d..(t + 1) * d];
                    for j in 0..visible {
                        let sj = pr[j] * (gs[j] - inner) * scale;
                        if sj == 0.0 {
                            continue;
                        }
                        for (o, kk) in gqrow.iter_mut().zip(kv.row(base + j)) {
                            *o += sj * kk;
                        }
                        for (o, qq) in gk[(base + j) * d..(base + j + 1) * d].iter_mut().zip(qrow) {
                            *o += sj * qq;
                        }
                    }
                }
                accumulate(grads, *q, Tensor::matrix(n, d, gq)?);
                accumulate(grads, *k, Tensor::matrix(n, d, gk)?);
                accumulate(grads, *v, Tensor::matrix(n, e, gvv)?);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    accumulate(grads, p, g.col_block(start, w));
                    start += w;
                }
            }
            Op::Recurrence { w, a, kappa, k, v, seg } => {
                self.recurrence_adjoint(&node.value, g, [*w, *a, *kappa, *k, *v], *seg, grads)?;
            }
            Op::StateRead { states, q } => {
                let (st, qv) = (self.value(*states), self.value(*q));
                let (n, d, e) = (st.dims()[0], st.dims()[1], st.dims()[2]);
                let mut gq = vec![0.0; n * d];
                let mut gst = vec![0.0; n * d * e];
                for t in 0..n {
                    let s = &st.data()[t * d * e..(t + 1) * d * e];
                    let gr = g.row(t);
                    for (i, &qi) in qv.row(t).iter().enumerate() {
                        let srow = &s[i * e..(i + 1) * e];
                        gq[t * d + i] = dot(srow, gr);
                        let grow = &mut gst[t * d * e + i * e..t * d * e + (i + 1) * e];
                        for (o, gv) in grow.iter_mut().zip(gr) {
                            *o = qi * gv;
                        }
                    }
                }
                accumulate(grads, *q, Tensor::new(qv.dims().to_vec(), gq)?);
                accumulate(grads, *states, Tensor::new(st.dims().to_vec(), gst)?);
            }
            Op::Embed { table, ids } => {
                let tv = self.value(*table);
                let mut gt = Tensor::zeros(tv.dims());
                for (t, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(t)) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                mask,
                denom,
            } => {
                let probs = node.aux.as_ref().expect("softmax cache");
                let scale = g.item() / denom;
                let mut gl = Tensor::zeros(probs.dims());
                for (t, (&y, &m)) in targets.iter().zip(mask).enumerate() {
                    if m == 0.0 {
                        continue;
                    }
                    let row = gl.row_mut(t);
                    for (o, p) in row.iter_mut().zip(probs.row(t)) {
                        *o = m * scale * p;
                    }
                    row[y] -= m * scale;
                }
                accumulate(grads, *logits, gl);
            }
            Op::SumSquares(x) => {
                let s = g.item();
                accumulate(grads, *x, self.value(*x).scale(2.0 * s));
            }
        }
        Ok(())
    }

    /// Reverse sweep through the delta-rule fold.
    ///
    /// With `b = a ⊙ κ̂`, `u = S κ̂ᵀ` and `S' = S·diag(w) − u b + vᵀk`, the
    /// adjoint `G` of `S'` yields `gS = G·diag(w) − (G bᵀ) κ̂`, `gw_j = Σ_i G_ij S_ij`,
    /// `gb = −uᵀG`, `gκ̂ = −(G bᵀ)ᵀ S + gb ⊙ a`, `ga = gb ⊙ κ̂`, `gv = G kᵀ`,
    /// `gk = vG`.
    fn recurrence_adjoint(
        &self,
        states: &Tensor,
        g: &Tensor,
        inputs: [Var; 5],
        seg: usize,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let [w, a, kappa, k, v] = inputs;
        let (n, d) = (states.dims()[0], states.dims()[1]);
        let dd = d * d;
        let (wv, av, kv, kkv, vv) = (
            self.value(w),
            self.value(a),
            self.value(kappa),
            self.value(k),
            self.value(v),
        );
        let mut gw = vec![0.0; n * d];
        let mut ga = vec![0.0; n * d];
        let mut gkappa = vec![0.0; n * d];
        let mut gk = vec![0.0; n * d];
        let mut gv = vec![0.0; n * d];
        let zero = vec![0.0; dd];
        let mut carry = vec![0.0; dd];
        for t in (0..n).rev() {
            let mut gs: Vec<f64> = g.data()[t * dd..(t + 1) * dd].to_vec();
            for (x, c) in gs.iter_mut().zip(&carry) {
                *x += c;
            }
            let prev = if t % seg == 0 {
                &zero[..]
            } else {
                &states.data()[(t - 1) * dd..t * dd]
            };
            let (wt, at, kt, kkt, vt) = (wv.row(t), av.row(t), kv.row(t), kkv.row(t), vv.row(t));
            let b: Vec<f64> = at.iter().zip(kt).map(|(x, y)| x * y).collect();
            let mut gb = vec![0.0; d];
            let mut next_carry = vec![0.0; dd];
            for i in 0..d {
                let grow = &gs[i * d..(i + 1) * d];
                let prow = &prev[i * d..(i + 1) * d];
                let u = dot(prow, kt);
                let gbi = dot(grow, &b);
                gv[t * d + i] = dot(grow, kkt);
                let crow = &mut next_carry[i * d..(i + 1) * d];
                for j in 0..d {
                    gw[t * d + j] += grow[j] * prow[j];
                    gb[j] -= u * grow[j];
                    gk[t * d + j] += vt[i] * grow[j];
                    gkappa[t * d + j] -= gbi * prow[j];
                    crow[j] = grow[j] * wt[j] - gbi * kt[j];
                }
            }
            for j in 0..d {
                gkappa[t * d + j] += gb[j] * at[j];
                ga[t * d + j] = gb[j] * kt[j];
            }
            carry = if t % seg == 0 { vec![0.0; dd] } else { next_carry };
        }
        let dims = wv.dims().to_vec();
        accumulate(grads, w, Tensor::new(dims.clone(), gw)?);
        accumulate(grads, a, Tensor::new(dims.clone(), ga)?);
        accumulate(grads, kappa, Tensor::new(dims.clone(), gkappa)?);
        accumulate(grads, k, Tensor::new(dims.clone(), gk)?);
        accumulate(grads, v, Tensor::new(dims, gv)?);
        Ok(())
    }

    /// Registered parameters in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// `logsumexp(row) − row[y]`.
pub fn cross_entropy_row(row: &[f64], y: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[y]
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v` with unreached values reported as zeros of `like`'s shape.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.dims()))
    }
}

impl Graph<'_> {
    /// Named gradients of every registered parameter, zeros where unused.
    pub fn param_grads(&self, grads: &Gradients) -> Result<crate::params::NamedTensors> {
        let mut entries = Vec::with_capacity(self.params.len());
        for (name, v) in &self.params {
            let g = grads.get_or_zeros(*v, self.value(*v));
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            entries.push((name.clone(), g));
        }
        Ok(crate::params::NamedTensors::new(entries))
    }
}
