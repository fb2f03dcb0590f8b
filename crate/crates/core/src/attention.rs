//! Causal multi-head attention and the state-augmented query path.
//!
//! Sequences are `n × d` matrices with one token per row.

use crate::error::{Error, Result};
use crate::numerics::{init_glorot, matmul, matmul_nt, softmax_masked_rows, vecmat, Rng, Tensor};
use crate::params::join;
use crate::state::HeadState;

/// Projections for one standard head plus the state-to-query map.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnHeadParams<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_q_state: T,
    /// Weight of the state readout added to the queries.
    pub lambda: T,
}

impl AttnHeadParams<Tensor> {
    /// Glorot projections with `lambda = 0`, so the head starts as plain
    /// attention.
    pub fn init(d_model: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        let d_k = d_model / n_heads;
        Ok(Self {
            w_q: init_glorot(d_model, d_k, rng),
            w_k: init_glorot(d_model, d_k, rng),
            w_v: init_glorot(d_model, d_k, rng),
            w_q_state: init_glorot(d_k, d_k, rng),
            lambda: Tensor::scalar(0.0),
        })
    }

    pub fn d_k(&self) -> usize {
        self.w_q.cols()
    }
}

impl<T> AttnHeadParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "w_q"), &self.w_q);
        f(join(prefix, "w_k"), &self.w_k);
        f(join(prefix, "w_v"), &self.w_v);
        f(join(prefix, "w_q_state"), &self.w_q_state);
        f(join(prefix, "lambda"), &self.lambda);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "w_q"), &mut self.w_q);
        f(join(prefix, "w_k"), &mut self.w_k);
        f(join(prefix, "w_v"), &mut self.w_v);
        f(join(prefix, "w_q_state"), &mut self.w_q_state);
        f(join(prefix, "lambda"), &mut self.lambda);
    }

    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(String, &T) -> U) -> AttnHeadParams<U> {
        AttnHeadParams {
            w_q: f(join(prefix, "w_q"), &self.w_q),
            w_k: f(join(prefix, "w_k"), &self.w_k),
            w_v: f(join(prefix, "w_v"), &self.w_v),
            w_q_state: f(join(prefix, "w_q_state"), &self.w_q_state),
            lambda: f(join(prefix, "lambda"), &self.lambda),
        }
    }
}

/// Per-head outputs `A_h`, each `n × d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnOutput {
    pub per_head: Vec<Tensor>,
}

/// `Q = xW^Q`, `K = xW^K`, `V = xW^V`.
pub fn project_qkv(x: &Tensor, p: &AttnHeadParams) -> Result<(Tensor, Tensor, Tensor)> {
    Ok((matmul(x, &p.w_q)?, matmul(x, &p.w_k)?, matmul(x, &p.w_v)?))
}

/// Row `t` is `keys[t] · S_t`: the state at `t` queried along the token's
/// own key direction.
pub fn key_readout(keys: &Tensor, states: &[HeadState]) -> Result<Tensor> {
    if states.len() != keys.rows() {
        return Err(Error::Shape {
            op: "key_readout",
            lhs: keys.dims().to_vec(),
            rhs: vec![states.len()],
        });
    }
    let d = keys.cols();
    let mut data = Vec::with_capacity(keys.len());
    for (t, s) in states.iter().enumerate() {
        if s.s.dims() != [d, d] {
            return Err(Error::Shape {
                op: "key_readout",
                lhs: keys.dims().to_vec(),
                rhs: s.s.dims().to_vec(),
            });
        }
        data.extend(vecmat(keys.row(t), &s.s));
    }
    Tensor::matrix(keys.rows(), d, data)
}

/// Queries augmented with the causal state sequence:
/// `Q[t] = x[t]W^Q + λ · (x[t]W^K · S_t) W_state`.
pub fn augment_queries(x: &Tensor, s_seq: &[HeadState], p: &AttnHeadParams) -> Result<Tensor> {
    let q = matmul(x, &p.w_q)?;
    if s_seq.len() != x.rows() {
        return Err(Error::Shape {
            op: "augment_queries",
            lhs: x.dims().to_vec(),
            rhs: vec![s_seq.len()],
        });
    }
    let lambda = p.lambda.item();
    let keys = matmul(x, &p.w_k)?;
    let readout = matmul(&key_readout(&keys, s_seq)?, &p.w_q_state)?;
    q.add(&readout.scale(lambda))
}

/// Scaled dot-product logits `QKᵀ / sqrt(d_k)` (unmasked).
pub fn attention_logits(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    Ok(matmul_nt(q, k)?.scale(scale))
}

/// `softmax(QKᵀ / sqrt(d_k)) V` with a causal mask.
pub fn causal_head(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.dims() != k.dims() || q.rows() != v.rows() {
        return Err(Error::Shape {
            op: "causal_head",
            lhs: q.dims().to_vec(),
            rhs: k.dims().to_vec(),
        });
    }
    let weights = softmax_masked_rows(&attention_logits(q, k)?, true);
    matmul(&weights, v)
}
