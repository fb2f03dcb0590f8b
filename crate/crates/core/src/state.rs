//! Delta-rule state recurrence.
//!
//! Each head owns a `d_k × d_k` matrix updated per token as
//!
//! ```text
//! S_t = S_{t-1} · (diag(w) − κ̂ᵀ (a ⊙ κ̂)) + vᵀ k
//! ```
//!
//! with vectors treated as rows. `w` decays the state, `κ̂` is the unit
//! direction erased with per-channel strength `a`, and `vᵀk` is the rank-1
//! write.

use crate::error::{Error, Result};
use crate::numerics::{dot, init_glorot, matmul, sigmoid, vecmat, Rng, Tensor};
use crate::params::join;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadState {
    pub s: Tensor,
}

impl HeadState {
    pub fn zeros(d_k: usize) -> Self {
        Self {
            s: Tensor::zeros(&[d_k, d_k]),
        }
    }
}

/// Input-dependent projections driving one head's state, plus the
/// state-derived key map and its output weight `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateParams<T = Tensor> {
    pub w_decay: T,
    pub b_decay: T,
    pub w_icl: T,
    pub b_icl: T,
    pub w_kappa: T,
    pub w_repl: T,
    /// Maps the fused attention output (width `d_model`) to the state value.
    pub w_sv: T,
    pub w_hat_k: T,
    pub alpha: T,
}

impl StateParams<Tensor> {
    /// Glorot projections, `alpha = 0`, in-context rate bias 0 and decay
    /// biases spread so that `w` at zero input ranges over `[0.3, 0.95]`.
    pub fn init(d_model: usize, d_k: usize, rng: &mut Rng) -> Self {
        let b_decay = (0..d_k)
            .map(|c| {
                let frac = if d_k > 1 { c as f64 / (d_k - 1) as f64 } else { 0.5 };
                let w = 0.3 + 0.65 * frac;
                (1.0 / w - 1.0).ln()
            })
            .collect();
        Self {
            w_decay: init_glorot(d_model, d_k, rng),
            b_decay: Tensor::vector(b_decay),
            w_icl: init_glorot(d_model, d_k, rng),
            b_icl: Tensor::zeros(&[d_k]),
            w_kappa: init_glorot(d_model, d_k, rng),
            w_repl: init_glorot(d_model, d_k, rng),
            w_sv: init_glorot(d_model, d_k, rng),
            w_hat_k: init_glorot(d_model, d_k, rng),
            alpha: Tensor::scalar(0.0),
        }
    }

    pub fn d_k(&self) -> usize {
        self.w_repl.cols()
    }
}

impl<T> StateParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "w_decay"), &self.w_decay);
        f(join(prefix, "b_decay"), &self.b_decay);
        f(join(prefix, "w_icl"), &self.w_icl);
        f(join(prefix, "b_icl"), &self.b_icl);
        f(join(prefix, "w_kappa"), &self.w_kappa);
        f(join(prefix, "w_repl"), &self.w_repl);
        f(join(prefix, "w_sv"), &self.w_sv);
        f(join(prefix, "w_hat_k"), &self.w_hat_k);
        f(join(prefix, "alpha"), &self.alpha);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "w_decay"), &mut self.w_decay);
        f(join(prefix, "b_decay"), &mut self.b_decay);
        f(join(prefix, "w_icl"), &mut self.w_icl);
        f(join(prefix, "b_icl"), &mut self.b_icl);
        f(join(prefix, "w_kappa"), &mut self.w_kappa);
        f(join(prefix, "w_repl"), &mut self.w_repl);
        f(join(prefix, "w_sv"), &mut self.w_sv);
        f(join(prefix, "w_hat_k"), &mut self.w_hat_k);
        f(join(prefix, "alpha"), &mut self.alpha);
    }

    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(String, &T) -> U) -> StateParams<U> {
        StateParams {
            w_decay: f(join(prefix, "w_decay"), &self.w_decay),
            b_decay: f(join(prefix, "b_decay"), &self.b_decay),
            w_icl: f(join(prefix, "w_icl"), &self.w_icl),
            b_icl: f(join(prefix, "b_icl"), &self.b_icl),
            w_kappa: f(join(prefix, "w_kappa"), &self.w_kappa),
            w_repl: f(join(prefix, "w_repl"), &self.w_repl),
            w_sv: f(join(prefix, "w_sv"), &self.w_sv),
            w_hat_k: f(join(prefix, "w_hat_k"), &self.w_hat_k),
            alpha: f(join(prefix, "alpha"), &self.alpha),
        }
    }
}

/// Per-token quantities of one update step.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStateInputs {
    /// Decay in `(0, 1]`.
    pub w: Vec<f64>,
    /// Unit removal key, or zero when the raw key is exactly zero.
    pub kappa_hat: Vec<f64>,
    /// Replacement key.
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// In-context learning rate in `(0, 1)`.
    pub a: Vec<f64>,
}

/// `exp(−softplus(z))`, evaluated as `sigmoid(−z)`.
pub fn decay_gate(z: f64) -> f64 {
    sigmoid(-z)
}

/// L2-normalizes `x`; the zero vector maps to itself.
pub fn normalize(x: &[f64]) -> Vec<f64> {
    let norm = dot(x, x).sqrt();
    if norm == 0.0 {
        vec![0.0; x.len()]
    } else {
        x.iter().map(|v| v / norm).collect()
    }
}

fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Result<Vec<f64>> {
    if w.rows() != x.len() {
        return Err(Error::Shape {
            op: "token_state_inputs",
            lhs: vec![x.len()],
            rhs: w.dims().to_vec(),
        });
    }
    let mut out = vecmat(x, w);
    if let Some(b) = b {
        for (o, bv) in out.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Ok(out)
}

pub fn token_state_inputs(x_t: &[f64], attn_fused_t: &[f64], p: &StateParams) -> Result<TokenStateInputs> {
    let w = affine(x_t, &p.w_decay, Some(&p.b_decay))?
        .into_iter()
        .map(decay_gate)
        .collect();
    let a = affine(x_t, &p.w_icl, Some(&p.b_icl))?
        .into_iter()
        .map(sigmoid)
        .collect();
    let kappa_hat = normalize(&affine(x_t, &p.w_kappa, None)?);
    let k = affine(x_t, &p.w_repl, None)?;
    let v = affine(attn_fused_t, &p.w_sv, None)?;
    Ok(TokenStateInputs { w, kappa_hat, k, v, a })
}

/// One update `S_t = S_{t-1}·T + vᵀk` with `T = diag(w) − κ̂ᵀ(a ⊙ κ̂)`.
///
/// The product with `T` is applied as a column scaling plus a rank-1
/// correction. `token` only labels the overflow error.
pub fn delta_rule_step(s_prev: &HeadState, inp: &TokenStateInputs, token: usize) -> Result<HeadState> {
    let d = inp.w.len();
    if s_prev.s.dims() != [d, d] {
        return Err(Error::Shape {
            op: "delta_rule_step",
            lhs: s_prev.s.dims().to_vec(),
            rhs: vec![d],
        });
    }
    let s = s_prev.s.data();
    let b: Vec<f64> = inp.a.iter().zip(&inp.kappa_hat).map(|(a, k)| a * k).collect();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        let row = &s[i * d..(i + 1) * d];
        let u = dot(row, &inp.kappa_hat);
        let orow = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            orow[j] = row[j] * inp.w[j] - u * b[j] + inp.v[i] * inp.k[j];
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { token });
    }
    Ok(HeadState {
        s: Tensor::matrix(d, d, out)?,
    })
}

/// States after each token, strictly sequential from `s0` (zero when `None`).
pub fn run_recurrence(
    x: &Tensor,
    attn_fused: &Tensor,
    p: &StateParams,
    s0: Option<&HeadState>,
) -> Result<Vec<HeadState>> {
    if x.rows() != attn_fused.rows() {
        return Err(Error::Shape {
            op: "run_recurrence",
            lhs: x.dims().to_vec(),
            rhs: attn_fused.dims().to_vec(),
        });
    }
    let mut state = s0.cloned().unwrap_or_else(|| HeadState::zeros(p.d_k()));
    let mut out = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let inputs = token_state_inputs(x.row(t), attn_fused.row(t), p)?;
        state = delta_rule_step(&state, &inputs, t)?;
        out.push(state.clone());
    }
    Ok(out)
}

/// `α · (x_t W^K̂) · S_t`: the state queried by a head-specific key.
pub fn state_readout(s_t: &HeadState, x_t: &[f64], w_hat_k: &Tensor, alpha: f64) -> Vec<f64> {
    let key = vecmat(x_t, w_hat_k);
    vecmat(&key, &s_t.s).into_iter().map(|v| alpha * v).collect()
}

/// [`state_readout`] for every position of a sequence, as an `n × d_k`
/// matrix.
pub fn state_reads(states: &[HeadState], x: &Tensor, w_hat_k: &Tensor, alpha: f64) -> Result<Tensor> {
    let keys = matmul(x, w_hat_k)?;
    let d = keys.cols();
    let mut data = Vec::with_capacity(keys.len());
    for (t, s) in states.iter().enumerate() {
        data.extend(vecmat(keys.row(t), &s.s).into_iter().map(|v| alpha * v));
    }
    Tensor::matrix(states.len(), d, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn random_inputs(d: usize, rng: &mut Rng) -> TokenStateInputs {
        let mut r = || rng.uniform_range(-1.0, 1.0);
        let raw: Vec<f64> = (0..d).map(|_| r()).collect();
        TokenStateInputs {
            w: (0..d).map(|_| decay_gate(r())).collect(),
            kappa_hat: normalize(&raw),
            k: (0..d).map(|_| r()).collect(),
            v: (0..d).map(|_| r()).collect(),
            a: (0..d).map(|_| sigmoid(r())).collect(),
        }
    }

    /// Direct matrix evaluation of `S·(diag(w) − κ̂ᵀ(a⊙κ̂)) + vᵀk`.
    fn step_oracle(s: &Tensor, inp: &TokenStateInputs) -> Tensor {
        let d = inp.w.len();
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                let diag = if i == j { inp.w[i] } else { 0.0 };
                t.data_mut()[i * d + j] = diag - inp.kappa_hat[i] * inp.a[j] * inp.kappa_hat[j];
            }
        }
        let mut out = matmul(s, &t).unwrap();
        for i in 0..d {
            for j in 0..d {
                out.data_mut()[i * d + j] += inp.v[i] * inp.k[j];
            }
        }
        out
    }

    #[test]
    fn zero_input_gives_half_decay_and_rate() {
        let mut rng = Rng::new(1);
        let mut p = StateParams::init(4, 2, &mut rng);
        p.b_decay = Tensor::zeros(&[2]);
        let inp = token_state_inputs(&[0.0; 4], &[0.0; 4], &p).unwrap();
        for &w in &inp.w {
            assert!((w - (-(2f64.ln())).exp()).abs() < 1e-15);
        }
        assert_eq!(inp.a, vec![0.5, 0.5]);
        assert_eq!(inp.kappa_hat, vec![0.0, 0.0]);
    }

    #[test]
    fn token_inputs_match_affine_composition() {
        let mut rng = Rng::new(2);
        let p = StateParams::init(4, 3, &mut rng);
        let x = random(1, 4, &mut rng);
        let f = random(1, 4, &mut rng);
        let inp = token_state_inputs(x.row(0), f.row(0), &p).unwrap();
        let lin = |w: &Tensor, src: &Tensor| matmul(src, w).unwrap();
        let zw = lin(&p.w_decay, &x);
        let za = lin(&p.w_icl, &x);
        let zk = lin(&p.w_kappa, &x);
        let norm = zk.norm();
        for j in 0..3 {
            let w = (-(1.0 + (zw.at(0, j) + p.b_decay.data()[j]).exp()).ln()).exp();
            assert!((inp.w[j] - w).abs() < 1e-14);
            let a = 1.0 / (1.0 + (-(za.at(0, j) + p.b_icl.data()[j])).exp());
            assert!((inp.a[j] - a).abs() < 1e-14);
            assert!((inp.kappa_hat[j] - zk.at(0, j) / norm).abs() < 1e-14);
            assert!((inp.k[j] - lin(&p.w_repl, &x).at(0, j)).abs() < 1e-14);
            assert!((inp.v[j] - lin(&p.w_sv, &f).at(0, j)).abs() < 1e-14);
        }
    }

    #[test]
    fn pure_write_when_removal_off() {
        let mut rng = Rng::new(3);
        let s = HeadState {
            s: random(3, 3, &mut rng),
        };
        let mut inp = random_inputs(3, &mut rng);
        inp.w = vec![1.0; 3];
        inp.a = vec![0.0; 3];
        let out = delta_rule_step(&s, &inp, 0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = s.s.at(i, j) + inp.v[i] * inp.k[j];
                assert!((out.s.at(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_state_step_is_outer_product() {
        let mut rng = Rng::new(4);
        let inp = random_inputs(3, &mut rng);
        let out = delta_rule_step(&HeadState::zeros(3), &inp, 0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(out.s.at(i, j), inp.v[i] * inp.k[j]);
            }
        }
    }

    #[test]
    fn two_by_two_scripted_case() {
        let s = HeadState {
            s: Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]),
        };
        let inp = TokenStateInputs {
            w: vec![1.0, 1.0],
            kappa_hat: vec![1.0, 0.0],
            k: vec![3.0, 4.0],
            v: vec![1.0, 2.0],
            a: vec![1.0, 1.0],
        };
        // T = I − [[1,0],[0,0]] = [[0,0],[0,1]]; S·T = [[0,2],[0,4]];
        // vᵀk = [[3,4],[6,8]].
        let out = delta_rule_step(&s, &inp, 0).unwrap();
        assert_eq!(out.s, Tensor::from_rows(&[vec![3.0, 6.0], vec![6.0, 12.0]]));
        assert_eq!(out.s, step_oracle(&s.s, &inp));
    }

    #[test]
    fn step_matches_matrix_oracle() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let s = random(4, 4, &mut rng);
            let inp = random_inputs(4, &mut rng);
            let out = delta_rule_step(&HeadState { s: s.clone() }, &inp, 0).unwrap();
            assert!(out.s.max_abs_diff(&step_oracle(&s, &inp)) < 1e-14);
        }
    }

    #[test]
    fn overflow_reports_token() {
        let mut inp = random_inputs(2, &mut Rng::new(6));
        inp.v = vec![f64::MAX, 1.0];
        inp.k = vec![f64::MAX, 1.0];
        let err = delta_rule_step(&HeadState::zeros(2), &inp, 7).unwrap_err();
        assert!(matches!(err, Error::NumericOverflow { token: 7 }));
    }

    #[test]
    fn recurrence_single_token_and_zero_input() {
        let mut rng = Rng::new(7);
        let mut p = StateParams::init(4, 2, &mut rng);
        let x = random(1, 4, &mut rng);
        let f = random(1, 4, &mut rng);
        let seq = run_recurrence(&x, &f, &p, None).unwrap();
        let inp = token_state_inputs(x.row(0), f.row(0), &p).unwrap();
        assert_eq!(seq, vec![delta_rule_step(&HeadState::zeros(2), &inp, 0).unwrap()]);

        p.b_decay = Tensor::zeros(&[2]);
        let zero = Tensor::zeros(&[5, 4]);
        for s in run_recurrence(&zero, &zero, &p, None).unwrap() {
            assert_eq!(s, HeadState::zeros(2));
        }
    }

    #[test]
    fn recurrence_is_definitional_fold() {
        let mut rng = Rng::new(8);
        let p = StateParams::init(6, 3, &mut rng);
        let x = random(4, 6, &mut rng);
        let f = random(4, 6, &mut rng);
        let s0 = HeadState {
            s: random(3, 3, &mut rng),
        };
        let seq = run_recurrence(&x, &f, &p, Some(&s0)).unwrap();
        let mut s = s0.s.clone();
        for t in 0..4 {
            let inp = token_state_inputs(x.row(t), f.row(t), &p).unwrap();
            s = step_oracle(&s, &inp);
            assert!(seq[t].s.max_abs_diff(&s) < 1e-12);
        }
    }

    #[test]
    fn readout_examples() {
        let mut rng = Rng::new(9);
        let w = random(3, 2, &mut rng);
        let x = [0.5, -1.0, 2.0];
        let s = HeadState {
            s: random(2, 2, &mut rng),
        };
        assert_eq!(state_readout(&s, &x, &w, 0.0), vec![0.0, 0.0]);
        let id = HeadState { s: Tensor::identity(2) };
        assert_eq!(state_readout(&id, &x, &w, 1.0), vecmat(&x, &w));
        let out = state_readout(&s, &x, &w, 0.5);
        let key = matmul(&Tensor::from_rows(&[x.to_vec()]), &w).unwrap();
        let expect = matmul(&key, &s.s).unwrap().scale(0.5);
        for j in 0..2 {
            assert!((out[j] - expect.at(0, j)).abs() < 1e-15);
        }
    }

    mod props {
        use super::*;
        use crate::numerics::Rng;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn erase_then_write(seed in any::<u64>(), d in 2usize..6) {
                let mut rng = Rng::new(seed);
                let s = HeadState { s: random(d, d, &mut rng) };
                let mut inp = random_inputs(d, &mut rng);
                inp.w = vec![1.0; d];
                inp.a = vec![1.0; d];
                let out = delta_rule_step(&s, &inp, 0).unwrap();
                let kk = dot(&inp.k, &inp.kappa_hat);
                for i in 0..d {
                    let response = dot(out.s.row(i), &inp.kappa_hat);
                    prop_assert!((response - inp.v[i] * kk).abs() < 1e-10);
                }
            }

            #[test]
            fn gates_stay_in_range(seed in any::<u64>()) {
                let mut rng = Rng::new(seed);
                let p = StateParams::init(8, 4, &mut rng);
                let x = random(1, 8, &mut rng).scale(3.0);
                let inp = token_state_inputs(x.row(0), x.row(0), &p).unwrap();
                prop_assert!(inp.w.iter().all(|&w| w > 0.0 && w <= 1.0));
                prop_assert!(inp.a.iter().all(|&a| a > 0.0 && a < 1.0));
                let n = dot(&inp.kappa_hat, &inp.kappa_hat).sqrt();
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
            }

            #[test]
            fn pure_decay_never_grows(seed in any::<u64>()) {
                let mut rng = Rng::new(seed);
                let mut s = HeadState { s: random(4, 4, &mut rng) };
                for t in 0..10 {
                    let mut inp = random_inputs(4, &mut rng);
                    inp.v = vec![0.0; 4];
                    inp.a = vec![0.0; 4];
                    let next = delta_rule_step(&s, &inp, t).unwrap();
                    prop_assert!(next.s.norm() <= s.s.norm() + 1e-15);
                    s = next;
                }
            }

            #[test]
            fn recurrence_is_causal(seed in any::<u64>(), j in 0usize..5) {
                let mut rng = Rng::new(seed);
                let p = StateParams::init(4, 2, &mut rng);
                let x = random(5, 4, &mut rng);
                let f = random(5, 4, &mut rng);
                let mut x2 = x.clone();
                for v in x2.row_mut(j) {
                    *v -= 0.5;
                }
                let a = run_recurrence(&x, &f, &p, None).unwrap();
                let b = run_recurrence(&x2, &f, &p, None).unwrap();
                for t in 0..j {
                    prop_assert_eq!(&a[t], &b[t]);
                }
            }

            #[test]
            fn zero_values_keep_zero_state(seed in any::<u64>()) {
                let mut rng = Rng::new(seed);
                let p = StateParams::init(4, 2, &mut rng);
                let x = random(6, 4, &mut rng);
                let zero = Tensor::zeros(&[6, 4]);
                for s in run_recurrence(&x, &zero, &p, None).unwrap() {
                    prop_assert_eq!(s, HeadState::zeros(2));
                }
            }
        }
    }
}
