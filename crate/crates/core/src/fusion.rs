//! Middle heads and the combine step that merges standard heads, state
//! reads and middle heads into the hybrid attention output.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{init_glorot, matmul, sigmoid, vecmat, Rng, Tensor};
use crate::params::join;

/// How head groups are merged before the output projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CombineMode {
    /// Concatenate every group; the projection is `(d_model·groups) × d_model`.
    ConcatProject,
    /// Concatenate heads within a group and sum the groups.
    Sum,
}

/// Which middle-head variant bridges attention and state, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MiddleMode {
    Off,
    Concat,
    Additive,
    Gated,
}

impl MiddleMode {
    pub const ALL: [MiddleMode; 4] = [
        MiddleMode::Off,
        MiddleMode::Concat,
        MiddleMode::Additive,
        MiddleMode::Gated,
    ];
}

impl CombineMode {
    pub const ALL: [CombineMode; 2] = [CombineMode::ConcatProject, CombineMode::Sum];
}

impl fmt::Display for CombineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombineMode::ConcatProject => "concat_project",
            CombineMode::Sum => "sum",
        })
    }
}

impl FromStr for CombineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat_project" => Ok(CombineMode::ConcatProject),
            "sum" => Ok(CombineMode::Sum),
            other => Err(Error::Config(format!("unknown combine_mode `{other}`"))),
        }
    }
}

impl fmt::Display for MiddleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MiddleMode::Off => "off",
            MiddleMode::Concat => "concat",
            MiddleMode::Additive => "additive",
            MiddleMode::Gated => "gated",
        })
    }
}

impl FromStr for MiddleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(MiddleMode::Off),
            "concat" => Ok(MiddleMode::Concat),
            "additive" => Ok(MiddleMode::Additive),
            "gated" => Ok(MiddleMode::Gated),
            other => Err(Error::Config(format!("unknown middle_mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FusionConfig {
    pub combine_mode: CombineMode,
    pub middle_mode: MiddleMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            combine_mode: CombineMode::ConcatProject,
            middle_mode: MiddleMode::Gated,
        }
    }
}

impl FusionConfig {
    /// Number of head groups fed to the combine step: standard heads and
    /// state reads always, middle heads only in concat middle mode.
    pub fn groups(&self) -> usize {
        if self.middle_mode == MiddleMode::Concat {
            3
        } else {
            2
        }
    }

    /// Input width of the output projection.
    pub fn d_cat(&self, d_model: usize) -> usize {
        match self.combine_mode {
            CombineMode::ConcatProject => d_model * self.groups(),
            CombineMode::Sum => d_model,
        }
    }
}

/// Parameters of one middle head. `w_state_add` exists only in additive
/// mode and `w_gate` only in gated mode.
#[derive(Clone, Debug, PartialEq)]
pub struct MiddleHeadParams<T = Tensor> {
    pub w_mid: T,
    pub w_state_add: Option<T>,
    pub w_gate: Option<T>,
    pub beta: T,
    pub gamma_mid: T,
}

impl MiddleHeadParams<Tensor> {
    pub fn init(d_k: usize, mode: MiddleMode, rng: &mut Rng) -> Option<Self> {
        if mode == MiddleMode::Off {
            return None;
        }
        let w_mid = init_glorot(d_k, d_k, rng);
        let w_state_add = (mode == MiddleMode::Additive).then(|| init_glorot(d_k, d_k, rng));
        let w_gate = (mode == MiddleMode::Gated).then(|| init_glorot(2 * d_k, d_k, rng));
        Some(Self {
            w_mid,
            w_state_add,
            w_gate,
            beta: Tensor::scalar(0.0),
            gamma_mid: Tensor::scalar(0.0),
        })
    }
}

impl<T> MiddleHeadParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "w_mid"), &self.w_mid);
        if let Some(w) = &self.w_state_add {
            f(join(prefix, "w_state_add"), w);
        }
        if let Some(w) = &self.w_gate {
            f(join(prefix, "w_gate"), w);
        }
        f(join(prefix, "beta"), &self.beta);
        f(join(prefix, "gamma_mid"), &self.gamma_mid);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "w_mid"), &mut self.w_mid);
        if let Some(w) = &mut self.w_state_add {
            f(join(prefix, "w_state_add"), w);
        }
        if let Some(w) = &mut self.w_gate {
            f(join(prefix, "w_gate"), w);
        }
        f(join(prefix, "beta"), &mut self.beta);
        f(join(prefix, "gamma_mid"), &mut self.gamma_mid);
    }

    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(String, &T) -> U) -> MiddleHeadParams<U> {
        MiddleHeadParams {
            w_mid: f(join(prefix, "w_mid"), &self.w_mid),
            w_state_add: self.w_state_add.as_ref().map(|w| f(join(prefix, "w_state_add"), w)),
            w_gate: self.w_gate.as_ref().map(|w| f(join(prefix, "w_gate"), w)),
            beta: f(join(prefix, "beta"), &self.beta),
            gamma_mid: f(join(prefix, "gamma_mid"), &self.gamma_mid),
        }
    }
}

/// Merges head groups. Each group holds one `n × d_k` matrix per head.
pub fn combine_f(groups: &[Vec<Tensor>], mode: CombineMode) -> Result<Tensor> {
    let first = groups
        .first()
        .and_then(|g| g.first())
        .ok_or_else(|| Error::InvalidTensor("combine_f needs at least one head".into()))?;
    let heads = groups[0].len();
    for g in groups {
        if g.len() != heads {
            return Err(Error::Shape {
                op: "combine_f",
                lhs: vec![heads],
                rhs: vec![g.len()],
            });
        }
        for t in g {
            if t.dims() != first.dims() {
                return Err(Error::Shape {
                    op: "combine_f",
                    lhs: first.dims().to_vec(),
                    rhs: t.dims().to_vec(),
                });
            }
        }
    }
    let per_group: Vec<Tensor> = groups
        .iter()
        .map(|g| Tensor::concat_cols(&g.iter().collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    match mode {
        CombineMode::ConcatProject => Tensor::concat_cols(&per_group.iter().collect::<Vec<_>>()),
        CombineMode::Sum => {
            let mut acc = per_group[0].clone();
            for g in &per_group[1..] {
                acc.add_assign(g);
            }
            Ok(acc)
        }
    }
}

fn add_scaled(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

/// Gate values `sigmoid([a ; r] W_gate)` of a gated middle head.
pub fn gate_values(a_h_t: &[f64], state_read_t: &[f64], w_gate: &Tensor) -> Vec<f64> {
    let mut joined = a_h_t.to_vec();
    joined.extend_from_slice(state_read_t);
    vecmat(&joined, w_gate).into_iter().map(sigmoid).collect()
}

/// Gated middle head with an explicit gate vector.
pub fn gated_middle_with_gate(a_h_t: &[f64], state_read_t: &[f64], gate: &[f64], p: &MiddleHeadParams) -> Vec<f64> {
    let beta = p.beta.item();
    let blend: Vec<f64> = a_h_t
        .iter()
        .zip(state_read_t)
        .zip(gate)
        .map(|((a, r), g)| g * a + (1.0 - g) * beta * r)
        .collect();
    vecmat(&blend, &p.w_mid).into_iter().map(sigmoid).collect()
}

/// One middle-head output for a single token. `state_read_t` is the state
/// queried by the state-derived key, before `alpha` scaling.
pub fn middle_head(a_h_t: &[f64], state_read_t: &[f64], p: &MiddleHeadParams, mode: MiddleMode) -> Result<Vec<f64>> {
    let beta = p.beta.item();
    let pre = match mode {
        MiddleMode::Off => {
            return Err(Error::Config("middle_head called with middle_mode = off".into()));
        }
        MiddleMode::Concat => vecmat(&add_scaled(a_h_t, state_read_t, beta), &p.w_mid),
        MiddleMode::Additive => {
            let w_add = p
                .w_state_add
                .as_ref()
                .ok_or_else(|| Error::Config("additive middle head without w_state_add".into()))?;
            add_scaled(&vecmat(a_h_t, &p.w_mid), &vecmat(state_read_t, w_add), beta)
        }
        MiddleMode::Gated => {
            let w_gate = p
                .w_gate
                .as_ref()
                .ok_or_else(|| Error::Config("gated middle head without w_gate".into()))?;
            let gate = gate_values(a_h_t, state_read_t, w_gate);
            return Ok(gated_middle_with_gate(a_h_t, state_read_t, &gate, p));
        }
    };
    Ok(pre.into_iter().map(sigmoid).collect())
}

/// [`middle_head`] applied to every row.
pub fn middle_head_seq(a_h: &Tensor, state_read: &Tensor, p: &MiddleHeadParams, mode: MiddleMode) -> Result<Tensor> {
    if a_h.dims() != state_read.dims() {
        return Err(Error::Shape {
            op: "middle_head",
            lhs: a_h.dims().to_vec(),
            rhs: state_read.dims().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(a_h.len());
    for t in 0..a_h.rows() {
        data.extend(middle_head(a_h.row(t), state_read.row(t), p, mode)?);
    }
    Tensor::new(a_h.dims().to_vec(), data)
}

/// Hybrid attention output `W_attn · F({A_h + γ M_h}, {α·reads}, {M_h})`.
///
/// `state_reads` must already carry the `alpha` factor. The third group is
/// present only in concat middle mode.
pub fn hybrid_attention_out(
    a_heads: &[Tensor],
    state_reads: &[Tensor],
    middles: Option<&[Tensor]>,
    w_attn: &Tensor,
    gamma_mid: &[f64],
    cfg: FusionConfig,
) -> Result<Tensor> {
    let first: Vec<Tensor> = match middles {
        Some(ms) => a_heads
            .iter()
            .zip(ms)
            .zip(gamma_mid)
            .map(|((a, m), &g)| a.add(&m.scale(g)))
            .collect::<Result<_>>()?,
        None => a_heads.to_vec(),
    };
    let mut groups = vec![first, state_reads.to_vec()];
    if cfg.middle_mode == MiddleMode::Concat {
        let ms = middles.ok_or_else(|| Error::Config("concat middle mode needs middle heads".into()))?;
        groups.push(ms.to_vec());
    }
    let combined = combine_f(&groups, cfg.combine_mode)?;
    if combined.cols() != w_attn.rows() {
        return Err(Error::Shape {
            op: "hybrid_attention_out",
            lhs: combined.dims().to_vec(),
            rhs: w_attn.dims().to_vec(),
        });
    }
    matmul(&combined, w_attn)
}
