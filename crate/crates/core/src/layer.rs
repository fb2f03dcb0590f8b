//! One hybrid layer: pre-LN two-pass attention with delta-rule state heads,
//! middle-head fusion, and a relu² feed-forward block.
//!
//! The state needs attention outputs for its values and the augmented
//! queries need the state, so the forward runs in two passes that share
//! parameters: plain-query attention drives the recurrence, then attention
//! is recomputed with state-augmented queries.

use crate::attention::{augment_queries, causal_head, project_qkv, AttnHeadParams};
use crate::error::{Error, Result};
use crate::fusion::{
    combine_f, hybrid_attention_out, middle_head_seq, CombineMode, FusionConfig, MiddleHeadParams, MiddleMode,
};
use crate::numerics::{activation, init_glorot, layer_norm_rows, matmul, Activation, Rng, Tensor, LN_EPS};
use crate::params::join;
use crate::state::{run_recurrence, state_reads, HeadState, StateParams};
use crate::tape::{Graph, Var};

/// Which forward to build: the full hybrid layer or the plain attention
/// block it reduces to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Arch {
    #[default]
    WuNeng,
    PureAttention,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::WuNeng => "wuneng",
            Arch::PureAttention => "pure_attention",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wuneng" => Ok(Arch::WuNeng),
            "pure_attention" => Ok(Arch::PureAttention),
            other => Err(Error::Config(format!("unknown arch `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T = Tensor> {
    pub scale: T,
    pub shift: T,
}

impl LayerNormParams<Tensor> {
    pub fn init(d: usize) -> Self {
        Self {
            scale: Tensor::filled(&[d], 1.0),
            shift: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = Tensor> {
    pub ln1: LayerNormParams<T>,
    pub attn: Vec<AttnHeadParams<T>>,
    pub state: Vec<StateParams<T>>,
    /// Empty when the middle mode is off.
    pub middle: Vec<MiddleHeadParams<T>>,
    /// `d_cat × d_model`.
    pub w_attn: T,
    pub ln2: LayerNormParams<T>,
    pub ffn_in: T,
    pub ffn_out: T,
    pub fusion: FusionConfig,
}

impl LayerParams<Tensor> {
    pub fn init(d_model: usize, n_heads: usize, d_ffn: usize, fusion: FusionConfig, rng: &mut Rng) -> Result<Self> {
        let attn = (0..n_heads)
            .map(|_| AttnHeadParams::init(d_model, n_heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let d_k = d_model / n_heads;
        let state = (0..n_heads).map(|_| StateParams::init(d_model, d_k, rng)).collect();
        let middle = (0..n_heads)
            .filter_map(|_| MiddleHeadParams::init(d_k, fusion.middle_mode, rng))
            .collect();
        Ok(Self {
            ln1: LayerNormParams::init(d_model),
            attn,
            state,
            middle,
            w_attn: init_glorot(fusion.d_cat(d_model), d_model, rng),
            ln2: LayerNormParams::init(d_model),
            ffn_in: init_glorot(d_model, d_ffn, rng),
            ffn_out: init_glorot(d_ffn, d_model, rng),
            fusion,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_attn.cols()
    }
}

impl<T> LayerParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "ln1.scale"), &self.ln1.scale);
        f(join(prefix, "ln1.shift"), &self.ln1.shift);
        for (h, p) in self.attn.iter().enumerate() {
            p.visit(&join(prefix, &format!("attn.head.{h}")), f);
        }
        for (h, p) in self.state.iter().enumerate() {
            p.visit(&join(prefix, &format!("state.head.{h}")), f);
        }
        for (h, p) in self.middle.iter().enumerate() {
            p.visit(&join(prefix, &format!("middle.head.{h}")), f);
        }
        f(join(prefix, "proj.w_attn"), &self.w_attn);
        f(join(prefix, "ln2.scale"), &self.ln2.scale);
        f(join(prefix, "ln2.shift"), &self.ln2.shift);
        f(join(prefix, "ffn.w_in"), &self.ffn_in);
        f(join(prefix, "ffn.w_out"), &self.ffn_out);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "ln1.scale"), &mut self.ln1.scale);
        f(join(prefix, "ln1.shift"), &mut self.ln1.shift);
        for (h, p) in self.attn.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("attn.head.{h}")), f);
        }
        for (h, p) in self.state.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("state.head.{h}")), f);
        }
        for (h, p) in self.middle.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("middle.head.{h}")), f);
        }
        f(join(prefix, "proj.w_attn"), &mut self.w_attn);
        f(join(prefix, "ln2.scale"), &mut self.ln2.scale);
        f(join(prefix, "ln2.shift"), &mut self.ln2.shift);
        f(join(prefix, "ffn.w_in"), &mut self.ffn_in);
        f(join(prefix, "ffn.w_out"), &mut self.ffn_out);
    }

    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(String, &T) -> U) -> LayerParams<U> {
        LayerParams {
            ln1: LayerNormParams {
                scale: f(join(prefix, "ln1.scale"), &self.ln1.scale),
                shift: f(join(prefix, "ln1.shift"), &self.ln1.shift),
            },
            attn: self
                .attn
                .iter()
                .enumerate()
                .map(|(h, p)| p.map(&join(prefix, &format!("attn.head.{h}")), f))
                .collect(),
            state: self
                .state
                .iter()
                .enumerate()
                .map(|(h, p)| p.map(&join(prefix, &format!("state.head.{h}")), f))
                .collect(),
            middle: self
                .middle
                .iter()
                .enumerate()
                .map(|(h, p)| p.map(&join(prefix, &format!("middle.head.{h}")), f))
                .collect(),
            w_attn: f(join(prefix, "proj.w_attn"), &self.w_attn),
            ln2: LayerNormParams {
                scale: f(join(prefix, "ln2.scale"), &self.ln2.scale),
                shift: f(join(prefix, "ln2.shift"), &self.ln2.shift),
            },
            ffn_in: f(join(prefix, "ffn.w_in"), &self.ffn_in),
            ffn_out: f(join(prefix, "ffn.w_out"), &self.ffn_out),
            fusion: self.fusion,
        }
    }
}

/// `W_out · relu²(W_in · LN₂(h_pre))`, per token.
pub fn ffn(h_pre: &Tensor, p: &LayerParams) -> Result<Tensor> {
    let x = layer_norm_rows(h_pre, &p.ln2.scale, &p.ln2.shift, LN_EPS)?;
    let hidden = activation(Activation::ReluSquared, &matmul(&x, &p.ffn_in)?);
    matmul(&hidden, &p.ffn_out)
}

/// Full two-pass forward over one sequence. Returns the layer output and
/// each head's state after the last token.
pub fn layer_forward(h_prev: &Tensor, p: &LayerParams) -> Result<(Tensor, Vec<HeadState>)> {
    let x = layer_norm_rows(h_prev, &p.ln1.scale, &p.ln1.shift, LN_EPS)?;
    let mode = p.fusion.middle_mode;
    let n = x.rows();

    let mut qkv = Vec::with_capacity(p.attn.len());
    let mut base = Vec::with_capacity(p.attn.len());
    for ap in &p.attn {
        let (q, k, v) = project_qkv(&x, ap)?;
        base.push(causal_head(&q, &k, &v)?);
        qkv.push((k, v));
    }
    let fused = if mode == MiddleMode::Off {
        combine_f(&[base.clone()], CombineMode::Sum)?
    } else {
        let d_k = p.attn[0].d_k();
        let zero_read = Tensor::zeros(&[n, d_k]);
        let m0 = base
            .iter()
            .zip(&p.middle)
            .map(|(a, mp)| middle_head_seq(a, &zero_read, mp, mode))
            .collect::<Result<Vec<_>>>()?;
        combine_f(&[base.clone(), m0], CombineMode::Sum)?
    };

    let mut heads = Vec::with_capacity(p.attn.len());
    let mut raw_reads = Vec::with_capacity(p.attn.len());
    let mut scaled_reads = Vec::with_capacity(p.attn.len());
    let mut finals = Vec::with_capacity(p.attn.len());
    for ((ap, sp), (k, v)) in p.attn.iter().zip(&p.state).zip(&qkv) {
        let states = run_recurrence(&x, &fused, sp, None)?;
        let q = augment_queries(&x, &states, ap)?;
        heads.push(causal_head(&q, k, v)?);
        let raw = state_reads(&states, &x, &sp.w_hat_k, 1.0)?;
        scaled_reads.push(raw.scale(sp.alpha.item()));
        raw_reads.push(raw);
        finals.push(states.last().cloned().expect("n >= 1"));
    }
    let middles = if mode == MiddleMode::Off {
        None
    } else {
        Some(
            heads
                .iter()
                .zip(&raw_reads)
                .zip(&p.middle)
                .map(|((a, r), mp)| middle_head_seq(a, r, mp, mode))
                .collect::<Result<Vec<_>>>()?,
        )
    };
    let gammas: Vec<f64> = p.middle.iter().map(|m| m.gamma_mid.item()).collect();
    let a = hybrid_attention_out(&heads, &scaled_reads, middles.as_deref(), &p.w_attn, &gammas, p.fusion)?;
    let h1 = h_prev.add(&a)?;
    let out = h1.add(&ffn(&h1, p)?)?;
    Ok((out, finals))
}

/// The plain pre-LN attention + FFN block using the same attention, norm and
/// FFN weights and the first `d_model` rows of `w_attn`.
pub fn baseline_layer_forward(h_prev: &Tensor, p: &LayerParams) -> Result<Tensor> {
    let x = layer_norm_rows(h_prev, &p.ln1.scale, &p.ln1.shift, LN_EPS)?;
    let heads = p
        .attn
        .iter()
        .map(|ap| {
            let (q, k, v) = project_qkv(&x, ap)?;
            causal_head(&q, &k, &v)
        })
        .collect::<Result<Vec<_>>>()?;
    let cat = combine_f(&[heads], CombineMode::Sum)?;
    let a = matmul(&cat, &p.w_attn.row_block(0, p.d_model()))?;
    let h1 = h_prev.add(&a)?;
    h1.add(&ffn(&h1, p)?)
}

/// Middle head on graph values. `r` is the unscaled state read.
fn middle_graph(g: &mut Graph, a: Var, r: Var, p: &MiddleHeadParams<Var>, mode: MiddleMode) -> Result<Var> {
    let pre = match mode {
        MiddleMode::Off => return Err(Error::Config("middle head requested with middle_mode = off".into())),
        MiddleMode::Concat => {
            let br = g.scale_by(r, p.beta)?;
            let mixed = g.add(a, br)?;
            g.matmul(mixed, p.w_mid)?
        }
        MiddleMode::Additive => {
            let w_add = p
                .w_state_add
                .ok_or_else(|| Error::Config("additive middle head without w_state_add".into()))?;
            let am = g.matmul(a, p.w_mid)?;
            let rm = g.matmul(r, w_add)?;
            let brm = g.scale_by(rm, p.beta)?;
            g.add(am, brm)?
        }
        MiddleMode::Gated => {
            let w_gate = p
                .w_gate
                .ok_or_else(|| Error::Config("gated middle head without w_gate".into()))?;
            let joined = g.concat_cols(&[a, r])?;
            let logits = g.matmul(joined, w_gate)?;
            let gate = g.sigmoid(logits);
            let br = g.scale_by(r, p.beta)?;
            // g ⊙ a + (1 − g) ⊙ βr = g ⊙ a + βr − g ⊙ βr
            let ga = g.mul(gate, a)?;
            let gbr = g.mul(gate, br)?;
            let left = g.add(ga, br)?;
            let blend = g.sub(left, gbr)?;
            g.matmul(blend, p.w_mid)?
        }
    };
    Ok(g.sigmoid(pre))
}

fn ffn_graph(g: &mut Graph, h1: Var, p: &LayerParams<Var>) -> Result<Var> {
    let x = g.layer_norm(h1, p.ln2.scale, p.ln2.shift)?;
    let pre = g.matmul(x, p.ffn_in)?;
    let hidden = g.relu_squared(pre);
    g.matmul(hidden, p.ffn_out)
}

/// Records the layer on `g`. `h_prev` stacks sequences of `seg` rows each;
/// attention and the recurrence never cross a sequence boundary.
pub fn layer_graph(g: &mut Graph, h_prev: Var, p: &LayerParams<Var>, seg: usize, arch: Arch) -> Result<Var> {
    let x = g.layer_norm(h_prev, p.ln1.scale, p.ln1.shift)?;
    let mode = p.fusion.middle_mode;
    let n = g.value(x).rows();
    let d_model = g.value(x).cols();

    let mut qkv = Vec::with_capacity(p.attn.len());
    let mut base = Vec::with_capacity(p.attn.len());
    for ap in &p.attn {
        let q = g.matmul(x, ap.w_q)?;
        let k = g.matmul(x, ap.w_k)?;
        let v = g.matmul(x, ap.w_v)?;
        base.push(g.causal_attention(q, k, v, seg)?);
        qkv.push((q, k, v));
    }

    if arch == Arch::PureAttention {
        let mut parts = base;
        let d_cat = g.value(p.w_attn).rows();
        if d_cat > d_model {
            parts.push(g.constant(Tensor::zeros(&[n, d_cat - d_model])));
        }
        let cat = g.concat_cols(&parts)?;
        let a = g.matmul(cat, p.w_attn)?;
        let h1 = g.add(h_prev, a)?;
        let f = ffn_graph(g, h1, p)?;
        return g.add(h1, f);
    }

    let d_k = g.value(base[0]).cols();
    let fused = {
        let cat = g.concat_cols(&base)?;
        if mode == MiddleMode::Off {
            cat
        } else {
            let zero_read = g.constant(Tensor::zeros(&[n, d_k]));
            let m0 = base
                .iter()
                .zip(&p.middle)
                .map(|(&a, mp)| middle_graph(g, a, zero_read, mp, mode))
                .collect::<Result<Vec<_>>>()?;
            let mcat = g.concat_cols(&m0)?;
            g.add(cat, mcat)?
        }
    };

    let mut group1 = Vec::with_capacity(p.attn.len());
    let mut group2 = Vec::with_capacity(p.attn.len());
    let mut group3 = Vec::with_capacity(p.attn.len());
    for (h, (ap, sp)) in p.attn.iter().zip(&p.state).enumerate() {
        let (q0, k, v) = qkv[h];
        let zd = g.matmul(x, sp.w_decay)?;
        let zd = g.add_row_bias(zd, sp.b_decay)?;
        let w = g.decay_gate(zd);
        let za = g.matmul(x, sp.w_icl)?;
        let za = g.add_row_bias(za, sp.b_icl)?;
        let a = g.sigmoid(za);
        let kraw = g.matmul(x, sp.w_kappa)?;
        let kappa = g.normalize_rows(kraw);
        let krepl = g.matmul(x, sp.w_repl)?;
        let sv = g.matmul(fused, sp.w_sv)?;
        let states = g.recurrence(w, a, kappa, krepl, sv, seg)?;

        let readout = g.state_read(states, k)?;
        let qs = g.matmul(readout, ap.w_q_state)?;
        let qs = g.scale_by(qs, ap.lambda)?;
        let q = g.add(q0, qs)?;
        let head = g.causal_attention(q, k, v, seg)?;

        let khat = g.matmul(x, sp.w_hat_k)?;
        let raw = g.state_read(states, khat)?;
        group2.push(g.scale_by(raw, sp.alpha)?);

        if mode == MiddleMode::Off {
            group1.push(head);
        } else {
            let mp = &p.middle[h];
            let m = middle_graph(g, head, raw, mp, mode)?;
            let gm = g.scale_by(m, mp.gamma_mid)?;
            group1.push(g.add(head, gm)?);
            group3.push(m);
        }
    }

    let mut groups = vec![group1, group2];
    if mode == MiddleMode::Concat {
        groups.push(group3);
    }
    let combined = match p.fusion.combine_mode {
        CombineMode::ConcatProject => {
            let all: Vec<Var> = groups.concat();
            g.concat_cols(&all)?
        }
        CombineMode::Sum => {
            let mut acc = g.concat_cols(&groups[0])?;
            for grp in &groups[1..] {
                let c = g.concat_cols(grp)?;
                acc = g.add(acc, c)?;
            }
            acc
        }
    };
    let a = g.matmul(combined, p.w_attn)?;
    let h1 = g.add(h_prev, a)?;
    let f = ffn_graph(g, h1, p)?;
    g.add(h1, f)
}
