//! Token embedding, the layer stack and the output head.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, MiddleMode};
use crate::layer::{baseline_layer_forward, layer_forward, layer_graph, Arch, LayerParams};
use crate::numerics::{matmul, Rng, Tensor};
use crate::params::{join, ParamSet};
use crate::tape::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub fusion: FusionConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ffn: 32,
            fusion: FusionConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `key=value` lines, in a fixed order.
    pub fn to_kv(&self) -> String {
        format!(
            "vocab_size={}\nd_model={}\nn_heads={}\nn_layers={}\nd_ffn={}\ncombine_mode={}\nmiddle_mode={}\nseed={}\nd_cat={}\n",
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.d_ffn,
            self.fusion.combine_mode,
            self.fusion.middle_mode,
            self.seed,
            self.fusion.d_cat(self.d_model),
        )
    }

    /// Inverse of [`ModelConfig::to_kv`]; `d_cat` is checked, not stored.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut d_cat = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Malformed(format!("config line `{line}`")))?;
            let num = || -> Result<usize> {
                v.trim()
                    .parse()
                    .map_err(|_| Error::Malformed(format!("config value `{line}`")))
            };
            match k.trim() {
                "vocab_size" => cfg.vocab_size = num()?,
                "d_model" => cfg.d_model = num()?,
                "n_heads" => cfg.n_heads = num()?,
                "n_layers" => cfg.n_layers = num()?,
                "d_ffn" => cfg.d_ffn = num()?,
                "seed" => cfg.seed = num()? as u64,
                "d_cat" => d_cat = Some(num()?),
                "combine_mode" => cfg.fusion.combine_mode = v.trim().parse()?,
                "middle_mode" => cfg.fusion.middle_mode = v.trim().parse()?,
                other => return Err(Error::Malformed(format!("unknown config key `{other}`"))),
            }
        }
        cfg.validate()?;
        if let Some(dc) = d_cat {
            if dc != cfg.fusion.d_cat(cfg.d_model) {
                return Err(Error::Malformed(format!(
                    "d_cat {dc} disagrees with the fusion config ({})",
                    cfg.fusion.d_cat(cfg.d_model)
                )));
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    /// `vocab × d_model`.
    pub embed: T,
    pub layers: Vec<LayerParams<T>>,
    /// `d_model × vocab`, zero at initialization.
    pub unembed: T,
}

impl<T> ModelParams<T> {
    pub fn visit_named<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("embed".into(), &self.embed);
        for (l, p) in self.layers.iter().enumerate() {
            p.visit(&join("layer", &l.to_string()), f);
        }
        f("unembed".into(), &self.unembed);
    }

    pub fn visit_named_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("embed".into(), &mut self.embed);
        for (l, p) in self.layers.iter_mut().enumerate() {
            p.visit_mut(&join("layer", &l.to_string()), f);
        }
        f("unembed".into(), &mut self.unembed);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(String, &T) -> U) -> ModelParams<U> {
        ModelParams {
            embed: f("embed".into(), &self.embed),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, p)| p.map(&join("layer", &l.to_string()), f))
                .collect(),
            unembed: f("unembed".into(), &self.unembed),
        }
    }
}

impl ModelParams<Tensor> {
    /// Registers every tensor as a graph parameter under its canonical name.
    pub fn register<'a>(&'a self, g: &mut Graph<'a>) -> ModelParams<Var> {
        let mut vars = Vec::new();
        self.visit_named(&mut |name, t| vars.push(g.param(name, t)));
        let mut it = vars.into_iter();
        self.map(&mut |_, _| it.next().expect("visit and map agree"))
    }
}

impl ParamSet for ModelParams<Tensor> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.visit_named(&mut |name, t| f(&name, t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_named_mut(&mut |name, t| f(&name, t));
    }
}

impl ParamSet for Model {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.params.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.params.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// Deterministic in `cfg.seed`.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let embed_data = (0..cfg.vocab_size * cfg.d_model).map(|_| rng.normal()).collect();
        let embed = Tensor::matrix(cfg.vocab_size, cfg.d_model, embed_data)?;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams::init(cfg.d_model, cfg.n_heads, cfg.d_ffn, cfg.fusion, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            params: ModelParams {
                embed,
                layers,
                unembed: Tensor::zeros(&[cfg.d_model, cfg.vocab_size]),
            },
        })
    }

    fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Config("empty token sequence".into()));
        }
        let d = self.cfg.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &id in tokens {
            if id >= self.cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.cfg.vocab_size,
                });
            }
            data.extend_from_slice(self.params.embed.row(id));
        }
        Tensor::matrix(tokens.len(), d, data)
    }

    /// Logits `n × vocab` for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut h = self.embed(tokens)?;
        for (l, p) in self.params.layers.iter().enumerate() {
            h = layer_forward(&h, p)
                .map_err(|e| Error::Layer {
                    layer: l,
                    source: Box::new(e),
                })?
                .0;
        }
        matmul(&h, &self.params.unembed)
    }

    /// Logits of the plain attention model built from the same weights.
    pub fn baseline_forward(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut h = self.embed(tokens)?;
        for (l, p) in self.params.layers.iter().enumerate() {
            h = baseline_layer_forward(&h, p).map_err(|e| Error::Layer {
                layer: l,
                source: Box::new(e),
            })?;
        }
        matmul(&h, &self.params.unembed)
    }
}

/// Records the forward for a batch of equal-length sequences stacked in
/// `tokens` (`seg` ids each) and returns the logits.
pub fn logits_graph(g: &mut Graph, pv: &ModelParams<Var>, tokens: &[usize], seg: usize, arch: Arch) -> Result<Var> {
    let mut h = g.embed(pv.embed, tokens)?;
    for (l, p) in pv.layers.iter().enumerate() {
        h = layer_graph(g, h, p, seg, arch).map_err(|e| Error::Layer {
            layer: l,
            source: Box::new(e),
        })?;
    }
    g.matmul(h, pv.unembed)
}

/// Parameter counts split into the plain attention model and the hybrid
/// additions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub embeddings: usize,
    pub attn_qkv: usize,
    pub attn_out: usize,
    pub ffn: usize,
    pub layer_norm: usize,
    pub state_gates: usize,
    pub state_value: usize,
    pub state_key: usize,
    pub query_state: usize,
    pub middle: usize,
    pub gates: usize,
    pub extra_projection: usize,
    pub scalars: usize,
}

impl ParamBreakdown {
    pub fn base(&self) -> usize {
        self.embeddings + self.attn_qkv + self.attn_out + self.ffn + self.layer_norm
    }

    pub fn additions(&self) -> usize {
        self.state_gates
            + self.state_value
            + self.state_key
            + self.query_state
            + self.middle
            + self.gates
            + self.extra_projection
            + self.scalars
    }

    pub fn total(&self) -> usize {
        self.base() + self.additions()
    }

    pub fn ratio(&self) -> f64 {
        if self.base() == 0 {
            0.0
        } else {
            self.additions() as f64 / self.base() as f64
        }
    }
}

/// Closed-form parameter accounting for `cfg`.
pub fn count_params(cfg: &ModelConfig) -> ParamBreakdown {
    let (v, d, h, f) = (cfg.vocab_size, cfg.d_model, cfg.n_heads, cfg.d_ffn);
    let dk = cfg.d_k();
    let l = cfg.n_layers;
    let mode = cfg.fusion.middle_mode;
    let middle_on = mode != MiddleMode::Off;
    let per_middle = if middle_on { dk * dk } else { 0 } + if mode == MiddleMode::Additive { dk * dk } else { 0 };
    ParamBreakdown {
        embeddings: 2 * v * d,
        attn_qkv: l * h * 3 * d * dk,
        attn_out: l * d * d,
        ffn: l * 2 * d * f,
        layer_norm: l * 4 * d,
        // w_decay, w_icl, w_kappa, w_repl and the two bias vectors.
        state_gates: l * h * (4 * d * dk + 2 * dk),
        state_value: l * h * d * dk,
        state_key: l * h * d * dk,
        query_state: l * h * dk * dk,
        middle: l * h * per_middle,
        gates: if mode == MiddleMode::Gated {
            l * h * 2 * dk * dk
        } else {
            0
        },
        extra_projection: l * (cfg.fusion.d_cat(d) - d) * d,
        scalars: l * h * (2 + if middle_on { 2 } else { 0 }),
    }
}

/// `cfg` with `d_ffn` widened so its total parameter count is as close as
/// possible to `target`'s. Never narrows below `cfg.d_ffn`.
pub fn match_ffn_width(cfg: ModelConfig, target: &ModelConfig) -> ModelConfig {
    let want = count_params(target).total();
    let mut best = cfg;
    let mut best_gap = count_params(&cfg).total().abs_diff(want);
    let mut probe = cfg;
    loop {
        probe.d_ffn += 1;
        let total = count_params(&probe).total();
        let gap = total.abs_diff(want);
        if gap < best_gap {
            best = probe;
            best_gap = gap;
        }
        if total >= want || cfg.n_layers == 0 {
            return best;
        }
    }
}

/// Whether a canonical name belongs to the hybrid additions (the rest is
/// the plain attention model). `w_attn` straddles both and is split by row.
pub fn is_addition(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    name.contains(".state.") || name.contains(".middle.") || matches!(leaf, "w_q_state" | "lambda")
}
