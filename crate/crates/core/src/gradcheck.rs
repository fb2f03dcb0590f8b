//! Analytic gradients from the tape, a central-difference oracle, and the
//! comparison report used to check one against the other.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{CombineMode, FusionConfig, MiddleMode};
use crate::harness::{batch_loss, loss_graph, TaskSample};
use crate::layer::Arch;
use crate::model::{Model, ModelConfig};
use crate::numerics::{Rng, Tensor};
use crate::params::{is_augmentation_scalar, NamedTensors, ParamSet};
use crate::tape::{Graph, Var};

/// Floor for the relative-error denominator.
const REL_EPS: f64 = 1e-15;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-4;
pub const DEFAULT_ABS_TOL: f64 = 1e-7;

/// Gradient of the scalar recorded by `build` with respect to every tensor of
/// `params`, in canonical order. Tensors the graph never registered (or that
/// the loss does not reach) get exact zeros.
pub fn analytic_grads<'a, P, F>(params: &'a P, build: F) -> Result<NamedTensors>
where
    P: ParamSet + ?Sized,
    F: FnOnce(&mut Graph<'a>) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = build(&mut g)?;
    let grads = g.backward(root)?;
    let found = g.param_grads(&grads)?;
    let names = params.names();
    if let Some((stray, _)) = found.entries.iter().find(|(n, _)| !names.contains(n)) {
        return Err(Error::ParamMismatch(format!("graph registered unknown `{stray}`")));
    }
    let mut entries = Vec::with_capacity(names.len());
    params.visit(&mut |name, t| {
        let g = found.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.dims()));
        entries.push((name.to_string(), g));
    });
    Ok(NamedTensors::new(entries))
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h`, one scalar at a time.
pub fn finite_diff<P, F>(params: &P, h: f64, mut f: F) -> Result<NamedTensors>
where
    P: ParamSet + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut work = params.clone();
    let mut entries = Vec::new();
    let tensors: Vec<(String, Vec<usize>)> = {
        let mut v = Vec::new();
        params.visit(&mut |n, t| v.push((n.to_string(), t.dims().to_vec())));
        v
    };
    for (index, (name, dims)) in tensors.into_iter().enumerate() {
        let mut grad = Tensor::zeros(&dims);
        for i in 0..grad.len() {
            let mut orig = 0.0;
            work.with_tensor_mut(index, &mut |t| {
                orig = t.data()[i];
                t.data_mut()[i] = orig + h;
            });
            let up = f(&work)?;
            work.with_tensor_mut(index, &mut |t| t.data_mut()[i] = orig - h);
            let down = f(&work)?;
            work.with_tensor_mut(index, &mut |t| t.data_mut()[i] = orig);
            grad.data_mut()[i] = (up - down) / (2.0 * h);
        }
        entries.push((name, grad));
    }
    Ok(NamedTensors::new(entries))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub tensors: Vec<TensorReport>,
    pub pass: bool,
}

impl GradReport {
    pub fn failures(&self) -> impl Iterator<Item = &TensorReport> {
        self.tensors.iter().filter(|t| !t.pass)
    }

    /// Fixed-width text table, one row per tensor.
    pub fn table(&self) -> String {
        let width = self.tensors.iter().map(|t| t.name.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>10}  {:>10}  {:>11}  {:>11}  ok",
            "name", "max_rel", "max_abs", "|analytic|", "|numeric|"
        );
        for t in &self.tensors {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10.3e}  {:>10.3e}  {:>11.4e}  {:>11.4e}  {}",
                t.name,
                t.max_rel,
                t.max_abs,
                t.analytic_norm,
                t.numeric_norm,
                if t.pass { "yes" } else { "NO" }
            );
        }
        let _ = writeln!(out, "overall: {}", if self.pass { "pass" } else { "FAIL" });
        out
    }
}

/// Entry-wise comparison. An entry passes when its relative error is within
/// `rel_tol` or its absolute error within `abs_tol`.
pub fn compare(analytic: &NamedTensors, numeric: &NamedTensors, rel_tol: f64, abs_tol: f64) -> Result<GradReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::ParamMismatch(format!(
            "{} analytic vs {} numeric tensors",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut tensors = Vec::with_capacity(analytic.len());
    for ((na, a), (nn, n)) in analytic.entries.iter().zip(&numeric.entries) {
        if na != nn || a.dims() != n.dims() {
            return Err(Error::ParamMismatch(format!("`{na}` vs `{nn}`")));
        }
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut pass = true;
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let abs = (x - y).abs();
            let rel = abs / x.abs().max(y.abs()).max(REL_EPS);
            // NaN compares false both ways, so it fails here.
            if !(rel <= rel_tol || abs <= abs_tol) {
                pass = false;
            }
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        tensors.push(TensorReport {
            name: na.clone(),
            max_rel,
            max_abs,
            analytic_norm: a.norm(),
            numeric_norm: n.norm(),
            pass,
        });
    }
    let pass = tensors.iter().all(|t| t.pass);
    Ok(GradReport {
        rel_tol,
        abs_tol,
        tensors,
        pass,
    })
}

/// The small model the end-to-end check runs on.
pub fn tiny_config(fusion: FusionConfig, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 6,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ffn: 16,
        fusion,
        seed,
    }
}

/// Moves the zero- and one-initialized tensors (augmentation scalars, the
/// unembedding, layer-norm affine) to random values so every path carries
/// gradient.
pub fn randomize_for_check(model: &mut Model, rng: &mut Rng) {
    model.params.visit_named_mut(&mut |name, t| {
        let sample: Option<Box<dyn Fn(&mut Rng) -> f64>> = if is_augmentation_scalar(&name) {
            Some(Box::new(|r: &mut Rng| {
                let m = r.uniform_range(0.2, 0.8);
                if r.uniform() < 0.5 {
                    -m
                } else {
                    m
                }
            }))
        } else if name == "unembed" {
            Some(Box::new(|r: &mut Rng| 0.5 * r.normal()))
        } else if name.ends_with(".scale") {
            Some(Box::new(|r: &mut Rng| 1.0 + r.uniform_range(-0.3, 0.3)))
        } else if name.ends_with(".shift") {
            Some(Box::new(|r: &mut Rng| r.uniform_range(-0.2, 0.2)))
        } else {
            None
        };
        if let Some(sample) = sample {
            for v in t.data_mut() {
                *v = sample(rng);
            }
        }
    });
}

/// Two random sequences whose every target is the first token, so the loss
/// depends on information carried from the start of the sequence.
pub fn first_token_batch(rng: &mut Rng, n: usize, vocab: usize) -> Vec<TaskSample> {
    (0..2)
        .map(|_| {
            let input_ids: Vec<usize> = (0..n).map(|_| rng.below(vocab)).collect();
            TaskSample {
                target_ids: vec![input_ids[0]; n],
                loss_mask: vec![1.0; n],
                input_ids,
            }
        })
        .collect()
}

/// Analytic (tape) gradients of the masked cross-entropy against central
/// differences of the plain forward path.
pub fn check_model(model: &Model, batch: &[TaskSample], rel_tol: f64, abs_tol: f64) -> Result<GradReport> {
    let analytic = analytic_grads(model, |g| {
        let pv = model.params.register(g);
        Ok(loss_graph(g, &pv, batch, Arch::WuNeng)?.1)
    })?;
    let numeric = finite_diff(model, DEFAULT_STEP, |m| batch_loss(m, batch))?;
    compare(&analytic, &numeric, rel_tol, abs_tol)
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeReport {
    pub combine_mode: String,
    pub middle_mode: String,
    pub report: GradReport,
}

/// The end-to-end check over every combine × middle mode on a 5-token batch.
pub fn suite(seed: u64) -> Result<Vec<ModeReport>> {
    suite_for(&tiny_config(FusionConfig::default(), seed), 5)
}

/// [`suite`] on `base`'s shape with `n`-token sequences; `base.fusion` is
/// replaced by each mode in turn.
pub fn suite_for(base: &ModelConfig, n: usize) -> Result<Vec<ModeReport>> {
    let mut out = Vec::new();
    for combine_mode in CombineMode::ALL {
        for middle_mode in MiddleMode::ALL {
            let cfg = ModelConfig {
                fusion: FusionConfig {
                    combine_mode,
                    middle_mode,
                },
                ..*base
            };
            let mut model = Model::init(cfg)?;
            let mut rng = Rng::new(base.seed ^ 0x9e37_79b9);
            randomize_for_check(&mut model, &mut rng);
            let batch = first_token_batch(&mut rng, n, cfg.vocab_size);
            let report = check_model(&model, &batch, DEFAULT_REL_TOL, DEFAULT_ABS_TOL)?;
            out.push(ModeReport {
                combine_mode: combine_mode.to_string(),
                middle_mode: middle_mode.to_string(),
                report,
            });
        }
    }
    Ok(out)
}
