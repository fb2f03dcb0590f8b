//! Canonical naming and traversal of learnable tensors.
//!
//! Parameter structs are generic over the leaf type so the same layout
//! holds stored weights (`Tensor`), graph handles (`Var`) and gradients.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Anything that exposes its learnable tensors in a fixed canonical order.
pub trait ParamSet {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name.to_string()));
        out
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }

    fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Applies `f` to the tensor at canonical position `index`.
    fn with_tensor_mut(&mut self, index: usize, f: &mut dyn FnMut(&mut Tensor)) {
        let mut i = 0;
        self.visit_mut(&mut |_, t| {
            if i == index {
                f(t);
            }
            i += 1;
        });
    }
}

/// A flat list of named tensors; also the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensors {
    pub entries: Vec<(String, Tensor)>,
}

impl NamedTensors {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn zeros_like<P: ParamSet + ?Sized>(params: &P) -> Self {
        let mut entries = Vec::new();
        params.visit(&mut |name, t| entries.push((name.to_string(), Tensor::zeros(t.dims()))));
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn accumulate(&mut self, other: &NamedTensors) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::ParamMismatch(format!(
                "{} vs {} tensors",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, a), (nb, b)) in self.entries.iter_mut().zip(&other.entries) {
            if na != nb || a.dims() != b.dims() {
                return Err(Error::ParamMismatch(format!("`{na}` vs `{nb}`")));
            }
            a.add_assign(b);
        }
        Ok(())
    }
}

impl ParamSet for NamedTensors {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (n, t) in &self.entries {
            f(n, t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (n, t) in &mut self.entries {
            f(n, t);
        }
    }
}

/// Names that hold the augmentation scalars (α, β, γ_mid, λ).
pub fn is_augmentation_scalar(name: &str) -> bool {
    matches!(name.rsplit('.').next(), Some("alpha" | "beta" | "gamma_mid" | "lambda"))
}

pub(crate) fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}
