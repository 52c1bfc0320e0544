//! Cross-entropy and information-maximization losses.
//!
//! All losses are batch means. Mixture-weight logarithms use a floor of
//! [`PROB_FLOOR`] so `0·log 0` evaluates to zero.

use serde::{Deserialize, Serialize};

use crate::dynamic::DynamicWeights;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops;
pub use crate::ops::PROB_FLOOR;
use crate::real::Real;
use crate::tensor::Tensor;

/// Tolerance on simplex membership accepted by the IM losses.
pub const SIMPLEX_TOL: f64 = 1e-4;

/// The loss scalars of one meta step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls_s: f64,
    pub ent: f64,
    pub div: f64,
    pub im: f64,
    pub cls_s_plus: f64,
    pub total: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [self.cls_s, self.ent, self.div, self.im, self.cls_s_plus, self.total].iter().all(|v| v.is_finite())
    }
}

pub fn check_labels(labels: &[usize], n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Invalid(format!("label {l} is not binary")));
    }
    Ok(())
}

/// Mean of `−log softmax(logits)[label]`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (n, _) = logits.dims2()?;
    check_labels(labels, n)?;
    Ok(ops::cross_entropy(logits, labels).0)
}

fn checked<T: Real>(w: &DynamicWeights<T>) -> Result<()> {
    if w.n() == 0 {
        return Err(Error::Invalid("empty weight batch".into()));
    }
    w.check_simplex(SIMPLEX_TOL)
}

/// Mean row entropy `−Σ_k w_k log w_k`, in `[0, log K]`.
pub fn entropy_loss<T: Real>(w: &DynamicWeights<T>) -> Result<T> {
    checked(w)?;
    Ok(ops::mean_entropy(&w.0))
}

/// `Σ_k ŵ_k log ŵ_k` of the mean weights `ŵ`, in `[−log K, 0]`.
pub fn diversity_loss<T: Real>(w: &DynamicWeights<T>) -> Result<T> {
    checked(w)?;
    Ok(ops::mean_negentropy(&w.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImLoss<T> {
    pub ent: T,
    pub div: T,
    pub im: T,
}

pub fn im_loss<T: Real>(w: &DynamicWeights<T>) -> Result<ImLoss<T>> {
    let ent = entropy_loss(w)?;
    let div = diversity_loss(w)?;
    Ok(ImLoss { ent, div, im: ent + div })
}

/// Graph nodes of the IM loss terms.
#[derive(Clone, Copy, Debug)]
pub struct ImVars {
    pub ent: Var,
    pub div: Var,
    pub im: Var,
}

pub fn im_loss_graph<T: Real>(g: &mut Graph<T>, weights: Var) -> ImVars {
    let ent = g.mean_entropy(weights);
    let div = g.mean_negentropy(weights);
    let im = g.lincomb(&[(ent, T::one()), (div, T::one())]);
    ImVars { ent, div, im }
}
