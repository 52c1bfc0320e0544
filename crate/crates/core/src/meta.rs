//! One episodic meta step.
//!
//! Meta-train: classification loss and IM loss on a source batch, followed by
//! a gradient step on θ_D only (`θ_D′ = θ_D − α∇_{θ_D}L_cls`). Meta-test:
//! classification loss on a perturbed batch with θ_D′ in place of θ_D. The
//! outer gradient sums both phases; in second-order mode the meta-test term is
//! differentiated through θ_D′, which adds `−α·H·(0, ∇_{θ_D′}L⁺, 0)` where `H`
//! is the Hessian of the meta-train classification loss. That product is taken
//! by running the meta-train pass in dual numbers.

use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::dynamic::DynamicWeights;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{im_loss_graph, ImLoss, ImVars, LossReport};
use crate::model::{forward_graph, Model, NormMode, NormStat};
use crate::optim::OptimizerConfig;
use crate::params::{BoundParams, ParamGroup, ParamPartition, Partition};
use crate::real::{Dual, Real};
use crate::tensor::Tensor;

/// Any loss above this aborts training.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    MetaTrain,
    MetaTest,
}

/// Loss nodes produced by a [`Learner`] for one batch.
pub struct Evaluation {
    pub cls: Var,
    /// IM terms; only present in the meta-train phase of a dynamic model.
    pub im: Option<ImVars>,
    pub weights: Option<Var>,
    pub stats: Vec<NormStat>,
}

/// Something the meta engine can differentiate.
pub trait Learner {
    type Batch;

    /// Builds the losses of `batch` on `g` from already-bound parameters.
    fn evaluate<T: Real>(&self, g: &mut Graph<T>, bound: &BoundParams, batch: &Self::Batch, phase: Phase)
        -> Result<Evaluation>;
}

impl Learner for Model {
    type Batch = ImageBatch;

    fn evaluate<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        batch: &ImageBatch,
        phase: Phase,
    ) -> Result<Evaluation> {
        crate::losses::check_labels(&batch.labels, batch.images.shape().first().copied().unwrap_or(0))?;
        let x = g.leaf(batch.images.cast::<T>());
        let out = forward_graph(g, &self.spec, bound, &self.buffers, x, NormMode::Train)?;
        let cls = g.cross_entropy(out.logits, &batch.labels);
        let im = match (phase, out.weights) {
            (Phase::MetaTrain, Some(w)) => Some(im_loss_graph(g, w)),
            _ => None,
        };
        Ok(Evaluation { cls, im, weights: out.weights, stats: out.stats })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Inner learning rate.
    pub alpha: f64,
    /// Outer learning rate.
    pub beta: f64,
    /// IM loss weight.
    pub mu: f64,
    /// Upper bound of the amplitude-mixup coefficient.
    pub eta: f64,
    pub second_order: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 1e-3,
            mu: 1.0,
            eta: 1.0,
            second_order: true,
            steps: 1000,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerConfig::Sgd,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("meta.steps must be >= 1".into()));
        }
        self.validate_rates()
    }

    /// Everything except the step count, which the loop itself accepts as 0.
    pub fn validate_rates(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("meta.alpha must be > 0, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("meta.beta must be > 0, got {}", self.beta));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad(format!("meta.mu must be >= 0, got {}", self.mu));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("meta.eta must lie in [0, 1], got {}", self.eta));
        }
        if self.batch_size == 0 {
            return bad("meta.batch_size must be >= 1".into());
        }
        self.optimizer.validate()
    }
}

/// Per-step switches derived from the config and the ablation toggles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub alpha: f64,
    pub mu: f64,
    pub second_order: bool,
}

impl StepSettings {
    pub fn differentiates_through_inner_step(&self) -> bool {
        self.second_order && self.alpha != 0.0
    }
}

fn guard<T: Real>(what: &str, v: T) -> Result<T> {
    let x = v.to_f64();
    if !x.is_finite() || x > DIVERGENCE_LIMIT {
        return Err(Error::divergence(format!("{what} = {x}")));
    }
    Ok(v)
}

fn check_grads<T: Real>(what: &str, g: &ParamPartition<T>) -> Result<()> {
    for p in Partition::ALL {
        if let Some((name, _)) = g.group(p).iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::divergence(format!("non-finite {what} gradient in {p} ({name})")));
        }
    }
    Ok(())
}

fn scalar_of<T: Real>(g: &Graph<T>, v: Var) -> T {
    g.scalar(v)
}

/// Result of the meta-train phase.
#[derive(Clone, Debug)]
pub struct InnerUpdate<T> {
    pub theta_d_prime: ParamGroup<T>,
    pub loss_cls_s: T,
    pub weights: Option<DynamicWeights<T>>,
    pub im: Option<ImLoss<T>>,
    /// Gradient of the meta-train classification loss for every partition.
    pub grad_cls: ParamPartition<T>,
    /// Gradient of the IM loss, when requested and defined.
    pub grad_im: Option<ParamPartition<T>>,
    pub stats: Vec<NormStat>,
}

fn meta_train_pass<T: Real, L: Learner>(
    learner: &L,
    params: &ParamPartition<T>,
    batch: &L::Batch,
    alpha: f64,
    want_im_grad: bool,
) -> Result<InnerUpdate<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let ev = learner.evaluate(&mut g, &bound, batch, Phase::MetaTrain)?;
    let loss_cls_s = guard("meta-train classification loss", scalar_of(&g, ev.cls))?;
    let im = match ev.im {
        Some(v) => Some(ImLoss {
            ent: guard("entropy loss", scalar_of(&g, v.ent))?,
            div: scalar_of(&g, v.div),
            im: scalar_of(&g, v.im),
        }),
        None => None,
    };
    let grad_cls = bound.gradients(&g, &g.backward(ev.cls));
    check_grads("meta-train classification", &grad_cls)?;
    let grad_im = match (want_im_grad, ev.im) {
        (true, Some(v)) => {
            let gi = bound.gradients(&g, &g.backward(v.im));
            check_grads("IM", &gi)?;
            Some(gi)
        }
        _ => None,
    };
    let mut theta_d_prime = params.theta_d.clone();
    if alpha != 0.0 {
        let a = T::from_f64(-alpha);
        for (name, t) in theta_d_prime.iter_mut() {
            t.axpy(a, &grad_cls.theta_d[name])?;
        }
    }
    let weights = ev.weights.map(|w| DynamicWeights(g.value(w).clone()));
    Ok(InnerUpdate { theta_d_prime, loss_cls_s, weights, im, grad_cls, grad_im, stats: ev.stats })
}

/// One gradient step on θ_D against the meta-train classification loss.
///
/// θ_F and θ_C are never touched.
pub fn inner_update<T: Real, L: Learner>(
    learner: &L,
    params: &ParamPartition<T>,
    batch_s: &L::Batch,
    alpha: f64,
) -> Result<InnerUpdate<T>> {
    meta_train_pass(learner, params, batch_s, alpha, false)
}

/// `params` with θ_D replaced.
pub fn with_dynamic<T: Real>(params: &ParamPartition<T>, theta_d: &ParamGroup<T>) -> Result<ParamPartition<T>> {
    if theta_d.len() != params.theta_d.len() || theta_d.iter().any(|(n, t)| params.theta_d.get(n).map(|o| o.shape()) != Some(t.shape())) {
        return Err(Error::Invalid("replacement θ_D does not match the parameter layout".into()));
    }
    Ok(ParamPartition { theta_f: params.theta_f.clone(), theta_d: theta_d.clone(), theta_c: params.theta_c.clone() })
}

struct MetaTestPass<T> {
    loss: T,
    /// Gradients at (θ_F, θ_D′, θ_C); the θ_D entry is with respect to θ_D′.
    grads: ParamPartition<T>,
    stats: Vec<NormStat>,
}

fn meta_test_pass<T: Real, L: Learner>(
    learner: &L,
    params_prime: &ParamPartition<T>,
    batch: &L::Batch,
    want_grads: bool,
) -> Result<MetaTestPass<T>> {
    let mut g = Graph::new();
    let bound = params_prime.bind(&mut g);
    let ev = learner.evaluate(&mut g, &bound, batch, Phase::MetaTest)?;
    if ev.im.is_some() {
        return Err(Error::Invalid("meta-test evaluation must not produce an IM term".into()));
    }
    let loss = guard("meta-test classification loss", scalar_of(&g, ev.cls))?;
    let grads = if want_grads {
        let gr = bound.gradients(&g, &g.backward(ev.cls));
        check_grads("meta-test classification", &gr)?;
        gr
    } else {
        params_prime.zeros_like()
    };
    Ok(MetaTestPass { loss, grads, stats: ev.stats })
}

/// Classification loss of the perturbed batch under (θ_F, θ_D′, θ_C).
pub fn meta_test_loss<T: Real, L: Learner>(
    learner: &L,
    batch_s_plus: &L::Batch,
    params: &ParamPartition<T>,
    theta_d_prime: &ParamGroup<T>,
) -> Result<T> {
    Ok(meta_test_pass(learner, &with_dynamic(params, theta_d_prime)?, batch_s_plus, false)?.loss)
}

/// `H·(0, v, 0)` for the Hessian `H` of the meta-train classification loss.
pub fn dynamic_hvp<T: Real, L: Learner>(
    learner: &L,
    params: &ParamPartition<T>,
    batch: &L::Batch,
    v: &ParamGroup<T>,
) -> Result<ParamPartition<T>> {
    let mut dual = ParamPartition::<Dual<T>>::default();
    for (p, name, t) in params.iter() {
        let tangent = if p == Partition::Dynamic {
            let d = v.get(name).ok_or_else(|| Error::Invalid(format!("direction lacks {name}")))?;
            t.same_shape(d)?;
            d.data().to_vec()
        } else {
            vec![T::zero(); t.numel()]
        };
        let data = t.data().iter().zip(tangent).map(|(&x, d)| Dual::new(x, d)).collect();
        dual.insert(p, name.clone(), Tensor::from_vec(t.shape(), data)?)?;
    }
    let mut g = Graph::new();
    let bound = dual.bind(&mut g);
    let ev = learner.evaluate(&mut g, &bound, batch, Phase::MetaTrain)?;
    let grads = bound.gradients(&g, &g.backward(ev.cls));
    let mut out = params.zeros_like();
    for ((_, _, dst), (_, _, src)) in out.iter_mut().zip(grads.iter()) {
        for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = s.d;
        }
    }
    check_grads("Hessian-vector", &out)?;
    Ok(out)
}

/// Everything one meta step produces before the parameter update.
#[derive(Clone, Debug)]
pub struct MetaGradients<T> {
    pub grads: ParamPartition<T>,
    pub report: LossReport,
    pub theta_d_prime: ParamGroup<T>,
    pub train_weights: Option<DynamicWeights<T>>,
    pub stats: Vec<NormStat>,
}

/// Gradient of `L_cls(S) + μ·L_IM(S) + L_cls(S⁺)(θ_F, θ_D′, θ_C)`.
pub fn meta_gradients<T: Real, L: Learner>(
    learner: &L,
    params: &ParamPartition<T>,
    batch_s: &L::Batch,
    batch_s_plus: &L::Batch,
    settings: StepSettings,
) -> Result<MetaGradients<T>> {
    let inner = meta_train_pass(learner, params, batch_s, settings.alpha, settings.mu != 0.0)?;
    let prime = with_dynamic(params, &inner.theta_d_prime)?;
    let test = meta_test_pass(learner, &prime, batch_s_plus, true)?;

    let mut grads = inner.grad_cls;
    if let Some(gi) = &inner.grad_im {
        grads.axpy(T::from_f64(settings.mu), gi)?;
    }
    grads.axpy(T::one(), &test.grads)?;
    if settings.differentiates_through_inner_step() {
        let hvp = dynamic_hvp(learner, params, batch_s, &test.grads.theta_d)?;
        grads.axpy(T::from_f64(-settings.alpha), &hvp)?;
    }
    check_grads("meta", &grads)?;

    let im = inner.im.unwrap_or(ImLoss { ent: T::zero(), div: T::zero(), im: T::zero() });
    let cls_s = inner.loss_cls_s.to_f64();
    let cls_s_plus = test.loss.to_f64();
    let report = LossReport {
        cls_s,
        ent: im.ent.to_f64(),
        div: im.div.to_f64(),
        im: im.im.to_f64(),
        cls_s_plus,
        total: cls_s + settings.mu * im.im.to_f64() + cls_s_plus,
    };
    guard("total loss", report.total)?;
    let mut stats = inner.stats;
    stats.extend(test.stats);
    Ok(MetaGradients { grads, report, theta_d_prime: inner.theta_d_prime, train_weights: inner.weights, stats })
}

/// Plain gradient descent on all partitions.
pub fn meta_optimize<T: Real>(params: &ParamPartition<T>, grads: &ParamPartition<T>, beta: f64) -> Result<ParamPartition<T>> {
    check_grads("outer", grads)?;
    let mut out = params.clone();
    out.axpy(T::from_f64(-beta), grads)?;
    Ok(out)
}

/// Gradient norms of one step, by partition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    #[serde(rename = "theta_F")]
    pub theta_f: f64,
    #[serde(rename = "theta_D")]
    pub theta_d: f64,
    #[serde(rename = "theta_C")]
    pub theta_c: f64,
}

impl GradNorms {
    pub fn of<T: Real>(g: &ParamPartition<T>) -> Self {
        Self {
            theta_f: g.group_norm(Partition::Extractor),
            theta_d: g.group_norm(Partition::Dynamic),
            theta_c: g.group_norm(Partition::Classifier),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.theta_f.is_finite() && self.theta_d.is_finite() && self.theta_c.is_finite()
    }
}

/// One line of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaStepTrace {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossReport,
    pub grad_norms: GradNorms,
    pub lambdas: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three scalars `f, d, c`; meta-train loss `½a(d−3)² + b·f·d + e·d·c + ½f² + ½c²`,
    /// meta-test loss `½(d−1)² + f·d + 2·c·d`, IM term `f·d`.
    struct Toy {
        a: f64,
    }

    #[derive(Clone, Copy)]
    struct NoBatch;

    fn scalar_leaf<T: Real>(g: &mut Graph<T>, v: f64) -> Var {
        g.leaf(Tensor::full(&[1], T::from_f64(v)))
    }

    impl Learner for Toy {
        type Batch = NoBatch;

        fn evaluate<T: Real>(&self, g: &mut Graph<T>, b: &BoundParams, _: &NoBatch, phase: Phase) -> Result<Evaluation> {
            let (f, d, c) = (b.var("f")?, b.var("d")?, b.var("c")?);
            let one = scalar_leaf(g, 1.0);
            let dd = g.mul(d, d);
            let fd = g.mul(f, d);
            let dc = g.mul(d, c);
            let ff = g.mul(f, f);
            let cc = g.mul(c, c);
            match phase {
                Phase::MetaTrain => {
                    let t = T::from_f64;
                    let a = self.a;
                    let cls = g.lincomb(&[
                        (dd, t(0.5 * a)),
                        (d, t(-3.0 * a)),
                        (one, t(4.5 * a)),
                        (fd, t(0.7)),
                        (dc, t(-0.4)),
                        (ff, t(0.5)),
                        (cc, t(0.5)),
                    ]);
                    let im = g.lincomb(&[(fd, T::one())]);
                    let zero = g.lincomb(&[(one, T::zero())]);
                    Ok(Evaluation { cls, im: Some(ImVars { ent: im, div: zero, im }), weights: None, stats: vec![] })
                }
                Phase::MetaTest => {
                    let t = T::from_f64;
                    let cls = g.lincomb(&[(dd, t(0.5)), (d, t(-1.0)), (one, t(0.5)), (fd, t(1.0)), (dc, t(2.0))]);
                    Ok(Evaluation { cls, im: None, weights: None, stats: vec![] })
                }
            }
        }
    }

    fn toy_params(f: f64, d: f64, c: f64) -> ParamPartition<f64> {
        let mut p = ParamPartition::default();
        p.insert(Partition::Extractor, "f", Tensor::full(&[1], f)).unwrap();
        p.insert(Partition::Dynamic, "d", Tensor::full(&[1], d)).unwrap();
        p.insert(Partition::Classifier, "c", Tensor::full(&[1], c)).unwrap();
        p
    }

    fn vals(p: &ParamPartition<f64>) -> (f64, f64, f64) {
        (p.get("f").unwrap().item(), p.get("d").unwrap().item(), p.get("c").unwrap().item())
    }

    #[test]
    fn inner_step_hand_arithmetic() {
        // ½(d−3)² alone: d=1, α=0.1 → 1.2
        let toy = Toy { a: 1.0 };
        let p = toy_params(0.0, 1.0, 0.0);
        let up = inner_update(&toy, &p, &NoBatch, 0.1).unwrap();
        assert!((up.theta_d_prime["d"].item() - 1.2).abs() < 1e-15);
        let up0 = inner_update(&toy, &p, &NoBatch, 0.0).unwrap();
        assert_eq!(up0.theta_d_prime, p.theta_d);
    }

    #[test]
    fn closed_form_bilevel_update() {
        let (a, alpha, beta, mu) = (2.0, 0.1, 0.05, 0.5);
        let (f, d, c) = (0.3, -0.8, 1.1);
        let toy = Toy { a };
        let p = toy_params(f, d, c);
        let settings = StepSettings { alpha, mu, second_order: true };
        let mg = meta_gradients(&toy, &p, &NoBatch, &NoBatch, settings).unwrap();
        let next = meta_optimize(&p, &mg.grads, beta).unwrap();

        // train grads
        let gf = 0.7 * d + f;
        let gd = a * (d - 3.0) + 0.7 * f - 0.4 * c;
        let gc = -0.4 * d + c;
        let dp = d - alpha * gd;
        // test grads at (f, d', c)
        let tf = dp;
        let td = (dp - 1.0) + f + 2.0 * c;
        let tc = 2.0 * dp;
        // ∂d'/∂(f,d,c) = (−α·0.7, 1 − α·a, α·0.4)
        let total_f = gf + mu * d + tf + td * (-alpha * 0.7);
        let total_d = gd + mu * f + td * (1.0 - alpha * a);
        let total_c = gc + tc + td * (alpha * 0.4);
        let (nf, nd, nc) = vals(&next);
        assert!((nf - (f - beta * total_f)).abs() < 1e-12);
        assert!((nd - (d - beta * total_d)).abs() < 1e-12);
        assert!((nc - (c - beta * total_c)).abs() < 1e-12);
    }

    #[test]
    fn orders_coincide_without_inner_step_and_separate_with_curvature() {
        let toy = Toy { a: 2.0 };
        let p = toy_params(0.3, -0.8, 1.1);
        let run = |alpha, second_order| {
            meta_gradients(&toy, &p, &NoBatch, &NoBatch, StepSettings { alpha, mu: 1.0, second_order }).unwrap().grads
        };
        assert_eq!(run(0.0, true), run(0.0, false));
        let (a, b) = (run(0.1, true), run(0.1, false));
        assert_ne!(a.get("d"), b.get("d"));
        assert_ne!(a.get("f"), b.get("f"));
    }

    #[test]
    fn zero_gradients_leave_params() {
        let p = toy_params(1.0, 2.0, 3.0);
        assert_eq!(meta_optimize(&p, &p.zeros_like(), 0.5).unwrap(), p);
    }

    #[test]
    fn non_finite_gradient_names_partition() {
        let p = toy_params(1.0, 2.0, 3.0);
        let mut g = p.zeros_like();
        g.theta_c.get_mut("c").unwrap().data_mut()[0] = f64::NAN;
        let err = meta_optimize(&p, &g, 0.1).unwrap_err();
        assert!(err.is_divergence());
        assert!(err.to_string().contains("theta_C"), "{err}");
    }
}
