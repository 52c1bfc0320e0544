//! The training loop: two source batches per step, the second one perturbed,
//! one meta step, one outer update.

use serde::{Deserialize, Serialize};

use crate::data::{make_loader, LabeledDataset, Loader};
use crate::error::Result;
use crate::fourier::{perturb_batch, NaturalPool, PerturbConfig};
use crate::meta::{meta_gradients, GradNorms, MetaConfig, MetaStepTrace, StepSettings};
use crate::model::{Model, ModelSpec};
use crate::optim::Optimizer;

/// Component switches of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub dynamic_block: bool,
    pub im_loss: bool,
    pub meta_learning: bool,
    /// Perturb the second batch; follows `meta_learning` when unset.
    pub perturbation: Option<bool>,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::full()
    }
}

impl Ablation {
    pub const fn new(dynamic_block: bool, im_loss: bool, meta_learning: bool) -> Self {
        Self { dynamic_block, im_loss, meta_learning, perturbation: None }
    }

    pub const fn full() -> Self {
        Self::new(true, true, true)
    }

    /// Plain single-level cross-entropy training of the bare backbone.
    pub const fn erm() -> Self {
        Self::new(false, false, false)
    }

    /// The five component combinations of the ablation table, baseline first.
    pub fn table_rows() -> Vec<Self> {
        vec![
            Self::erm(),
            Self::new(true, false, false),
            Self::new(true, true, false),
            Self::new(true, false, true),
            Self::full(),
        ]
    }

    pub fn perturbs(&self) -> bool {
        self.perturbation.unwrap_or(self.meta_learning)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.dynamic_block {
            parts.push("dyn");
        }
        if self.im_loss && self.dynamic_block {
            parts.push("im");
        }
        if self.meta_learning {
            parts.push("meta");
        }
        if self.perturbation.is_some() && self.perturbs() != self.meta_learning {
            parts.push(if self.perturbs() { "perturb" } else { "no-perturb" });
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }

    pub fn apply_to(&self, spec: &mut ModelSpec) {
        spec.dynamic_block = self.dynamic_block;
    }

    /// Meta-off runs skip the inner step; IM needs the dynamic block.
    pub fn settings(&self, meta: &MetaConfig) -> StepSettings {
        StepSettings {
            alpha: if self.meta_learning { meta.alpha } else { 0.0 },
            mu: if self.im_loss && self.dynamic_block { meta.mu } else { 0.0 },
            second_order: meta.second_order,
        }
    }
}

/// Source data and perturbation resources of a run.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub source: &'a LabeledDataset,
    pub pool: &'a NaturalPool,
    pub crop: Option<usize>,
}

/// Model plus optimizer state; `step` counts completed steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Optimizer<f32>,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model, meta: &MetaConfig) -> Result<Self> {
        meta.validate_rates()?;
        Ok(Self { model, optimizer: Optimizer::new(meta.optimizer, meta.beta)?, step: 0 })
    }

    fn loader<'a>(&self, data: &TrainData<'a>, meta: &MetaConfig) -> Result<Loader<'a>> {
        make_loader(data.source, meta.batch_size, data.crop, true, meta.seed)
    }

    fn step_with(
        &mut self,
        loader: &Loader<'_>,
        pool: &NaturalPool,
        meta: &MetaConfig,
        perturb: &PerturbConfig,
        ablation: &Ablation,
    ) -> Result<MetaStepTrace> {
        let step = self.step;
        let batch_s = loader.batch_at(2 * step as u64);
        let second = loader.batch_at(2 * step as u64 + 1);
        let (batch_plus, lambdas) = if ablation.perturbs() {
            let (b, draws) = perturb_batch(&second, pool, perturb, step as u64)?;
            (b, draws.into_iter().map(|d| d.lambda).collect())
        } else {
            (second, Vec::new())
        };
        let settings = ablation.settings(meta);
        let mg = meta_gradients(&self.model, &self.model.params, &batch_s, &batch_plus, settings)
            .map_err(|e| e.at_step(step))?;
        self.optimizer.step(&mut self.model.params, &mg.grads)?;
        if !self.model.params.all_finite() {
            return Err(crate::Error::divergence("non-finite parameters after update").at_step(step));
        }
        self.model.absorb_stats(&mg.stats);
        self.step += 1;
        Ok(MetaStepTrace { step, losses: mg.report, grad_norms: GradNorms::of(&mg.grads), lambdas })
    }

    /// Runs until `until` steps are complete, calling `on_step` after each one.
    pub fn run(
        &mut self,
        data: &TrainData<'_>,
        meta: &MetaConfig,
        perturb: &PerturbConfig,
        ablation: &Ablation,
        until: usize,
        mut on_step: impl FnMut(&Trainer, &MetaStepTrace) -> Result<()>,
    ) -> Result<()> {
        let loader = self.loader(data, meta)?;
        let perturb = PerturbConfig { eta: meta.eta, ..perturb.clone() };
        perturb.validate()?;
        while self.step < until {
            let trace = self.step_with(&loader, data.pool, meta, &perturb, ablation)?;
            on_step(self, &trace)?;
        }
        Ok(())
    }
}

/// Trains `model` for `meta.steps` steps and returns it with the trace.
pub fn train_loop(
    model: Model,
    data: &TrainData<'_>,
    meta: &MetaConfig,
    perturb: &PerturbConfig,
    ablation: &Ablation,
) -> Result<(Model, Vec<MetaStepTrace>)> {
    let mut trainer = Trainer::new(model, meta)?;
    let mut traces = Vec::with_capacity(meta.steps);
    trainer.run(data, meta, perturb, ablation, meta.steps, |_, t| {
        traces.push(t.clone());
        Ok(())
    })?;
    Ok((trainer.model, traces))
}
