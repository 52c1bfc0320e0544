//! Outer-loop optimizers over a [`ParamPartition`].
//!
//! Plain gradient descent is the default; momentum and Adam are opt-in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamPartition;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    #[default]
    Sgd,
    Momentum {
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        Self::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_adam_eps() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Sgd => true,
            Self::Momentum { momentum } => (0.0..1.0).contains(&momentum),
            Self::Adam { beta1, beta2, eps } => (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer moments; empty for SGD.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct OptimizerState<T = f32> {
    pub t: u64,
    pub first: Option<ParamPartition<T>>,
    pub second: Option<ParamPartition<T>>,
}

#[derive(Clone, Debug)]
pub struct Optimizer<T = f32> {
    pub config: OptimizerConfig,
    pub lr: f64,
    pub state: OptimizerState<T>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, lr: f64) -> Result<Self> {
        config.validate()?;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self { config, lr, state: OptimizerState::default() })
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut ParamPartition<T>, grads: &ParamPartition<T>) -> Result<()> {
        self.state.t += 1;
        match self.config {
            OptimizerConfig::Sgd => params.axpy(T::from_f64(-self.lr), grads),
            OptimizerConfig::Momentum { momentum } => {
                let buf = self.state.first.get_or_insert_with(|| params.zeros_like());
                let m = T::from_f64(momentum);
                for ((_, _, b), (_, _, g)) in buf.iter_mut().zip(grads.iter()) {
                    b.same_shape(g)?;
                    for (bv, &gv) in b.data_mut().iter_mut().zip(g.data()) {
                        *bv = m * *bv + gv;
                    }
                }
                params.axpy(T::from_f64(-self.lr), buf)
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let m = self.state.first.get_or_insert_with(|| params.zeros_like());
                let v = self.state.second.get_or_insert_with(|| params.zeros_like());
                let t = self.state.t as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
                let (one, lr, eps) = (T::one(), T::from_f64(self.lr), T::from_f64(eps));
                let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
                let groups = params.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads.iter());
                for ((((_, name, p), (_, _, mt)), (_, _, vt)), (_, gname, g)) in groups {
                    if name != gname {
                        return Err(Error::Invalid(format!("gradient {gname} does not match parameter {name}")));
                    }
                    p.same_shape(g)?;
                    let it = p.data_mut().iter_mut().zip(mt.data_mut()).zip(vt.data_mut()).zip(g.data());
                    for (((pv, mv), vv), &gv) in it {
                        *mv = b1 * *mv + (one - b1) * gv;
                        *vv = b2 * *vv + (one - b2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                Ok(())
            }
        }
    }
}
