//! Named parameter groups θ_F (extractor), θ_D (dynamic block) and θ_C (classifier).

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Partition {
    #[serde(rename = "theta_F")]
    Extractor,
    #[serde(rename = "theta_D")]
    Dynamic,
    #[serde(rename = "theta_C")]
    Classifier,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Extractor, Partition::Dynamic, Partition::Classifier];

    pub fn label(self) -> &'static str {
        match self {
            Partition::Extractor => "theta_F",
            Partition::Dynamic => "theta_D",
            Partition::Classifier => "theta_C",
        }
    }
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

pub type ParamGroup<T> = IndexMap<String, Tensor<T>>;

/// Trainable parameters split into three disjoint named groups.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamPartition<T = f32> {
    pub theta_f: ParamGroup<T>,
    pub theta_d: ParamGroup<T>,
    pub theta_c: ParamGroup<T>,
}

impl<T: Real> Default for ParamPartition<T> {
    fn default() -> Self {
        Self { theta_f: IndexMap::new(), theta_d: IndexMap::new(), theta_c: IndexMap::new() }
    }
}

impl<T: Real> ParamPartition<T> {
    pub fn group(&self, p: Partition) -> &ParamGroup<T> {
        match p {
            Partition::Extractor => &self.theta_f,
            Partition::Dynamic => &self.theta_d,
            Partition::Classifier => &self.theta_c,
        }
    }

    pub fn group_mut(&mut self, p: Partition) -> &mut ParamGroup<T> {
        match p {
            Partition::Extractor => &mut self.theta_f,
            Partition::Dynamic => &mut self.theta_d,
            Partition::Classifier => &mut self.theta_c,
        }
    }

    /// Inserts a parameter, rejecting names already present in any group.
    pub fn insert(&mut self, p: Partition, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.partition_of(&name).is_some() {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        self.group_mut(p).insert(name, t);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (Partition, &String, &Tensor<T>)> {
        Partition::ALL.into_iter().flat_map(move |p| self.group(p).iter().map(move |(n, t)| (p, n, t)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (Partition, &String, &mut Tensor<T>)> {
        let Self { theta_f, theta_d, theta_c } = self;
        theta_f
            .iter_mut()
            .map(|(n, t)| (Partition::Extractor, n, t))
            .chain(theta_d.iter_mut().map(|(n, t)| (Partition::Dynamic, n, t)))
            .chain(theta_c.iter_mut().map(|(n, t)| (Partition::Classifier, n, t)))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        Partition::ALL.into_iter().find_map(|p| self.group(p).get(name))
    }

    pub fn partition_of(&self, name: &str) -> Option<Partition> {
        Partition::ALL.into_iter().find(|&p| self.group(p).contains_key(name))
    }

    pub fn num_params(&self) -> usize {
        self.iter().map(|(_, _, t)| t.numel()).sum()
    }

    pub fn group_size(&self, p: Partition) -> usize {
        self.group(p).values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamPartition<U> {
        let c = |g: &ParamGroup<T>| g.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
        ParamPartition { theta_f: c(&self.theta_f), theta_d: c(&self.theta_d), theta_c: c(&self.theta_c) }
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let z = |g: &ParamGroup<T>| g.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
        Self { theta_f: z(&self.theta_f), theta_d: z(&self.theta_d), theta_c: z(&self.theta_c) }
    }

    /// `self += s · other` on every partition.
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        for p in Partition::ALL {
            self.axpy_group(p, s, other)?;
        }
        Ok(())
    }

    pub fn axpy_group(&mut self, p: Partition, s: T, other: &Self) -> Result<()> {
        let dst = self.group_mut(p);
        let src = other.group(p);
        if dst.len() != src.len() {
            return Err(Error::Shape(format!("{p}: group size mismatch")));
        }
        for (name, t) in dst.iter_mut() {
            let o = src.get(name).ok_or_else(|| Error::Shape(format!("{p}: missing {name}")))?;
            t.axpy(s, o)?;
        }
        Ok(())
    }

    pub fn group_norm(&self, p: Partition) -> f64 {
        self.group(p).values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, _, t)| t.all_finite())
    }

    /// Flattened values in partition order.
    pub fn flatten(&self) -> Vec<T> {
        self.iter().flat_map(|(_, _, t)| t.data().iter().copied()).collect()
    }

    /// Adds every parameter to the graph as a leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        let mut vars = IndexMap::new();
        for (p, n, t) in self.iter() {
            vars.insert(n.clone(), (p, g.leaf(t.clone())));
        }
        BoundParams { vars }
    }
}

/// Graph leaves created for a [`ParamPartition`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, (Partition, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).map(|&(_, v)| v).ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Collects the gradient of every bound parameter (zeros where unreachable).
    pub fn gradients<T: Real>(&self, g: &Graph<T>, grads: &Grads<T>) -> ParamPartition<T> {
        let mut out = ParamPartition::default();
        for (name, &(p, v)) in &self.vars {
            let t = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
            out.group_mut(p).insert(name.clone(), t);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected_across_groups() {
        let mut p = ParamPartition::<f32>::default();
        p.insert(Partition::Extractor, "a", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert(Partition::Classifier, "a", Tensor::zeros(&[1])).is_err());
        assert_eq!(p.partition_of("a"), Some(Partition::Extractor));
    }

    #[test]
    fn axpy_and_norms() {
        let mut p = ParamPartition::<f64>::default();
        p.insert(Partition::Dynamic, "d", Tensor::full(&[4], 1.0)).unwrap();
        let q = p.clone();
        p.axpy(2.0, &q).unwrap();
        assert_eq!(p.get("d").unwrap().data(), &[3.0; 4]);
        assert!((p.group_norm(Partition::Dynamic) - 6.0).abs() < 1e-12);
        assert_eq!(p.group_norm(Partition::Extractor), 0.0);
    }
}
