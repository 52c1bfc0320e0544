//! Two-branch dynamic block.
//!
//! The invariant branch is `ReLU(IN(conv3x3(F)))`. The specific branch mixes
//! the outputs of K bias-free 3×3 convolutions with per-sample weights
//! predicted by the adaptor `softmax(fc2(ReLU(fc1(avgpool(F)))))`. The block
//! output is the element-wise sum of both branches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::init;
use crate::ops::{ConvGeom, NormAxes};
use crate::params::{BoundParams, ParamGroup, ParamPartition, Partition};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_IN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicConfig {
    /// Number of specific-branch convolutions (mixture size).
    pub k: usize,
    /// Squeeze factor between the adaptor's two FC layers.
    pub reduction: usize,
    /// Learnable per-channel affine after instance normalization.
    pub in_affine: bool,
    pub eps: f64,
}

impl Default for DynamicConfig {
    fn default() -> Self {
        Self { k: 3, reduction: 4, in_affine: false, eps: DEFAULT_IN_EPS }
    }
}

impl DynamicConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("dynamic block needs k >= 2, got {}", self.k)));
        }
        if self.reduction == 0 || channels / self.reduction == 0 {
            return Err(Error::Config(format!("reduction {} too large for {channels} channels", self.reduction)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("instance-norm eps must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden(&self, channels: usize) -> usize {
        channels / self.reduction
    }
}

pub mod names {
    pub const INV_W: &str = "dynamic.inv_conv.weight";
    pub const INV_B: &str = "dynamic.inv_conv.bias";
    pub const AFF_W: &str = "dynamic.in_affine.weight";
    pub const AFF_B: &str = "dynamic.in_affine.bias";
    pub const FC1_W: &str = "dynamic.adaptor.fc1.weight";
    pub const FC1_B: &str = "dynamic.adaptor.fc1.bias";
    pub const FC2_W: &str = "dynamic.adaptor.fc2.weight";
    pub const FC2_B: &str = "dynamic.adaptor.fc2.bias";

    pub fn spec_conv(k: usize) -> String {
        format!("dynamic.spec_conv{k}.weight")
    }
}

/// Per-sample mixture weights, one simplex row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicWeights<T = f32>(pub Tensor<T>);

impl<T: Real> DynamicWeights<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        t.dims2()?;
        Ok(Self(t))
    }

    pub fn n(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.0.row(i)
    }

    /// Checks every row is finite, non-negative and sums to one within `tol`.
    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        for i in 0..self.n() {
            let row = self.row(i);
            let mut sum = 0.0;
            for &v in row {
                let v = v.to_f64();
                if !v.is_finite() || v < -tol {
                    return Err(Error::Invalid(format!("weight row {i} has invalid entry {v}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::Invalid(format!("weight row {i} sums to {sum}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicBlockParams<T = f32> {
    pub inv_conv: Tensor<T>,
    pub inv_bias: Tensor<T>,
    pub in_affine: Option<(Tensor<T>, Tensor<T>)>,
    pub spec_convs: Vec<Tensor<T>>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
    pub eps: f64,
}

impl<T: Real> DynamicBlockParams<T> {
    pub fn init(channels: usize, cfg: &DynamicConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(channels)?;
        let c = channels;
        let hidden = cfg.hidden(c);
        let conv = |rng: &mut _| init::kaiming_normal(&[c, c, 3, 3], rng);
        Ok(Self {
            inv_conv: conv(rng),
            inv_bias: Tensor::zeros(&[c]),
            in_affine: cfg.in_affine.then(|| (Tensor::full(&[c], T::one()), Tensor::zeros(&[c]))),
            spec_convs: (0..cfg.k).map(|_| conv(rng)).collect(),
            fc1_w: init::linear_uniform(&[hidden, c], rng),
            fc1_b: init::linear_uniform_bias(hidden, c, rng),
            fc2_w: init::linear_uniform(&[cfg.k, hidden], rng),
            fc2_b: init::linear_uniform_bias(cfg.k, hidden, rng),
            eps: cfg.eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.inv_conv.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.spec_convs.len()
    }

    pub fn from_group(g: &ParamGroup<T>, eps: f64) -> Result<Self> {
        let get = |n: &str| g.get(n).cloned().ok_or_else(|| Error::Invalid(format!("missing parameter {n}")));
        let mut spec_convs = Vec::new();
        while let Some(t) = g.get(&names::spec_conv(spec_convs.len())) {
            spec_convs.push(t.clone());
        }
        let in_affine = match (g.get(names::AFF_W), g.get(names::AFF_B)) {
            (Some(w), Some(b)) => Some((w.clone(), b.clone())),
            _ => None,
        };
        let p = Self {
            inv_conv: get(names::INV_W)?,
            inv_bias: get(names::INV_B)?,
            in_affine,
            spec_convs,
            fc1_w: get(names::FC1_W)?,
            fc1_b: get(names::FC1_B)?,
            fc2_w: get(names::FC2_W)?,
            fc2_b: get(names::FC2_B)?,
            eps,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn insert_into(&self, params: &mut ParamPartition<T>) -> Result<()> {
        let d = Partition::Dynamic;
        params.insert(d, names::INV_W, self.inv_conv.clone())?;
        params.insert(d, names::INV_B, self.inv_bias.clone())?;
        if let Some((w, b)) = &self.in_affine {
            params.insert(d, names::AFF_W, w.clone())?;
            params.insert(d, names::AFF_B, b.clone())?;
        }
        for (k, t) in self.spec_convs.iter().enumerate() {
            params.insert(d, names::spec_conv(k), t.clone())?;
        }
        params.insert(d, names::FC1_W, self.fc1_w.clone())?;
        params.insert(d, names::FC1_B, self.fc1_b.clone())?;
        params.insert(d, names::FC2_W, self.fc2_w.clone())?;
        params.insert(d, names::FC2_B, self.fc2_b.clone())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.k() < 2 {
            return Err(Error::Config(format!("dynamic block needs k >= 2, got {}", self.k())));
        }
        for t in std::iter::once(&self.inv_conv).chain(&self.spec_convs) {
            if t.shape() != [c, c, 3, 3] {
                return Err(Error::Shape(format!("dynamic kernel {:?}, expected [{c},{c},3,3]", t.shape())));
            }
        }
        let (_, fc1_in) = self.fc1_w.dims2()?;
        let (k_out, _) = self.fc2_w.dims2()?;
        if fc1_in != c || k_out != self.k() {
            return Err(Error::Shape("adaptor widths do not match channels / k".into()));
        }
        Ok(())
    }

    fn bind(&self, g: &mut Graph<T>) -> DynamicVars {
        DynamicVars {
            inv_w: g.leaf(self.inv_conv.clone()),
            inv_b: g.leaf(self.inv_bias.clone()),
            affine: self.in_affine.as_ref().map(|(w, b)| (g.leaf(w.clone()), g.leaf(b.clone()))),
            spec: self.spec_convs.iter().map(|t| g.leaf(t.clone())).collect(),
            fc1_w: g.leaf(self.fc1_w.clone()),
            fc1_b: g.leaf(self.fc1_b.clone()),
            fc2_w: g.leaf(self.fc2_w.clone()),
            fc2_b: g.leaf(self.fc2_b.clone()),
            eps: self.eps,
        }
    }

    fn check_input(&self, f: &Tensor<T>) -> Result<()> {
        let (_, c, _, _) = f.dims4()?;
        if c != self.channels() {
            return Err(Error::Shape(format!("feature has {c} channels, block expects {}", self.channels())));
        }
        Ok(())
    }
}

/// Graph handles for the block's parameters.
#[derive(Clone, Debug)]
pub struct DynamicVars {
    pub inv_w: Var,
    pub inv_b: Var,
    pub affine: Option<(Var, Var)>,
    pub spec: Vec<Var>,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub eps: f64,
}

impl DynamicVars {
    pub fn from_bound(b: &BoundParams, cfg: &DynamicConfig) -> Result<Self> {
        let affine = if cfg.in_affine { Some((b.var(names::AFF_W)?, b.var(names::AFF_B)?)) } else { None };
        Ok(Self {
            inv_w: b.var(names::INV_W)?,
            inv_b: b.var(names::INV_B)?,
            affine,
            spec: (0..cfg.k).map(|k| b.var(&names::spec_conv(k))).collect::<Result<_>>()?,
            fc1_w: b.var(names::FC1_W)?,
            fc1_b: b.var(names::FC1_B)?,
            fc2_w: b.var(names::FC2_W)?,
            fc2_b: b.var(names::FC2_B)?,
            eps: cfg.eps,
        })
    }
}

pub fn invariant_branch_graph<T: Real>(g: &mut Graph<T>, x: Var, v: &DynamicVars) -> Var {
    let c = g.conv(x, v.inv_w, ConvGeom::SAME3);
    let c = g.channel_bias(c, v.inv_b);
    let (mut n, _, _) = g.normalize(c, NormAxes::Instance, v.eps);
    if let Some((w, b)) = v.affine {
        n = g.channel_affine(n, w, b);
    }
    g.relu(n)
}

pub fn adaptor_graph<T: Real>(g: &mut Graph<T>, x: Var, v: &DynamicVars) -> Var {
    let pooled = g.global_avg_pool(x);
    let h = g.linear(pooled, v.fc1_w, v.fc1_b);
    let h = g.relu(h);
    let logits = g.linear(h, v.fc2_w, v.fc2_b);
    g.softmax(logits)
}

pub fn specific_branch_graph<T: Real>(g: &mut Graph<T>, x: Var, weights: Var, v: &DynamicVars) -> Var {
    let outs: Vec<Var> = v.spec.iter().map(|&w| g.conv(x, w, ConvGeom::SAME3)).collect();
    g.mix(&outs, weights)
}

/// Returns `(F_inv + F_spec, W)`.
pub fn dynamic_block_graph<T: Real>(g: &mut Graph<T>, x: Var, v: &DynamicVars) -> (Var, Var) {
    let inv = invariant_branch_graph(g, x, v);
    let w = adaptor_graph(g, x, v);
    let spec = specific_branch_graph(g, x, w, v);
    (g.add(inv, spec), w)
}

/// Per-(sample, channel) normalization to zero mean and unit variance.
pub fn instance_normalize<T: Real>(f: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    f.dims4()?;
    Ok(crate::ops::normalize(f, NormAxes::Instance, eps).xhat)
}

pub fn invariant_branch<T: Real>(f: &Tensor<T>, p: &DynamicBlockParams<T>) -> Result<Tensor<T>> {
    p.check_input(f)?;
    let mut g = Graph::new();
    let v = p.bind(&mut g);
    let x = g.leaf(f.clone());
    let y = invariant_branch_graph(&mut g, x, &v);
    Ok(g.value(y).clone())
}

pub fn adaptor_weights<T: Real>(f: &Tensor<T>, p: &DynamicBlockParams<T>) -> Result<DynamicWeights<T>> {
    p.check_input(f)?;
    let mut g = Graph::new();
    let v = p.bind(&mut g);
    let x = g.leaf(f.clone());
    let w = adaptor_graph(&mut g, x, &v);
    DynamicWeights::new(g.value(w).clone())
}

pub fn specific_branch<T: Real>(
    f: &Tensor<T>,
    w: &DynamicWeights<T>,
    p: &DynamicBlockParams<T>,
) -> Result<Tensor<T>> {
    p.check_input(f)?;
    if w.k() != p.k() {
        return Err(Error::Shape(format!("weights have K={}, block has K={}", w.k(), p.k())));
    }
    if w.n() != f.shape()[0] {
        return Err(Error::Shape(format!("weights for {} samples, batch has {}", w.n(), f.shape()[0])));
    }
    let mut g = Graph::new();
    let v = p.bind(&mut g);
    let x = g.leaf(f.clone());
    let wv = g.leaf(w.0.clone());
    let y = specific_branch_graph(&mut g, x, wv, &v);
    Ok(g.value(y).clone())
}

pub fn dynamic_forward<T: Real>(f: &Tensor<T>, p: &DynamicBlockParams<T>) -> Result<(Tensor<T>, DynamicWeights<T>)> {
    p.check_input(f)?;
    let mut g = Graph::new();
    let v = p.bind(&mut g);
    let x = g.leaf(f.clone());
    let (y, w) = dynamic_block_graph(&mut g, x, &v);
    Ok((g.value(y).clone(), DynamicWeights::new(g.value(w).clone())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(c: usize, k: usize, seed: u64) -> DynamicBlockParams<f64> {
        let cfg = DynamicConfig { k, reduction: 2, ..Default::default() };
        DynamicBlockParams::init(c, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn feature(n: usize, c: usize, hw: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, c, hw, hw], |_| rng.gen_range(-1.0..1.0))
    }

    // Scalar nested-loop oracles, independent of the im2col/gemm path.
    fn conv3x3_oracle(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let co = w.shape()[0];
        let mut y = Tensor::zeros(&[n, co, h, wd]);
        for s in 0..n {
            for o in 0..co {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let (ii, jj) = (i as isize + dy as isize - 1, j as isize + dx as isize - 1);
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                        acc += x.data()[((s * c + ci) * h + ii as usize) * wd + jj as usize]
                                            * w.data()[((o * c + ci) * 3 + dy) * 3 + dx];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((s * co + o) * h + i) * wd + j] = acc;
                    }
                }
            }
        }
        y
    }

    fn adaptor_oracle(f: &Tensor<f64>, p: &DynamicBlockParams<f64>) -> Vec<Vec<f64>> {
        let (n, c, h, w) = f.dims4().unwrap();
        let hidden = p.fc1_w.shape()[0];
        (0..n)
            .map(|s| {
                let pooled: Vec<f64> = (0..c)
                    .map(|ch| f.data()[(s * c + ch) * h * w..(s * c + ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
                    .collect();
                let hid: Vec<f64> = (0..hidden)
                    .map(|j| {
                        let z: f64 = p.fc1_b.data()[j] + (0..c).map(|i| p.fc1_w.data()[j * c + i] * pooled[i]).sum::<f64>();
                        z.max(0.0)
                    })
                    .collect();
                let logits: Vec<f64> = (0..p.k())
                    .map(|k| p.fc2_b.data()[k] + (0..hidden).map(|j| p.fc2_w.data()[k * hidden + j] * hid[j]).sum::<f64>())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect()
    }

    #[test]
    fn instance_norm_edge_cases() {
        let f = Tensor::<f64>::full(&[1, 1, 2, 2], 5.0);
        assert!(instance_normalize(&f, 1e-5).unwrap().data().iter().all(|&v| v == 0.0));
        let f = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = instance_normalize(&f, 1e-12).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        assert!(instance_normalize(&f, 0.0).is_err());
    }

    #[test]
    fn instance_norm_random_moments() {
        let f = feature(3, 4, 6, 1).map(|v| 3.0 * v + 2.0);
        let y = instance_normalize(&f, 1e-5).unwrap();
        for p in 0..12 {
            let s = &y.data()[p * 36..(p + 1) * 36];
            let m: f64 = s.iter().sum::<f64>() / 36.0;
            let v: f64 = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 36.0;
            assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn invariant_branch_matches_oracle() {
        let p = params(4, 3, 2);
        let f = feature(2, 4, 5, 3);
        let got = invariant_branch(&f, &p).unwrap();
        assert!(got.data().iter().all(|&v| v >= 0.0));
        let mut conv = conv3x3_oracle(&f, &p.inv_conv);
        for (i, v) in conv.data_mut().iter_mut().enumerate() {
            *v += p.inv_bias.data()[(i / 25) % 4];
        }
        let mut want = Tensor::zeros(conv.shape());
        for g in 0..8 {
            let s = &conv.data()[g * 25..(g + 1) * 25];
            let m: f64 = s.iter().sum::<f64>() / 25.0;
            let var: f64 = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 25.0;
            for i in 0..25 {
                want.data_mut()[g * 25 + i] = ((s[i] - m) / (var + p.eps).sqrt()).max(0.0);
            }
        }
        assert!(got.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn invariant_branch_zero_input_zero_output() {
        let p = params(4, 2, 5);
        let out = invariant_branch(&Tensor::zeros(&[2, 4, 4, 4]), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invariant_branch_ignores_conv_bias() {
        let mut p = params(4, 2, 6);
        let f = feature(2, 4, 5, 7);
        let a = invariant_branch(&f, &p).unwrap();
        p.inv_bias = Tensor::from_vec(&[4], vec![3.0, -2.0, 0.5, 10.0]).unwrap();
        let b = invariant_branch(&f, &p).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn adaptor_matches_oracle_and_zero_fc2_is_uniform() {
        let mut p = params(8, 3, 8);
        let f = feature(3, 8, 4, 9);
        let w = adaptor_weights(&f, &p).unwrap();
        let want = adaptor_oracle(&f, &p);
        for (i, row) in want.iter().enumerate() {
            for (a, b) in w.row(i).iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        w.check_simplex(1e-6).unwrap();
        p.fc2_w = Tensor::zeros(p.fc2_w.shape());
        p.fc2_b = Tensor::zeros(p.fc2_b.shape());
        let u = adaptor_weights(&f, &p).unwrap();
        assert!(u.0.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn specific_branch_selection_and_accumulation() {
        let p = params(4, 3, 10);
        let f = feature(2, 4, 4, 11);
        let onehot = DynamicWeights(Tensor::from_vec(&[2, 3], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
        let got = specific_branch(&f, &onehot, &p).unwrap();
        let want = conv3x3_oracle(&f, &p.spec_convs[2]);
        assert!(got.max_abs_diff(&want) < 1e-12);

        let w = adaptor_weights(&f, &p).unwrap();
        let got = specific_branch(&f, &w, &p).unwrap();
        let mut acc = Tensor::zeros(got.shape());
        for k in 0..3 {
            let ck = conv3x3_oracle(&f, &p.spec_convs[k]);
            for s in 0..2 {
                let per = 4 * 16;
                for i in 0..per {
                    acc.data_mut()[s * per + i] += w.row(s)[k] * ck.data()[s * per + i];
                }
            }
        }
        assert!(got.max_abs_diff(&acc) < 1e-5);
    }

    #[test]
    fn identical_kernels_make_weights_irrelevant() {
        let mut p = params(4, 3, 12);
        let shared = p.spec_convs[0].clone();
        p.spec_convs = vec![shared.clone(), shared.clone(), shared];
        let f = feature(2, 4, 4, 13);
        let a = specific_branch(&f, &DynamicWeights(Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.2, 0.3, 0.5]).unwrap()), &p).unwrap();
        let b = specific_branch(&f, &DynamicWeights(Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 0.0, 0.6, 0.2, 0.2]).unwrap()), &p).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn weight_mismatch_rejected() {
        let p = params(4, 3, 14);
        let f = feature(2, 4, 4, 15);
        let w = DynamicWeights(Tensor::full(&[2, 2], 0.5));
        assert!(specific_branch(&f, &w, &p).is_err());
        assert!(invariant_branch(&feature(1, 3, 4, 1), &p).is_err());
    }

    #[test]
    fn forward_is_sum_of_branches() {
        let mut p = params(4, 3, 16);
        let f = feature(2, 4, 4, 17);
        let (out, w) = dynamic_forward(&f, &p).unwrap();
        let inv = invariant_branch(&f, &p).unwrap();
        let spec = specific_branch(&f, &w, &p).unwrap();
        assert!(out.max_abs_diff(&inv.add(&spec).unwrap()) < 1e-12);

        let saved = p.spec_convs.clone();
        p.spec_convs.iter_mut().for_each(|t| *t = Tensor::zeros(t.shape()));
        let (out, _) = dynamic_forward(&f, &p).unwrap();
        assert_eq!(out, invariant_branch(&f, &p).unwrap());

        p.spec_convs = saved;
        p.inv_conv = Tensor::zeros(p.inv_conv.shape());
        p.inv_bias = Tensor::zeros(p.inv_bias.shape());
        let (out, w) = dynamic_forward(&f, &p).unwrap();
        assert_eq!(out, specific_branch(&f, &w, &p).unwrap());
    }

    #[test]
    fn permuting_experts_is_equivariant() {
        let p = params(4, 3, 18);
        let f = feature(3, 4, 4, 19);
        let (a, wa) = dynamic_forward(&f, &p).unwrap();
        let perm = [2usize, 0, 1];
        let mut q = p.clone();
        q.spec_convs = perm.iter().map(|&i| p.spec_convs[i].clone()).collect();
        q.fc2_w = p.fc2_w.select_rows(&perm);
        q.fc2_b = p.fc2_b.select_rows(&perm);
        let (b, wb) = dynamic_forward(&f, &q).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
        for s in 0..3 {
            for (j, &i) in perm.iter().enumerate() {
                assert!((wb.row(s)[j] - wa.row(s)[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_independence() {
        let p = params(4, 2, 20);
        let f = feature(3, 4, 4, 21);
        let (a, _) = dynamic_forward(&f, &p).unwrap();
        let order = [2usize, 0, 1];
        let (b, _) = dynamic_forward(&f.select_rows(&order), &p).unwrap();
        assert!(b.max_abs_diff(&a.select_rows(&order)) < 1e-12);
    }
}
