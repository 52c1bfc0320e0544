//! Minimal reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for the backward pass. The tape is
//! generic over [`Real`]; running it with [`crate::real::Dual`] scalars whose
//! tangents are seeded on some parameters yields Hessian-vector products in
//! the tangent part of every gradient.

use crate::ops::{self, ConvGeom, NormAxes, NormCache};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, geom: ConvGeom },
    ChannelBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu { x: Var },
    Normalize { x: Var, axes: NormAxes, cache: NormCache<T> },
    NormalizeFixed { x: Var, inv_std: Vec<T> },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    AvgPool2 { x: Var },
    MaxPool { x: Var, arg: Vec<usize> },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Softmax { x: Var },
    Mix { xs: Vec<Var>, w: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
    MeanEntropy { p: Var },
    MeanNegentropy { p: Var },
    LinComb { terms: Vec<(Var, T)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`]; `None` where the root does not depend on the node.
pub struct Grads<T>(Vec<Option<Tensor<T>>>);

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.0[v.0].take()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Which branch every piecewise-linear op took: the sign of each ReLU
    /// input and each max-pool argmax, in tape order. Two points with equal
    /// patterns lie in the same smooth piece.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu { x } => out.extend(self.value(*x).data().iter().map(|v| usize::from(v.to_f64() > 0.0))),
                Op::MaxPool { arg, .. } => out.extend_from_slice(arg),
                _ => {}
            }
        }
        out
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn conv(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let y = ops::conv2d(self.value(x), self.value(w), geom);
        self.push(y, Op::Conv { x, w, geom })
    }

    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let y = ops::add_channel_bias(self.value(x), self.value(b));
        self.push(y, Op::ChannelBias { x, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).add(self.value(b)).expect("add: shape mismatch");
        self.push(y, Op::Add { a, b })
    }

    /// Elementwise product of same-shaped nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("mul: shape mismatch");
        self.push(y, Op::Mul { a, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    /// Normalizes and returns the output together with the group means and biased variances.
    pub fn normalize(&mut self, x: Var, axes: NormAxes, eps: f64) -> (Var, Vec<T>, Vec<T>) {
        let cache = ops::normalize(self.value(x), axes, eps);
        let (mean, var) = (cache.mean.clone(), cache.var.clone());
        let y = cache.xhat.clone();
        (self.push(y, Op::Normalize { x, axes, cache }), mean, var)
    }

    pub fn normalize_fixed(&mut self, x: Var, mean: &[T], var: &[T], eps: f64) -> Var {
        let (y, inv_std) = ops::normalize_fixed(self.value(x), mean, var, eps);
        self.push(y, Op::NormalizeFixed { x, inv_std })
    }

    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let y = ops::channel_affine(self.value(x), self.value(gamma), self.value(beta));
        self.push(y, Op::ChannelAffine { x, gamma, beta })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let y = ops::avg_pool2(self.value(x));
        self.push(y, Op::AvgPool2 { x })
    }

    pub fn max_pool(&mut self, x: Var, k: usize, geom: ConvGeom) -> Var {
        let (y, arg) = ops::max_pool(self.value(x), k, geom);
        self.push(y, Op::MaxPool { x, arg })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let y = ops::global_avg_pool(self.value(x));
        self.push(y, Op::GlobalAvgPool { x })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = ops::linear(self.value(x), self.value(w), self.value(b));
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = ops::softmax_rows(self.value(x));
        self.push(y, Op::Softmax { x })
    }

    pub fn mix(&mut self, xs: &[Var], w: Var) -> Var {
        let inputs: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::mix_by_sample(&inputs, self.value(w));
        self.push(y, Op::Mix { xs: xs.to_vec(), w })
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (loss, probs) = ops::cross_entropy(self.value(logits), labels);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    pub fn mean_entropy(&mut self, p: Var) -> Var {
        let v = ops::mean_entropy(self.value(p));
        self.push(Tensor::scalar(v), Op::MeanEntropy { p })
    }

    pub fn mean_negentropy(&mut self, p: Var) -> Var {
        let v = ops::mean_negentropy(self.value(p));
        self.push(Tensor::scalar(v), Op::MeanNegentropy { p })
    }

    /// `Σ cᵢ·vᵢ` over same-shaped nodes.
    pub fn lincomb(&mut self, terms: &[(Var, T)]) -> Var {
        let mut y = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, c) in terms {
            y.axpy(c, self.value(v)).expect("lincomb: shape mismatch");
        }
        self.push(y, Op::LinComb { terms: terms.to_vec() })
    }

    /// Gradient of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));

        fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(T::one(), &g).expect("gradient shape mismatch"),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Conv { x, w, geom } => {
                    let (dx, dw) = ops::conv2d_backward(self.value(*x), self.value(*w), &dy, *geom);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                }
                Op::ChannelBias { x, b } => {
                    acc(&mut grads, *b, ops::channel_sum(&dy));
                    acc(&mut grads, *x, dy);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::Mul { a, b } => {
                    let da = dy.zip_map(self.value(*b), |g, y| g * y).unwrap();
                    let db = dy.zip_map(self.value(*a), |g, x| g * x).unwrap();
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Relu { x } => acc(&mut grads, *x, ops::relu_backward(self.value(*x), &dy)),
                Op::Normalize { x, axes, cache } => {
                    acc(&mut grads, *x, ops::normalize_backward(cache, *axes, &dy));
                }
                Op::NormalizeFixed { x, inv_std } => acc(&mut grads, *x, ops::channel_scale(&dy, inv_std)),
                Op::ChannelAffine { x, gamma, beta } => {
                    acc(&mut grads, *gamma, ops::channel_dot(&dy, self.value(*x)));
                    acc(&mut grads, *beta, ops::channel_sum(&dy));
                    acc(&mut grads, *x, ops::channel_scale(&dy, self.value(*gamma).data()));
                }
                Op::AvgPool2 { x } => acc(&mut grads, *x, ops::avg_pool2_backward(self.value(*x).shape(), &dy)),
                Op::MaxPool { x, arg } => {
                    acc(&mut grads, *x, ops::max_pool_backward(self.value(*x).shape(), arg, &dy));
                }
                Op::GlobalAvgPool { x } => {
                    acc(&mut grads, *x, ops::global_avg_pool_backward(self.value(*x).shape(), &dy));
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &dy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Softmax { x } => acc(&mut grads, *x, ops::softmax_rows_backward(&node.value, &dy)),
                Op::Mix { xs, w } => {
                    let inputs: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
                    let (dxs, dw) = ops::mix_by_sample_backward(&inputs, self.value(*w), &dy);
                    for (v, dx) in xs.iter().zip(dxs) {
                        acc(&mut grads, *v, dx);
                    }
                    acc(&mut grads, *w, dw);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    acc(&mut grads, *logits, ops::cross_entropy_backward(probs, labels, dy.item()));
                }
                Op::MeanEntropy { p } => {
                    acc(&mut grads, *p, ops::mean_entropy_backward(self.value(*p), dy.item()));
                }
                Op::MeanNegentropy { p } => {
                    acc(&mut grads, *p, ops::mean_negentropy_backward(self.value(*p), dy.item()));
                }
                Op::LinComb { terms } => {
                    for &(v, c) in terms {
                        acc(&mut grads, v, dy.scale(c));
                    }
                }
            }
        }
        Grads(grads)
    }
}
