//! Forward kernels and their vector-Jacobian products.
//!
//! Layout is NCHW throughout. Backward functions take the upstream gradient
//! `dy` and whatever forward state they need; they never mutate inputs.

use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const SAME3: ConvGeom = ConvGeom { stride: 1, pad: 1 };

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * hw_out;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut col[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * hw_out;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += col[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x[N,Ci,H,W] ⊛ w[Co,Ci,kh,kw]` (cross-correlation, no bias).
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
    let (n, ci, h, wd) = x.dims4().expect("conv input must be rank 4");
    let (co, ci2, kh, kw) = w.dims4().expect("conv kernel must be rank 4");
    assert_eq!(ci, ci2, "conv channel mismatch");
    let (ho, wo) = (g.out_size(h, kh), g.out_size(wd, kw));
    let kdim = ci * kh * kw;
    let mut col = vec![T::zero(); kdim * ho * wo];
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let per_in = ci * h * wd;
    let per_out = co * ho * wo;
    for s in 0..n {
        im2col(&x.data()[s * per_in..(s + 1) * per_in], ci, h, wd, kh, kw, g, ho, wo, &mut col);
        let y = &mut out.data_mut()[s * per_out..(s + 1) * per_out];
        T::gemm(co, kdim, ho * wo, w.data(), kdim, 1, &col, ho * wo, 1, y, ho * wo, 1, false);
    }
    out
}

/// Returns `(dx, dw)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeom,
) -> (Tensor<T>, Tensor<T>) {
    let (n, ci, h, wd) = x.dims4().unwrap();
    let (co, _, kh, kw) = w.dims4().unwrap();
    let (_, _, ho, wo) = dy.dims4().unwrap();
    let kdim = ci * kh * kw;
    let hw = ho * wo;
    let mut col = vec![T::zero(); kdim * hw];
    let mut dcol = vec![T::zero(); kdim * hw];
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let per_in = ci * h * wd;
    let per_out = co * hw;
    for s in 0..n {
        let dys = &dy.data()[s * per_out..(s + 1) * per_out];
        im2col(&x.data()[s * per_in..(s + 1) * per_in], ci, h, wd, kh, kw, g, ho, wo, &mut col);
        // dw[co,k] += dy[co,hw] · col[k,hw]^T
        T::gemm(co, hw, kdim, dys, hw, 1, &col, 1, hw, dw.data_mut(), kdim, 1, true);
        // dcol[k,hw] = w[co,k]^T · dy[co,hw]
        T::gemm(kdim, co, hw, w.data(), 1, kdim, dys, hw, 1, &mut dcol, hw, 1, false);
        col2im(&dcol, ci, h, wd, kh, kw, g, ho, wo, &mut dx.data_mut()[s * per_in..(s + 1) * per_in]);
    }
    (dx, dw)
}

/// Adds `b[c]` to every element of channel `c`.
pub fn add_channel_bias<T: Real>(x: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().unwrap();
    let hw = h * w;
    let mut y = x.clone();
    for s in 0..n {
        for ch in 0..c {
            let bv = b.data()[ch];
            let off = (s * c + ch) * hw;
            y.data_mut()[off..off + hw].iter_mut().for_each(|v| *v += bv);
        }
    }
    y
}

/// Sum of `dy` over every axis except the channel axis.
pub fn channel_sum<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dy.dims4().unwrap();
    let hw = h * w;
    let mut out = Tensor::zeros(&[c]);
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            let acc: T = dy.data()[off..off + hw].iter().copied().sum();
            out.data_mut()[ch] += acc;
        }
    }
    out
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dy, |v, g| if v > T::zero() { g } else { T::zero() }).unwrap()
}

/// Saved state of a normalization: normalized output and inverse std per group.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Group layout of a normalization: each group is a set of `(offset, len)` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxes {
    /// Statistics per channel over (N, H, W): batch normalization.
    Batch,
    /// Statistics per (sample, channel) over (H, W): instance normalization.
    Instance,
}

fn group_runs(axes: NormAxes, shape: (usize, usize, usize, usize)) -> Vec<Vec<usize>> {
    let (n, c, h, w) = shape;
    let hw = h * w;
    match axes {
        NormAxes::Batch => (0..c).map(|ch| (0..n).map(|s| (s * c + ch) * hw).collect()).collect(),
        NormAxes::Instance => (0..n * c).map(|g| vec![g * hw]).collect(),
    }
}

/// Zero-mean unit-variance normalization (biased variance, eps inside the root).
pub fn normalize<T: Real>(x: &Tensor<T>, axes: NormAxes, eps: f64) -> NormCache<T> {
    let dims = x.dims4().unwrap();
    let hw = dims.2 * dims.3;
    let runs = group_runs(axes, dims);
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(runs.len());
    let mut means = Vec::with_capacity(runs.len());
    let mut vars = Vec::with_capacity(runs.len());
    let eps = T::from_f64(eps);
    for starts in &runs {
        let m = T::from_f64((starts.len() * hw) as f64);
        let mut sum = T::zero();
        for &o in starts {
            sum += x.data()[o..o + hw].iter().copied().sum();
        }
        let mean = sum / m;
        let mut sq = T::zero();
        for &o in starts {
            for &v in &x.data()[o..o + hw] {
                let d = v - mean;
                sq += d * d;
            }
        }
        let var = sq / m;
        let is = T::one() / (var + eps).sqrt();
        for &o in starts {
            for i in o..o + hw {
                xhat.data_mut()[i] = (x.data()[i] - mean) * is;
            }
        }
        inv_std.push(is);
        means.push(mean);
        vars.push(var);
    }
    NormCache { xhat, inv_std, mean: means, var: vars }
}

pub fn normalize_backward<T: Real>(cache: &NormCache<T>, axes: NormAxes, dy: &Tensor<T>) -> Tensor<T> {
    let dims = dy.dims4().unwrap();
    let hw = dims.2 * dims.3;
    let runs = group_runs(axes, dims);
    let mut dx = Tensor::zeros(dy.shape());
    for (g, starts) in runs.iter().enumerate() {
        let m = T::from_f64((starts.len() * hw) as f64);
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for &o in starts {
            for i in o..o + hw {
                s1 += dy.data()[i];
                s2 += dy.data()[i] * cache.xhat.data()[i];
            }
        }
        let (s1, s2) = (s1 / m, s2 / m);
        let is = cache.inv_std[g];
        for &o in starts {
            for i in o..o + hw {
                dx.data_mut()[i] = is * (dy.data()[i] - s1 - cache.xhat.data()[i] * s2);
            }
        }
    }
    dx
}

/// `(x − mean[c]) / sqrt(var[c] + eps)` with fixed statistics.
pub fn normalize_fixed<T: Real>(x: &Tensor<T>, mean: &[T], var: &[T], eps: f64) -> (Tensor<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4().unwrap();
    let hw = h * w;
    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + T::from_f64(eps)).sqrt()).collect();
    let mut y = x.clone();
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            for v in &mut y.data_mut()[off..off + hw] {
                *v = (*v - mean[ch]) * inv[ch];
            }
        }
    }
    (y, inv)
}

/// `y = gamma[c]·x + beta[c]`.
pub fn channel_affine<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().unwrap();
    let hw = h * w;
    let mut y = x.clone();
    for s in 0..n {
        for ch in 0..c {
            let (gv, bv) = (gamma.data()[ch], beta.data()[ch]);
            let off = (s * c + ch) * hw;
            for v in &mut y.data_mut()[off..off + hw] {
                *v = gv * *v + bv;
            }
        }
    }
    y
}

/// Per-channel scale of `dy` (shared by affine and fixed-stat normalization backward).
pub fn channel_scale<T: Real>(dy: &Tensor<T>, scale: &[T]) -> Tensor<T> {
    let (n, c, h, w) = dy.dims4().unwrap();
    let hw = h * w;
    let mut dx = dy.clone();
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            for v in &mut dx.data_mut()[off..off + hw] {
                *v *= scale[ch];
            }
        }
    }
    dx
}

/// Per-channel `Σ dy·x`.
pub fn channel_dot<T: Real>(dy: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dy.dims4().unwrap();
    let hw = h * w;
    let mut out = Tensor::zeros(&[c]);
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            let acc: T = dy.data()[off..off + hw].iter().zip(&x.data()[off..off + hw]).map(|(&a, &b)| a * b).sum();
            out.data_mut()[ch] += acc;
        }
    }
    out
}

/// 2×2 average pooling with stride 2 (odd trailing rows/cols dropped).
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().unwrap();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let q = T::from_f64(0.25);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut y.data_mut()[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let (iy, ix) = (2 * oy, 2 * ox);
                dst[oy * wo + ox] =
                    (src[iy * w + ix] + src[iy * w + ix + 1] + src[(iy + 1) * w + ix] + src[(iy + 1) * w + ix + 1]) * q;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(input_shape);
    let q = T::from_f64(0.25);
    for p in 0..n * c {
        let g = &dy.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let v = g[oy * wo + ox] * q;
                let (iy, ix) = (2 * oy, 2 * ox);
                dst[iy * w + ix] += v;
                dst[iy * w + ix + 1] += v;
                dst[(iy + 1) * w + ix] += v;
                dst[(iy + 1) * w + ix + 1] += v;
            }
        }
    }
    dx
}

/// Max pooling; returns output and the flat argmax index of each output cell.
pub fn max_pool<T: Real>(x: &Tensor<T>, k: usize, g: ConvGeom) -> (Tensor<T>, Vec<usize>) {
    let (n, c, h, w) = x.dims4().unwrap();
    let (ho, wo) = (g.out_size(h, k), g.out_size(w, k));
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0usize; n * c * ho * wo];
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = p * h * w + iy as usize * w + ix as usize;
                        let v = x.data()[idx];
                        if best.map_or(true, |(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.expect("pool window outside input");
                let o = p * ho * wo + oy * wo + ox;
                y.data_mut()[o] = v;
                arg[o] = idx;
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward<T: Real>(input_shape: &[usize], arg: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (o, &i) in arg.iter().enumerate() {
        dx.data_mut()[i] += dy.data()[o];
    }
    dx
}

/// `[N,C,H,W] → [N,C]` spatial mean.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().unwrap();
    let hw = h * w;
    let inv = T::from_f64(1.0 / hw as f64);
    Tensor::from_fn(&[n, c], |p| x.data()[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let hw = input_shape[2] * input_shape[3];
    let inv = T::from_f64(1.0 / hw as f64);
    Tensor::from_fn(input_shape, |i| dy.data()[i / hw] * inv)
}

/// `x[N,I]·w[O,I]ᵀ + b[O]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, i) = x.dims2().unwrap();
    let (o, i2) = w.dims2().unwrap();
    assert_eq!(i, i2, "linear width mismatch");
    let mut y = Tensor::from_fn(&[n, o], |p| b.data()[p % o]);
    T::gemm(n, i, o, x.data(), i, 1, w.data(), 1, i, y.data_mut(), o, 1, true);
    y
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, i) = x.dims2().unwrap();
    let (o, _) = w.dims2().unwrap();
    let mut dx = Tensor::zeros(&[n, i]);
    T::gemm(n, o, i, dy.data(), o, 1, w.data(), i, 1, dx.data_mut(), i, 1, false);
    let mut dw = Tensor::zeros(&[o, i]);
    T::gemm(o, n, i, dy.data(), 1, o, x.data(), i, 1, dw.data_mut(), i, 1, false);
    let db = Tensor::from_fn(&[o], |j| (0..n).map(|r| dy.data()[r * o + j]).sum());
    (dx, dw, db)
}

/// Row-wise softmax of a `[N,K]` matrix.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, k) = x.dims2().unwrap();
    let mut y = Tensor::zeros(&[n, k]);
    for r in 0..n {
        let row = &x.data()[r * k..(r + 1) * k];
        let mx = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
        let e: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
        let s: T = e.iter().copied().sum();
        for (j, ev) in e.into_iter().enumerate() {
            y.data_mut()[r * k + j] = ev / s;
        }
    }
    y
}

pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (n, k) = y.dims2().unwrap();
    let mut dx = Tensor::zeros(&[n, k]);
    for r in 0..n {
        let yr = &y.data()[r * k..(r + 1) * k];
        let gr = &dy.data()[r * k..(r + 1) * k];
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for j in 0..k {
            dx.data_mut()[r * k + j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

/// `Σ_k w[n,k]·x_k[n,…]` for K same-shaped inputs.
pub fn mix_by_sample<T: Real>(xs: &[&Tensor<T>], w: &Tensor<T>) -> Tensor<T> {
    let (n, k) = w.dims2().unwrap();
    assert_eq!(k, xs.len(), "mixture arity mismatch");
    let mut y = Tensor::zeros(xs[0].shape());
    let per = xs[0].numel() / n;
    for (j, x) in xs.iter().enumerate() {
        for s in 0..n {
            let wv = w.data()[s * k + j];
            let src = &x.data()[s * per..(s + 1) * per];
            for (d, &v) in y.data_mut()[s * per..(s + 1) * per].iter_mut().zip(src) {
                *d += wv * v;
            }
        }
    }
    y
}

/// Returns `(dx_k for each k, dw)`.
pub fn mix_by_sample_backward<T: Real>(xs: &[&Tensor<T>], w: &Tensor<T>, dy: &Tensor<T>) -> (Vec<Tensor<T>>, Tensor<T>) {
    let (n, k) = w.dims2().unwrap();
    let per = dy.numel() / n;
    let mut dw = Tensor::zeros(&[n, k]);
    let mut dxs = Vec::with_capacity(k);
    for (j, x) in xs.iter().enumerate() {
        let mut dx = Tensor::zeros(dy.shape());
        for s in 0..n {
            let wv = w.data()[s * k + j];
            let g = &dy.data()[s * per..(s + 1) * per];
            let src = &x.data()[s * per..(s + 1) * per];
            let mut acc = T::zero();
            for ((d, &gv), &xv) in dx.data_mut()[s * per..(s + 1) * per].iter_mut().zip(g).zip(src) {
                *d = wv * gv;
                acc += gv * xv;
            }
            dw.data_mut()[s * k + j] = acc;
        }
        dxs.push(dx);
    }
    (dxs, dw)
}

/// Batch-mean cross-entropy of `[N,C]` logits; returns loss and softmax probabilities.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> (T, Tensor<T>) {
    let (n, c) = logits.dims2().unwrap();
    let p = softmax_rows(logits);
    let mut loss = T::zero();
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits.data()[r * c..(r + 1) * c];
        let mx = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        loss += lse - row[y];
    }
    (loss / T::from_f64(n as f64), p)
}

pub fn cross_entropy_backward<T: Real>(p: &Tensor<T>, labels: &[usize], g: T) -> Tensor<T> {
    let (n, c) = p.dims2().unwrap();
    let s = g / T::from_f64(n as f64);
    let mut dx = p.scale(s);
    for (r, &y) in labels.iter().enumerate() {
        dx.data_mut()[r * c + y] -= s;
    }
    dx
}

/// Probability floor applied before every logarithm of a mixture weight.
pub const PROB_FLOOR: f64 = 1e-12;

fn clamp_log<T: Real>(p: T) -> (T, bool) {
    let floor = T::from_f64(PROB_FLOOR);
    if p > floor {
        (p.ln(), true)
    } else {
        (floor.ln(), false)
    }
}

/// Mean over rows of `−Σ_k p log p`.
pub fn mean_entropy<T: Real>(p: &Tensor<T>) -> T {
    let (n, _) = p.dims2().unwrap();
    let total: T = p.data().iter().map(|&v| -(v * clamp_log(v).0)).sum();
    total / T::from_f64(n as f64)
}

pub fn mean_entropy_backward<T: Real>(p: &Tensor<T>, g: T) -> Tensor<T> {
    let (n, _) = p.dims2().unwrap();
    let s = g / T::from_f64(n as f64);
    p.map(|v| {
        let (l, active) = clamp_log(v);
        if active {
            -(l + T::one()) * s
        } else {
            -l * s
        }
    })
}

fn column_mean<T: Real>(p: &Tensor<T>) -> Vec<T> {
    let (n, k) = p.dims2().unwrap();
    let inv = T::from_f64(1.0 / n as f64);
    (0..k).map(|j| (0..n).map(|r| p.data()[r * k + j]).sum::<T>() * inv).collect()
}

/// `Σ_k ŵ_k log ŵ_k` with `ŵ` the row mean.
pub fn mean_negentropy<T: Real>(p: &Tensor<T>) -> T {
    column_mean(p).into_iter().map(|m| m * clamp_log(m).0).sum()
}

pub fn mean_negentropy_backward<T: Real>(p: &Tensor<T>, g: T) -> Tensor<T> {
    let (n, k) = p.dims2().unwrap();
    let s = g / T::from_f64(n as f64);
    let col: Vec<T> = column_mean(p)
        .into_iter()
        .map(|m| {
            let (l, active) = clamp_log(m);
            if active {
                (l + T::one()) * s
            } else {
                l * s
            }
        })
        .collect();
    Tensor::from_fn(&[n, k], |i| col[i % k])
}

/// Reflect-padding by `pad` pixels on each side (no edge repeat).
pub fn reflect_pad<T: Real>(x: &[T], h: usize, w: usize, pad: usize) -> Vec<T> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let refl = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut out = Vec::with_capacity(hp * wp);
    for y in 0..hp {
        let sy = refl(y as isize - pad as isize, h);
        for xx in 0..wp {
            let sx = refl(xx as isize - pad as isize, w);
            out.push(x[sy * w + sx]);
        }
    }
    out
}
