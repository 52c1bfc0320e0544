//! Amplitude-mixup perturbation in the 2-D Fourier domain.
//!
//! A source image keeps its phase spectrum while its amplitude spectrum is
//! linearly interpolated towards that of a natural image:
//! `Â = (1−λ)·A(x_s) + λ·A(x_n)` with `λ ~ U(0, η)`.

use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::Tensor;

/// Full (unshifted) amplitude and phase of one image channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumPair {
    pub amplitude: Tensor<f64>,
    pub phase: Tensor<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    #[default]
    PerImage,
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    /// Upper bound of the mixing coefficient.
    pub eta: f64,
    pub lambda_mode: LambdaMode,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self { eta: 1.0, lambda_mode: LambdaMode::PerImage, seed: 0 }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

/// Forward/inverse plans for one image size.
pub struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let (row, col) = if inverse { (&self.row_inv, &self.col_inv) } else { (&self.row_fwd, &self.col_fwd) };
        row.process(buf);
        let mut column = vec![Complex64::default(); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
        if inverse {
            let s = 1.0 / (h * w) as f64;
            buf.iter_mut().for_each(|c| *c *= s);
        }
    }

    pub fn forward(&self, image: &[f32]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = image.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
        self.transform(&mut buf, false);
        buf
    }

    pub fn inverse(&self, mut spectrum: Vec<Complex64>) -> Vec<Complex64> {
        self.transform(&mut spectrum, true);
        spectrum
    }
}

fn check_image(image: &Tensor<f32>) -> Result<(usize, usize)> {
    let (h, w) = image.dims2()?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("image must be at least 2x2, got {h}x{w}")));
    }
    Ok((h, w))
}

fn split(spec: &[Complex64], h: usize, w: usize) -> SpectrumPair {
    SpectrumPair {
        amplitude: Tensor::from_fn(&[h, w], |i| spec[i].norm()),
        phase: Tensor::from_fn(&[h, w], |i| spec[i].arg()),
    }
}

/// Amplitude `|FFT2(x)|` and phase `arg FFT2(x)` of an `[H,W]` image.
pub fn decompose(image: &Tensor<f32>) -> Result<SpectrumPair> {
    let (h, w) = check_image(image)?;
    let fft = Fft2::new(h, w);
    Ok(split(&fft.forward(image.data()), h, w))
}

/// Pointwise `(1−λ)·a_src + λ·a_nat`.
pub fn mix_amplitude(a_src: &Tensor<f64>, a_nat: &Tensor<f64>, lambda: f64) -> Result<Tensor<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if lambda == 0.0 {
        a_src.same_shape(a_nat)?;
        return Ok(a_src.clone());
    }
    if lambda == 1.0 {
        a_src.same_shape(a_nat)?;
        return Ok(a_nat.clone());
    }
    a_src.zip_map(a_nat, |s, n| (1.0 - lambda) * s + lambda * n)
}

/// Inverse transform of `amplitude·e^{i·phase}`; returns the real part and the
/// largest discarded imaginary magnitude, before clipping.
pub fn recompose_raw(amplitude: &Tensor<f64>, phase: &Tensor<f64>) -> Result<(Tensor<f64>, f64)> {
    amplitude.same_shape(phase)?;
    let (h, w) = amplitude.dims2()?;
    let spec: Vec<Complex64> = amplitude
        .data()
        .iter()
        .zip(phase.data())
        .map(|(&a, &p)| Complex64::from_polar(a, p))
        .collect();
    let out = Fft2::new(h, w).inverse(spec);
    let residual = out.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    Ok((Tensor::from_fn(&[h, w], |i| out[i].re), residual))
}

/// Inverse transform clipped to the pixel range `[0, 1]`.
pub fn recompose(amplitude: &Tensor<f64>, phase: &Tensor<f64>) -> Result<Tensor<f32>> {
    let (re, _) = recompose_raw(amplitude, phase)?;
    Ok(Tensor::from_fn(re.shape(), |i| re.data()[i].clamp(0.0, 1.0) as f32))
}

/// Natural images with their amplitude spectra precomputed.
#[derive(Clone, Debug)]
pub struct NaturalPool {
    images: Vec<Tensor<f32>>,
    amplitudes: Vec<Tensor<f64>>,
}

impl NaturalPool {
    /// Each image is `[H,W]` grayscale in `[0,1]`, all the same size.
    pub fn new(images: Vec<Tensor<f32>>) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Invalid("natural pool is empty".into()))?;
        let (h, w) = check_image(first)?;
        let fft = Fft2::new(h, w);
        let mut amplitudes = Vec::with_capacity(images.len());
        for im in &images {
            if im.shape() != [h, w] {
                return Err(Error::Shape(format!("natural image {:?} differs from {h}x{w}", im.shape())));
            }
            amplitudes.push(split(&fft.forward(im.data()), h, w).amplitude);
        }
        Ok(Self { images, amplitudes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor<f32> {
        &self.images[i]
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    pub fn amplitude(&self, i: usize) -> &Tensor<f64> {
        &self.amplitudes[i]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.images[0].shape()[0], self.images[0].shape()[1])
    }
}

/// What was drawn for one perturbed image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbDraw {
    pub partner: usize,
    pub lambda: f64,
}

/// Maps a source batch to the perturbed domain; labels pass through.
///
/// Draws for image `i` come from a stream keyed by `(cfg.seed, step, i)`, so
/// results do not depend on batch scheduling.
pub fn perturb_batch(
    src: &ImageBatch,
    pool: &NaturalPool,
    cfg: &PerturbConfig,
    step: u64,
) -> Result<(ImageBatch, Vec<PerturbDraw>)> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Invalid("natural pool is empty".into()));
    }
    let (n, c, h, w) = src.images.dims4()?;
    if pool.size() != (h, w) {
        return Err(Error::Shape(format!("natural pool is {:?}, batch images are {h}x{w}", pool.size())));
    }
    let fft = Fft2::new(h, w);
    let batch_lambda = {
        let mut rng = seeding::stream(cfg.seed, "perturb-batch", &[step]);
        rng.gen::<f64>() * cfg.eta
    };
    let plane = h * w;
    let mut out = Tensor::zeros(src.images.shape());
    let mut draws = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seeding::stream(cfg.seed, "perturb", &[step, i as u64]);
        let partner = rng.gen_range(0..pool.len());
        let lambda = match cfg.lambda_mode {
            LambdaMode::PerImage => rng.gen::<f64>() * cfg.eta,
            LambdaMode::PerBatch => batch_lambda,
        };
        draws.push(PerturbDraw { partner, lambda });
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            let x = &src.images.data()[off..off + plane];
            let spec = fft.forward(x);
            let a_nat = pool.amplitude(partner).data();
            let mixed: Vec<Complex64> = spec
                .iter()
                .zip(a_nat)
                .map(|(z, &an)| {
                    let amp = (1.0 - lambda) * z.norm() + lambda * an;
                    Complex64::from_polar(amp, z.arg())
                })
                .collect();
            let back = fft.inverse(mixed);
            for (d, v) in out.data_mut()[off..off + plane].iter_mut().zip(back) {
                *d = v.re.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok((ImageBatch { images: out, labels: src.labels.clone() }, draws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w], |_| rng.gen::<f32>())
    }

    #[test]
    fn constant_image_has_only_dc() {
        let img = Tensor::full(&[4, 6], 0.5f32);
        let s = decompose(&img).unwrap();
        assert!((s.amplitude.data()[0] - 0.5 * 24.0).abs() < 1e-12);
        assert!(s.phase.data()[0].abs() < 1e-12);
        assert!(s.amplitude.data()[1..].iter().all(|&a| a < 1e-12));
    }

    #[test]
    fn impulse_has_flat_amplitude() {
        let mut img = Tensor::zeros(&[8, 8]);
        img.data_mut()[0] = 1.0f32;
        let s = decompose(&img).unwrap();
        assert!(s.amplitude.data().iter().all(|&a| (a - 1.0).abs() < 1e-12));
    }

    #[test]
    fn round_trip_identity() {
        for seed in 0..5 {
            let img = random_image(10, 12, seed);
            let s = decompose(&img).unwrap();
            let back = recompose(&s.amplitude, &s.phase).unwrap();
            assert!(back.max_abs_diff(&img) < 1e-5);
        }
        assert!(decompose(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn mixing_endpoints_and_midpoint() {
        let a = Tensor::full(&[3, 3], 2.0);
        let b = Tensor::full(&[3, 3], 4.0);
        assert_eq!(mix_amplitude(&a, &b, 0.0).unwrap(), a);
        assert_eq!(mix_amplitude(&a, &b, 1.0).unwrap(), b);
        assert!(mix_amplitude(&a, &b, 0.5).unwrap().data().iter().all(|&v| v == 3.0));
        assert!(mix_amplitude(&a, &Tensor::zeros(&[2, 2]), 0.5).is_err());
        assert!(mix_amplitude(&a, &b, 1.5).is_err());
    }

    #[test]
    fn swapped_phase_with_zero_lambda_gives_source() {
        let (a, b) = (random_image(8, 8, 1), random_image(8, 8, 2));
        let (sa, sb) = (decompose(&a).unwrap(), decompose(&b).unwrap());
        let mixed = mix_amplitude(&sa.amplitude, &sb.amplitude, 0.0).unwrap();
        let back = recompose(&mixed, &sa.phase).unwrap();
        assert!(back.max_abs_diff(&a) < 1e-5);
    }

    #[test]
    fn mixed_spectrum_stays_real() {
        let (a, b) = (random_image(16, 16, 3), random_image(16, 16, 4));
        let (sa, sb) = (decompose(&a).unwrap(), decompose(&b).unwrap());
        for lambda in [0.1, 0.5, 0.9] {
            let mixed = mix_amplitude(&sa.amplitude, &sb.amplitude, lambda).unwrap();
            let (_, residual) = recompose_raw(&mixed, &sa.phase).unwrap();
            assert!(residual < 1e-4, "imaginary residual {residual}");
        }
    }

    fn batch(n: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch {
            images: Tensor::from_fn(&[n, 1, 16, 16], |_| rng.gen::<f32>()),
            labels: (0..n).map(|i| i % 2).collect(),
        }
    }

    fn pool() -> NaturalPool {
        NaturalPool::new((0..4).map(|s| random_image(16, 16, 100 + s)).collect()).unwrap()
    }

    #[test]
    fn zero_eta_is_identity() {
        let b = batch(4, 5);
        let cfg = PerturbConfig { eta: 0.0, ..Default::default() };
        let (out, draws) = perturb_batch(&b, &pool(), &cfg, 0).unwrap();
        assert!(out.images.max_abs_diff(&b.images) < 1e-5);
        assert!(draws.iter().all(|d| d.lambda == 0.0));
        assert_eq!(out.labels, b.labels);
    }

    #[test]
    fn perturbation_is_deterministic() {
        let b = batch(4, 6);
        let cfg = PerturbConfig::default();
        let (x, dx) = perturb_batch(&b, &pool(), &cfg, 3).unwrap();
        let (y, dy) = perturb_batch(&b, &pool(), &cfg, 3).unwrap();
        assert_eq!(x.images, y.images);
        assert_eq!(dx, dy);
        let (z, _) = perturb_batch(&b, &pool(), &cfg, 4).unwrap();
        assert_ne!(x.images, z.images);
        assert!(x.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn lambda_draws_are_uniform() {
        let b = batch(64, 7);
        let (_, draws) = perturb_batch(&b, &pool(), &PerturbConfig::default(), 0).unwrap();
        let mean: f64 = draws.iter().map(|d| d.lambda).sum::<f64>() / 64.0;
        assert!((mean - 0.5).abs() < 0.1, "mean lambda {mean}");
        let cfg = PerturbConfig { lambda_mode: LambdaMode::PerBatch, ..Default::default() };
        let (_, draws) = perturb_batch(&b, &pool(), &cfg, 0).unwrap();
        assert!(draws.iter().all(|d| d.lambda == draws[0].lambda));
    }

    #[test]
    fn empty_pool_rejected() {
        assert!(NaturalPool::new(vec![]).is_err());
        assert!(PerturbConfig { eta: 1.5, ..Default::default() }.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn mixed_amplitude_between_endpoints(l1 in 0.0f64..1.0, l2 in 0.0f64..1.0, seed in 0u64..50) {
            let (a, b) = (random_image(6, 6, seed), random_image(6, 6, seed + 1000));
            let (sa, sb) = (decompose(&a).unwrap().amplitude, decompose(&b).unwrap().amplitude);
            let (lo, hi) = if l1 < l2 { (l1, l2) } else { (l2, l1) };
            let m1 = mix_amplitude(&sa, &sb, lo).unwrap();
            let m2 = mix_amplitude(&sa, &sb, hi).unwrap();
            for i in 0..36 {
                let (s, n) = (sa.data()[i], sb.data()[i]);
                let (mn, mx) = (s.min(n) - 1e-12, s.max(n) + 1e-12);
                proptest::prop_assert!(m1.data()[i] >= mn && m1.data()[i] <= mx);
                // monotone in lambda: moving lambda up moves towards the natural amplitude
                proptest::prop_assert!((m2.data()[i] - s).abs() + 1e-12 >= (m1.data()[i] - s).abs());
                proptest::prop_assert!(m1.data()[i] >= 0.0);
            }
        }
    }
}
