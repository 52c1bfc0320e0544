//! Synthetic multi-domain testbed, natural-image pool and batch loading.
//!
//! Each sample is an iris-like ring pattern. The class is carried only by
//! texture parameters (ring frequency and a printed dot-matrix overlay for the
//! attack class); each domain applies one photometric/optical style to both
//! classes alike (contrast, brightness, blur, sensor noise, spectral tilt).

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{Fft2, NaturalPool};
use crate::ops::reflect_pad;
use crate::seeding;
use crate::tensor::Tensor;

/// A batch of `[N,1,H,W]` images in `[0,1]` with binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureParams {
    /// Ring cycles across the image width.
    pub base_frequency: f64,
    /// Angle of the radial striations (radians).
    pub orientation: f64,
    pub ring_amplitude: f64,
    /// Strength of the printed dot-matrix overlay.
    #[serde(default)]
    pub dot_amplitude: f64,
    /// Dot-matrix period in pixels.
    #[serde(default = "default_dot_period")]
    pub dot_period: f64,
}

fn default_dot_period() -> f64 {
    4.0
}

impl TextureParams {
    fn semantic_eq(&self, o: &Self) -> bool {
        self.base_frequency == o.base_frequency
            && self.orientation == o.orientation
            && self.ring_amplitude == o.ring_amplitude
            && self.dot_amplitude == o.dot_amplitude
            && (self.dot_amplitude == 0.0 || self.dot_period == o.dot_period)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainStyle {
    /// Gain around mid-gray.
    pub contrast: f64,
    pub brightness: f64,
    /// Gaussian blur sigma in pixels.
    pub blur_radius: f64,
    pub noise_sigma: f64,
    /// Exponent applied to the amplitude spectrum, `|k|^tilt`.
    pub frequency_tilt: f64,
    /// Per-sample relative spread of contrast and brightness within the domain.
    pub jitter: f64,
}

impl Default for DomainStyle {
    fn default() -> Self {
        Self { contrast: 1.0, brightness: 0.0, blur_radius: 0.0, noise_sigma: 0.0, frequency_tilt: 0.0, jitter: 0.0 }
    }
}

impl DomainStyle {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.05..=3.0).contains(&self.contrast)
            && (-0.5..=0.5).contains(&self.brightness)
            && (0.0..=8.0).contains(&self.blur_radius)
            && (0.0..=0.5).contains(&self.noise_sigma)
            && (-2.0..=2.0).contains(&self.frequency_tilt)
            && (0.0..=0.5).contains(&self.jitter);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "domain style out of range (contrast 0.05..3, brightness ±0.5, blur 0..8, noise 0..0.5, tilt ±2, jitter 0..0.5): {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub class0_texture: TextureParams,
    pub class1_texture: TextureParams,
    #[serde(default)]
    pub domain_style: DomainStyle,
    pub size: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class0_texture.semantic_eq(&self.class1_texture) {
            return Err(Error::Config(format!("domain {}: class textures are identical", self.name)));
        }
        if self.size < 2 {
            return Err(Error::Config(format!("domain {}: needs at least 2 samples", self.name)));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("domain {}: image_size must be >= 8", self.name)));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid domain name {:?}", self.name)));
        }
        self.domain_style.validate()
    }
}

fn bonafide_texture() -> TextureParams {
    TextureParams { base_frequency: 5.0, orientation: 0.0, ring_amplitude: 0.35, dot_amplitude: 0.0, dot_period: 4.0 }
}

fn attack_texture() -> TextureParams {
    TextureParams { base_frequency: 8.0, orientation: 0.0, ring_amplitude: 0.35, dot_amplitude: 0.12, dot_period: 4.0 }
}

/// One source domain plus three unseen target domains with distinct styles.
pub fn default_domains(image_size: usize, size: usize, seed: u64) -> Vec<DomainSpec> {
    let jitter = 0.2;
    let style = |contrast, brightness, blur_radius, noise_sigma, frequency_tilt| DomainStyle {
        contrast,
        brightness,
        blur_radius,
        noise_sigma,
        frequency_tilt,
        jitter,
    };
    let styles = [
        ("domain_a", style(1.0, 0.0, 0.0, 0.0, 0.0)),
        ("domain_b", style(0.55, 0.12, 0.5, 0.02, 0.0)),
        ("domain_c", style(1.3, -0.1, 0.0, 0.06, 0.3)),
        ("domain_d", style(0.75, 0.05, 0.0, 0.03, -0.5)),
    ];
    styles
        .into_iter()
        .enumerate()
        .map(|(i, (name, style))| DomainSpec {
            name: name.into(),
            class0_texture: bonafide_texture(),
            class1_texture: attack_texture(),
            domain_style: style,
            size,
            image_size,
            seed: seed.wrapping_mul(1000).wrapping_add(i as u64),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub domain_name: String,
}

impl LabeledDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, domain_name: impl Into<String>) -> Result<Self> {
        let (m, _, _, _) = images.dims4()?;
        if labels.len() != m {
            return Err(Error::Shape(format!("{} labels for {m} images", labels.len())));
        }
        if !(labels.contains(&0) && labels.contains(&1)) || labels.iter().any(|&l| l > 1) {
            return Err(Error::Invalid("dataset needs both binary classes".into()));
        }
        Ok(Self { images, labels, domain_name: domain_name.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn subset(&self, idx: &[usize]) -> ImageBatch {
        ImageBatch { images: self.images.select_rows(idx), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }

    pub fn all(&self) -> ImageBatch {
        ImageBatch { images: self.images.clone(), labels: self.labels.clone() }
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn render_iris(tex: &TextureParams, s: usize, rng: &mut impl Rng) -> Vec<f64> {
    let sf = s as f64;
    let cx = sf * (0.5 + rng.gen_range(-0.06..0.06));
    let cy = sf * (0.5 + rng.gen_range(-0.06..0.06));
    let r_pupil = sf * rng.gen_range(0.11..0.16);
    let r_iris = sf * rng.gen_range(0.36..0.44);
    let freq = tex.base_frequency * rng.gen_range(0.93..1.07);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let spokes = rng.gen_range(10..16) as f64;
    let spoke_phase = tex.orientation + rng.gen_range(-0.3..0.3);
    let dot_shift = (rng.gen_range(0.0..tex.dot_period), rng.gen_range(0.0..tex.dot_period));
    let iris_level = rng.gen_range(0.42..0.55);
    let mut img = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let r = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx);
            let in_iris = smoothstep(r_pupil - 1.0, r_pupil + 1.0, r) * (1.0 - smoothstep(r_iris - 1.5, r_iris + 1.5, r));
            let rings = tex.ring_amplitude * (2.0 * PI * freq * r / sf + phase).sin();
            let striae = 0.08 * (spokes * theta + spoke_phase).sin();
            let dots = tex.dot_amplitude
                * (2.0 * PI * (x as f64 + dot_shift.0) / tex.dot_period).cos()
                * (2.0 * PI * (y as f64 + dot_shift.1) / tex.dot_period).cos();
            let iris = iris_level + rings + striae + dots;
            let pupil = 0.08;
            let sclera = 0.78 - 0.15 * (r / sf);
            let v = if r < r_pupil { pupil } else { in_iris * iris + (1.0 - in_iris) * sclera };
            img[y * s + x] = v;
        }
    }
    img
}

fn gaussian_blur(img: &[f64], s: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; s * s];
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                for (j, &kv) in kernel.iter().enumerate() {
                    let o = j as isize - radius;
                    let (xx, yy) = if horizontal { (x as isize + o, y as isize) } else { (x as isize, y as isize + o) };
                    let xx = xx.clamp(0, s as isize - 1) as usize;
                    let yy = yy.clamp(0, s as isize - 1) as usize;
                    acc += kv * src[yy * s + xx];
                }
                out[y * s + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn spectral_tilt(img: &[f64], s: usize, tilt: f64, fft: &Fft2) -> Vec<f64> {
    if tilt == 0.0 {
        return img.to_vec();
    }
    let as_f32: Vec<f32> = img.iter().map(|&v| v as f32).collect();
    let spec = fft.forward(&as_f32);
    let k0 = s as f64 / 8.0;
    let shaped: Vec<Complex64> = spec
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let (ky, kx) = ((i / s) as f64, (i % s) as f64);
            let fy = ky.min(s as f64 - ky);
            let fx = kx.min(s as f64 - kx);
            let k = (fx * fx + fy * fy).sqrt();
            if k == 0.0 {
                z
            } else {
                z * (k / k0).powf(tilt)
            }
        })
        .collect();
    fft.inverse(shaped).into_iter().map(|c| c.re).collect()
}

fn apply_style(img: Vec<f64>, s: usize, style: &DomainStyle, fft: &Fft2, rng: &mut impl Rng) -> Vec<f32> {
    let img = spectral_tilt(&img, s, style.frequency_tilt, fft);
    let img = gaussian_blur(&img, s, style.blur_radius);
    let noise = Normal::new(0.0, style.noise_sigma.max(1e-12)).expect("valid sigma");
    let (mut contrast, mut brightness) = (style.contrast, style.brightness);
    if style.jitter > 0.0 {
        contrast *= 1.0 + rng.gen_range(-style.jitter..style.jitter);
        brightness += 0.25 * rng.gen_range(-style.jitter..style.jitter);
    }
    img.into_iter()
        .map(|v| {
            let mut v = (v - 0.5) * contrast + 0.5 + brightness;
            if style.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            v.clamp(0.0, 1.0) as f32
        })
        .collect()
}

/// Renders a labeled domain; deterministic in `spec.seed`.
pub fn generate_domain(spec: &DomainSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let s = spec.image_size;
    let fft = Fft2::new(s, s);
    let mut data = Vec::with_capacity(spec.size * s * s);
    let mut labels = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let label = i % 2;
        let mut rng = seeding::stream(spec.seed, "domain-sample", &[i as u64]);
        let tex = if label == 0 { &spec.class0_texture } else { &spec.class1_texture };
        let raw = render_iris(tex, s, &mut rng);
        data.extend(apply_style(raw, s, &spec.domain_style, &fft, &mut rng));
        labels.push(label);
    }
    LabeledDataset::new(Tensor::from_vec(&[spec.size, 1, s, s], data)?, labels, spec.name.clone())
}

/// Where natural images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolSource {
    #[default]
    Procedural,
    Directory(PathBuf),
}

fn procedural_scene(s: usize, fft: &Fft2, rng: &mut impl Rng) -> Tensor<f32> {
    // 1/f^β noise background
    let beta = rng.gen_range(0.8..1.4);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let white: Vec<f32> = (0..s * s).map(|_| normal.sample(rng)).collect();
    let spec = fft.forward(&white);
    let shaped: Vec<Complex64> = spec
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let (ky, kx) = ((i / s) as f64, (i % s) as f64);
            let fy = ky.min(s as f64 - ky);
            let fx = kx.min(s as f64 - kx);
            let k = (fx * fx + fy * fy).sqrt().max(1.0);
            if i == 0 {
                Complex64::default()
            } else {
                z / k.powf(beta)
            }
        })
        .collect();
    let noise: Vec<f64> = fft.inverse(shaped).into_iter().map(|c| c.re).collect();
    let sd = (noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64).sqrt().max(1e-9);
    let sf = s as f64;
    let (gx, gy) = (rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
    let base = rng.gen_range(0.25..0.75);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(2..6))
        .map(|_| (rng.gen_range(0.0..sf), rng.gen_range(0.0..sf), rng.gen_range(0.05..0.3) * sf, rng.gen_range(-0.35..0.35)))
        .collect();
    let stripe_theta: f64 = rng.gen_range(0.0..PI);
    let stripe_freq = rng.gen_range(2.0..12.0);
    let stripe_amp = rng.gen_range(0.0..0.15);
    let noise_amp = rng.gen_range(0.08..0.2);
    let mut out = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let (u, v) = (x as f64 / sf - 0.5, y as f64 / sf - 0.5);
            let mut val = base + gx * u + gy * v + noise_amp * noise[y * s + x] / sd;
            for &(bx, by, br, ba) in &blobs {
                let d2 = ((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)) / (br * br);
                val += ba * (-d2).exp();
            }
            val += stripe_amp * (2.0 * PI * stripe_freq * (u * stripe_theta.cos() + v * stripe_theta.sin())).sin();
            out.push(val.clamp(0.0, 1.0) as f32);
        }
    }
    Tensor::from_vec(&[s, s], out).unwrap()
}

fn load_gray_resized(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let gray = img.to_luma32f();
    let resized = image::imageops::resize(&gray, size as u32, size as u32, image::imageops::FilterType::Triangle);
    Tensor::from_vec(&[size, size], resized.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Reads a PNG at its native size as a grayscale `[H,W]` image in `[0,1]`.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let gray = img.to_luma32f();
    let (w, h) = gray.dimensions();
    Tensor::from_vec(&[h as usize, w as usize], gray.into_raw())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// `n` grayscale natural images at `image_size²`.
pub fn load_natural_pool(source: &PoolSource, n: usize, image_size: usize, seed: u64) -> Result<NaturalPool> {
    if n == 0 {
        return Err(Error::Invalid("natural pool size must be >= 1".into()));
    }
    let images = match source {
        PoolSource::Procedural => {
            let fft = Fft2::new(image_size, image_size);
            (0..n)
                .map(|i| procedural_scene(image_size, &fft, &mut seeding::stream(seed, "natural", &[i as u64])))
                .collect()
        }
        PoolSource::Directory(dir) => {
            let files = png_files(dir)?;
            if files.len() < n {
                return Err(Error::Invalid(format!(
                    "{} holds {} PNG images, {n} requested",
                    dir.display(),
                    files.len()
                )));
            }
            files[..n].iter().map(|p| load_gray_resized(p, image_size)).collect::<Result<Vec<_>>>()?
        }
    };
    NaturalPool::new(images)
}

/// Least-squares slope of log radial amplitude versus log frequency.
pub fn spectral_slope(image: &Tensor<f32>) -> Result<f64> {
    let (h, w) = image.dims2()?;
    let s = crate::fourier::decompose(image)?;
    let (mut sx, mut sy, mut sxx, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..h * w {
        let (ky, kx) = ((i / w) as f64, (i % w) as f64);
        let fy = ky.min(h as f64 - ky);
        let fx = kx.min(w as f64 - kx);
        let k = (fx * fx + fy * fy).sqrt();
        let a = s.amplitude.data()[i];
        if k < 1.0 || a <= 0.0 {
            continue;
        }
        let (x, y) = (k.ln(), a.ln());
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        n += 1.0;
    }
    Ok((n * sxy - sx * sy) / (n * sxx - sx * sx))
}

/// Batching over one dataset.
///
/// Training mode shuffles per epoch and random-crops after reflect padding by
/// `image_size / 16`; batches are indexed so any batch can be rebuilt from
/// `(seed, index)` alone. Evaluation mode walks the data in order once with a
/// center crop.
#[derive(Clone, Debug)]
pub struct Loader<'a> {
    ds: &'a LabeledDataset,
    batch_size: usize,
    crop: Option<usize>,
    train: bool,
    seed: u64,
    cursor: usize,
}

pub fn make_loader(
    ds: &LabeledDataset,
    batch_size: usize,
    crop: Option<usize>,
    train: bool,
    seed: u64,
) -> Result<Loader<'_>> {
    if batch_size == 0 || batch_size > ds.len() {
        return Err(Error::Invalid(format!("batch size {batch_size} not in 1..={}", ds.len())));
    }
    let size = ds.image_size();
    if let Some(c) = crop {
        let padded = size + 2 * (size / 16);
        if c == 0 || c > padded {
            return Err(Error::Invalid(format!("crop {c} larger than padded image {padded}")));
        }
        if !train && c > size {
            return Err(Error::Invalid(format!("eval crop {c} larger than image {size}")));
        }
    }
    Ok(Loader { ds, batch_size, crop, train, seed, cursor: 0 })
}

impl Loader<'_> {
    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.ds.len()).collect();
        idx.shuffle(&mut seeding::stream(self.seed, "epoch", &[epoch]));
        idx
    }

    /// Sample indices of training batch `b`.
    pub fn indices(&self, b: u64) -> Vec<usize> {
        let m = self.ds.len() as u64;
        let start = b * self.batch_size as u64;
        let mut out = Vec::with_capacity(self.batch_size);
        let mut epoch = u64::MAX;
        let mut order = Vec::new();
        for pos in start..start + self.batch_size as u64 {
            if pos / m != epoch {
                epoch = pos / m;
                order = self.epoch_order(epoch);
            }
            out.push(order[(pos % m) as usize]);
        }
        out
    }

    /// Training batch number `b` (deterministic in `(seed, b)`).
    pub fn batch_at(&self, b: u64) -> ImageBatch {
        let idx = self.indices(b);
        let mut batch = self.ds.subset(&idx);
        if let Some(c) = self.crop {
            batch.images = self.random_crop(&batch.images, c, b);
        }
        batch
    }

    fn random_crop(&self, images: &Tensor<f32>, c: usize, b: u64) -> Tensor<f32> {
        let (n, ch, h, w) = images.dims4().unwrap();
        let pad = h / 16;
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut out = Vec::with_capacity(n * ch * c * c);
        for i in 0..n {
            let mut rng = seeding::stream(self.seed, "crop", &[b, i as u64]);
            let oy = rng.gen_range(0..=hp - c);
            let ox = rng.gen_range(0..=wp - c);
            for k in 0..ch {
                let off = (i * ch + k) * h * w;
                let padded = reflect_pad(&images.data()[off..off + h * w], h, w, pad);
                for y in 0..c {
                    out.extend_from_slice(&padded[(oy + y) * wp + ox..(oy + y) * wp + ox + c]);
                }
            }
        }
        Tensor::from_vec(&[n, ch, c, c], out).unwrap()
    }

    fn center_crop(images: &Tensor<f32>, c: usize) -> Tensor<f32> {
        let (n, ch, h, w) = images.dims4().unwrap();
        if c == h && c == w {
            return images.clone();
        }
        let (oy, ox) = ((h - c) / 2, (w - c) / 2);
        let mut out = Vec::with_capacity(n * ch * c * c);
        for p in 0..n * ch {
            for y in 0..c {
                let row = p * h * w + (oy + y) * w + ox;
                out.extend_from_slice(&images.data()[row..row + c]);
            }
        }
        Tensor::from_vec(&[n, ch, c, c], out).unwrap()
    }
}

impl Iterator for Loader<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        if self.train {
            let b = self.batch_at(self.cursor as u64);
            self.cursor += 1;
            return Some(b);
        }
        if self.cursor >= self.ds.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.ds.len());
        let idx: Vec<usize> = (self.cursor..end).collect();
        self.cursor = end;
        let mut batch = self.ds.subset(&idx);
        if let Some(c) = self.crop {
            batch.images = Self::center_crop(&batch.images, c);
        }
        Some(batch)
    }
}

/// One line of a dataset index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: String,
    pub label: usize,
    pub domain: String,
}

pub const INDEX_FILE: &str = "index.json";

fn save_png(path: &Path, plane: &[f32], size: usize) -> Result<()> {
    let bytes: Vec<u8> = plane.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(size as u32, size as u32, bytes).expect("buffer matches size");
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes PNG files under `root/<domain>/` and returns their index entries.
pub fn save_domain(ds: &LabeledDataset, root: &Path) -> Result<Vec<IndexEntry>> {
    let dir = root.join(&ds.domain_name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let size = ds.image_size();
    let mut entries = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let rel = format!("{}/{i:05}.png", ds.domain_name);
        save_png(&root.join(&rel), ds.images.row(i), size)?;
        entries.push(IndexEntry { path: rel, label: ds.labels[i], domain: ds.domain_name.clone() });
    }
    Ok(entries)
}

pub fn write_index(root: &Path, entries: &[IndexEntry]) -> Result<()> {
    let path = root.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(entries)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes a grayscale `[H,W]` image as 8-bit PNG.
pub fn write_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = image.dims2()?;
    if h != w {
        return Err(Error::Shape("only square previews are supported".into()));
    }
    save_png(path, image.data(), h)
}

/// Loads every domain listed in `root/index.json`, in first-appearance order.
pub fn load_index(root: &Path, image_size: usize) -> Result<Vec<LabeledDataset>> {
    let path = root.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries: Vec<IndexEntry> = serde_json::from_str(&text)?;
    let mut order: Vec<String> = Vec::new();
    for e in &entries {
        if !order.contains(&e.domain) {
            order.push(e.domain.clone());
        }
    }
    order
        .into_iter()
        .map(|d| {
            let mine: Vec<&IndexEntry> = entries.iter().filter(|e| e.domain == d).collect();
            let mut data = Vec::with_capacity(mine.len() * image_size * image_size);
            for e in &mine {
                data.extend_from_slice(load_gray_resized(&root.join(&e.path), image_size)?.data());
            }
            let images = Tensor::from_vec(&[mine.len(), 1, image_size, image_size], data)?;
            LabeledDataset::new(images, mine.iter().map(|e| e.label).collect(), d)
        })
        .collect()
}
