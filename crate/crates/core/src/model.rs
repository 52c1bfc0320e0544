//! Feature extractor, classifier and whole-network forward pass.

use std::path::PathBuf;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamic::{self, DynamicBlockParams, DynamicConfig, DynamicVars, DynamicWeights};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::init;
use crate::ops::{ConvGeom, NormAxes};
use crate::params::{BoundParams, ParamGroup, ParamPartition, Partition};
use crate::real::Real;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Resnet18,
    TinyCnn,
}

/// How a pretrained RGB stem convolution is adapted to grayscale input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GrayscaleAdapt {
    /// Keep the freshly initialized 1-channel stem.
    Reinit,
    /// Average the pretrained kernel over its input channels.
    #[default]
    ChannelAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub arch: Arch,
    pub in_channels: usize,
    pub feature_channels: usize,
    pub pretrained_path: Option<PathBuf>,
    pub image_size: usize,
    pub grayscale_adapt: GrayscaleAdapt,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            arch: Arch::TinyCnn,
            in_channels: 1,
            feature_channels: 64,
            pretrained_path: None,
            image_size: 64,
            grayscale_adapt: GrayscaleAdapt::default(),
        }
    }
}

impl BackboneConfig {
    /// Total downsampling factor of the extractor.
    pub fn stride(&self) -> usize {
        match self.arch {
            Arch::TinyCnn => 8,
            Arch::Resnet18 => 32,
        }
    }

    /// Channel widths of the three tiny_cnn stages.
    pub fn tiny_widths(&self) -> [usize; 3] {
        let c = self.feature_channels;
        [(c / 2).max(1), c, c]
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / self.stride()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_channels == 0 {
            return Err(Error::Config("feature_channels must be positive".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.arch == Arch::Resnet18 && self.feature_channels != 512 {
            return Err(Error::Config(format!(
                "resnet18 produces 512 feature channels, config says {}",
                self.feature_channels
            )));
        }
        let s = self.stride();
        if self.image_size < 8 || self.image_size % s != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be >= 8 and divisible by the backbone stride {s}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Everything needed to build and run a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    /// When false the classifier sits directly on the extractor output.
    pub dynamic_block: bool,
    pub dynamic: DynamicConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { backbone: BackboneConfig::default(), dynamic_block: true, dynamic: DynamicConfig::default() }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.dynamic_block {
            self.dynamic.validate(self.backbone.feature_channels)?;
        }
        Ok(())
    }
}

pub type Buffers = IndexMap<String, Tensor<f32>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; the forward reports them for the running averages.
    Train,
    /// Running statistics.
    Eval,
}

/// Batch statistics of one batch-norm layer.
#[derive(Clone, Debug)]
pub struct NormStat {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Handles into the forward graph.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub features: Var,
    pub block: Var,
    pub weights: Option<Var>,
    pub logits: Var,
    pub stats: Vec<NormStat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamPartition<f32>,
    pub buffers: Buffers,
}

fn conv_param(params: &mut ParamPartition<f32>, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<()> {
    params.insert(Partition::Extractor, format!("{name}.weight"), init::kaiming_normal(shape, rng))
}

fn bn_param(params: &mut ParamPartition<f32>, buffers: &mut Buffers, name: &str, c: usize) -> Result<()> {
    params.insert(Partition::Extractor, format!("{name}.weight"), Tensor::full(&[c], 1.0))?;
    params.insert(Partition::Extractor, format!("{name}.bias"), Tensor::zeros(&[c]))?;
    buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
    buffers.insert(format!("{name}.running_var"), Tensor::full(&[c], 1.0));
    Ok(())
}

const RESNET_WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// Builds freshly initialized parameters; deterministic in `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamPartition::default();
    let mut buffers = Buffers::new();
    let bb = &spec.backbone;
    match bb.arch {
        Arch::TinyCnn => {
            let mut cin = bb.in_channels;
            for (i, w) in bb.tiny_widths().into_iter().enumerate() {
                conv_param(&mut params, &format!("extractor.block{i}.conv"), &[w, cin, 3, 3], &mut rng)?;
                bn_param(&mut params, &mut buffers, &format!("extractor.block{i}.bn"), w)?;
                cin = w;
            }
        }
        Arch::Resnet18 => {
            conv_param(&mut params, "extractor.stem.conv", &[64, bb.in_channels, 7, 7], &mut rng)?;
            bn_param(&mut params, &mut buffers, "extractor.stem.bn", 64)?;
            let mut cin = 64;
            for (li, &w) in RESNET_WIDTHS.iter().enumerate() {
                for b in 0..2 {
                    let p = format!("extractor.layer{}.{b}", li + 1);
                    conv_param(&mut params, &format!("{p}.conv1"), &[w, cin, 3, 3], &mut rng)?;
                    bn_param(&mut params, &mut buffers, &format!("{p}.bn1"), w)?;
                    conv_param(&mut params, &format!("{p}.conv2"), &[w, w, 3, 3], &mut rng)?;
                    bn_param(&mut params, &mut buffers, &format!("{p}.bn2"), w)?;
                    if cin != w {
                        conv_param(&mut params, &format!("{p}.downsample.conv"), &[w, cin, 1, 1], &mut rng)?;
                        bn_param(&mut params, &mut buffers, &format!("{p}.downsample.bn"), w)?;
                    }
                    cin = w;
                }
            }
        }
    }
    let c = bb.feature_channels;
    if spec.dynamic_block {
        DynamicBlockParams::<f32>::init(c, &spec.dynamic, &mut rng)?.insert_into(&mut params)?;
    }
    params.insert(Partition::Classifier, "classifier.fc.weight", init::linear_uniform(&[NUM_CLASSES, c], &mut rng))?;
    params.insert(Partition::Classifier, "classifier.fc.bias", init::linear_uniform_bias(NUM_CLASSES, c, &mut rng))?;
    Ok(Model { spec: spec.clone(), params, buffers })
}

struct Ctx<'a> {
    bound: &'a BoundParams,
    buffers: &'a Buffers,
    mode: NormMode,
    stats: Vec<NormStat>,
}

impl Ctx<'_> {
    fn conv<T: Real>(&self, g: &mut Graph<T>, x: Var, name: &str, geom: ConvGeom) -> Result<Var> {
        Ok(g.conv(x, self.bound.var(&format!("{name}.weight"))?, geom))
    }

    fn bn<T: Real>(&mut self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let gamma = self.bound.var(&format!("{name}.weight"))?;
        let beta = self.bound.var(&format!("{name}.bias"))?;
        let normed = match self.mode {
            NormMode::Train => {
                let (n, c, h, w) = g.value(x).dims4()?;
                let (y, mean, var) = g.normalize(x, NormAxes::Batch, BN_EPS);
                let _ = c;
                self.stats.push(NormStat {
                    name: name.to_string(),
                    mean: mean.iter().map(|v| v.to_f64()).collect(),
                    var: var.iter().map(|v| v.to_f64()).collect(),
                    count: n * h * w,
                });
                y
            }
            NormMode::Eval => {
                let buf = |suffix: &str| -> Result<Vec<T>> {
                    let key = format!("{name}.{suffix}");
                    let t = self.buffers.get(&key).ok_or_else(|| Error::Invalid(format!("missing buffer {key}")))?;
                    Ok(t.data().iter().map(|&v| T::from_f64(v as f64)).collect())
                };
                let (mean, var) = (buf("running_mean")?, buf("running_var")?);
                g.normalize_fixed(x, &mean, &var, BN_EPS)
            }
        };
        Ok(g.channel_affine(normed, gamma, beta))
    }

    fn basic_block<T: Real>(&mut self, g: &mut Graph<T>, x: Var, p: &str, stride: usize) -> Result<Var> {
        let geom = ConvGeom { stride, pad: 1 };
        let y = self.conv(g, x, &format!("{p}.conv1"), geom)?;
        let y = self.bn(g, y, &format!("{p}.bn1"))?;
        let y = g.relu(y);
        let y = self.conv(g, y, &format!("{p}.conv2"), ConvGeom::SAME3)?;
        let y = self.bn(g, y, &format!("{p}.bn2"))?;
        let shortcut = if self.bound.has(&format!("{p}.downsample.conv.weight")) {
            let s = self.conv(g, x, &format!("{p}.downsample.conv"), ConvGeom { stride, pad: 0 })?;
            self.bn(g, s, &format!("{p}.downsample.bn"))?
        } else {
            x
        };
        let y = g.add(y, shortcut);
        Ok(g.relu(y))
    }

    fn extractor<T: Real>(&mut self, g: &mut Graph<T>, spec: &BackboneConfig, x: Var) -> Result<Var> {
        match spec.arch {
            Arch::TinyCnn => {
                let mut h = x;
                for i in 0..3 {
                    h = self.conv(g, h, &format!("extractor.block{i}.conv"), ConvGeom::SAME3)?;
                    h = self.bn(g, h, &format!("extractor.block{i}.bn"))?;
                    h = g.relu(h);
                    h = g.avg_pool2(h);
                }
                Ok(h)
            }
            Arch::Resnet18 => {
                let h = self.conv(g, x, "extractor.stem.conv", ConvGeom { stride: 2, pad: 3 })?;
                let h = self.bn(g, h, "extractor.stem.bn")?;
                let h = g.relu(h);
                let mut h = g.max_pool(h, 3, ConvGeom { stride: 2, pad: 1 });
                for li in 1..=4 {
                    for b in 0..2 {
                        let stride = if li > 1 && b == 0 { 2 } else { 1 };
                        h = self.basic_block(g, h, &format!("extractor.layer{li}.{b}"), stride)?;
                    }
                }
                Ok(h)
            }
        }
    }
}

fn check_images<T: Real>(spec: &BackboneConfig, images: &Tensor<T>) -> Result<()> {
    let (_, c, h, w) = images.dims4()?;
    if c != spec.in_channels || h != spec.image_size || w != spec.image_size {
        return Err(Error::Shape(format!(
            "batch is {c}x{h}x{w}, model expects {}x{}x{}",
            spec.in_channels, spec.image_size, spec.image_size
        )));
    }
    Ok(())
}

/// Builds `C(D(F(x)))` on the graph.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    bound: &BoundParams,
    buffers: &Buffers,
    images: Var,
    mode: NormMode,
) -> Result<ForwardOut> {
    check_images(&spec.backbone, g.value(images))?;
    let mut ctx = Ctx { bound, buffers, mode, stats: Vec::new() };
    let features = ctx.extractor(g, &spec.backbone, images)?;
    let (block, weights) = if spec.dynamic_block {
        let dv = DynamicVars::from_bound(bound, &spec.dynamic)?;
        let (y, w) = dynamic::dynamic_block_graph(g, features, &dv);
        (y, Some(w))
    } else {
        (features, None)
    };
    let logits = classifier_graph(g, block, bound)?;
    Ok(ForwardOut { features, block, weights, logits, stats: ctx.stats })
}

fn classifier_graph<T: Real>(g: &mut Graph<T>, x: Var, bound: &BoundParams) -> Result<Var> {
    let pooled = g.global_avg_pool(x);
    let w = bound.var("classifier.fc.weight")?;
    let b = bound.var("classifier.fc.bias")?;
    Ok(g.linear(pooled, w, b))
}

/// Global average pool followed by the affine layer in θ_C.
pub fn classify<T: Real>(feature: &Tensor<T>, theta_c: &ParamGroup<T>) -> Result<Tensor<T>> {
    let (_, c, _, _) = feature.dims4()?;
    let w = theta_c.get("classifier.fc.weight").ok_or_else(|| Error::Invalid("missing classifier weight".into()))?;
    let b = theta_c.get("classifier.fc.bias").ok_or_else(|| Error::Invalid("missing classifier bias".into()))?;
    if w.shape()[1] != c {
        return Err(Error::Shape(format!("classifier expects {} channels, feature has {c}", w.shape()[1])));
    }
    let pooled = crate::ops::global_avg_pool(feature);
    Ok(crate::ops::linear(&pooled, w, b))
}

/// Probability of the attack class from `[N,2]` logits.
pub fn attack_scores<T: Real>(logits: &Tensor<T>) -> Vec<f64> {
    let p = crate::ops::softmax_rows(logits);
    (0..p.shape()[0]).map(|i| p.data()[i * NUM_CLASSES + 1].to_f64()).collect()
}

const EVAL_CHUNK: usize = 64;

/// Outputs of an inference pass, concatenated over chunks.
#[derive(Clone, Debug)]
pub struct Inference {
    pub features: Tensor<f32>,
    pub logits: Tensor<f32>,
    pub weights: Option<DynamicWeights<f32>>,
}

impl Model {
    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Runs the network with running statistics, in chunks.
    pub fn infer(&self, images: &Tensor<f32>) -> Result<Inference> {
        check_images(&self.spec.backbone, images)?;
        let n = images.shape()[0];
        let (mut feats, mut logits, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        let (mut fshape, mut k) = (vec![], 0);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g);
            let x = g.leaf(images.select_rows(&idx));
            let out = forward_graph(&mut g, &self.spec, &bound, &self.buffers, x, NormMode::Eval)?;
            fshape = g.value(out.features).shape().to_vec();
            feats.extend_from_slice(g.value(out.features).data());
            logits.extend_from_slice(g.value(out.logits).data());
            if let Some(w) = out.weights {
                k = g.value(w).shape()[1];
                weights.extend_from_slice(g.value(w).data());
            }
        }
        fshape[0] = n;
        Ok(Inference {
            features: Tensor::from_vec(&fshape, feats)?,
            logits: Tensor::from_vec(&[n, NUM_CLASSES], logits)?,
            weights: if k > 0 { Some(DynamicWeights::new(Tensor::from_vec(&[n, k], weights)?)?) } else { None },
        })
    }

    pub fn extract_features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.infer(images)?.features)
    }

    pub fn scores(&self, images: &Tensor<f32>) -> Result<Vec<f64>> {
        Ok(attack_scores(&self.infer(images)?.logits))
    }

    /// Folds batch statistics into the running averages (unbiased variance).
    pub fn absorb_stats(&mut self, stats: &[NormStat]) {
        let m = BN_MOMENTUM;
        for s in stats {
            let unbias = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            if let Some(rm) = self.buffers.get_mut(&format!("{}.running_mean", s.name)) {
                for (r, &v) in rm.data_mut().iter_mut().zip(&s.mean) {
                    *r = ((1.0 - m) * *r as f64 + m * v) as f32;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&format!("{}.running_var", s.name)) {
                for (r, &v) in rv.data_mut().iter_mut().zip(&s.var) {
                    *r = ((1.0 - m) * *r as f64 + m * v * unbias) as f32;
                }
            }
        }
    }

    /// Copies matching extractor tensors from pretrained weights.
    ///
    /// A 3-channel stem kernel feeding a 1-channel model is averaged over its
    /// input channels or left at its fresh initialization, per the config.
    /// Returns the number of tensors copied.
    pub fn load_pretrained_extractor(
        &mut self,
        tensors: &IndexMap<String, Tensor<f32>>,
        buffers: &Buffers,
    ) -> Result<usize> {
        let mut copied = 0;
        let adapt = self.spec.backbone.grayscale_adapt;
        for (name, dst) in self.params.theta_f.iter_mut() {
            let Some(src) = tensors.get(name) else { continue };
            if src.shape() == dst.shape() {
                *dst = src.clone();
                copied += 1;
            } else if src.rank() == 4
                && dst.rank() == 4
                && src.shape()[0] == dst.shape()[0]
                && src.shape()[2..] == dst.shape()[2..]
                && dst.shape()[1] == 1
            {
                if adapt == GrayscaleAdapt::ChannelAverage {
                    let (co, ci, kh, kw) = src.dims4()?;
                    let plane = kh * kw;
                    *dst = Tensor::from_fn(dst.shape(), |i| {
                        let (o, r) = (i / plane, i % plane);
                        (0..ci).map(|c| src.data()[(o * ci + c) * plane + r]).sum::<f32>() / ci as f32
                    });
                    let _ = co;
                    copied += 1;
                }
            } else {
                return Err(Error::Checkpoint(format!(
                    "pretrained {name} has shape {:?}, model has {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
        }
        for (name, dst) in self.buffers.iter_mut() {
            if let Some(src) = buffers.get(name) {
                if src.shape() == dst.shape() {
                    *dst = src.clone();
                }
            }
        }
        Ok(copied)
    }
}
