//! Checkpoints: `manifest.json` plus one raw little-endian `f32` blob.
//!
//! The manifest lists every tensor (parameters, normalization buffers and
//! optimizer moments) with its shape and byte range; the ranges tile the blob
//! exactly. Data order, perturbation draws and crops are pure functions of
//! `(seed, step)`, so the step counter and seeds are the whole RNG state.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Buffers, Model, ModelSpec};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerState};
use crate::params::{ParamPartition, Partition};
use crate::tensor::Tensor;
use crate::train::Trainer;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    OptFirst,
    OptSecond,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Partition>,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub data_seed: u64,
    pub perturb_seed: u64,
    /// Index of the next training batch.
    pub next_batch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub config: OptimizerConfig,
    pub lr: f64,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: usize,
    pub rng_state: RngState,
    pub config_hash: String,
    pub arch_hash: String,
    pub model: ModelSpec,
    pub optimizer: OptimizerRecord,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamPartition<f32>,
    pub buffers: Buffers,
    pub optimizer: OptimizerState<f32>,
}

fn push(blob: &mut Vec<u8>, entries: &mut Vec<TensorEntry>, name: &str, kind: TensorKind, p: Option<Partition>, t: &Tensor<f32>) {
    let offset = blob.len();
    for v in t.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    entries.push(TensorEntry {
        name: name.to_string(),
        kind,
        partition: p,
        shape: t.shape().to_vec(),
        dtype: "f32".into(),
        offset,
        nbytes: blob.len() - offset,
    });
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, perturb_seed: u64, data_seed: u64, config_hash: &str, arch_hash: &str) -> Self {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            step: trainer.step,
            rng_state: RngState { data_seed, perturb_seed, next_batch: 2 * trainer.step as u64 },
            config_hash: config_hash.into(),
            arch_hash: arch_hash.into(),
            model: trainer.model.spec.clone(),
            optimizer: OptimizerRecord {
                config: trainer.optimizer.config,
                lr: trainer.optimizer.lr,
                t: trainer.optimizer.state.t,
            },
            tensors: Vec::new(),
        };
        Self {
            manifest,
            params: trainer.model.params.clone(),
            buffers: trainer.model.buffers.clone(),
            optimizer: trainer.optimizer.state.clone(),
        }
    }

    fn serialize(&self) -> (Manifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (p, n, t) in self.params.iter() {
            push(&mut blob, &mut entries, n, TensorKind::Param, Some(p), t);
        }
        for (n, t) in &self.buffers {
            push(&mut blob, &mut entries, n, TensorKind::Buffer, None, t);
        }
        for (kind, state) in [(TensorKind::OptFirst, &self.optimizer.first), (TensorKind::OptSecond, &self.optimizer.second)] {
            if let Some(s) = state {
                for (p, n, t) in s.iter() {
                    push(&mut blob, &mut entries, n, kind, Some(p), t);
                }
            }
        }
        let mut manifest = self.manifest.clone();
        manifest.tensors = entries;
        (manifest, blob)
    }

    /// Writes into `dir`, replacing it atomically.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let (manifest, blob) = self.serialize();
        let tmp = sibling(dir, ".tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mpath = tmp.join(MANIFEST_FILE);
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
        let bpath = tmp.join(BLOB_FILE);
        fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
        }
        let bpath = dir.join(BLOB_FILE);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        check_tiling(&manifest.tensors, blob.len())?;

        let mut params = ParamPartition::default();
        let mut buffers = IndexMap::new();
        let (mut first, mut second) = (ParamPartition::default(), ParamPartition::default());
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let bytes = &blob[e.offset..e.offset + e.nbytes];
            let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::from_vec(&e.shape, data).map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?;
            let part = || e.partition.ok_or_else(|| Error::Checkpoint(format!("{} lacks a partition", e.name)));
            match e.kind {
                TensorKind::Param => params.insert(part()?, e.name.clone(), t)?,
                TensorKind::Buffer => {
                    buffers.insert(e.name.clone(), t);
                }
                TensorKind::OptFirst => first.insert(part()?, e.name.clone(), t)?,
                TensorKind::OptSecond => second.insert(part()?, e.name.clone(), t)?,
            }
        }
        let nonempty = |p: ParamPartition<f32>| (p.num_params() > 0).then_some(p);
        let optimizer = OptimizerState { t: manifest.optimizer.t, first: nonempty(first), second: nonempty(second) };
        Ok(Self { manifest, params, buffers, optimizer })
    }

    /// Parameters by name regardless of partition.
    pub fn params_flat(&self) -> IndexMap<String, Tensor<f32>> {
        self.params.iter().map(|(_, n, t)| (n.clone(), t.clone())).collect()
    }

    pub fn into_model(self) -> Result<Model> {
        let model = Model { spec: self.manifest.model, params: self.params, buffers: self.buffers };
        let fresh = crate::model::build_model(&model.spec, 0)?;
        for (p, n, t) in fresh.params.iter() {
            match model.params.get(n) {
                Some(c) if c.shape() == t.shape() && model.params.partition_of(n) == Some(p) => {}
                _ => return Err(Error::Checkpoint(format!("parameter {n} missing or mis-shaped"))),
            }
        }
        if fresh.params.num_params() != model.params.num_params() {
            return Err(Error::Checkpoint("checkpoint holds parameters the model does not define".into()));
        }
        Ok(model)
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let step = self.manifest.step;
        let rec = self.manifest.optimizer.clone();
        let state = self.optimizer.clone();
        let mut optimizer = Optimizer::new(rec.config, rec.lr)?;
        optimizer.state = state;
        Ok(Trainer { model: self.into_model()?, optimizer, step })
    }
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    dir.with_file_name(name)
}

fn check_tiling(entries: &[TensorEntry], len: usize) -> Result<()> {
    let mut ranges: Vec<(usize, usize, &str)> = entries.iter().map(|e| (e.offset, e.nbytes, e.name.as_str())).collect();
    ranges.sort();
    let mut cursor = 0;
    for (off, n, name) in ranges {
        if off != cursor {
            return Err(Error::Checkpoint(format!("{name}: offset {off} leaves a gap or overlap at {cursor}")));
        }
        cursor += n;
    }
    if cursor != len {
        return Err(Error::Checkpoint(format!("manifest covers {cursor} bytes, blob has {len}")));
    }
    for e in entries {
        if e.nbytes != 4 * e.shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!("{}: byte count does not match shape", e.name)));
        }
    }
    Ok(())
}
