//! Run configuration: JSON with strict keys, dotted-path overrides and hashes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{default_domains, DomainSpec, PoolSource};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_THRESHOLD;
use crate::fourier::PerturbConfig;
use crate::meta::MetaConfig;
use crate::model::ModelSpec;
use crate::train::Ablation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub domains: Vec<DomainSpec>,
    /// Name of the single training domain; every other domain is a test domain.
    pub source_domain: String,
    /// Load PNG datasets from here instead of generating them in memory.
    pub data_dir: Option<PathBuf>,
    pub natural_pool: PoolSource,
    pub pool_size: usize,
    pub pool_seed: u64,
    /// Reflect-pad and random-crop training batches.
    pub random_crop: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            domains: default_domains(64, 2000, 0),
            source_domain: "domain_a".into(),
            data_dir: None,
            natural_pool: PoolSource::Procedural,
            pool_size: 256,
            pool_seed: 0,
            random_crop: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Attack-score decision threshold.
    pub threshold: f64,
    pub dump_weights: bool,
    /// Also report HTER on the training domain (excluded from the average).
    pub include_source: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, dump_weights: false, include_source: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_name: String,
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    pub meta: MetaConfig,
    pub perturb: PerturbConfig,
    pub data: DataConfig,
    pub eval: EvalSettings,
    pub ablation: Ablation,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "sddg".into(),
            output_dir: PathBuf::from("runs"),
            model: ModelSpec::default(),
            meta: MetaConfig::default(),
            perturb: PerturbConfig::default(),
            data: DataConfig::default(),
            eval: EvalSettings::default(),
            ablation: Ablation::default(),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Model spec after the ablation toggles.
    pub fn effective_model(&self) -> ModelSpec {
        let mut spec = self.model.clone();
        self.ablation.apply_to(&mut spec);
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.effective_model();
        spec.validate()?;
        if spec.dynamic_block && spec.dynamic.k < 2 {
            return Err(Error::Config(format!("dynamic.k must be >= 2, got {}", spec.dynamic.k)));
        }
        self.meta.validate()?;
        self.perturb.validate()?;
        if self.perturb.eta != self.meta.eta {
            return Err(Error::Config(format!(
                "perturb.eta ({}) disagrees with meta.eta ({})",
                self.perturb.eta, self.meta.eta
            )));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config(format!("eval.threshold must lie in [0, 1], got {}", self.eval.threshold)));
        }
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run_name {:?}", self.run_name)));
        }
        let d = &self.data;
        if d.pool_size == 0 {
            return Err(Error::Config("data.pool_size must be >= 1".into()));
        }
        let mut names: Vec<&str> = d.domains.iter().map(|s| s.name.as_str()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("domain names must be unique".into()));
        }
        if !names.contains(&d.source_domain.as_str()) {
            return Err(Error::Config(format!("source domain {:?} is not among the domains", d.source_domain)));
        }
        if d.domains.len() < 2 {
            return Err(Error::Config("need at least one test domain besides the source".into()));
        }
        for dom in &d.domains {
            dom.validate()?;
            if dom.image_size != spec.backbone.image_size {
                return Err(Error::Config(format!(
                    "domain {} has image_size {}, model expects {}",
                    dom.name, dom.image_size, spec.backbone.image_size
                )));
            }
            if dom.size < self.meta.batch_size && dom.name == d.source_domain {
                return Err(Error::Config(format!(
                    "source domain holds {} samples, batch size is {}",
                    dom.size, self.meta.batch_size
                )));
            }
        }
        Ok(())
    }

    /// Applies `path=value` where `path` is dotted (`meta.mu`, `data.domains.1.size`)
    /// and `value` is JSON, or a bare string. Unknown paths are rejected.
    ///
    /// `meta.eta` and `perturb.eta` name the same quantity and are set together.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form path=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        let paths: Vec<&str> = match path {
            "meta.eta" | "perturb.eta" => vec!["meta.eta", "perturb.eta"],
            p => vec![p],
        };
        for p in paths {
            set_path(&mut tree, p, value.clone())?;
        }
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("override {path}: {e}")))?;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        for a in assignments {
            self.apply_override(a.as_ref())?;
        }
        self.validate()
    }

    /// SHA-256 of the canonical JSON of the whole config.
    pub fn config_hash(&self) -> String {
        sha256_hex(&canonical(&serde_json::to_value(self).expect("config serializes")))
    }

    /// SHA-256 of the effective architecture (what the parameter layout depends on).
    pub fn arch_hash(&self) -> String {
        arch_hash(&self.effective_model())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }
}

pub fn arch_hash(spec: &ModelSpec) -> String {
    let mut spec = spec.clone();
    spec.backbone.pretrained_path = None;
    sha256_hex(&canonical(&serde_json::to_value(&spec).expect("spec serializes")))
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let next = match node {
            Value::Object(map) => map.get_mut(*key),
            Value::Array(items) => key.parse::<usize>().ok().and_then(|j| items.get_mut(j)),
            _ => None,
        };
        let Some(next) = next else {
            return Err(Error::Config(format!("unknown config key {path:?}")));
        };
        if last {
            *next = value;
            return Ok(());
        }
        node = next;
    }
    Err(Error::Config("empty override path".into()))
}

/// JSON with object keys sorted recursively.
pub fn canonical(v: &Value) -> String {
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                Value::Object(keys.into_iter().map(|k| (k.clone(), sort(&m[k]))).collect())
            }
            Value::Array(a) => Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sort(v)).expect("json serializes")
}

pub fn sha256_hex(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"meta": {"mu": 1.0, "gamma": 2}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"colour": 1}"#).is_err());
        let ok = RunConfig::from_json(r#"{"meta": {"mu": 0.5}}"#).unwrap();
        assert_eq!(ok.meta.mu, 0.5);
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["meta.mu=0.5", "run_name=abc", "data.domains.1.size=10", "meta.eta=0"]).unwrap();
        assert_eq!(cfg.meta.mu, 0.5);
        assert_eq!(cfg.run_name, "abc");
        assert_eq!(cfg.data.domains[1].size, 10);
        assert_eq!((cfg.meta.eta, cfg.perturb.eta), (0.0, 0.0));
        assert!(cfg.apply_override("meta.nope=1").is_err());
        assert!(cfg.apply_override("meta.mu").is_err());
        assert!(RunConfig::default().apply_overrides(&["meta.mu=-1"]).is_err());
    }

    #[test]
    fn hashes_track_what_they_cover() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.meta.mu = 0.25;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.arch_hash(), b.arch_hash());
        b.model.dynamic.k = 4;
        assert_ne!(a.arch_hash(), b.arch_hash());
        let mut c = a.clone();
        c.ablation = Ablation::erm();
        assert_ne!(a.arch_hash(), c.arch_hash());
    }

    #[test]
    fn invariants_checked() {
        let mut cfg = RunConfig::default();
        cfg.data.source_domain = "missing".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.backbone.image_size = 32;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.dynamic.k = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.perturb.eta = 0.5;
        assert!(cfg.validate().is_err());
    }
}
