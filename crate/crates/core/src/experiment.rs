//! Prepared data plus the glue that trains and evaluates one configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate_domain, load_index, load_natural_pool, LabeledDataset};
use crate::error::{Error, Result};
use crate::eval::{cross_domain_eval, evaluate_domain, weight_separation, EvalReport};
use crate::fourier::NaturalPool;
use crate::meta::MetaStepTrace;
use crate::model::{build_model, Model};
use crate::train::{Ablation, TrainData, Trainer};

/// Source domain, test domains and natural pool of one configuration.
pub struct Experiment {
    pub config: RunConfig,
    pub source: LabeledDataset,
    pub tests: Vec<LabeledDataset>,
    pub pool: NaturalPool,
}

pub struct RunOutcome {
    pub model: Model,
    pub traces: Vec<MetaStepTrace>,
    pub report: EvalReport,
}

/// One seed of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub report: EvalReport,
    /// Class separation of the mean dynamic weights on the training domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_separation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub ablation: Ablation,
    pub runs: Vec<SeedResult>,
    /// Mean over seeds of the unseen-domain average HTER.
    pub mean_hter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// Hash of the base config the rows were derived from.
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn domain_names(runs: &[SeedResult]) -> Vec<String> {
    runs.first().map(|r| r.report.records.iter().map(|d| d.domain.clone()).collect()).unwrap_or_default()
}

/// Seed-mean HTER per test domain, in record order.
fn domain_means(runs: &[SeedResult]) -> Vec<f64> {
    (0..domain_names(runs).len()).map(|j| mean(runs.iter().map(|r| r.report.records[j].hter))).collect()
}

impl AblationTable {
    pub fn row(&self, ablation: &Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == *ablation)
    }

    pub fn render_text(&self) -> String {
        let names = self.rows.first().map(|r| domain_names(&r.runs)).unwrap_or_default();
        let mut s = format!("{:<14} {:>5}", "row", "seeds");
        for n in &names {
            let _ = write!(s, " {n:>10}");
        }
        let _ = writeln!(s, " {:>10}", "average");
        for r in &self.rows {
            let _ = write!(s, "{:<14} {:>5}", r.label, r.runs.len());
            for v in domain_means(&r.runs) {
                let _ = write!(s, " {:>10.4}", v);
            }
            let _ = writeln!(s, " {:>10.4}", r.mean_hter);
        }
        s
    }

    /// One line per (row, seed) plus a `mean` line per row.
    pub fn to_csv(&self) -> String {
        let names = self.rows.first().map(|r| domain_names(&r.runs)).unwrap_or_default();
        let mut s = String::from("row,dynamic_block,im_loss,meta_learning,seed");
        for n in &names {
            let _ = write!(s, ",{n}");
        }
        s.push_str(",average\n");
        for r in &self.rows {
            let a = &r.ablation;
            let head = format!("{},{},{},{}", r.label, a.dynamic_block, a.im_loss, a.meta_learning);
            for run in &r.runs {
                let _ = write!(s, "{head},{}", run.seed);
                for d in &run.report.records {
                    let _ = write!(s, ",{}", d.hter);
                }
                let _ = writeln!(s, ",{}", run.report.average_hter);
            }
            let _ = write!(s, "{head},mean");
            for v in domain_means(&r.runs) {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{}", r.mean_hter);
        }
        s
    }

    /// Writes `ablation.json`, `ablation.csv` and `ablation.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("ablation.json"), &serde_json::to_string_pretty(self)?)?;
        write_file(&dir.join("ablation.csv"), &self.to_csv())?;
        write_file(&dir.join("ablation.txt"), &self.render_text())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// The override value as written, e.g. `0.5` or `3`.
    pub value: String,
    pub runs: Vec<SeedResult>,
    pub mean_hter: f64,
}

/// Average unseen-domain HTER as a function of one config value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    /// Hash of the base config the points were derived from.
    pub config_hash: String,
    /// Dotted config path that was varied.
    pub parameter: String,
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn to_csv(&self) -> String {
        let names = self.points.first().map(|p| domain_names(&p.runs)).unwrap_or_default();
        let mut s = format!("{},seeds", self.parameter);
        for n in &names {
            let _ = write!(s, ",{n}");
        }
        s.push_str(",average\n");
        for p in &self.points {
            let _ = write!(s, "{},{}", p.value, p.runs.len());
            for v in domain_means(&p.runs) {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{}", p.mean_hter);
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(self)?)?;
        write_file(&dir.join(format!("{stem}.csv")), &self.to_csv())
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads `data_dir` if configured, otherwise generates every domain.
pub fn load_domains(cfg: &RunConfig) -> Result<Vec<LabeledDataset>> {
    match &cfg.data.data_dir {
        Some(dir) => load_index(dir, cfg.model.backbone.image_size),
        None => cfg.data.domains.iter().map(generate_domain).collect(),
    }
}

/// `cfg` with every run-level seed set to `seed`.
pub fn reseeded(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.meta.seed = seed;
    c.perturb.seed = seed;
    c
}

impl Experiment {
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut all = load_domains(cfg)?;
        let pos = all
            .iter()
            .position(|d| d.domain_name == cfg.data.source_domain)
            .ok_or_else(|| Error::Config(format!("source domain {:?} not found", cfg.data.source_domain)))?;
        let source = all.remove(pos);
        if all.is_empty() {
            return Err(Error::Config("no test domains".into()));
        }
        let size = cfg.model.backbone.image_size;
        let pool = load_natural_pool(&cfg.data.natural_pool, cfg.data.pool_size, size, cfg.data.pool_seed)?;
        Ok(Self { config: cfg.clone(), source, tests: all, pool })
    }

    pub fn crop(&self) -> Option<usize> {
        self.config.data.random_crop.then_some(self.config.model.backbone.image_size)
    }

    /// Fresh model for `cfg` (its ablation applied), seeded by `cfg.meta.seed`.
    pub fn fresh_model(cfg: &RunConfig) -> Result<Model> {
        let mut model = build_model(&cfg.effective_model(), cfg.meta.seed)?;
        if let Some(path) = &cfg.model.backbone.pretrained_path {
            let ck = crate::checkpoint::Checkpoint::read(path)?;
            model.load_pretrained_extractor(&ck.params_flat(), &ck.buffers)?;
        }
        Ok(model)
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData { source: &self.source, pool: &self.pool, crop: self.crop() }
    }

    /// Trains `cfg` (model, meta, perturb, ablation sections) on this data.
    pub fn run_config(
        &self,
        cfg: &RunConfig,
        mut on_step: impl FnMut(&Trainer, &MetaStepTrace) -> Result<()>,
    ) -> Result<RunOutcome> {
        cfg.validate()?;
        let mut trainer = Trainer::new(Self::fresh_model(cfg)?, &cfg.meta)?;
        let mut traces = Vec::with_capacity(cfg.meta.steps);
        trainer.run(&self.train_data(), &cfg.meta, &cfg.perturb, &cfg.ablation, cfg.meta.steps, |t, tr| {
            traces.push(tr.clone());
            on_step(t, tr)
        })?;
        let report = self.evaluate(&trainer.model, cfg.eval.threshold)?;
        Ok(RunOutcome { model: trainer.model, traces, report })
    }

    /// Trains this experiment's own config with the given seed.
    pub fn run(&self, seed: u64) -> Result<RunOutcome> {
        self.run_config(&reseeded(&self.config, seed), |_, _| Ok(()))
    }

    /// Trains `cfg` under every seed and summarises each run.
    pub fn seed_results(
        &self,
        cfg: &RunConfig,
        seeds: &[u64],
        mut on_run: impl FnMut(&RunConfig, &SeedResult),
    ) -> Result<Vec<SeedResult>> {
        seeds
            .iter()
            .map(|&seed| {
                let c = reseeded(cfg, seed);
                let out = self.run_config(&c, |_, _| Ok(()))?;
                let sep = match out.model.spec.dynamic_block {
                    true => Some(weight_separation(&out.model, &self.source)?),
                    false => None,
                };
                let r = SeedResult { seed, report: out.report, weight_separation: sep };
                on_run(&c, &r);
                Ok(r)
            })
            .collect()
    }

    /// Trains each ablation row of this experiment's config under every seed.
    pub fn ablation_grid(
        &self,
        rows: &[Ablation],
        seeds: &[u64],
        mut on_run: impl FnMut(&RunConfig, &SeedResult),
    ) -> Result<AblationTable> {
        let mut out = Vec::with_capacity(rows.len());
        for ablation in rows {
            let cfg = RunConfig { ablation: *ablation, ..self.config.clone() };
            let runs = self.seed_results(&cfg, seeds, &mut on_run)?;
            let mean_hter = mean(runs.iter().map(|r| r.report.average_hter));
            out.push(AblationRow { label: ablation.label(), ablation: *ablation, runs, mean_hter });
        }
        Ok(AblationTable { config_hash: self.config.config_hash(), rows: out })
    }

    /// Trains this experiment's config with `parameter=value` for each value.
    pub fn sweep(
        &self,
        parameter: &str,
        values: &[&str],
        seeds: &[u64],
        mut on_run: impl FnMut(&RunConfig, &SeedResult),
    ) -> Result<SweepCurve> {
        if parameter.starts_with("data.") {
            return Err(Error::Config(format!("cannot sweep {parameter:?}: the data is already prepared")));
        }
        let mut points = Vec::with_capacity(values.len());
        for value in values {
            let mut cfg = self.config.clone();
            cfg.apply_overrides(&[format!("{parameter}={value}")])?;
            let runs = self.seed_results(&cfg, seeds, &mut on_run)?;
            let mean_hter = mean(runs.iter().map(|r| r.report.average_hter));
            points.push(SweepPoint { value: value.to_string(), runs, mean_hter });
        }
        Ok(SweepCurve { config_hash: self.config.config_hash(), parameter: parameter.into(), points })
    }

    pub fn evaluate(&self, model: &Model, threshold: f64) -> Result<EvalReport> {
        let mut report = cross_domain_eval(model, &self.tests, threshold)?;
        if self.config.eval.include_source {
            report.source = Some(evaluate_domain(model, &self.source, threshold)?);
        }
        Ok(report)
    }
}
