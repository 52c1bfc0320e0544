//! HTER evaluation across unseen domains and dynamic-weight dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{attack_scores, Model};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hter {
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
}

/// Error rates when predicting "attack" iff `score ≥ threshold`.
///
/// `far` is the fraction of bonafide samples (label 0) predicted attack and
/// `frr` the fraction of attack samples (label 1) predicted bonafide.
pub fn hter(scores: &[f64], labels: &[usize], threshold: f64) -> Result<Hter> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let (mut neg, mut pos, mut false_acc, mut false_rej) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let attack = s >= threshold;
        match l {
            0 => {
                neg += 1;
                false_acc += attack as usize;
            }
            1 => {
                pos += 1;
                false_rej += !attack as usize;
            }
            other => return Err(Error::Invalid(format!("label {other} is not binary"))),
        }
    }
    if neg == 0 || pos == 0 {
        return Err(Error::Invalid("HTER needs both classes".into()));
    }
    let far = false_acc as f64 / neg as f64;
    let frr = false_rej as f64 / pos as f64;
    Ok(Hter { far, frr, hter: (far + frr) / 2.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRecord {
    pub domain: String,
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
    pub n: usize,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<DomainRecord>,
    /// Unweighted mean over `records`.
    pub average_hter: f64,
    /// Optional in-domain row, excluded from the average.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<DomainRecord>,
}

impl EvalReport {
    pub fn from_records(mut records: Vec<DomainRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Invalid("no test domains".into()));
        }
        records.sort_by(|a, b| a.domain.cmp(&b.domain));
        let average_hter = records.iter().map(|r| r.hter).sum::<f64>() / records.len() as f64;
        Ok(Self { records, average_hter, source: None })
    }

    pub fn render_text(&self) -> String {
        let mut s = format!("{:<16} {:>6} {:>8} {:>8} {:>8}\n", "domain", "n", "FAR", "FRR", "HTER");
        let mut row = |r: &DomainRecord, tag: &str| {
            let name = format!("{}{tag}", r.domain);
            let _ = writeln!(s, "{name:<16} {:>6} {:>8.4} {:>8.4} {:>8.4}", r.n, r.far, r.frr, r.hter);
        };
        if let Some(src) = &self.source {
            row(src, " (src)");
        }
        for r in &self.records {
            row(r, "");
        }
        let _ = writeln!(s, "{:<16} {:>6} {:>8} {:>8} {:>8.4}", "average", "", "", "", self.average_hter);
        s
    }
}

pub fn evaluate_domain(model: &Model, ds: &LabeledDataset, threshold: f64) -> Result<DomainRecord> {
    let scores = attack_scores(&model.infer(&ds.images)?.logits);
    let h = hter(&scores, &ds.labels, threshold)?;
    Ok(DomainRecord { domain: ds.domain_name.clone(), far: h.far, frr: h.frr, hter: h.hter, n: ds.len(), threshold })
}

/// One record per unseen domain, ordered by name, plus their mean.
pub fn cross_domain_eval(model: &Model, test_domains: &[LabeledDataset], threshold: f64) -> Result<EvalReport> {
    if test_domains.is_empty() {
        return Err(Error::Invalid("no test domains".into()));
    }
    let records = test_domains.iter().map(|d| evaluate_domain(model, d, threshold)).collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(records)
}

/// Writes `domain,label,w_1..w_K` per sample and returns the row count.
pub fn dump_dynamic_weights(model: &Model, ds: &LabeledDataset, out_path: &Path) -> Result<usize> {
    let w = model
        .infer(&ds.images)?
        .weights
        .ok_or_else(|| Error::Invalid("model has no dynamic block".into()))?;
    let k = w.k();
    let mut csv = String::from("domain,label");
    for j in 1..=k {
        let _ = write!(csv, ",w_{j}");
    }
    csv.push('\n');
    for i in 0..w.n() {
        let _ = write!(csv, "{},{}", ds.domain_name, ds.labels[i]);
        for v in w.row(i) {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(out_path, csv).map_err(|e| Error::io(out_path, e))?;
    Ok(w.n())
}

/// Class-conditional mean dynamic-weight vectors, `[bonafide, attack]`.
pub fn class_mean_weights(model: &Model, ds: &LabeledDataset) -> Result<[Vec<f64>; 2]> {
    let w = model
        .infer(&ds.images)?
        .weights
        .ok_or_else(|| Error::Invalid("model has no dynamic block".into()))?;
    let mut sums = [vec![0.0; w.k()], vec![0.0; w.k()]];
    let mut counts = [0usize; 2];
    for i in 0..w.n() {
        let l = ds.labels[i];
        counts[l] += 1;
        for (s, &v) in sums[l].iter_mut().zip(w.row(i)) {
            *s += v as f64;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    Ok(sums)
}

/// L2 distance between the class-conditional mean weight vectors.
pub fn weight_separation(model: &Model, ds: &LabeledDataset) -> Result<f64> {
    let [a, b] = class_mean_weights(model, ds)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}
