//! Pairwise clone-classification metrics: confusion counts, accuracy,
//! precision, recall, F1, and trapezoid ROC-AUC.
//!
//! Every report echoes the configuration that produced it (beta weights,
//! threshold, seed, backend); a report without the echo is not valid
//! output.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusStore;
use crate::error::{Error, Result};
use crate::search::sscore;
use crate::splits::SplitManifest;
use crate::train::Checkpoint;

pub const REPORT_SCHEMA: &str = "pluvio-report";
pub const REPORT_VERSION: u32 = 1;

/// Confusion-matrix entries at a fixed threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Configuration echo attached to every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub seed: u64,
    pub backend: String,
}

/// Metrics of one split under one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub version: u32,
    pub split: String,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub n_pairs: usize,
    pub config: ConfigEcho,
}

/// Count confusion entries; a score at or above `tau` predicts positive.
pub fn confusion(scores: &[f64], labels: &[u8], tau: f64) -> Result<ConfusionCounts> {
    if scores.len() != labels.len() {
        return Err(Error::Domain(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Domain("confusion counts need at least one pair".into()));
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&s, &y) in scores.iter().zip(labels.iter()) {
        let predicted = s >= tau;
        match (predicted, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// (precision, recall, f1, accuracy) with the 0/0 -> 0 convention.
pub fn prf1(counts: &ConfusionCounts) -> (f64, f64, f64, f64) {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let accuracy = ratio(counts.tp + counts.tn, counts.total());
    (precision, recall, f1, accuracy)
}

/// Area under the ROC curve by trapezoidal integration over the distinct
/// score thresholds; tied scores collapse into one ROC step.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Domain(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Domain(
            "ROC needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut auc = 0.0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        // Consume the whole tie group before emitting a point.
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / n_pos as f64;
        let fpr = fp as f64 / n_neg as f64;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(auc)
}

/// Evaluate a checkpoint over a split: run the inference path per pair,
/// score with the clamped cosine, and aggregate the metrics.
pub fn evaluate(
    checkpoint: &Checkpoint,
    split: &SplitManifest,
    store: &CorpusStore,
) -> Result<MetricsReport> {
    for tag in store.arch_vocab.iter() {
        if !checkpoint.manifest.arch_vocab.contains(tag) {
            return Err(Error::Manifest(format!(
                "corpus architecture `{tag}` unknown to this checkpoint"
            )));
        }
    }
    let mut scores = Vec::with_capacity(split.pairs.len());
    let mut labels = Vec::with_capacity(split.pairs.len());
    let mut cache: std::collections::HashMap<&str, ndarray::Array1<f64>> =
        std::collections::HashMap::new();
    for pair in &split.pairs {
        for id in [pair.left_id.as_str(), pair.right_id.as_str()] {
            if !cache.contains_key(id) {
                let record = store.get(id).ok_or_else(|| {
                    Error::Manifest(format!("split references unknown record `{id}`"))
                })?;
                cache.insert(id, checkpoint.infer_encoding(&record.instruction_sequence)?);
            }
        }
        let score = sscore(
            cache[pair.left_id.as_str()].as_slice().expect("contiguous"),
            cache[pair.right_id.as_str()].as_slice().expect("contiguous"),
        )?;
        scores.push(score);
        labels.push(pair.label);
    }

    let cfg = &checkpoint.manifest.config;
    let counts = confusion(&scores, &labels, cfg.tau)?;
    let (precision, recall, f1, accuracy) = prf1(&counts);
    let auc = roc_auc(&scores, &labels)?;
    Ok(MetricsReport {
        schema: REPORT_SCHEMA.into(),
        version: REPORT_VERSION,
        split: split.name.clone(),
        threshold: cfg.tau,
        counts,
        accuracy,
        precision,
        recall,
        f1,
        auc,
        n_pairs: split.pairs.len(),
        config: ConfigEcho {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            tau: cfg.tau,
            seed: cfg.seed,
            backend: cfg.backend.to_string(),
        },
    })
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        use std::io::Write;
        writeln!(f, "{}", serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MetricsReport> {
        let report: MetricsReport = serde_json::from_reader(File::open(path)?)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        Ok(report)
    }

    /// CSV row in (auc, accu, prc, rcl, f1) column order.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.3},{:.3},{:.3},{:.3},{:.3}",
            self.split, self.auc, self.accuracy, self.precision, self.recall, self.f1
        )
    }

    pub fn csv_header() -> &'static str {
        "split,auc,accu,prc,rcl,f1"
    }
}
