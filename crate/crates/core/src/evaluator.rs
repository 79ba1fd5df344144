//! Top-n accuracy, confusion matrix, per-class accuracy, one-vs-rest ROC AUC
//! and the missed-crystal rate.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{is_crystal_id, ClassLabel, NUM_CLASSES};

/// Label ids by descending activation, ascending id on ties.
pub fn rank_labels(activations: &[f64; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
    let mut ranked: [usize; NUM_CLASSES] = std::array::from_fn(|i| i);
    ranked.sort_by(|&a, &b| activations[b].total_cmp(&activations[a]).then(a.cmp(&b)));
    ranked
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub record_id: String,
    pub true_label: ClassLabel,
    pub activations: [f64; NUM_CLASSES],
    pub ranked_labels: [usize; NUM_CLASSES],
}

impl PredictionRecord {
    pub fn new(record_id: impl Into<String>, true_label: ClassLabel, activations: [f64; NUM_CLASSES]) -> Result<Self> {
        let record_id = record_id.into();
        if activations.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument(format!("{record_id}: non-finite activation")));
        }
        Ok(Self {
            ranked_labels: rank_labels(&activations),
            record_id,
            true_label,
            activations,
        })
    }

    pub fn top1(&self) -> usize {
        self.ranked_labels[0]
    }

    pub fn in_top(&self, label: usize, n: usize) -> bool {
        self.ranked_labels[..n].contains(&label)
    }
}

/// Line format of the predictions file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionLine {
    record_id: String,
    true_label: ClassLabel,
    activations: [f64; NUM_CLASSES],
}

pub fn write_predictions(preds: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in preds {
        let line = PredictionLine {
            record_id: p.record_id.clone(),
            true_label: p.true_label,
            activations: p.activations,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(&line).map_err(|e| Error::ManifestParse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(PredictionRecord::new(p.record_id, p.true_label, p.activations)?);
    }
    Ok(out)
}

fn check_non_empty(preds: &[PredictionRecord]) -> Result<()> {
    if preds.is_empty() {
        Err(Error::Empty("prediction list"))
    } else {
        Ok(())
    }
}

/// Fraction of records whose true label is among the `n` top-ranked labels.
pub fn topn_accuracy(preds: &[PredictionRecord], n: usize) -> Result<f64> {
    check_non_empty(preds)?;
    if !(1..=NUM_CLASSES).contains(&n) {
        return Err(Error::InvalidArgument(format!("n must be in 1..={NUM_CLASSES}, got {n}")));
    }
    let hits = preds.iter().filter(|p| p.in_top(p.true_label.id(), n)).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `counts[r][c]`: images of true class `c` predicted (top-1) as `r`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn column_sum(&self, c: usize) -> usize {
        self.counts.iter().map(|row| row[c]).sum()
    }

    pub fn total(&self) -> usize {
        (0..NUM_CLASSES).map(|c| self.column_sum(c)).sum()
    }

    /// Classes with no true records.
    pub fn empty_columns(&self) -> Vec<usize> {
        (0..NUM_CLASSES).filter(|&c| self.column_sum(c) == 0).collect()
    }

    /// Column-normalized percentages rounded to one decimal; empty columns
    /// are all zeros.
    pub fn column_percentages(&self) -> [[f64; NUM_CLASSES]; NUM_CLASSES] {
        let mut out = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            let sum = self.column_sum(c);
            if sum == 0 {
                continue;
            }
            for r in 0..NUM_CLASSES {
                out[r][c] = (1000.0 * self.counts[r][c] as f64 / sum as f64).round() / 10.0;
            }
        }
        out
    }
}

pub fn confusion_matrix(preds: &[PredictionRecord]) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::default();
    for p in preds {
        m.counts[p.top1()][p.true_label.id()] += 1;
    }
    m
}

/// Per-class accuracy; `None` for classes without true records.
pub fn class_accuracies(m: &ConfusionMatrix) -> [Option<f64>; NUM_CLASSES] {
    std::array::from_fn(|c| {
        let sum = m.column_sum(c);
        (sum > 0).then(|| m.counts[c][c] as f64 / sum as f64)
    })
}

/// Unweighted mean over classes.
pub fn class_average(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `diag[c] / column_sum[c]` for every class and their unweighted mean.
/// Fails when a class has no true records.
pub fn per_class_accuracy(m: &ConfusionMatrix) -> Result<([f64; NUM_CLASSES], f64)> {
    let acc = class_accuracies(m);
    if let Some(c) = acc.iter().position(Option::is_none) {
        return Err(Error::InvalidArgument(format!(
            "class {} has no records; its accuracy is undefined",
            ClassLabel::ALL[c]
        )));
    }
    let acc = acc.map(|a| a.expect("checked above"));
    Ok((acc, class_average(&acc)))
}

/// Mann-Whitney AUC: `(wins + ties / 2) / (positives * negatives)`,
/// computed from mid-ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("AUC needs at least one positive and one negative".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps mid-ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the mid-rank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u128;
        let group_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += twice_mid * group_pos;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    // 2U = 2R - P(P+1)
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// One-vs-rest AUC of class `c`, scored by its activation.
pub fn class_auc(preds: &[PredictionRecord], c: usize) -> Result<f64> {
    let scores: Vec<f64> = preds.iter().map(|p| p.activations[c]).collect();
    let labels: Vec<bool> = preds.iter().map(|p| p.true_label.id() == c).collect();
    roc_auc(&scores, &labels)
}

/// Fraction of crystal-true records with no crystal label among the top `n`.
pub fn missed_crystal_rate(preds: &[PredictionRecord], n: usize) -> Result<f64> {
    if !(1..=NUM_CLASSES).contains(&n) {
        return Err(Error::InvalidArgument(format!("n must be in 1..={NUM_CLASSES}, got {n}")));
    }
    let crystal: Vec<&PredictionRecord> = preds.iter().filter(|p| p.true_label.is_crystal()).collect();
    if crystal.is_empty() {
        return Err(Error::Empty("crystal-labelled records"));
    }
    let missed = crystal
        .iter()
        .filter(|p| !p.ranked_labels[..n].iter().any(|&l| is_crystal_id(l)))
        .count();
    Ok(missed as f64 / crystal.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    /// `counts[predicted][true]`.
    pub counts: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub column_percent: [[f64; NUM_CLASSES]; NUM_CLASSES],
    pub empty_columns: Vec<ClassLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub class_labels: Vec<ClassLabel>,
    pub class_support: [usize; NUM_CLASSES],
    pub top_n_accuracy: BTreeMap<usize, f64>,
    pub per_class_accuracy: [Option<f64>; NUM_CLASSES],
    /// Unweighted mean of the per-class accuracies; absent when any class
    /// has no records.
    pub class_average_accuracy: Option<f64>,
    pub auc: [Option<f64>; NUM_CLASSES],
    pub missed_crystal_rate: BTreeMap<usize, Option<f64>>,
    pub confusion: ConfusionReport,
}

pub fn report(preds: &[PredictionRecord]) -> Result<EvalReport> {
    check_non_empty(preds)?;
    let cm = confusion_matrix(preds);
    let per_class = class_accuracies(&cm);
    let class_average_accuracy = per_class
        .iter()
        .copied()
        .collect::<Option<Vec<f64>>>()
        .map(|v| class_average(&v));
    let mut top = BTreeMap::new();
    let mut missed = BTreeMap::new();
    for n in 1..=3 {
        top.insert(n, topn_accuracy(preds, n)?);
        missed.insert(n, missed_crystal_rate(preds, n).ok());
    }
    Ok(EvalReport {
        records: preds.len(),
        class_labels: ClassLabel::ALL.to_vec(),
        class_support: std::array::from_fn(|c| cm.column_sum(c)),
        top_n_accuracy: top,
        per_class_accuracy: per_class,
        class_average_accuracy,
        auc: std::array::from_fn(|c| class_auc(preds, c).ok()),
        missed_crystal_rate: missed,
        confusion: ConfusionReport {
            counts: cm.counts,
            column_percent: cm.column_percentages(),
            empty_columns: cm.empty_columns().into_iter().map(|c| ClassLabel::ALL[c]).collect(),
        },
    })
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let body = serde_json::to_vec_pretty(report)?;
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}
