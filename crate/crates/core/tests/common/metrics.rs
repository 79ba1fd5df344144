//! Randomized prediction fixtures and brute-force metric oracles that share
//! no code with the evaluator.

use std::collections::HashMap;

use crystal_core::evaluator::{
    class_accuracies, class_auc, confusion_matrix, missed_crystal_rate, report, topn_accuracy, PredictionRecord,
};
use crystal_core::labels::{ClassLabel, NUM_CLASSES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CRYSTAL: [usize; 5] = [3, 5, 6, 7, 9];
const RATIO_TOL: f64 = 1e-12;

/// Records with random labels and activations. Roughly half the fixtures
/// quantize activations so ties are common.
pub fn fixture(seed: u64) -> Vec<PredictionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(20..300);
    let quantize = rng.random_bool(0.5);
    let skill = rng.random_range(0.0..0.6);
    (0..n)
        .map(|i| {
            let label = rng.random_range(0..NUM_CLASSES);
            let mut act = [0.0f64; NUM_CLASSES];
            for a in act.iter_mut() {
                *a = rng.random_range(0.0..1.0);
            }
            act[label] += skill;
            if quantize {
                for a in act.iter_mut() {
                    *a = (*a * 8.0).round() / 8.0;
                }
            }
            PredictionRecord::new(format!("r{i}"), ClassLabel::ALL[label], act).unwrap()
        })
        .collect()
}

/// Position of `label` in the descending ranking, ties to the lower id.
fn rank_of(act: &[f64; NUM_CLASSES], label: usize) -> usize {
    (0..NUM_CLASSES)
        .filter(|&o| act[o] > act[label] || (act[o] == act[label] && o < label))
        .count()
}

fn top_set(act: &[f64; NUM_CLASSES], n: usize) -> Vec<usize> {
    (0..NUM_CLASSES).filter(|&l| rank_of(act, l) < n).collect()
}

pub fn oracle_topn(preds: &[PredictionRecord], n: usize) -> f64 {
    let hits = preds
        .iter()
        .filter(|p| rank_of(&p.activations, p.true_label.id()) < n)
        .count();
    hits as f64 / preds.len() as f64
}

pub fn oracle_tally(preds: &[PredictionRecord]) -> HashMap<(usize, usize), usize> {
    let mut tally = HashMap::new();
    for p in preds {
        let mut best = 0;
        for l in 1..NUM_CLASSES {
            if p.activations[l] > p.activations[best] {
                best = l;
            }
        }
        *tally.entry((p.true_label.id(), best)).or_insert(0) += 1;
    }
    tally
}

pub fn oracle_auc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Area under the ROC polyline through every distinct threshold.
pub fn oracle_auc_trapezoid(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut prev_tpr, mut prev_fpr, mut area) = (0.0, 0.0, 0.0);
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= t).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= t).count() as f64;
        let (tpr, fpr) = (tp / pos, fp / neg);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    area
}

pub fn oracle_missed(preds: &[PredictionRecord], n: usize) -> Option<f64> {
    let crystal: Vec<_> = preds.iter().filter(|p| CRYSTAL.contains(&p.true_label.id())).collect();
    if crystal.is_empty() {
        return None;
    }
    let missed = crystal
        .iter()
        .filter(|p| top_set(&p.activations, n).iter().all(|l| !CRYSTAL.contains(l)))
        .count();
    Some(missed as f64 / crystal.len() as f64)
}

fn close(a: f64, b: f64, what: &str) -> Result<(), String> {
    if (a - b).abs() <= RATIO_TOL {
        Ok(())
    } else {
        Err(format!("{what}: evaluator {a} vs oracle {b}"))
    }
}

/// Every evaluator metric against its oracle.
pub fn check_oracles(preds: &[PredictionRecord]) -> Result<(), String> {
    for n in 1..=NUM_CLASSES {
        close(topn_accuracy(preds, n).unwrap(), oracle_topn(preds, n), &format!("top-{n}"))?;
    }

    let cm = confusion_matrix(preds);
    let tally = oracle_tally(preds);
    for t in 0..NUM_CLASSES {
        for p in 0..NUM_CLASSES {
            let want = tally.get(&(t, p)).copied().unwrap_or(0);
            if cm.counts[p][t] != want {
                return Err(format!("confusion[{p}][{t}] = {} vs tally {want}", cm.counts[p][t]));
            }
        }
    }
    if cm.total() != preds.len() {
        return Err("confusion total differs from record count".into());
    }

    let acc = class_accuracies(&cm);
    for c in 0..NUM_CLASSES {
        let support: usize = (0..NUM_CLASSES).map(|p| tally.get(&(c, p)).copied().unwrap_or(0)).sum();
        match (acc[c], support) {
            (None, 0) => {}
            (Some(a), s) if s > 0 => {
                let correct = tally.get(&(c, c)).copied().unwrap_or(0);
                close(a, correct as f64 / s as f64, &format!("accuracy of class {c}"))?;
            }
            (a, s) => return Err(format!("class {c}: accuracy {a:?} with support {s}")),
        }

        let scores: Vec<f64> = preds.iter().map(|p| p.activations[c]).collect();
        let labels: Vec<bool> = preds.iter().map(|p| p.true_label.id() == c).collect();
        let pos = labels.iter().filter(|&&l| l).count();
        match class_auc(preds, c) {
            Ok(auc) => {
                close(auc, oracle_auc_pairwise(&scores, &labels), &format!("pairwise AUC {c}"))?;
                close(auc, oracle_auc_trapezoid(&scores, &labels), &format!("trapezoid AUC {c}"))?;
            }
            Err(_) if pos == 0 || pos == preds.len() => {}
            Err(e) => return Err(format!("AUC {c}: {e}")),
        }
    }

    for n in 1..=NUM_CLASSES {
        match (missed_crystal_rate(preds, n).ok(), oracle_missed(preds, n)) {
            (Some(a), Some(b)) => close(a, b, &format!("missed crystals at n={n}"))?,
            (None, None) => {}
            (a, b) => return Err(format!("missed crystals at n={n}: {a:?} vs {b:?}")),
        }
    }

    let r = report(preds).map_err(|e| e.to_string())?;
    if !(r.top_n_accuracy[&1] <= r.top_n_accuracy[&2] && r.top_n_accuracy[&2] <= r.top_n_accuracy[&3]) {
        return Err("top-n accuracies not monotone".into());
    }
    Ok(())
}

/// missed(1) equals the confusion-derived share of crystal-true images
/// predicted as a non-crystal class, and the rate never rises with n.
pub fn check_missed_identity(preds: &[PredictionRecord]) -> Result<(), String> {
    let cm = confusion_matrix(preds);
    let crystal_total: usize = CRYSTAL.iter().map(|&c| cm.column_sum(c)).sum();
    if crystal_total == 0 {
        return Ok(());
    }
    let hits: usize = CRYSTAL.iter().flat_map(|&r| CRYSTAL.iter().map(move |&c| (r, c))).map(|(r, c)| cm.counts[r][c]).sum();
    let derived = (crystal_total - hits) as f64 / crystal_total as f64;
    let m1 = missed_crystal_rate(preds, 1).unwrap();
    if m1 != derived {
        return Err(format!("missed(1) {m1} != confusion-derived {derived}"));
    }
    let rates: Vec<f64> = (1..=NUM_CLASSES).map(|n| missed_crystal_rate(preds, n).unwrap()).collect();
    if rates.windows(2).any(|w| w[1] > w[0]) {
        return Err(format!("missed-crystal rate increases with n: {rates:?}"));
    }
    Ok(())
}
