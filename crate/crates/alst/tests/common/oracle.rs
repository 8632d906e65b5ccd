//! Quadratic brute-force metric implementations, written independently of
//! the library code, plus a generator of small tie-heavy instances.

#![allow(dead_code)]

use std::collections::BTreeMap;

use alst::metrics::{evaluate_predictions, LabeledPrediction, METRIC_COLUMNS};
use alst::model::Branch;
use rand::Rng;

pub const CLASSES: usize = 5;

fn rank(v: &[f64], i: usize) -> f64 {
    let below = v.iter().filter(|&&x| x < v[i]).count() as f64;
    let equal = v.iter().filter(|&&x| x == v[i]).count() as f64;
    below + (equal + 1.0) / 2.0
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

fn constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || constant(x) {
        return None;
    }
    if constant(y) {
        return Some(0.0);
    }
    let rx: Vec<f64> = (0..x.len()).map(|i| rank(x, i)).collect();
    let ry: Vec<f64> = (0..y.len()).map(|i| rank(y, i)).collect();
    Some(pearson(&rx, &ry))
}

pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || constant(x) {
        return None;
    }
    if constant(y) {
        return Some(0.0);
    }
    let (mut concordant, mut discordant, mut pairs, mut tied_x, mut tied_y) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..x.len() {
        for j in 0..i {
            pairs += 1.0;
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                tied_x += 1.0;
            }
            if dy == 0.0 {
                tied_y += 1.0;
            }
            if dx * dy > 0.0 {
                concordant += 1.0;
            } else if dx * dy < 0.0 {
                discordant += 1.0;
            }
        }
    }
    Some((concordant - discordant) / ((pairs - tied_x) * (pairs - tied_y)).sqrt())
}

/// Macro one-vs-rest AUC over classes with at least one positive.
pub fn auc_ovr(truth: &[usize], probs: &[[f64; CLASSES]]) -> Option<f64> {
    let mut aucs = Vec::new();
    for c in 0..CLASSES {
        let mut wins = 0.0;
        let mut comparisons = 0.0;
        let mut positives = 0;
        for i in 0..truth.len() {
            if truth[i] != c {
                continue;
            }
            positives += 1;
            for j in 0..truth.len() {
                if truth[j] == c {
                    continue;
                }
                comparisons += 1.0;
                let (p, n) = (probs[i][c], probs[j][c]);
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        if positives == 0 {
            continue;
        }
        if comparisons == 0.0 {
            return None;
        }
        aucs.push(wins / comparisons);
    }
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Macro F1 over classes that occur in the truth or the predictions.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    let mut scores = Vec::new();
    for c in 0..CLASSES {
        let tp = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
        let actual = truth.iter().filter(|t| **t == c).count() as f64;
        let predicted = pred.iter().filter(|p| **p == c).count() as f64;
        if actual == 0.0 && predicted == 0.0 {
            continue;
        }
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        scores.push(if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        });
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn direction(earlier: f64, later: f64, eps: f64) -> i32 {
    if (earlier - later).abs() <= eps {
        0
    } else if earlier > later {
        1
    } else {
        -1
    }
}

fn patients(preds: &[LabeledPrediction]) -> BTreeMap<&str, Vec<&LabeledPrediction>> {
    let mut groups: BTreeMap<&str, Vec<&LabeledPrediction>> = BTreeMap::new();
    for p in preds {
        groups.entry(p.patient_id.as_str()).or_default().push(p);
    }
    for g in groups.values_mut() {
        g.sort_by(|a, b| (a.date_days, &a.utterance_id).cmp(&(b.date_days, &b.utterance_id)));
    }
    groups
}

pub fn pairwise_accuracy(preds: &[LabeledPrediction], eps: f64) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for g in patients(preds).values() {
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                total += 1;
                let t = direction(g[i].true_score as f64, g[j].true_score as f64, 0.0);
                hit += (t == direction(g[i].pred_score, g[j].pred_score, eps)) as usize;
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

fn mean_over_patients(preds: &[LabeledPrediction], stat: fn(&[f64], &[f64]) -> Option<f64>) -> Option<f64> {
    let values: Vec<f64> = patients(preds)
        .values()
        .filter_map(|g| {
            let t: Vec<f64> = g.iter().map(|p| p.true_score as f64).collect();
            let y: Vec<f64> = g.iter().map(|p| p.pred_score).collect();
            stat(&t, &y)
        })
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn class_of(p: &LabeledPrediction, branch: Branch) -> usize {
    match (branch, p.pred_probs) {
        (Branch::Classification, Some(probs)) => {
            let mut best = 0;
            for c in 1..CLASSES {
                if probs[c] > probs[best] {
                    best = c;
                }
            }
            best
        }
        _ => p.pred_score.round().clamp(0.0, 4.0) as usize,
    }
}

/// Every report metric by brute force, in report column order.
pub fn brute_force(preds: &[LabeledPrediction], branch: Branch, eps: f64) -> [Option<f64>; 7] {
    let truth: Vec<usize> = preds.iter().map(|p| p.true_score).collect();
    let classes: Vec<usize> = preds.iter().map(|p| class_of(p, branch)).collect();
    let correct = truth.iter().zip(&classes).filter(|(t, c)| t == c).count();
    let auc = match branch {
        Branch::Classification => {
            let probs: Vec<[f64; CLASSES]> = preds.iter().map(|p| p.pred_probs.unwrap()).collect();
            auc_ovr(&truth, &probs)
        }
        Branch::Regression => None,
    };
    let mse = match branch {
        Branch::Regression => {
            Some(preds.iter().map(|p| (p.pred_score - p.true_score as f64).powi(2)).sum::<f64>() / preds.len() as f64)
        }
        Branch::Classification => None,
    };
    [
        Some(macro_f1(&truth, &classes)),
        Some(correct as f64 / preds.len() as f64),
        auc,
        mean_over_patients(preds, spearman),
        mean_over_patients(preds, kendall_tau_b),
        pairwise_accuracy(preds, eps),
        mse,
    ]
}

/// A random instance of at most 20 records over up to four patients, with
/// values drawn from small grids so that ties are common.
pub fn random_instance<R: Rng>(rng: &mut R) -> Vec<LabeledPrediction> {
    let n = rng.random_range(1..=20);
    let patients = rng.random_range(1..=4);
    (0..n)
        .map(|i| {
            let mut probs = [0.0; CLASSES];
            for p in probs.iter_mut() {
                *p = rng.random_range(0..4) as f64;
            }
            probs[rng.random_range(0..CLASSES)] += 1.0;
            let total: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= total);
            let pred_score = if rng.random_bool(0.5) {
                rng.random_range(0..9) as f64 * 0.5
            } else {
                rng.random_range(-0.5..4.5)
            };
            LabeledPrediction {
                patient_id: format!("P{}", rng.random_range(0..patients)),
                utterance_id: format!("U{i:02}"),
                date_days: rng.random_range(0..6) * 30,
                true_score: rng.random_range(0..CLASSES),
                pred_score,
                pred_probs: Some(probs),
            }
        })
        .collect()
}

/// Largest disagreement between the library report and the brute-force
/// values on one instance, over both branches. A metric defined by one side
/// and undefined by the other counts as infinite.
pub fn max_disagreement(preds: &[LabeledPrediction], eps: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for branch in [Branch::Regression, Branch::Classification] {
        let report = evaluate_predictions(preds, branch, eps).unwrap();
        let expected = brute_force(preds, branch, eps);
        for (name, want) in METRIC_COLUMNS.iter().zip(expected) {
            let diff = match (report.metric(name), want) {
                (Some(a), Some(b)) => (a - b).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            };
            worst = worst.max(diff);
        }
    }
    worst
}
