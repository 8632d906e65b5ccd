//! Evaluation metrics: macro F1, accuracy, macro one-vs-rest AUC,
//! intra-patient Spearman and Kendall tau-b, pairwise change accuracy, MSE.
//!
//! Every function sorts its input into a canonical order before summing, so
//! results do not depend on how records were ordered by the caller.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::model::forward::{argmax, round_score, Branch};

/// Default band inside which two continuous predictions count as "no change".
pub const TIE_EPSILON: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrediction {
    pub patient_id: String,
    pub utterance_id: String,
    pub date_days: i64,
    pub true_score: usize,
    pub pred_score: f64,
    pub pred_probs: Option<[f64; NUM_CLASSES]>,
}

impl LabeledPrediction {
    pub fn pred_class(&self, branch: Branch) -> usize {
        match (branch, &self.pred_probs) {
            (Branch::Classification, Some(p)) => argmax(p),
            _ => round_score(self.pred_score),
        }
    }
}

fn canonical(preds: &[LabeledPrediction]) -> Vec<&LabeledPrediction> {
    let mut v: Vec<&LabeledPrediction> = preds.iter().collect();
    v.sort_by(|a, b| {
        (&a.patient_id, a.date_days, &a.utterance_id)
            .cmp(&(&b.patient_id, b.date_days, &b.utterance_id))
            .then(a.true_score.cmp(&b.true_score))
            .then(a.pred_score.total_cmp(&b.pred_score))
    });
    v
}

/// Records of each patient, date-ordered.
fn by_patient(preds: &[LabeledPrediction]) -> Vec<Vec<&LabeledPrediction>> {
    let mut groups: Vec<Vec<&LabeledPrediction>> = Vec::new();
    for p in canonical(preds) {
        match groups.last_mut() {
            Some(g) if g[0].patient_id == p.patient_id => g.push(p),
            _ => groups.push(vec![p]),
        }
    }
    groups
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSummary {
    /// `confusion[true][pred]`.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    /// F1 per class; `None` for classes absent from both truth and predictions.
    pub f1_per_class: [Option<f64>; NUM_CLASSES],
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// One-vs-rest F1 per class and their mean over classes that occur in the
/// truth or the predictions.
pub fn confusion_and_f1(truth: &[usize], pred: &[usize]) -> Result<ClassificationSummary> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(Error::Metric(format!(
            "need equal non-empty truth/prediction lists, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= NUM_CLASSES || p >= NUM_CLASSES {
            return Err(Error::Metric(format!("class out of range: truth {t}, prediction {p}")));
        }
        confusion[t][p] += 1;
    }
    let mut f1_per_class = [None; NUM_CLASSES];
    for (c, f1) in f1_per_class.iter_mut().enumerate() {
        let tp = confusion[c][c] as f64;
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        if support + predicted == 0 {
            continue;
        }
        // 2TP / (2TP + FP + FN) equals the harmonic mean of precision and recall.
        *f1 = Some(2.0 * tp / (support + predicted) as f64);
    }
    let scored: Vec<f64> = f1_per_class.iter().flatten().copied().collect();
    let macro_f1 = scored.iter().sum::<f64>() / scored.len() as f64;
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    Ok(ClassificationSummary {
        confusion,
        f1_per_class,
        macro_f1,
        accuracy: correct as f64 / truth.len() as f64,
    })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC: probability a positive outranks a negative, ties
/// counted as one half.
pub fn mann_whitney_auc(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let all: Vec<f64> = positives.iter().chain(negatives).copied().collect();
    let ranks = average_ranks(&all);
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    let rank_sum: f64 = ranks[..positives.len()].iter().sum();
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Macro one-vs-rest AUC over classes present in the truth. `None` when the
/// truth holds a single class.
pub fn auc_ovr_macro(truth: &[usize], probs: &[[f64; NUM_CLASSES]]) -> Option<f64> {
    let mut aucs = Vec::new();
    for c in 0..NUM_CLASSES {
        let (pos, neg): (Vec<_>, Vec<_>) = truth.iter().zip(probs).partition(|(t, _)| **t == c);
        let pos: Vec<f64> = pos.into_iter().map(|(_, p)| p[c]).collect();
        let neg: Vec<f64> = neg.into_iter().map(|(_, p)| p[c]).collect();
        if pos.is_empty() {
            continue;
        }
        aucs.push(mann_whitney_auc(&pos, &neg)?);
    }
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// Spearman's rho as the Pearson correlation of average ranks. `None` when
/// `x` is constant; 0 when only `y` is.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || is_constant(x) {
        return None;
    }
    if is_constant(y) {
        return Some(0.0);
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn sign(o: Ordering) -> i64 {
    match o {
        Ordering::Less => -1,
        Ordering::Equal => 0,
        Ordering::Greater => 1,
    }
}

/// Kendall tau-b. `None` when `x` is constant; 0 when only `y` is.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || is_constant(x) {
        return None;
    }
    if is_constant(y) {
        return Some(0.0);
    }
    let (mut s, mut tx, mut ty, mut n0) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let a = sign(x[i].total_cmp(&x[j]));
            let b = sign(y[i].total_cmp(&y[j]));
            s += a * b;
            n0 += 1;
            tx += (a == 0) as i64;
            ty += (b == 0) as i64;
        }
    }
    let denom = (((n0 - tx) * (n0 - ty)) as f64).sqrt();
    Some((s as f64 / denom).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankStatistic {
    Spearman,
    Kendall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRanking {
    pub patient_id: String,
    pub records: usize,
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
    pub pairs: usize,
    pub pairs_correct: usize,
}

/// Mean of the per-patient statistic over patients with at least two
/// records and non-constant truth, plus how many patients were skipped.
pub fn intra_patient_rank(preds: &[LabeledPrediction], statistic: RankStatistic) -> (Option<f64>, usize) {
    let mut values = Vec::new();
    let mut excluded = 0;
    for g in by_patient(preds) {
        let truth: Vec<f64> = g.iter().map(|p| p.true_score as f64).collect();
        let pred: Vec<f64> = g.iter().map(|p| p.pred_score).collect();
        let v = match statistic {
            RankStatistic::Spearman => spearman(&truth, &pred),
            RankStatistic::Kendall => kendall_tau_b(&truth, &pred),
        };
        match v {
            Some(v) => values.push(v),
            None => excluded += 1,
        }
    }
    let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
    (mean, excluded)
}

fn change_label(earlier: f64, later: f64, eps: f64) -> i8 {
    let d = earlier - later;
    if d.abs() <= eps {
        0
    } else if d > 0.0 {
        1
    } else {
        -1
    }
}

/// `(correct, total)` over date-ordered pairs of one patient.
fn patient_pairs(g: &[&LabeledPrediction], eps: f64) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for i in 0..g.len() {
        for j in i + 1..g.len() {
            let t = change_label(g[i].true_score as f64, g[j].true_score as f64, 0.0);
            let p = change_label(g[i].pred_score, g[j].pred_score, eps);
            total += 1;
            correct += (t == p) as usize;
        }
    }
    (correct, total)
}

/// Fraction of within-patient pairs whose predicted direction of change
/// (decline, improvement, none) matches the truth, pooled over patients.
pub fn pairwise_accuracy(preds: &[LabeledPrediction], tie_epsilon: f64) -> Option<f64> {
    let (mut correct, mut total) = (0, 0);
    for g in by_patient(preds) {
        let (c, t) = patient_pairs(&g, tie_epsilon);
        correct += c;
        total += t;
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

pub fn mse_metric(preds: &[LabeledPrediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Metric("MSE of no records".into()));
    }
    let total: f64 = canonical(preds)
        .iter()
        .map(|p| (p.pred_score - p.true_score as f64).powi(2))
        .sum();
    Ok(total / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub branch: Branch,
    pub records: usize,
    pub patients: usize,
    pub macro_f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc_ovr_macro: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub pairwise_accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub tie_epsilon: f64,
    /// Patients left out of rho/tau because their truth never changes.
    pub constant_truth_patients: usize,
    pub f1_per_class: [Option<f64>; NUM_CLASSES],
    pub support: [usize; NUM_CLASSES],
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub per_patient: Vec<PatientRanking>,
}

pub const METRIC_COLUMNS: [&str; 7] = [
    "macro_f1",
    "accuracy",
    "auc_ovr_macro",
    "spearman_rho",
    "kendall_tau",
    "pairwise_accuracy",
    "mse",
];

impl MetricReport {
    /// Values in [`METRIC_COLUMNS`] order.
    pub fn metric_values(&self) -> [Option<f64>; 7] {
        [
            self.macro_f1,
            self.accuracy,
            self.auc_ovr_macro,
            self.spearman_rho,
            self.kendall_tau,
            self.pairwise_accuracy,
            self.mse,
        ]
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        METRIC_COLUMNS
            .iter()
            .position(|c| *c == name)
            .and_then(|i| self.metric_values()[i])
    }

    /// Stable-order JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Full report for one branch. Classification uses `argmax p̂` for F1 and
/// accuracy and `p̂` for AUC; regression rounds `pred_score` and reports
/// MSE. Ranking metrics always use `pred_score`.
pub fn evaluate_predictions(preds: &[LabeledPrediction], branch: Branch, tie_epsilon: f64) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::Metric("no predictions to evaluate".into()));
    }
    let sorted: Vec<LabeledPrediction> = canonical(preds).into_iter().cloned().collect();
    let truth: Vec<usize> = sorted.iter().map(|p| p.true_score).collect();
    let classes: Vec<usize> = sorted.iter().map(|p| p.pred_class(branch)).collect();
    let cls = confusion_and_f1(&truth, &classes)?;
    let auc = match branch {
        Branch::Classification => {
            let probs: Option<Vec<[f64; NUM_CLASSES]>> = sorted.iter().map(|p| p.pred_probs).collect();
            let probs = probs.ok_or_else(|| Error::Metric("classification branch needs probabilities".into()))?;
            auc_ovr_macro(&truth, &probs)
        }
        Branch::Regression => None,
    };
    let (rho, excluded) = intra_patient_rank(&sorted, RankStatistic::Spearman);
    let (tau, _) = intra_patient_rank(&sorted, RankStatistic::Kendall);
    let groups = by_patient(&sorted);
    let per_patient = groups
        .iter()
        .map(|g| {
            let t: Vec<f64> = g.iter().map(|p| p.true_score as f64).collect();
            let y: Vec<f64> = g.iter().map(|p| p.pred_score).collect();
            let (pairs_correct, pairs) = patient_pairs(g, tie_epsilon);
            PatientRanking {
                patient_id: g[0].patient_id.clone(),
                records: g.len(),
                spearman: spearman(&t, &y),
                kendall: kendall_tau_b(&t, &y),
                pairs,
                pairs_correct,
            }
        })
        .collect();
    let mut support = [0; NUM_CLASSES];
    for &t in &truth {
        support[t] += 1;
    }
    Ok(MetricReport {
        branch,
        records: sorted.len(),
        patients: groups.len(),
        macro_f1: Some(cls.macro_f1),
        accuracy: Some(cls.accuracy),
        auc_ovr_macro: auc,
        spearman_rho: rho,
        kendall_tau: tau,
        pairwise_accuracy: pairwise_accuracy(&sorted, tie_epsilon),
        mse: match branch {
            Branch::Regression => Some(mse_metric(&sorted)?),
            Branch::Classification => None,
        },
        tie_epsilon,
        constant_truth_patients: excluded,
        f1_per_class: cls.f1_per_class,
        support,
        confusion: cls.confusion,
        per_patient,
    })
}
