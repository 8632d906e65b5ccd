//! Utterance-level linear classifier: mean-pooled frames, one-vs-rest
//! hinge loss with L2, plain SGD. Each utterance is scored on its own.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, LoadedCohort, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_predictions, LabeledPrediction, MetricReport, TIE_EPSILON};
use crate::model::Branch;
use crate::rng::{stream_rng, STREAM_BASELINE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
    pub tie_epsilon: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 50,
            learning_rate: 0.01,
            l2: 1e-4,
            seed: 0,
            tie_epsilon: TIE_EPSILON,
        }
    }
}

/// Mean over all frames.
pub fn utterance_mean(features: &FeatureMatrix) -> Vec<f64> {
    let mut mean = vec![0.0; features.dim()];
    for t in 0..features.frames() {
        for (m, &v) in mean.iter_mut().zip(features.frame(t)) {
            *m += v as f64;
        }
    }
    let n = features.frames().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Fitted classifier. Inputs are standardized with training statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    /// One weight row per class, bias last.
    pub weights: Vec<Vec<f64>>,
}

impl LinearBaseline {
    pub fn fit(train: &LoadedCohort, config: &BaselineConfig) -> Result<Self> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (p, feats) in train.manifest.patients.iter().zip(&train.features) {
            for (r, f) in p.records.iter().zip(feats) {
                xs.push(utterance_mean(f));
                ys.push(r.class());
            }
        }
        let Some(first) = ys.first() else {
            return Err(Error::Data("baseline training set is empty".into()));
        };
        if ys.iter().all(|y| y == first) {
            return Err(Error::Data(format!("baseline training data holds only class {first}")));
        }
        let dim = xs[0].len();
        let n = xs.len() as f64;
        let center: Vec<f64> = (0..dim).map(|d| xs.iter().map(|x| x[d]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..dim)
            .map(|d| {
                let var = xs.iter().map(|x| (x[d] - center[d]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut model = LinearBaseline {
            center,
            scale,
            weights: vec![vec![0.0; dim + 1]; NUM_CLASSES],
        };
        let xs: Vec<Vec<f64>> = xs.iter().map(|x| model.standardize(x)).collect();

        let mut rng = stream_rng(config.seed, STREAM_BASELINE);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                for (c, w) in model.weights.iter_mut().enumerate() {
                    let target = if ys[i] == c { 1.0 } else { -1.0 };
                    let margin = target * decision(w, &xs[i]);
                    for v in &mut w[..dim] {
                        *v -= config.learning_rate * config.l2 * *v;
                    }
                    if margin < 1.0 {
                        for (v, &x) in w[..dim].iter_mut().zip(&xs[i]) {
                            *v += config.learning_rate * target * x;
                        }
                        w[dim] += config.learning_rate * target;
                    }
                }
            }
        }
        Ok(model)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(v, (c, s))| (v - c) / s)
            .collect()
    }

    /// Per-class decision values for one utterance.
    pub fn decisions(&self, features: &FeatureMatrix) -> Vec<f64> {
        let x = self.standardize(&utterance_mean(features));
        self.weights.iter().map(|w| decision(w, &x)).collect()
    }

    /// Highest decision value, ties to the lower class.
    pub fn predict(&self, features: &FeatureMatrix) -> usize {
        crate::model::argmax(&self.decisions(features))
    }

    /// Hard-label predictions for every utterance of `cohort`.
    pub fn predictions(&self, cohort: &LoadedCohort) -> Vec<LabeledPrediction> {
        let mut out = Vec::new();
        for (p, feats) in cohort.manifest.patients.iter().zip(&cohort.features) {
            for (r, f) in p.records.iter().zip(feats) {
                out.push(LabeledPrediction {
                    patient_id: r.patient_id.clone(),
                    utterance_id: r.utterance_id.clone(),
                    date_days: r.date_days,
                    true_score: r.class(),
                    pred_score: self.predict(f) as f64,
                    pred_probs: None,
                });
            }
        }
        out
    }
}

fn decision(w: &[f64], x: &[f64]) -> f64 {
    let dim = x.len();
    w[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[dim]
}

/// Fits on `train` and reports on `test`. The classifier emits hard labels,
/// so the report is a regression-style one on the predicted class: AUC is
/// absent and ranking metrics see the label.
pub fn linear_baseline(train: &LoadedCohort, test: &LoadedCohort, config: &BaselineConfig) -> Result<MetricReport> {
    if let (Some(a), Some(b)) = (train.feature_dim(), test.feature_dim()) {
        if a != b {
            return Err(Error::Data(format!("train feature dim {a} differs from test dim {b}")));
        }
    }
    let model = LinearBaseline::fit(train, config)?;
    evaluate_predictions(&model.predictions(test), Branch::Regression, config.tie_epsilon)
}
