//! Training loop and evaluation.

use std::time::Instant;

use numcore::{adam_step, AdamConfig, AdamState, LrSchedule, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{batch_patients, LoadedCohort};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_predictions, LabeledPrediction, MetricReport, TIE_EPSILON};
use crate::model::{
    build_patient_sequence, forward, pad_batch, AlstConfig, AlstParams, Branch, ModelOutput, PatientSequence, PoolingMode,
    PositionDiagnostics,
};
use crate::rng::{dropout_rng, stream_rng, STREAM_INIT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: AlstConfig,
    pub epochs: u64,
    /// Patients per optimizer step.
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay_start_epoch: u64,
    pub decay_step_epochs: u64,
    pub decay_rate: f64,
    pub seed: u64,
    /// Evaluate on the held-out cohort every this many epochs; 0 disables.
    pub eval_every: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables.
    pub grad_clip: Option<f64>,
    pub tie_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = LrSchedule::default();
        TrainConfig {
            model: AlstConfig::default(),
            epochs: 100,
            batch_size: 32,
            base_lr: s.base_lr,
            warmup_steps: s.warmup_steps,
            decay_start_epoch: s.decay_start_epoch,
            decay_step_epochs: s.decay_step_epochs,
            decay_rate: s.decay_rate,
            seed: 0,
            eval_every: 0,
            adam: AdamConfig::default(),
            grad_clip: None,
            tie_epsilon: TIE_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            decay_start_epoch: self.decay_start_epoch,
            decay_step_epochs: self.decay_step_epochs,
            decay_rate: self.decay_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule().validate().map_err(|m| Error::Config(format!("schedule: {m}")))?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if !(self.tie_epsilon >= 0.0) {
            return Err(Error::Config("tie_epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    /// Mean over batches of the normalized batch loss.
    pub loss: f64,
    pub squared_error: f64,
    pub cross_entropy: f64,
    pub lr_first: f64,
    pub lr_last: f64,
    pub steps: usize,
    /// Kept out of serialized logs so that output trees stay reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub epoch: u64,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
    /// Learning rate used at every optimizer step, in order.
    pub lr_trace: Vec<f64>,
    pub evals: Vec<EvalLog>,
    pub position_diagnostics: PositionDiagnostics,
    pub clamped_probabilities: usize,
    pub final_checkpoint: Option<String>,
    pub abort: Option<String>,
}

impl RunLog {
    /// One JSON object per line: epochs, then evaluations, then a summary.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out += &serde_json::json!({"kind": "epoch", "data": e}).to_string();
            out.push('\n');
        }
        for e in &self.evals {
            out += &serde_json::json!({"kind": "eval", "data": e}).to_string();
            out.push('\n');
        }
        let summary = serde_json::json!({
            "kind": "summary",
            "steps": self.lr_trace.len(),
            "position_diagnostics": self.position_diagnostics,
            "clamped_probabilities": self.clamped_probabilities,
            "final_checkpoint": self.final_checkpoint,
            "abort": self.abort,
        });
        out += &summary.to_string();
        out.push('\n');
        out
    }
}

/// Result of [`train`]. On a numeric abort `abort` is set and `checkpoint`
/// holds the last consistent weights (optimizer steps are atomic).
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: RunLog,
    pub abort: Option<Error>,
}

pub fn build_sequences(config: &AlstConfig, cohort: &LoadedCohort) -> Result<Vec<PatientSequence>> {
    if cohort.num_patients() == 0 {
        return Err(Error::Data("cohort has no patients".into()));
    }
    if let Some(d) = cohort.feature_dim() {
        if d != config.input_dim {
            return Err(Error::Config(format!(
                "cohort feature dim {d} does not match model input_dim {}",
                config.input_dim
            )));
        }
    }
    cohort
        .manifest
        .patients
        .iter()
        .zip(&cohort.features)
        .map(|(p, f)| build_patient_sequence(config, &p.records, f))
        .collect()
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Initial weights for `config`, drawn from the run seed.
pub fn init_params(config: &TrainConfig) -> Result<AlstParams> {
    AlstParams::init(&config.model, &mut stream_rng(config.seed, STREAM_INIT))
}

/// Trains from scratch, or continues from `resume`, on `cohort`. When
/// `eval_cohort` is given and `eval_every > 0`, evaluates the regression
/// branch periodically.
pub fn train(
    cohort: &LoadedCohort,
    config: &TrainConfig,
    eval_cohort: Option<&LoadedCohort>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let sequences = build_sequences(&config.model, cohort)?;
    let eval_sequences = match eval_cohort {
        Some(c) if config.eval_every > 0 => Some(build_sequences(&config.model, c)?),
        _ => None,
    };
    let schedule = config.schedule();

    let (mut params, mut adam, start_epoch, mut global_step) = match resume {
        Some(ckpt) => {
            if ckpt.params.config != config.model {
                return Err(Error::Config("resume checkpoint was trained with a different model config".into()));
            }
            if ckpt.seed != config.seed || ckpt.rng != RngState::for_epoch(config.seed, ckpt.epochs_completed) {
                return Err(Error::Config("resume checkpoint was trained with a different seed".into()));
            }
            let adam = ckpt
                .optimizer
                .unwrap_or_else(|| AdamState::new(config.adam, &ckpt.params.tensors));
            (ckpt.params, adam, ckpt.epochs_completed, ckpt.global_step)
        }
        None => {
            let params = init_params(config)?;
            let adam = AdamState::new(config.adam, &params.tensors);
            (params, adam, 0, 0)
        }
    };

    let mut log = RunLog::default();
    let mut abort = None;
    let mut completed = start_epoch;

    'epochs: for epoch in start_epoch..config.epochs {
        let started = Instant::now();
        let mut drop_rng = dropout_rng(config.seed, epoch);
        let batches = batch_patients(sequences.len(), config.batch_size, config.seed, epoch);
        let (mut loss_sum, mut se_sum, mut ce_sum) = (0.0, 0.0, 0.0);
        let mut lr_first = None;
        let mut lr = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let step = (|| -> Result<(f64, f64, f64, Vec<Tensor>, PositionDiagnostics, usize)> {
                let seqs: Vec<&PatientSequence> = idx.iter().map(|&i| &sequences[i]).collect();
                let batch = pad_batch(&config.model, &seqs)?;
                let rng: Option<&mut dyn rand::RngCore> =
                    if config.model.dropout > 0.0 { Some(&mut drop_rng) } else { None };
                let mut pass = forward(&params, &batch, rng)?;
                let (loss, parts) = pass.loss(&batch.scores, config.model.lambda_ce)?;
                let value = pass.tape.value(loss).item()?;
                let mut grads = pass.tape.backward(loss)?;
                let g: Vec<Tensor> = pass.param_vars.iter().map(|&v| grads.take(v)).collect();
                let n = parts.utterances as f64;
                Ok((value, parts.squared_error / n, parts.cross_entropy / n, g, batch.diagnostics, parts.clamped))
            })();
            let outcome = step.and_then(|(value, se, ce, mut g, diag, clamped)| {
                if let Some(c) = config.grad_clip {
                    clip(&mut g, c);
                }
                lr = schedule.lr_at(global_step, epoch);
                adam_step(&mut params.tensors, &g, &mut adam, lr)?;
                Ok((value, se, ce, diag, clamped))
            });
            match outcome {
                Ok((value, se, ce, diag, clamped)) => {
                    lr_first.get_or_insert(lr);
                    log.lr_trace.push(lr);
                    log.position_diagnostics.merge(diag);
                    log.clamped_probabilities += clamped;
                    loss_sum += value;
                    se_sum += se;
                    ce_sum += ce;
                    global_step += 1;
                }
                Err(e) => {
                    let e = match e {
                        Error::Numeric { source, .. } => {
                            Error::numeric(format!("epoch {epoch}, batch {bi}"), source)
                        }
                        other => return Err(other),
                    };
                    log.abort = Some(e.to_string());
                    abort = Some(e);
                    break 'epochs;
                }
            }
        }
        let nb = batches.len() as f64;
        let entry = EpochLog {
            epoch,
            loss: loss_sum / nb,
            squared_error: se_sum / nb,
            cross_entropy: ce_sum / nb,
            lr_first: lr_first.unwrap_or(0.0),
            lr_last: lr,
            steps: batches.len(),
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} lr {:.3e} ({:.1}s)",
            entry.loss,
            entry.lr_last,
            entry.wall_time_secs
        );
        log.epochs.push(entry);
        completed = epoch + 1;
        if let Some(eval_seqs) = &eval_sequences {
            if completed % config.eval_every == 0 {
                let report = evaluate_sequences(&params, eval_seqs, Branch::Regression, config.tie_epsilon)?;
                log.evals.push(EvalLog { epoch, report });
            }
        }
    }
    if log.position_diagnostics.any() {
        log::warn!("positions clamped into table range: {:?}", log.position_diagnostics);
    }

    let checkpoint = Checkpoint {
        params,
        epochs_completed: completed,
        global_step,
        seed: config.seed,
        rng: RngState::for_epoch(config.seed, completed),
        optimizer: Some(adam),
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        abort,
    })
}

/// Batch size used for evaluation; results do not depend on it.
const EVAL_BATCH: usize = 16;

/// Model outputs for every utterance of `sequences`, in sequence order.
pub fn predict_sequences(params: &AlstParams, sequences: &[PatientSequence]) -> Result<Vec<ModelOutput>> {
    let mut out = Vec::with_capacity(sequences.len());
    for chunk in sequences.chunks(EVAL_BATCH) {
        let refs: Vec<&PatientSequence> = chunk.iter().collect();
        let batch = pad_batch(&params.config, &refs)?;
        let all = forward(params, &batch, None)?.outputs();
        let mut cursor = 0;
        for s in chunk {
            let n = s.num_utterances();
            out.push(ModelOutput {
                y_hat: all.y_hat[cursor..cursor + n].to_vec(),
                p_hat: all.p_hat[cursor..cursor + n].to_vec(),
            });
            cursor += n;
        }
    }
    Ok(out)
}

/// Labeled predictions for one branch. Regression scores with `ŷ`;
/// classification scores with the expected class `Σ c p̂_c`.
pub fn labeled_predictions(
    sequences: &[PatientSequence],
    outputs: &[ModelOutput],
    branch: Branch,
) -> Vec<LabeledPrediction> {
    let mut preds = Vec::new();
    for (s, o) in sequences.iter().zip(outputs) {
        for u in 0..s.num_utterances() {
            let p = o.p_hat[u];
            let pred_score = match branch {
                Branch::Regression => o.y_hat[u],
                Branch::Classification => p.iter().enumerate().map(|(c, v)| c as f64 * v).sum(),
            };
            preds.push(LabeledPrediction {
                patient_id: s.patient_id.clone(),
                utterance_id: s.utterance_ids[u].clone(),
                date_days: s.dates[u],
                true_score: s.scores[u],
                pred_score,
                pred_probs: Some(p),
            });
        }
    }
    preds
}

pub fn evaluate_sequences(
    params: &AlstParams,
    sequences: &[PatientSequence],
    branch: Branch,
    tie_epsilon: f64,
) -> Result<MetricReport> {
    let outputs = predict_sequences(params, sequences)?;
    evaluate_predictions(&labeled_predictions(sequences, &outputs, branch), branch, tie_epsilon)
}

/// Evaluation-mode metrics of `params` on `cohort`.
pub fn evaluate(params: &AlstParams, cohort: &LoadedCohort, branch: Branch, tie_epsilon: f64) -> Result<MetricReport> {
    let sequences = build_sequences(&params.config, cohort)?;
    evaluate_sequences(params, &sequences, branch, tie_epsilon)
}

/// Fills the data-dependent model fields from `cohort`: `input_dim` always
/// follows the feature files, and a phoneme-pooling model with an empty
/// vocabulary takes the cohort's phoneme labels.
pub fn fit_model_to_cohort(model: &AlstConfig, cohort: &LoadedCohort) -> Result<AlstConfig> {
    let mut model = model.clone();
    model.input_dim = cohort
        .feature_dim()
        .ok_or_else(|| Error::Data("cohort has no feature files".into()))?;
    if model.pooling_mode == PoolingMode::Phoneme && model.phoneme_vocab.is_empty() {
        model.phoneme_vocab = cohort.manifest.phoneme_vocab.clone();
    }
    Ok(model)
}
