//! From frame features to padded token batches.

use std::ops::Range;

use numcore::{Tensor, MASK_DROP};

use super::config::{AlstConfig, PoolingMode, PositionMode};
use super::position::{date_ranks, PositionDiagnostics};
use crate::data::{FeatureMatrix, SessionRecord};
use crate::error::{Error, Result};

/// Mean of the frames in each segment, one row per segment.
pub fn pool_segments(frames: &FeatureMatrix, segments: &[Range<usize>]) -> Result<Tensor> {
    let dim = frames.dim();
    let mut out = Vec::with_capacity(segments.len() * dim);
    let mut prev_end = 0;
    for (i, seg) in segments.iter().enumerate() {
        if seg.start >= seg.end {
            return Err(Error::Data(format!("segment {i} [{}, {}) is empty", seg.start, seg.end)));
        }
        if seg.end > frames.frames() || seg.start < prev_end {
            return Err(Error::Data(format!(
                "segment {i} [{}, {}) is out of order or beyond {} frames",
                seg.start,
                seg.end,
                frames.frames()
            )));
        }
        prev_end = seg.end;
        let mut acc = vec![0.0f64; dim];
        for t in seg.clone() {
            for (a, &v) in acc.iter_mut().zip(frames.frame(t)) {
                *a += v as f64;
            }
        }
        let n = (seg.end - seg.start) as f64;
        out.extend(acc.into_iter().map(|a| a / n));
    }
    Ok(Tensor::new(vec![segments.len(), dim], out)?)
}

/// One patient's utterances as a token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientSequence {
    pub patient_id: String,
    pub utterance_ids: Vec<String>,
    pub dates: Vec<i64>,
    pub scores: Vec<usize>,
    pub input_dim: usize,
    /// `[num_tokens, input_dim]`, row-major.
    pub tokens: Vec<f64>,
    pub token_ids: Vec<usize>,
    /// Index of each token inside its utterance, restarting at 0.
    pub within_index: Vec<usize>,
    pub token_utterance: Vec<usize>,
}

impl PatientSequence {
    pub fn num_tokens(&self) -> usize {
        self.token_ids.len()
    }

    pub fn num_utterances(&self) -> usize {
        self.scores.len()
    }

    /// Reorders utterances: utterance `i` of the result is `order[i]` of
    /// `self`. Dates move with their utterances, so the result need not be
    /// date-sorted; used to probe order sensitivity.
    pub fn permuted(&self, order: &[usize]) -> PatientSequence {
        let mut out = PatientSequence {
            patient_id: self.patient_id.clone(),
            utterance_ids: order.iter().map(|&i| self.utterance_ids[i].clone()).collect(),
            dates: order.iter().map(|&i| self.dates[i]).collect(),
            scores: order.iter().map(|&i| self.scores[i]).collect(),
            input_dim: self.input_dim,
            tokens: Vec::new(),
            token_ids: Vec::new(),
            within_index: Vec::new(),
            token_utterance: Vec::new(),
        };
        for (new_u, &old_u) in order.iter().enumerate() {
            for t in (0..self.num_tokens()).filter(|&t| self.token_utterance[t] == old_u) {
                out.tokens.extend_from_slice(&self.tokens[t * self.input_dim..(t + 1) * self.input_dim]);
                out.token_ids.push(self.token_ids[t]);
                out.within_index.push(self.within_index[t]);
                out.token_utterance.push(new_u);
            }
        }
        out
    }

    /// Keeps only the listed utterances, in the given order.
    pub fn subset(&self, keep: &[usize]) -> PatientSequence {
        self.permuted(keep)
    }
}

/// Pools each utterance into tokens per the configured pooling mode.
/// Records are taken in the order given (date order from a manifest).
pub fn build_patient_sequence(
    config: &AlstConfig,
    records: &[SessionRecord],
    features: &[FeatureMatrix],
) -> Result<PatientSequence> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("patient with no utterances".into()))?;
    let mut seq = PatientSequence {
        patient_id: first.patient_id.clone(),
        utterance_ids: Vec::new(),
        dates: Vec::new(),
        scores: Vec::new(),
        input_dim: config.input_dim,
        tokens: Vec::new(),
        token_ids: Vec::new(),
        within_index: Vec::new(),
        token_utterance: Vec::new(),
    };
    for (u, (rec, feats)) in records.iter().zip(features).enumerate() {
        if feats.dim() != config.input_dim {
            return Err(Error::Config(format!(
                "utterance {} has feature dim {}, model expects {}",
                rec.utterance_id,
                feats.dim(),
                config.input_dim
            )));
        }
        let (segments, labels): (Vec<Range<usize>>, Vec<&str>) = match config.pooling_mode {
            PoolingMode::Utterance => (vec![0..feats.frames()], vec![""]),
            PoolingMode::Phoneme => rec
                .alignment
                .iter()
                .map(|s| (s.start_frame..s.end_frame_exclusive, s.phoneme.as_str()))
                .unzip(),
        };
        if segments.is_empty() {
            return Err(Error::Data(format!("utterance {} has no alignment segments", rec.utterance_id)));
        }
        let pooled = pool_segments(feats, &segments)
            .map_err(|e| Error::Data(format!("utterance {}: {e}", rec.utterance_id)))?;
        seq.tokens.extend_from_slice(pooled.data());
        for (j, label) in labels.iter().enumerate() {
            seq.token_ids.push(config.token_id(label));
            seq.within_index.push(j);
            seq.token_utterance.push(u);
        }
        seq.utterance_ids.push(rec.utterance_id.clone());
        seq.dates.push(rec.date_days);
        seq.scores.push(rec.class());
    }
    Ok(seq)
}

/// Several patient sequences padded to a common length.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    pub batch: usize,
    pub len: usize,
    /// `[batch, len, input_dim]`; padding rows are zero.
    pub tokens: Tensor,
    pub token_ids: Vec<usize>,
    pub within_index: Vec<usize>,
    /// Dense date rank of each token's utterance within its patient.
    pub order_rank: Vec<usize>,
    pub day: Vec<i64>,
    pub is_padding: Vec<bool>,
    /// Additive `[batch, len, len]` mask. Real tokens see the real tokens of
    /// their patient (or only their own utterance when positions are off);
    /// padding tokens see only themselves.
    pub mask: Tensor,
    /// Flat token rows of each utterance, in batch order.
    pub utterance_rows: Vec<Vec<usize>>,
    pub scores: Vec<usize>,
    /// `(sequence index, utterance index)` of each utterance.
    pub utterance_origin: Vec<(usize, usize)>,
    pub diagnostics: PositionDiagnostics,
}

pub fn pad_batch(config: &AlstConfig, seqs: &[&PatientSequence]) -> Result<PaddedBatch> {
    if seqs.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let b = seqs.len();
    let l = seqs.iter().map(|s| s.num_tokens()).max().unwrap_or(0);
    let d = config.input_dim;
    let mut tokens = vec![0.0; b * l * d];
    let mut token_ids = vec![0; b * l];
    let mut within_index = vec![0; b * l];
    let mut order_rank = vec![0; b * l];
    let mut day = vec![0; b * l];
    let mut is_padding = vec![true; b * l];
    let mut mask = vec![MASK_DROP; b * l * l];
    let mut utterance_rows = Vec::new();
    let mut scores = Vec::new();
    let mut utterance_origin = Vec::new();
    let isolated = !config.position_mode.is_longitudinal();

    for (bi, seq) in seqs.iter().enumerate() {
        if seq.input_dim != d {
            return Err(Error::Config(format!(
                "sequence {} has input dim {}, model expects {d}",
                seq.patient_id, seq.input_dim
            )));
        }
        let n = seq.num_tokens();
        let ranks = date_ranks(&seq.dates);
        tokens[bi * l * d..(bi * l + n) * d].copy_from_slice(&seq.tokens);
        let mut rows = vec![Vec::new(); seq.num_utterances()];
        for t in 0..n {
            let row = bi * l + t;
            let u = seq.token_utterance[t];
            token_ids[row] = seq.token_ids[t];
            within_index[row] = seq.within_index[t];
            order_rank[row] = ranks[u];
            day[row] = seq.dates[u];
            is_padding[row] = false;
            rows[u].push(row);
            for s in 0..n {
                if !isolated || seq.token_utterance[s] == u {
                    mask[row * l + s] = 0.0;
                }
            }
        }
        for t in n..l {
            mask[(bi * l + t) * l + t] = 0.0;
        }
        for (u, r) in rows.into_iter().enumerate() {
            if r.is_empty() {
                return Err(Error::Data(format!(
                    "utterance {} of patient {} has no tokens",
                    seq.utterance_ids[u], seq.patient_id
                )));
            }
            utterance_rows.push(r);
            scores.push(seq.scores[u]);
            utterance_origin.push((bi, u));
        }
    }

    let mut diagnostics = PositionDiagnostics::default();
    if matches!(config.position_mode, PositionMode::OrderTrainable | PositionMode::DayTrainable) {
        diagnostics.within_clamped = within_index
            .iter()
            .zip(&is_padding)
            .filter(|(&j, &p)| !p && j >= config.max_utterance_tokens)
            .count();
    }
    if config.position_mode == PositionMode::OrderTrainable {
        diagnostics.order_clamped = order_rank
            .iter()
            .zip(&is_padding)
            .filter(|(&r, &p)| !p && r >= config.max_order)
            .count();
    }
    if config.position_mode == PositionMode::DayTrainable {
        let last = (config.max_day_buckets - 1) as i64;
        diagnostics.day_clamped = day
            .iter()
            .zip(&is_padding)
            .filter(|(&dd, &p)| !p && dd / config.day_bucket_size as i64 > last)
            .count();
    }
    if matches!(config.position_mode, PositionMode::DaySinusoid | PositionMode::DayTrainable) {
        if let Some((bi, _)) = day.iter().enumerate().find(|(i, &dd)| !is_padding[*i] && dd < 0) {
            return Err(Error::Data(format!(
                "patient {} has a negative day value",
                seqs[bi / l.max(1)].patient_id
            )));
        }
    }

    Ok(PaddedBatch {
        batch: b,
        len: l,
        tokens: Tensor::new(vec![b, l, d], tokens)?,
        token_ids,
        within_index,
        order_rank,
        day,
        is_padding,
        mask: Tensor::new(vec![b, l, l], mask)?,
        utterance_rows,
        scores,
        utterance_origin,
        diagnostics,
    })
}
