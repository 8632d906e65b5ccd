//! Positional information for the longitudinal sequence: the index of a
//! token inside its utterance plus either the date rank or the day count of
//! its utterance.

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use super::config::{AlstConfig, PositionMode};
use super::sequence::PaddedBatch;

/// How many tokens had a position clamped into the last table row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionDiagnostics {
    pub within_clamped: usize,
    pub order_clamped: usize,
    pub day_clamped: usize,
}

impl PositionDiagnostics {
    pub fn merge(&mut self, other: PositionDiagnostics) {
        self.within_clamped += other.within_clamped;
        self.order_clamped += other.order_clamped;
        self.day_clamped += other.day_clamped;
    }

    pub fn any(&self) -> bool {
        self.within_clamped + self.order_clamped + self.day_clamped > 0
    }
}

/// Dense rank of each date among `dates`: the earliest date gets 0 and
/// equal dates share a rank.
pub fn date_ranks(dates: &[i64]) -> Vec<usize> {
    let mut distinct = dates.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    dates
        .iter()
        .map(|d| distinct.binary_search(d).expect("date present"))
        .collect()
}

/// Standard sinusoidal encoding: even slots `sin(v / 10000^(2i/d))`, odd
/// slots the matching cosine.
pub fn sinusoid(value: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| {
            let pair = (k / 2) as f64;
            let angle = value / 10000f64.powf(2.0 * pair / dim as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Fixed `[batch, len, hidden]` embeddings for the sinusoid modes; `None`
/// for every other mode. Padding rows are zero.
pub fn sinusoid_embeddings(config: &AlstConfig, batch: &PaddedBatch) -> Option<Tensor> {
    let h = config.hidden_dim;
    let value_of = |row: usize| -> f64 {
        match config.position_mode {
            PositionMode::OrderSinusoid => batch.order_rank[row] as f64,
            _ => batch.day[row] as f64,
        }
    };
    if !matches!(config.position_mode, PositionMode::OrderSinusoid | PositionMode::DaySinusoid) {
        return None;
    }
    let rows = batch.batch * batch.len;
    let mut data = vec![0.0; rows * h];
    for row in (0..rows).filter(|&r| !batch.is_padding[r]) {
        let a = sinusoid(batch.within_index[row] as f64, h);
        let b = sinusoid(value_of(row), h);
        for (k, dst) in data[row * h..(row + 1) * h].iter_mut().enumerate() {
            *dst = a[k] + b[k];
        }
    }
    Some(Tensor::new(vec![batch.batch, batch.len, h], data).expect("shape"))
}

/// Table row ids `(within, date)` for the trainable modes, clamped into
/// range. Padding rows use row 0 and are masked out downstream.
pub fn trainable_position_ids(config: &AlstConfig, batch: &PaddedBatch) -> Option<(Vec<usize>, Vec<usize>)> {
    let date_ids: Vec<usize> = match config.position_mode {
        PositionMode::OrderTrainable => batch
            .order_rank
            .iter()
            .map(|&r| r.min(config.max_order - 1))
            .collect(),
        PositionMode::DayTrainable => batch
            .day
            .iter()
            .map(|&d| ((d.max(0) as usize) / config.day_bucket_size).min(config.max_day_buckets - 1))
            .collect(),
        _ => return None,
    };
    let within = batch
        .within_index
        .iter()
        .map(|&j| j.min(config.max_utterance_tokens - 1))
        .collect();
    Some((within, date_ids))
}
