//! Forward pass and loss on a gradient tape.

use numcore::{Tape, Tensor, Var};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::config::AlstConfig;
use super::params::{AlstParams, Linear, Norm};
use super::position::{sinusoid_embeddings, trainable_position_ids};
use super::sequence::PaddedBatch;
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};

/// Floor applied to the true-class probability inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-utterance model outputs in batch order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub y_hat: Vec<f64>,
    pub p_hat: Vec<[f64; NUM_CLASSES]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Regression,
    Classification,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Regression => "regression",
            Branch::Classification => "classification",
        }
    }
}

/// Classification: argmax of `p_hat`, ties to the lower class. Regression:
/// `round(y_hat)` clamped to the score range.
pub fn predict_class(outputs: &ModelOutput, branch: Branch) -> Vec<usize> {
    match branch {
        Branch::Classification => outputs.p_hat.iter().map(|p| argmax(p)).collect(),
        Branch::Regression => outputs.y_hat.iter().map(|&y| round_score(y)).collect(),
    }
}

pub fn round_score(y: f64) -> usize {
    y.round().clamp(0.0, (NUM_CLASSES - 1) as f64) as usize
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Loss split into its two sums, before normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub squared_error: f64,
    pub cross_entropy: f64,
    pub utterances: usize,
    pub clamped: usize,
}

impl LossParts {
    pub fn total(&self, lambda_ce: f64) -> f64 {
        let ce = if lambda_ce == 0.0 { 0.0 } else { lambda_ce * self.cross_entropy };
        (self.squared_error + ce) / self.utterances as f64
    }
}

/// `(Σ (ŷ − y)² + λ Σ −ln p̂_y) / U` evaluated on plain values.
pub fn alst_loss(outputs: &ModelOutput, scores: &[usize], lambda_ce: f64) -> Result<f64> {
    if outputs.y_hat.len() != scores.len() || outputs.p_hat.len() != scores.len() || scores.is_empty() {
        return Err(Error::Data(format!(
            "{} outputs for {} scores",
            outputs.y_hat.len(),
            scores.len()
        )));
    }
    let mut parts = LossParts {
        utterances: scores.len(),
        ..LossParts::default()
    };
    for ((&y_hat, p), &y) in outputs.y_hat.iter().zip(&outputs.p_hat).zip(scores) {
        parts.squared_error += (y_hat - y as f64).powi(2);
        if lambda_ce != 0.0 {
            if p[y] <= PROB_FLOOR {
                parts.clamped += 1;
            }
            parts.cross_entropy -= p[y].max(PROB_FLOOR).ln();
        }
    }
    if parts.clamped > 0 {
        log::warn!("{} true-class probabilities clamped at {PROB_FLOOR:e}", parts.clamped);
    }
    Ok(parts.total(lambda_ce))
}

/// A recorded forward pass. Parameters are borrowed, so the pass lives no
/// longer than the weights.
pub struct ForwardPass<'a> {
    pub tape: Tape<'a>,
    pub param_vars: Vec<Var>,
    /// `[U, 1]` regression outputs.
    pub y_hat: Var,
    /// `[U, C]` class probabilities.
    pub probs: Var,
    /// `[batch, len, hidden]` final token states `h`.
    pub hidden: Var,
    pub attention: Vec<Var>,
}

impl ForwardPass<'_> {
    pub fn outputs(&self) -> ModelOutput {
        let y_hat = self.tape.value(self.y_hat).data().to_vec();
        let p_hat = self
            .tape
            .value(self.probs)
            .data()
            .chunks(NUM_CLASSES)
            .map(|c| c.try_into().expect("five classes"))
            .collect();
        ModelOutput { y_hat, p_hat }
    }

    /// Appends the training loss. Returns the loss node and its parts.
    pub fn loss(&mut self, scores: &[usize], lambda_ce: f64) -> Result<(Var, LossParts)> {
        let u = scores.len();
        let tape = &mut self.tape;
        let target = tape.constant(Tensor::new(vec![u, 1], scores.iter().map(|&s| s as f64).collect())?);
        let diff = tape.sub(self.y_hat, target)?;
        let sq = tape.mul(diff, diff)?;
        let mut total = tape.sum(sq)?;
        let mut parts = LossParts {
            squared_error: tape.value(total).item()?,
            utterances: u,
            ..LossParts::default()
        };
        if lambda_ce != 0.0 {
            let picked = tape.pick(self.probs, scores.to_vec())?;
            let (log_p, clamped) = tape.ln_clamped(picked, PROB_FLOOR)?;
            if clamped > 0 {
                log::warn!("{clamped} true-class probabilities clamped at {PROB_FLOOR:e}");
            }
            let nll = tape.sum(log_p)?;
            parts.cross_entropy = -tape.value(nll).item()?;
            parts.clamped = clamped;
            let weighted = tape.scale(nll, -lambda_ce)?;
            total = tape.add(total, weighted)?;
        }
        let loss = tape.scale(total, 1.0 / u as f64)?;
        Ok((loss, parts))
    }
}

struct Ctx<'t, 'a> {
    tape: &'t mut Tape<'a>,
    vars: &'t [Var],
}

impl Ctx<'_, '_> {
    fn linear(&mut self, x: Var, l: Linear) -> Result<Var> {
        let y = self.tape.matmul(x, self.vars[l.weight])?;
        Ok(self.tape.add_bias(y, self.vars[l.bias])?)
    }

    fn norm(&mut self, x: Var, n: Norm, eps: f64) -> Result<Var> {
        Ok(self.tape.layer_norm(x, self.vars[n.gain], self.vars[n.bias], eps)?)
    }

    fn lookup(&mut self, table: usize, ids: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let e = self.tape.embedding(self.vars[table], ids)?;
        Ok(self.tape.reshape(e, shape.to_vec())?)
    }
}

fn dropout(tape: &mut Tape<'_>, x: Var, p: f64, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => Ok(tape.dropout(x, p, r)?),
        _ => Ok(x),
    }
}

/// Runs the encoder and scorer on `batch`. Dropout applies only when an RNG
/// is supplied (training mode).
pub fn forward<'a>(
    params: &'a AlstParams,
    batch: &PaddedBatch,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<ForwardPass<'a>> {
    let config: &AlstConfig = &params.config;
    let layout = &params.layout;
    let (b, l, h) = (batch.batch, batch.len, config.hidden_dim);
    if batch.tokens.shape() != [b, l, config.input_dim] || batch.mask.shape() != [b, l, l] {
        return Err(Error::Config(format!(
            "batch tokens {:?} / mask {:?} do not fit input_dim {}",
            batch.tokens.shape(),
            batch.mask.shape(),
            config.input_dim
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.param(t)).collect();
    let mut cx = Ctx {
        tape: &mut tape,
        vars: &vars,
    };
    let shape = [b, l, h];

    let tokens = cx.tape.constant(batch.tokens.clone());
    let mut x = cx.linear(tokens, layout.input)?;
    if let Some(pos) = sinusoid_embeddings(config, batch) {
        let pos = cx.tape.constant(pos);
        x = cx.tape.add(x, pos)?;
    }
    if let Some((within, date_ids)) = trainable_position_ids(config, batch) {
        let within_table = layout.within_position.expect("trainable mode has a within table");
        let date_table = layout.order_embedding.or(layout.day_embedding).expect("trainable mode has a date table");
        let a = cx.lookup(within_table, within, &shape)?;
        let d = cx.lookup(date_table, date_ids, &shape)?;
        x = cx.tape.add(x, a)?;
        x = cx.tape.add(x, d)?;
    }

    let mut attention = Vec::with_capacity(layout.blocks.len());
    for blk in &layout.blocks {
        let q = cx.linear(x, blk.query)?;
        let k = cx.linear(x, blk.key)?;
        let v = cx.linear(x, blk.value)?;
        let att = cx.tape.attention(q, k, v, &batch.mask, config.num_heads)?;
        attention.push(att);
        let a = cx.linear(att, blk.attn_out)?;
        let a = dropout(cx.tape, a, config.dropout, &mut dropout_rng)?;
        let r = cx.tape.add(x, a)?;
        x = cx.norm(r, blk.ln1, config.layer_norm_eps)?;
        let f = cx.linear(x, blk.ffn_in)?;
        let f = cx.tape.relu(f)?;
        let f = cx.linear(f, blk.ffn_out)?;
        let f = dropout(cx.tape, f, config.dropout, &mut dropout_rng)?;
        let r = cx.tape.add(x, f)?;
        x = cx.norm(r, blk.ln2, config.layer_norm_eps)?;
    }

    let out = cx.linear(x, layout.output)?;
    let tok = cx.lookup(layout.token_embedding, batch.token_ids.clone(), &shape)?;
    let hidden = cx.tape.add(out, tok)?;

    let (y_hat, probs) = score(&mut cx, hidden, batch, params)?;
    Ok(ForwardPass {
        tape,
        param_vars: vars,
        y_hat,
        probs,
        hidden,
        attention,
    })
}

/// Utterance mean pooling, then the joint `[ŷ, o]` linear head.
fn score(cx: &mut Ctx<'_, '_>, hidden: Var, batch: &PaddedBatch, params: &AlstParams) -> Result<(Var, Var)> {
    let pooled = cx.tape.segment_mean(hidden, batch.utterance_rows.clone())?;
    let o = cx.linear(pooled, params.layout.scorer)?;
    let c = params.config.num_classes;
    let y_hat = cx.tape.columns(o, 0, 1)?;
    let logits = cx.tape.columns(o, 1, 1 + c)?;
    let probs = cx.tape.softmax(logits)?;
    Ok((y_hat, probs))
}

/// Positional contribution `e^pos` for every token of `batch`,
/// `[batch, len, hidden]`. Zero when the mode carries no positions.
pub fn position_embeddings(params: &AlstParams, batch: &PaddedBatch) -> Tensor {
    let config = &params.config;
    let h = config.hidden_dim;
    if let Some(t) = sinusoid_embeddings(config, batch) {
        return t;
    }
    let mut out = Tensor::zeros(&[batch.batch, batch.len, h]);
    if let Some((within, date_ids)) = trainable_position_ids(config, batch) {
        let layout = &params.layout;
        let wt = &params.tensors[layout.within_position.expect("within table")];
        let dt = &params.tensors[layout.order_embedding.or(layout.day_embedding).expect("date table")];
        for (row, (w, d)) in within.iter().zip(&date_ids).enumerate() {
            for (k, dst) in out.row_mut(row).iter_mut().enumerate() {
                *dst = wt.row(*w)[k] + dt.row(*d)[k];
            }
        }
    }
    out
}

/// Evaluation-mode outputs without keeping the tape around.
pub fn predict(params: &AlstParams, batch: &PaddedBatch) -> Result<ModelOutput> {
    Ok(forward(params, batch, None)?.outputs())
}
