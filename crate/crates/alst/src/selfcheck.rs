//! Probes of the model's structural guarantees on small random models:
//! analytic gradients, utterance-order equivariance and isolation.

use numcore::gradcheck::{central_difference, relative_error, RELATIVE_ERROR_FLOOR, STEP};
use numcore::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{generate_cohort, LoadedCohort, SynthConfig};
use crate::error::Result;
use crate::model::{forward, pad_batch, AlstConfig, AlstParams, ModelOutput, PatientSequence, PoolingMode, PositionMode};
use crate::rng::stream_rng;
use crate::train::{build_sequences, predict_sequences};

/// A tiny model and cohort: hidden 8, at most three utterances per
/// patient, four-dimensional features and a five-phoneme prompt.
pub struct ToyProblem {
    pub params: AlstParams,
    pub sequences: Vec<PatientSequence>,
}

const TOY_TRANSCRIPT: &str = "Y UW1\nT AH0|UW0 D\n";

/// Smallest allowed distance between a ReLU input and zero, ten finite
/// difference steps. Closer inputs flip sign under the perturbation and
/// make central differences meaningless there.
const KINK_MARGIN: f64 = 10.0 * STEP;
const MAX_DRAWS: u64 = 256;

/// Builds a toy problem for `seed` with the given modes. Weights are drawn
/// with a wide spread so that attention is far from uniform, and redrawn
/// from the next stream until every ReLU input clears [`KINK_MARGIN`].
pub fn toy_problem(seed: u64, position_mode: PositionMode, pooling_mode: PoolingMode) -> Result<ToyProblem> {
    let synth = SynthConfig {
        seed,
        num_patients: 3,
        sessions_per_patient: [2, 3],
        feature_dim: 4,
        phoneme_frames: [1, 2],
        silence_frames: [1, 2],
        class_separation: 0.5,
        test_fraction: None,
        transcript: Some(TOY_TRANSCRIPT.into()),
        ..SynthConfig::default()
    };
    let cohort = LoadedCohort::from_synthetic(generate_cohort(&synth)?)?;
    let config = AlstConfig {
        input_dim: 4,
        hidden_dim: 8,
        ffn_dim: 12,
        num_heads: 1,
        position_mode,
        pooling_mode,
        max_order: 4,
        max_day_buckets: 16,
        max_utterance_tokens: 64,
        embedding_init_std: 0.5,
        phoneme_vocab: cohort.manifest.phoneme_vocab.clone(),
        ..AlstConfig::default()
    };
    let sequences = build_sequences(&config, &cohort)?;
    // One unpadded batch per patient, so that padding rows (which never
    // reach the loss) do not count towards the margin.
    let batches = sequences
        .iter()
        .map(|s| pad_batch(&config, &[s]))
        .collect::<Result<Vec<_>>>()?;
    'draws: for draw in 0..MAX_DRAWS {
        let params = AlstParams::init(&config, &mut stream_rng(seed, 77 + draw))?;
        for batch in &batches {
            let pass = forward(&params, batch, None)?;
            if pass.tape.relu_margin().is_some_and(|m| m < KINK_MARGIN) {
                continue 'draws;
            }
        }
        return Ok(ToyProblem { params, sequences });
    }
    Err(crate::Error::Config(format!(
        "toy problem {seed}: no weight draw keeps ReLU inputs {KINK_MARGIN:e} away from zero"
    )))
}

/// Worst relative error between the backward pass and central differences
/// of the full loss (`λ_CE = 1`) over every parameter tensor, on a batch of
/// every toy patient.
pub fn model_gradient_error(problem: &ToyProblem) -> Result<f64> {
    let refs: Vec<&PatientSequence> = problem.sequences.iter().collect();
    let batch = pad_batch(&problem.params.config, &refs)?;
    let lambda = 1.0;
    let loss_of = |tensors: &[Tensor]| -> numcore::Result<f64> {
        let mut p = problem.params.clone();
        p.tensors = tensors.to_vec();
        let mut pass = forward(&p, &batch, None).map_err(to_num)?;
        let (loss, _) = pass.loss(&batch.scores, lambda).map_err(to_num)?;
        pass.tape.value(loss).item()
    };
    let mut pass = forward(&problem.params, &batch, None)?;
    let (loss, _) = pass.loss(&batch.scores, lambda)?;
    let grads = pass.tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, &v) in pass.param_vars.iter().enumerate() {
        let numeric = central_difference(loss_of, &problem.params.tensors, i, STEP)?;
        worst = worst.max(relative_error(&grads.wrt(v), &numeric, RELATIVE_ERROR_FLOOR));
    }
    Ok(worst)
}

fn to_num(e: crate::Error) -> numcore::NumError {
    match e {
        crate::Error::Numeric { source, .. } => source,
        other => numcore::NumError::Contract {
            op: "forward",
            detail: other.to_string(),
        },
    }
}

fn single(params: &AlstParams, seq: &PatientSequence) -> Result<ModelOutput> {
    Ok(predict_sequences(params, std::slice::from_ref(seq))?.remove(0))
}

/// Largest change in any `ŷ` or `p̂` entry when one patient's utterances are
/// fed in a random order, after undoing the permutation.
pub fn permutation_error<R: Rng>(problem: &ToyProblem, rng: &mut R) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seq in &problem.sequences {
        let base = single(&problem.params, seq)?;
        let mut order: Vec<usize> = (0..seq.num_utterances()).collect();
        order.shuffle(rng);
        let out = single(&problem.params, &seq.permuted(&order))?;
        for (new, &old) in order.iter().enumerate() {
            worst = worst.max((out.y_hat[new] - base.y_hat[old]).abs());
            for (a, b) in out.p_hat[new].iter().zip(&base.p_hat[old]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

/// Whether every utterance's outputs are bitwise identical when scored
/// alone, inside its full patient sequence, and inside a padded batch with
/// the other patients.
pub fn isolation_holds(problem: &ToyProblem) -> Result<bool> {
    let together = predict_sequences(&problem.params, &problem.sequences)?;
    for (seq, joint) in problem.sequences.iter().zip(&together) {
        let full = single(&problem.params, seq)?;
        if full != *joint {
            return Ok(false);
        }
        for u in 0..seq.num_utterances() {
            let alone = single(&problem.params, &seq.subset(&[u]))?;
            if alone.y_hat[0].to_bits() != full.y_hat[u].to_bits()
                || alone.p_hat[0].iter().zip(&full.p_hat[u]).any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_problem_is_small() {
        let p = toy_problem(3, PositionMode::LongitudinalNoPos, PoolingMode::Utterance).unwrap();
        assert_eq!(p.sequences.len(), 3);
        assert!(p.sequences.iter().all(|s| (2..=3).contains(&s.num_utterances())));
        assert!(p.params.config.hidden_dim <= 16);
    }
}
