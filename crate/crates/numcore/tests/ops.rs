use numcore::gradcheck::{check_op, random_mask, uniform as random, OP_CASES, TOLERANCE};
use numcore::{NumError, Tape, Tensor, MASK_DROP};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gradients_match(case: &str) {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = check_op(case, &mut rng).unwrap();
        assert!(err <= TOLERANCE, "{case}: seed {seed} relative error {err:e}");
    }
}

#[test]
fn matmul_gradients() {
    gradients_match("matmul");
}

#[test]
fn bias_add_and_elementwise_gradients() {
    gradients_match("add_bias");
    gradients_match("add_sub_mul_scale");
}

#[test]
fn mean_and_segment_mean_gradients() {
    gradients_match("mean_axis");
    gradients_match("segment_mean");
}

#[test]
fn layer_norm_softmax_relu_gradients() {
    gradients_match("layer_norm");
    gradients_match("softmax");
    gradients_match("relu");
}

#[test]
fn attention_gradients() {
    gradients_match("attention");
}

#[test]
fn embedding_columns_pick_ln_gradients() {
    gradients_match("embedding");
    gradients_match("columns_pick_ln");
}

#[test]
fn reshape_and_dropout_gradients() {
    gradients_match("reshape");
    gradients_match("dropout");
}

/// Three stacked layers mixing the whole op set.
#[test]
fn random_three_layer_composition() {
    gradients_match("composition");
}

#[test]
fn unknown_case_is_an_error() {
    assert!(check_op("conv2d", &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert_eq!(OP_CASES.len(), 14);
}

#[test]
fn relu_margin_is_the_closest_input_to_the_kink() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.5, -0.02, 3.0]));
    assert_eq!(tape.relu_margin(), None);
    tape.relu(x).unwrap();
    let y = tape.constant(Tensor::vector(vec![-0.3, 0.01]));
    tape.relu(y).unwrap();
    assert_eq!(tape.relu_margin(), Some(0.01));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn masked_attention_position_gets_exactly_zero_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::new();
    let q = tape.constant(random(&[1, 3, 4], &mut rng));
    let k = tape.constant(random(&[1, 3, 4], &mut rng));
    let v = tape.constant(random(&[1, 3, 4], &mut rng));
    let mut mask = Tensor::zeros(&[1, 3, 3]);
    for i in 0..2 {
        mask.data_mut()[i * 3 + 2] = MASK_DROP;
    }
    let out = tape.attention(q, k, v, &mask, 1).unwrap();
    let w = tape.attention_weights(out).unwrap();
    for i in 0..2 {
        let row = &w.data()[i * 3..i * 3 + 3];
        assert_eq!(row[2], 0.0);
        assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_position_attention_returns_the_value() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::new(vec![1, 1, 2], vec![5.0, -1.0]).unwrap());
    let k = tape.constant(Tensor::new(vec![1, 1, 2], vec![0.3, 2.0]).unwrap());
    let v = tape.constant(Tensor::new(vec![1, 1, 2], vec![1.5, -2.5]).unwrap());
    let out = tape.attention(q, k, v, &Tensor::zeros(&[1, 1, 1]), 1).unwrap();
    assert_eq!(tape.value(out).data(), &[1.5, -2.5]);
}

#[test]
fn attention_rejects_fully_dropped_rows_and_bad_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
    let all_dropped = Tensor::filled(&[1, 2, 2], MASK_DROP);
    assert!(matches!(tape.attention(x, x, x, &all_dropped, 1), Err(NumError::Contract { .. })));
    let soft = Tensor::filled(&[1, 2, 2], -3.0);
    assert!(tape.attention(x, x, x, &soft, 1).is_err());
}

#[test]
fn layer_norm_matches_direct_formula() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let g = tape.constant(Tensor::filled(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let eps = 1e-5;
    let y = tape.layer_norm(x, g, b, eps).unwrap();
    // Independent two-pass mean/variance.
    let vals = [1.0f64, 2.0, 3.0];
    let mean = vals.iter().sum::<f64>() / 3.0;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    for (got, v) in tape.value(y).data().iter().zip(vals) {
        let want = (v - mean) / (var + eps).sqrt();
        assert!((got - want).abs() < 1e-10);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let w = Tensor::vector(vec![0.5, -1.0, 3.0]);
    let mut tape = Tape::new();
    let v = tape.param(&w);
    let s = tape.sum(v).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(v).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_sum_of_squares() {
    let w = Tensor::vector(vec![1.0, -2.0]);
    let mut tape = Tape::new();
    let v = tape.param(&w);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(v).data(), &[2.0, -4.0]);
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let a = Tensor::vector(vec![1.0, 2.0]);
    let b = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
    let mut tape = Tape::new();
    let va = tape.param(&a);
    let vb = tape.param(&b);
    let s = tape.sum(va).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(vb).is_none());
    assert_eq!(g.wrt(vb), Tensor::zeros(&[2, 2]));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let a = Tensor::vector(vec![1.0, 2.0]);
    let mut tape = Tape::new();
    let va = tape.param(&a);
    assert!(matches!(tape.backward(va), Err(NumError::Contract { .. })));
}

#[test]
fn shape_mismatch_is_reported() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(NumError::Shape { op: "matmul", .. })));
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.add(a, c), Err(NumError::Shape { op: "add", .. })));
}

#[test]
fn non_finite_output_names_the_op() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1e300]));
    let err = tape.mul(a, a).unwrap_err();
    assert_eq!(err, NumError::NonFinite { op: "mul" });
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let x = Tensor::new(vec![rows, cols], vals[..rows * cols].to_vec()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.softmax(v).unwrap();
        let out = tape.value(y);
        for r in 0..rows {
            prop_assert!(out.row(r).iter().all(|&p| p >= 0.0));
            prop_assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_weights_sum_to_one_over_kept_positions(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, l) = (rng.random_range(1..3), rng.random_range(1..7));
        let mask = random_mask(b, l, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[b, l, 4], &mut rng));
        let out = tape.attention(x, x, x, &mask, 2).unwrap();
        let w = tape.attention_weights(out).unwrap();
        for bi in 0..b {
            for h in 0..2 {
                for i in 0..l {
                    let row = &w.data()[((bi * 2 + h) * l + i) * l..][..l];
                    let mrow = &mask.data()[(bi * l + i) * l..][..l];
                    let mut kept = 0.0;
                    for (p, m) in row.iter().zip(mrow) {
                        if *m != 0.0 { prop_assert_eq!(*p, 0.0); } else { kept += p; }
                    }
                    prop_assert!((kept - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
