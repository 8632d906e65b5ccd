//! Central finite differences, used to verify the tape's analytic gradients.

use rand::{Rng, SeedableRng};

use crate::error::{NumError, Result};
use crate::tape::{Tape, Var, MASK_DROP};
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`]; keeps near-zero gradients from
/// turning rounding noise into a large ratio.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-2;

/// Numerical gradient of `f` with respect to `inputs[which]`.
pub fn central_difference<F>(f: F, inputs: &[Tensor], which: usize, h: f64) -> Result<Tensor>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].len() {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + h;
        let plus = f(&work)?;
        work[which].data_mut()[i] = orig - h;
        let minus = f(&work)?;
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over all elements.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Step and tolerance used throughout the gradient checks.
pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Builds a scalar loss on a fresh tape from leaf variables.
pub type Build<'f> = dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var> + 'f;

/// Worst relative error between the tape's gradient and central
/// differences, over every element of every input.
pub fn check_graph(build: &Build<'_>, inputs: &[Tensor], h: f64) -> Result<f64> {
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param_owned(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param_owned(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let numeric = central_difference(eval, inputs, i, h)?;
        worst = worst.max(relative_error(&grads.wrt(*v), &numeric, RELATIVE_ERROR_FLOOR));
    }
    Ok(worst)
}

/// Uniform `[-1, 1)` tensor.
pub fn uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Contracts `x` to a scalar with fixed weights so every output element
/// carries a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape<'_>, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

/// Random attention mask: each off-diagonal entry dropped with probability
/// 0.3, the diagonal always kept.
pub fn random_mask<R: Rng + ?Sized>(batch: usize, len: usize, rng: &mut R) -> Tensor {
    let mut mask = Tensor::zeros(&[batch, len, len]);
    for b in 0..batch {
        for i in 0..len {
            for j in 0..len {
                if i != j && rng.random_bool(0.3) {
                    mask.data_mut()[(b * len + i) * len + j] = MASK_DROP;
                }
            }
        }
    }
    mask
}

/// Names accepted by [`check_op`]; together they cover every
/// differentiable op on the tape.
pub const OP_CASES: [&str; 14] = [
    "matmul",
    "add_bias",
    "add_sub_mul_scale",
    "mean_axis",
    "segment_mean",
    "layer_norm",
    "softmax",
    "relu",
    "attention",
    "embedding",
    "columns_pick_ln",
    "reshape",
    "dropout",
    "composition",
];

/// Gradient check of one op on random toy shapes drawn from `rng`.
/// Returns the worst relative error.
pub fn check_op<R: Rng + ?Sized>(name: &str, rng: &mut R) -> Result<f64> {
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (a, b, c) = (dim(1, 8), dim(1, 8), dim(1, 8));
    macro_rules! run {
        ($inputs:expr, |$t:ident, $v:ident| $body:expr) => {{
            let inputs: Vec<Tensor> = $inputs;
            let out_shape = {
                let mut $t = Tape::new();
                let $v: Vec<Var> = inputs.iter().map(|x| $t.param_owned(x.clone())).collect();
                let $t = &mut $t;
                let $v = &$v[..];
                let y = $body?;
                $t.value(y).shape().to_vec()
            };
            let weights = uniform(&out_shape, rng);
            check_graph(
                &|$t: &mut Tape<'_>, $v: &[Var]| {
                    let y = $body?;
                    weighted_sum($t, y, &weights)
                },
                &inputs,
                STEP,
            )
        }};
    }
    match name {
        "matmul" => run!(vec![uniform(&[a, b], rng), uniform(&[b, c], rng)], |t, v| t.matmul(v[0], v[1])),
        "add_bias" => run!(vec![uniform(&[a, b], rng), uniform(&[b], rng)], |t, v| t.add_bias(v[0], v[1])),
        "add_sub_mul_scale" => run!(vec![uniform(&[a, b], rng), uniform(&[a, b], rng)], |t, v| {
            t.add(v[0], v[1])
                .and_then(|s| t.sub(s, v[1]))
                .and_then(|s| t.mul(s, v[1]))
                .and_then(|p| t.scale(p, -1.7))
        }),
        "mean_axis" => {
            let axis = rng.random_range(0..3);
            run!(vec![uniform(&[a, b, c], rng)], |t, v| t.mean_axis(v[0], axis))
        }
        "segment_mean" => {
            let split = rng.random_range(0..a);
            let segments = vec![(0..=split).collect::<Vec<_>>(), (0..a).rev().collect()];
            run!(vec![uniform(&[a, b], rng)], |t, v| t.segment_mean(v[0], segments.clone()))
        }
        "layer_norm" => {
            let c = c.max(2);
            run!(vec![uniform(&[a, c], rng), uniform(&[c], rng), uniform(&[c], rng)], |t, v| t
                .layer_norm(v[0], v[1], v[2], 1e-5))
        }
        "softmax" => run!(vec![uniform(&[a, b], rng)], |t, v| t.softmax(v[0])),
        "relu" => {
            // Keep inputs away from the kink so the difference quotient is exact.
            let mut x = uniform(&[a, b], rng);
            x.data_mut().iter_mut().for_each(|v| *v += 0.05f64.copysign(*v));
            run!(vec![x], |t, v| t.relu(v[0]))
        }
        "attention" => {
            let (batch, len, heads) = (a.min(3), b.min(6), c.min(2));
            let d = heads * rng.random_range(1..=4);
            let mask = random_mask(batch, len, rng);
            let shape = [batch, len, d];
            run!(
                vec![uniform(&shape, rng), uniform(&shape, rng), uniform(&shape, rng)],
                |t, v| t.attention(v[0], v[1], v[2], &mask, heads)
            )
        }
        "embedding" => {
            let ids: Vec<usize> = (0..c).map(|_| rng.random_range(0..a)).collect();
            run!(vec![uniform(&[a, b], rng)], |t, v| t.embedding(v[0], ids.clone()))
        }
        "columns_pick_ln" => {
            let cols = b.max(2);
            let start = rng.random_range(0..cols - 1);
            let index: Vec<usize> = (0..a).map(|_| rng.random_range(0..cols - start)).collect();
            run!(vec![uniform(&[a, cols], rng)], |t, v| t
                .columns(v[0], start, cols)
                .and_then(|x| t.softmax(x))
                .and_then(|p| t.pick(p, index.clone()))
                .and_then(|p| t.ln_clamped(p, 1e-12).map(|(l, _)| l)))
        }
        "reshape" => run!(vec![uniform(&[a * b, c], rng), uniform(&[a, b, c], rng)], |t, v| t
            .reshape(v[0], vec![a, b, c])
            .and_then(|r| t.mul(r, v[1]))),
        "dropout" => {
            let seed = rng.random::<u64>();
            run!(vec![uniform(&[a, b], rng)], |t, v| t.dropout(
                v[0],
                0.3,
                &mut rand::rngs::StdRng::seed_from_u64(seed)
            ))
        }
        "composition" => {
            // Linear, attention, residual, layer norm, ReLU, pooling and a
            // softmax head stacked together.
            let (l, d) = (a.clamp(2, 5), b.clamp(2, 6));
            let mask = random_mask(1, l, rng);
            run!(
                vec![
                    uniform(&[1, l, d], rng),
                    uniform(&[d, d], rng),
                    uniform(&[d], rng),
                    uniform(&[d], rng),
                    uniform(&[d, 3], rng),
                ],
                |t, v| t
                    .matmul(v[0], v[1])
                    .and_then(|h| t.add_bias(h, v[2]))
                    .and_then(|h| t.attention(h, h, h, &mask, 1))
                    .and_then(|a| t.add(a, v[0]))
                    .and_then(|r| t.layer_norm(r, v[3], v[2], 1e-5))
                    .and_then(|n| t.relu(n))
                    .and_then(|n| t.mean_axis(n, 1))
                    .and_then(|p| t.matmul(p, v[4]))
                    .and_then(|o| t.softmax(o))
            )
        }
        other => Err(NumError::Contract {
            op: "check_op",
            detail: format!("unknown op case {other:?}"),
        }),
    }
}
