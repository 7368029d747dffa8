use cvaegg_autodiff::gradcheck::{check, numerical_gradient};
use cvaegg_autodiff::{
    adam_step, clip_gradients, global_norm, AdamConfig, AdamState, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

type Build = dyn Fn(&mut Tape<'_>, &[Var]) -> Var;

/// Projects the op output onto fixed random weights so every output entry
/// contributes to the scalar objective.
fn objective(inputs: &[Tensor], projection: &Tensor, build: &Build) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let root = if tape.value(out).shape() == (1, 1) {
        out
    } else {
        let w = tape.constant(projection.clone());
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod)
    };
    let value = tape.value(root).item();
    let grads = tape.backward(root).unwrap();
    let analytic = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();
    (value, analytic)
}

fn max_error(
    shapes: &[(usize, usize)],
    out_shape: (usize, usize),
    seed: u64,
    build: &Build,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|&(r, c)| Tensor::uniform(r, c, 2.0, &mut rng))
        .collect();
    let projection = Tensor::uniform(out_shape.0, out_shape.1, 1.0, &mut rng);
    let (_, analytic) = objective(&inputs, &projection, build);
    let f = |xs: &[Tensor]| objective(xs, &projection, build).0;
    check(&inputs, &analytic, STEP, FLOOR, &f).max_relative_error
}

fn assert_passes(
    name: &str,
    shapes: &[(usize, usize)],
    out: (usize, usize),
    tol: f64,
    build: &Build,
) {
    for seed in 0..5 {
        let err = max_error(shapes, out, seed, build);
        assert!(err < tol, "{name}: seed {seed} rel err {err:e}");
    }
}

#[test]
fn matmul_matches_finite_differences() {
    assert_passes("matmul", &[(4, 5), (5, 3)], (4, 3), 1e-5, &|t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
}

#[test]
fn elementwise_binary_ops() {
    assert_passes("add", &[(3, 4), (3, 4)], (3, 4), 1e-4, &|t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    assert_passes("sub", &[(3, 4), (3, 4)], (3, 4), 1e-4, &|t, v| {
        t.sub(v[0], v[1]).unwrap()
    });
    assert_passes("mul", &[(3, 4), (3, 4)], (3, 4), 1e-4, &|t, v| {
        t.mul(v[0], v[1]).unwrap()
    });
    assert_passes("add_row", &[(3, 4), (1, 4)], (3, 4), 1e-4, &|t, v| {
        t.add_row(v[0], v[1]).unwrap()
    });
}

#[test]
fn unary_ops() {
    assert_passes("sigmoid", &[(3, 4)], (3, 4), 1e-4, &|t, v| t.sigmoid(v[0]));
    assert_passes("tanh", &[(3, 4)], (3, 4), 1e-4, &|t, v| t.tanh(v[0]));
    assert_passes("exp", &[(3, 4)], (3, 4), 1e-4, &|t, v| t.exp(v[0]));
    assert_passes("scale", &[(3, 4)], (3, 4), 1e-4, &|t, v| {
        t.scale(v[0], -0.7)
    });
    assert_passes("add_scalar", &[(3, 4)], (3, 4), 1e-4, &|t, v| {
        t.add_scalar(v[0], 1.5)
    });
    assert_passes("sum", &[(3, 4)], (1, 1), 1e-4, &|t, v| t.sum(v[0]));
}

#[test]
fn concat_and_slice_split_gradients() {
    assert_passes(
        "concat_cols",
        &[(3, 2), (3, 4), (3, 1)],
        (3, 7),
        1e-4,
        &|t, v| t.concat_cols(v).unwrap(),
    );
    assert_passes("concat_rows", &[(2, 3), (1, 3)], (3, 3), 1e-4, &|t, v| {
        t.concat_rows(v).unwrap()
    });
    assert_passes("slice_cols", &[(3, 6)], (3, 3), 1e-4, &|t, v| {
        t.slice_cols(v[0], 2, 5).unwrap()
    });
    assert_passes("slice_rows", &[(5, 3)], (2, 3), 1e-4, &|t, v| {
        t.slice_rows(v[0], 1, 3).unwrap()
    });
    assert_passes("gather_rows", &[(4, 3)], (5, 3), 1e-4, &|t, v| {
        t.gather_rows(v[0], &[3, 0, 3, 1, 3]).unwrap()
    });
}

#[test]
fn cross_entropy_gradients() {
    assert_passes("softmax_cross_entropy", &[(5, 4)], (1, 1), 1e-4, &|t, v| {
        t.softmax_cross_entropy(v[0], &[0, 3, 2, 2, 1]).unwrap()
    });
    assert_passes("weighted", &[(3, 6)], (1, 1), 1e-4, &|t, v| {
        t.weighted_softmax_cross_entropy(v[0], &[5, 0, 1], &[0.5, 0.0, 2.0])
            .unwrap()
    });
}

#[test]
fn composed_lstm_like_cell() {
    // One LSTM step: gates from x W + h U + b, then c' and h'.
    let build = |t: &mut Tape<'_>, v: &[Var]| {
        let (x, w, h, u, b, c) = (v[0], v[1], v[2], v[3], v[4], v[5]);
        let xw = t.matmul(x, w).unwrap();
        let hu = t.matmul(h, u).unwrap();
        let pre = t.add(xw, hu).unwrap();
        let z = t.add_row(pre, b).unwrap();
        let i = t.slice_cols(z, 0, 2).unwrap();
        let f = t.slice_cols(z, 2, 4).unwrap();
        let g = t.slice_cols(z, 4, 6).unwrap();
        let o = t.slice_cols(z, 6, 8).unwrap();
        let (i, f, g, o) = (t.sigmoid(i), t.sigmoid(f), t.tanh(g), t.sigmoid(o));
        let fc = t.mul(f, c).unwrap();
        let ig = t.mul(i, g).unwrap();
        let c2 = t.add(fc, ig).unwrap();
        let tc = t.tanh(c2);
        t.mul(o, tc).unwrap()
    };
    assert_passes(
        "lstm",
        &[(3, 4), (4, 8), (3, 2), (2, 8), (1, 8), (3, 2)],
        (3, 2),
        1e-4,
        &build,
    );
}

#[test]
fn numerical_gradient_of_quadratic() {
    let x = Tensor::row(&[1.0, -3.0]);
    let g = numerical_gradient(&[x], 0, 1e-4, &|xs| xs[0].squared_norm());
    assert!((g.data()[0] - 2.0).abs() < 1e-8);
    assert!((g.data()[1] + 6.0).abs() < 1e-8);
}

#[test]
fn adam_decreases_quadratic_bowl() {
    // f(x) = sum_i a_i x_i^2 with uneven curvature.
    let curvature = [1.0, 4.0, 0.25, 9.0];
    let f = |x: &Tensor| -> f64 {
        x.data()
            .iter()
            .zip(&curvature)
            .map(|(v, a)| a * v * v)
            .sum()
    };
    let mut params = vec![Tensor::row(&[0.8, -0.6, 1.0, 0.4])];
    let mut state = AdamState::new(&params);
    let cfg = AdamConfig {
        lr: 0.01,
        ..AdamConfig::default()
    };
    let mut losses = vec![f(&params[0])];
    for _ in 0..200 {
        let grad = Tensor::row(
            &params[0]
                .data()
                .iter()
                .zip(&curvature)
                .map(|(v, a)| 2.0 * a * v)
                .collect::<Vec<_>>(),
        );
        adam_step(&mut params, &[grad], &mut state, &cfg);
        losses.push(f(&params[0]));
    }
    let warmup = 10;
    for (i, w) in losses[warmup..].windows(2).enumerate() {
        assert!(
            w[1] <= w[0],
            "loss rose at step {}: {} -> {}",
            i + warmup,
            w[0],
            w[1]
        );
    }
    assert!(
        losses[200] < 0.05 * losses[0],
        "{} vs {}",
        losses[200],
        losses[0]
    );
}

#[test]
fn weight_decay_shrinks_params_under_zero_gradient() {
    let mut params = vec![Tensor::row(&[2.0, -2.0])];
    let mut state = AdamState::new(&params);
    let cfg = AdamConfig {
        weight_decay: 0.01,
        ..AdamConfig::default()
    };
    adam_step(&mut params, &[Tensor::zeros(1, 2)], &mut state, &cfg);
    assert!(params[0].data()[0] < 2.0 && params[0].data()[1] > -2.0);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::uniform(6, 7, 2.0, &mut rng);
        let b = Tensor::uniform(7, 5, 2.0, &mut rng);
        let mut tape = Tape::new();
        let (av, bv) = (tape.param(&a), tape.param(&b));
        let c = tape.matmul(av, bv).unwrap();
        let c = tape.tanh(c);
        let loss = tape.softmax_cross_entropy(c, &[0, 1, 2, 3, 4, 0]).unwrap();
        let value = tape.value(loss).item();
        let g = tape.backward(loss).unwrap();
        (
            value,
            g.get(av).unwrap().clone(),
            g.get(bv).unwrap().clone(),
        )
    };
    let (v1, a1, b1) = run();
    let (v2, a2, b2) = run();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
}

proptest! {
    #[test]
    fn clipped_norm_never_exceeds_threshold(
        values in proptest::collection::vec(-10.0f64..10.0, 1..40),
        threshold in 0.001f64..5.0,
    ) {
        let half = values.len() / 2;
        let mut grads = vec![Tensor::row(&values)];
        if half > 0 {
            grads.push(Tensor::row(&values[..half]));
        }
        let before = global_norm(&grads);
        clip_gradients(&mut grads, threshold);
        let after = global_norm(&grads);
        prop_assert!(after <= threshold + 1e-12);
        if before <= threshold {
            prop_assert_eq!(before, after);
        }
    }
}
