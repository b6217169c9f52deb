use ndarray::{arr0, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;

fn rand_array(rng: &mut ChaCha20Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

/// Uniform in [0.5, 1.5]; for ops that need positive inputs.
fn rand_pos_array(rng: &mut ChaCha20Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(0.5..1.5))
}

/// Uniform with |x| >= 0.1; keeps finite differences away from relu/abs kinks.
fn rand_offzero_array(rng: &mut ChaCha20Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let x: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            x
        } else {
            -x
        }
    })
}

#[test]
fn square_at_three() {
    let x = arr0(3.0f64).into_dyn();
    let (value, grads) = value_and_grad(&[x], |g, vars| {
        let sq = g.square(vars[0])?;
        g.sum(sq)
    })
    .unwrap();
    assert_eq!(value, 9.0);
    assert_eq!(grads[0][[]], 6.0);
}

#[test]
fn sine_at_zero() {
    let x = arr0(0.0f64).into_dyn();
    let (value, grads) = value_and_grad(&[x], |g, vars| {
        let s = g.sin(vars[0])?;
        g.sum(s)
    })
    .unwrap();
    assert_eq!(value, 0.0);
    assert_eq!(grads[0][[]], 1.0);
}

#[test]
fn three_layer_composite_matches_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for _ in 0..5 {
        let w1 = rand_array(&mut rng, &[4, 8]);
        let b1 = rand_array(&mut rng, &[8]);
        let w2 = rand_array(&mut rng, &[8, 8]);
        let w3 = rand_array(&mut rng, &[8, 3]);
        let x = rand_array(&mut rng, &[5, 4]);
        let params = vec![w1, b1, w2, w3];
        let build = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
            let xin = g.input(x.clone())?;
            let h1 = g.matmul(xin, vars[0])?;
            let h1 = g.add(h1, vars[1])?;
            let h1 = g.relu(h1)?;
            let h2 = g.matmul(h1, vars[2])?;
            let h2 = g.softmax_rows(h2)?;
            let h3 = g.matmul(h2, vars[3])?;
            let h3 = g.sin(h3)?;
            let a = g.abs(h3)?;
            g.sum(a)
        };
        let (_, grads) = value_and_grad(&params, build).unwrap();
        let fd = finite_difference_gradient(&params, 1e-6, |p| {
            let (v, _) = value_and_grad(p, build)?;
            Ok(v)
        })
        .unwrap();
        let err = relative_error(&grads, &fd);
        assert!(err < 1e-5, "relative error {err}");
    }
}

/// Every operation in the set, checked against central finite differences on
/// random instances in 64-bit precision.
#[test]
fn per_op_gradients_match_finite_differences() {
    type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;
    // (name, parameter shapes, positivity per parameter, graph builder)
    let cases: Vec<(&str, Vec<Vec<usize>>, Vec<u8>, Builder)> = vec![
        (
            "add",
            vec![vec![3, 4], vec![3, 4]],
            vec![0, 0],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "add_row_broadcast",
            vec![vec![3, 4], vec![4]],
            vec![0, 0],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "add_col_broadcast",
            vec![vec![3, 4], vec![3, 1]],
            vec![0, 0],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![vec![3, 4], vec![3, 4]],
            vec![0, 0],
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![vec![3, 4], vec![3, 4]],
            vec![0, 0],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        (
            "mul_scalar_broadcast",
            vec![vec![3, 4], vec![]],
            vec![0, 0],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        (
            "div",
            vec![vec![3, 4], vec![3, 4]],
            vec![0, 1],
            Box::new(|g, v| g.div(v[0], v[1])),
        ),
        (
            "neg",
            vec![vec![3, 4]],
            vec![0],
            Box::new(|g, v| g.neg(v[0])),
        ),
        (
            "scale",
            vec![vec![3, 4]],
            vec![0],
            Box::new(|g, v| g.scale(v[0], 2.5)),
        ),
        (
            "add_scalar",
            vec![vec![3, 4]],
            vec![0],
            Box::new(|g, v| g.add_scalar(v[0], 0.7)),
        ),
        (
            "matmul",
            vec![vec![3, 4], vec![4, 5]],
            vec![0, 0],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "transpose",
            vec![vec![3, 4]],
            vec![0],
            Box::new(|g, v| g.transpose(v[0])),
        ),
        (
            "reshape",
            vec![vec![3, 4]],
            vec![0],
            Box::new(|g, v| g.reshape(v[0], &[2, 6])),
        ),
        (
            "permute3",
            vec![vec![2, 3, 4]],
            vec![0],
            Box::new(|g, v| g.permute3(v[0], [2, 0, 1])),
        ),
        (
            "select_rows",
            vec![vec![4, 3]],
            vec![0],
            Box::new(|g, v| g.select_rows(v[0], &[2, 0, 2, 3, 1, 2])),
        ),
        (
            "slice_cols",
            vec![vec![3, 5]],
            vec![0],
            Box::new(|g, v| g.slice_cols(v[0], 1..4)),
        ),
        (
            "concat_rows",
            vec![vec![2, 3], vec![4, 3]],
            vec![0, 0],
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
        ),
        (
            "concat_cols",
            vec![vec![3, 2], vec![3, 4]],
            vec![0, 0],
            Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
        ),
        (
            "sum",
            vec![vec![3, 4]],
            vec![0],
            Box::new(|g, v| g.sum(v[0])),
        ),
        (
            "mean",
            vec![vec![3, 4]],
            vec![0],
            Box::new(|g, v| g.mean(v[0])),
        ),
        (
            "relu",
            vec![vec![3, 4]],
            vec![2],
            Box::new(|g, v| g.relu(v[0])),
        ),
        (
            "abs",
            vec![vec![3, 4]],
            vec![2],
            Box::new(|g, v| g.abs(v[0])),
        ),
        (
            "square",
            vec![vec![3, 4]],
            vec![0],
            Box::new(|g, v| g.square(v[0])),
        ),
        (
            "sqrt",
            vec![vec![3, 4]],
            vec![1],
            Box::new(|g, v| g.sqrt(v[0])),
        ),
        (
            "exp",
            vec![vec![3, 4]],
            vec![0],
            Box::new(|g, v| g.exp(v[0])),
        ),
        (
            "ln",
            vec![vec![3, 4]],
            vec![1],
            Box::new(|g, v| g.ln(v[0])),
        ),
        (
            "sin",
            vec![vec![3, 4]],
            vec![0],
            Box::new(|g, v| g.sin(v[0])),
        ),
        (
            "cos",
            vec![vec![3, 4]],
            vec![0],
            Box::new(|g, v| g.cos(v[0])),
        ),
        (
            "softplus",
            vec![vec![3, 4]],
            vec![0],
            Box::new(|g, v| g.softplus(v[0])),
        ),
        (
            "softmax",
            vec![vec![3, 5]],
            vec![0],
            Box::new(|g, v| g.softmax_rows(v[0])),
        ),
        (
            "log_softmax",
            vec![vec![3, 5]],
            vec![0],
            Box::new(|g, v| g.log_softmax_rows(v[0])),
        ),
        (
            "layer_norm",
            vec![vec![4, 6], vec![6], vec![6]],
            vec![0, 0, 0],
            Box::new(|g, v| g.layer_norm_rows(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "bmm33",
            vec![vec![4, 9], vec![4, 9]],
            vec![0, 0],
            Box::new(|g, v| g.bmm33(v[0], v[1])),
        ),
        (
            "bmv3",
            vec![vec![4, 9], vec![4, 3]],
            vec![0, 0],
            Box::new(|g, v| g.bmv3(v[0], v[1])),
        ),
        (
            "skin_points",
            vec![vec![6, 9], vec![6, 3], vec![8, 3]],
            vec![0, 0, 0],
            Box::new(|g, v| {
                let mut w = ndarray::Array2::from_shape_fn((4, 3), |(i, j)| {
                    ((i * 3 + j) as f64 * 0.37).sin().abs() + 0.05
                });
                for mut row in w.rows_mut() {
                    let s = row.sum();
                    row.mapv_inplace(|x| x / s);
                }
                g.skin_points(v[0], v[1], v[2], w)
            }),
        ),
    ];

    let mut rng = ChaCha20Rng::seed_from_u64(7);
    for (name, shapes, positivity, builder) in &cases {
        for instance in 0..50 {
            let params: Vec<ArrayD<f64>> = shapes
                .iter()
                .zip(positivity)
                .map(|(s, &p)| match p {
                    1 => rand_pos_array(&mut rng, s),
                    2 => rand_offzero_array(&mut rng, s),
                    _ => rand_array(&mut rng, s),
                })
                .collect();
            // weight the output by a fixed random tensor so upstream
            // gradients are non-uniform
            let out_shape: Vec<usize> = {
                let mut g = Graph::new();
                let vars: Vec<Var> = params
                    .iter()
                    .map(|p| g.input(p.clone()).unwrap())
                    .collect();
                let out = builder(&mut g, &vars).unwrap();
                g.shape(out).to_vec()
            };
            let weights = rand_array(&mut rng, &out_shape);
            let build = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
                let out = builder(g, vars)?;
                let w = g.input(weights.clone())?;
                let prod = g.mul(out, w)?;
                g.sum(prod)
            };
            let (_, grads) = value_and_grad(&params, build).unwrap();
            let fd = finite_difference_gradient(&params, 1e-6, |p| {
                let (v, _) = value_and_grad(p, build)?;
                Ok(v)
            })
            .unwrap();
            let err = relative_error(&grads, &fd);
            assert!(
                err < 1e-5,
                "op {name} instance {instance}: relative error {err}"
            );
        }
    }
}

#[test]
fn non_scalar_loss_is_rejected() {
    let x = rand_array(&mut ChaCha20Rng::seed_from_u64(1), &[2, 2]);
    let err = value_and_grad(&[x], |g, vars| g.relu(vars[0])).unwrap_err();
    assert!(matches!(err, NumericsError::NonScalarLoss { .. }));
}

#[test]
fn nan_in_forward_names_the_operation() {
    let x = arr0(-1.0f64).into_dyn();
    let err = value_and_grad(&[x], |g, vars| {
        g.push_scope("demo");
        let l = g.ln(vars[0])?;
        g.sum(l)
    })
    .unwrap_err();
    match err {
        NumericsError::NonFinite { op, scope } => {
            assert_eq!(op, "ln");
            assert_eq!(scope, "demo");
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn adam_zero_gradient_is_identity() {
    let mut params = AdamParams::default();
    params.weight_decay = 0.0;
    let mut p = vec![rand_array(&mut ChaCha20Rng::seed_from_u64(3), &[4, 3])];
    let orig = p[0].clone();
    let zero = vec![ArrayD::<f64>::zeros(IxDyn(&[4, 3]))];
    let mut state = OptimizerState::new(params, &[&[4, 3]]);
    for _ in 0..5 {
        state.adam_step(&mut p, &zero, 1e-3).unwrap();
    }
    assert_eq!(p[0], orig);
}

#[test]
fn adam_first_step_hand_value() {
    // m_hat = v_hat = 1 at step 1, so x moves by lr/(1 + eps)
    let mut params = AdamParams::default();
    params.weight_decay = 0.0;
    let mut p = vec![arr0(1.0f64).into_dyn()];
    let g = vec![arr0(1.0f64).into_dyn()];
    let mut state = OptimizerState::new(params, &[&[]]);
    state.adam_step(&mut p, &g, 1e-3).unwrap();
    assert!((p[0][[]] - 0.999).abs() < 1e-9);
}

#[test]
fn adam_shape_mismatch_is_error() {
    let mut p = vec![ArrayD::<f64>::zeros(IxDyn(&[2, 2]))];
    let g = vec![ArrayD::<f64>::zeros(IxDyn(&[3]))];
    let mut state = OptimizerState::new(AdamParams::default(), &[&[2, 2]]);
    assert!(state.adam_step(&mut p, &g, 1e-3).is_err());
}

#[test]
fn learning_rate_schedule_is_exact() {
    let params = AdamParams::default();
    for epoch in 0..100u32 {
        let expected = 0.001 * 0.1f64.powi((epoch / 20) as i32);
        assert_eq!(adam_learning_rate(&params, epoch), expected);
    }
    assert!((adam_learning_rate(&params, 0) - 1e-3).abs() < 1e-15);
    assert!((adam_learning_rate(&params, 20) - 1e-4).abs() < 1e-15);
    assert!((adam_learning_rate(&params, 40) - 1e-5).abs() < 1e-15);
}

#[test]
fn backward_accumulates_over_shared_nodes() {
    // f(x) = x*x + x  => grad 2x + 1
    let x = arr0(3.0f64).into_dyn();
    let (v, grads) = value_and_grad(&[x], |g, vars| {
        let sq = g.mul(vars[0], vars[0])?;
        let s = g.add(sq, vars[0])?;
        g.sum(s)
    })
    .unwrap();
    assert_eq!(v, 12.0);
    assert_eq!(grads[0][[]], 7.0);
}
