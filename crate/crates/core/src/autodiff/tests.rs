use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

fn rng(seed: u64) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Xoshiro256StarStar) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Shift values out of the 1e-3 window around a kink location.
fn away_from(t: Tensor, kink: f64) -> Tensor {
    t.map(|v| if (v - kink).abs() < 1e-3 { v + 0.1 } else { v })
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let i2 = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let
 y = g.matmul(i2, a).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_hand_case() {
    // [[1,2]]*[[3],[4]] = [[11]]
    let mut g = Graph::new();
    let a = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = g.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(&[2, 3]));
    let b = g.leaf(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    match err {
        Error::Dimension { left, right, .. } => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(7);
    let a = rand_tensor(&[3, 4], -2.0, 2.0, &mut r);
    let b = rand_tensor(&[4, 2], -2.0, 2.0, &mut r);
    let err = grad_check(
        |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            Ok(g.sum(y))
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "matmul gradient error {err}");
}

#[test]
fn conv_all_ones_sums_to_nine() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.0]);
}

#[test]
fn conv_one_by_one_kernel_scales() {
    let mut r = rng(8);
    let input = rand_tensor(&[2, 1, 4, 4], -2.0, 2.0, &mut r);
    let mut g = Graph::new();
    let x = g.leaf(input.clone());
    let k = g.leaf(Tensor::full(&[1, 1, 1, 1], 2.0));
    let y = g.conv2d(x, k, 1, 0).unwrap();
    for (out, inp) in g.value(y).data().iter().zip(input.data()) {
        assert_eq!(*out, 2.0 * inp);
    }
}

#[test]
fn conv_kernel_larger_than_padded_input_errors() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 1, 3, 3]));
    let k = g.leaf(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(
        g.conv2d(x, k, 1, 0),
        Err(Error::Dimension { .. })
    ));
    // padding 1 makes it fit
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 1, 3, 3]));
    let k = g.leaf(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(g.conv2d(x, k, 1, 1).is_ok());
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut r = rng(9);
    let input = rand_tensor(&[1, 2, 5, 5], -2.0, 2.0, &mut r);
    let kernel = rand_tensor(&[3, 2, 3, 3], -2.0, 2.0, &mut r);
    let err = grad_check(
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], 1, 0)?;
            Ok(g.sum(y))
        },
        &[input.clone(), kernel.clone()],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "conv2d gradient error {err}");

    // strided, padded variant
    let err = grad_check(
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], 2, 1)?;
            Ok(g.sum(y))
        },
        &[input, kernel],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "strided conv2d gradient error {err}");
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![3], vec![-1.0, -2.0, 3.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
    let p = g.prelu(x, 0.25).unwrap();
    assert_eq!(g.value(p).data(), &[-0.25, -0.5, 3.0]);

    // relu(3) has gradient 1
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1], vec![3.0]).unwrap());
    let r = g.relu(x);
    let s = g.sum(r);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0]);
}

#[test]
fn prelu_rejects_non_finite_slope() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert!(matches!(g.prelu(x, f64::NAN), Err(Error::Domain(_))));
}

#[test]
fn row_l2_norm_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap());
    let n = g.row_l2_norm(x).unwrap();
    assert_eq!(g.value(n).data(), &[5.0, 0.0]);

    // zero row gets zero gradient
    let s = g.sum(n);
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap();
    assert_eq!(grad.data()[2], 0.0);
    assert_eq!(grad.data()[3], 0.0);
    assert!((grad.data()[0] - 0.6).abs() < 1e-12);
    assert!((grad.data()[1] - 0.8).abs() < 1e-12);
}

#[test]
fn row_l2_norm_gradient_matches_finite_differences() {
    let mut r = rng(10);
    let x = rand_tensor(&[4, 6], -2.0, 2.0, &mut r);
    let err = grad_check(
        |g, ids| {
            let n = g.row_l2_norm(ids[0])?;
            Ok(g.sum(n))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "row_l2_norm gradient error {err}");
}

#[test]
fn backward_power_rule() {
    // f(x) = x*x at x=3 -> grad 6
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1], vec![3.0]).unwrap());
    let y = g.mul(x, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_fan_out_accumulates() {
    // f(x) = x + x -> grad 2
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1], vec![1.5]).unwrap());
    let y = g.add(x, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2, 2]));
    let y = g.relu(x);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn backward_composite_matches_finite_differences() {
    let mut r = rng(11);
    let a = rand_tensor(&[3, 4], -2.0, 2.0, &mut r);
    let b = away_from(rand_tensor(&[4, 3], -2.0, 2.0, &mut r), 0.0);
    let err = grad_check(
        |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            let y = g.prelu(y, 0.25)?;
            Ok(g.sum(y))
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "composite gradient error {err}");
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut r = rng(12);
    let a = rand_tensor(&[4, 5], -2.0, 2.0, &mut r);
    let b = rand_tensor(&[5, 3], -2.0, 2.0, &mut r);
    let mut g = Graph::new();
    let na = g.param(a);
    let nb = g.param(b);
    let y = g.matmul(na, nb).unwrap();
    let y = g.sigmoid(y);
    let s = g.sum(y);
    g.backward(s).unwrap();
    let first: Vec<u64> = g.grad(na).unwrap().data().iter().map(|v| v.to_bits()).collect();
    g.backward(s).unwrap();
    let second: Vec<u64> = g.grad(na).unwrap().data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(first, second);
}

#[test]
fn grad_check_linear_is_nearly_exact() {
    let err = grad_check(
        |g, ids| {
            let y = g.scale(ids[0], 3.0);
            Ok(g.sum(y))
        },
        &[Tensor::new(vec![2], vec![0.5, -1.25]).unwrap()],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-10, "linear gradient error {err}");
}

#[test]
fn grad_check_sigmoid_at_zero() {
    // sigma'(0) = sigma(0) * (1 - sigma(0)) = 0.25
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1], vec![0.0]).unwrap());
    let y = g.sigmoid(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.25]);

    let err = grad_check(
        |g, ids| {
            let y = g.sigmoid(ids[0]);
            Ok(g.sum(y))
        },
        &[Tensor::new(vec![1], vec![0.0]).unwrap()],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "sigmoid gradient error {err}");
}

#[test]
fn grad_check_rejects_non_positive_step() {
    let r = grad_check(
        |g, ids| Ok(g.sum(ids[0])),
        &[Tensor::zeros(&[1])],
        0.0,
    );
    assert!(matches!(r, Err(Error::Domain(_))));
}

/// Every differentiable primitive passes the finite-difference oracle on 20
/// random instances with values in [-2, 2] (shifted off kinks) and h = 1e-5.
#[test]
fn all_primitives_pass_grad_check() {
    type Builder = fn(&mut Graph, &[NodeId]) -> crate::error::Result<NodeId>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Builder)> = vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            Ok(g.sum(y))
        }),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, ids| {
            let y = g.sub(ids[0], ids[1])?;
            Ok(g.sum(y))
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, ids| {
            let y = g.mul(ids[0], ids[1])?;
            Ok(g.sum(y))
        }),
        ("scale", vec![vec![5]], |g, ids| {
            let y = g.scale(ids[0], -1.7);
            Ok(g.sum(y))
        }),
        ("add_const", vec![vec![5]], |g, ids| {
            let y = g.add_const(ids[0], 0.3);
            Ok(g.sum(y))
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            Ok(g.sum(y))
        }),
        ("transpose", vec![vec![3, 4]], |g, ids| {
            let t = g.transpose(ids[0])?;
            let y = g.mul(t, t)?;
            Ok(g.sum(y))
        }),
        ("sigmoid", vec![vec![6]], |g, ids| {
            let y = g.sigmoid(ids[0]);
            Ok(g.sum(y))
        }),
        ("row_l2_norm", vec![vec![4, 6]], |g, ids| {
            let y = g.row_l2_norm(ids[0])?;
            Ok(g.sum(y))
        }),
        ("scale_rows", vec![vec![3, 4], vec![3]], |g, ids| {
            let y = g.scale_rows(ids[0], ids[1])?;
            Ok(g.sum(y))
        }),
        ("bias_add", vec![vec![3, 4], vec![4]], |g, ids| {
            let y = g.bias_add(ids[0], ids[1])?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        ("channel_bias", vec![vec![2, 3, 2, 2], vec![3]], |g, ids| {
            let y = g.channel_bias(ids[0], ids[1])?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        ("reshape", vec![vec![3, 4]], |g, ids| {
            let y = g.reshape(ids[0], vec![2, 6])?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        ("conv2d", vec![vec![1, 2, 4, 4], vec![2, 2, 3, 3]], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], 1, 1)?;
            Ok(g.sum(y))
        }),
    ];

    let mut r = rng(2024);
    for (name, shapes, builder) in &cases {
        for trial in 0..20 {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| rand_tensor(s, -2.0, 2.0, &mut r))
                .collect();
            let err = grad_check(builder, &inputs, 1e-5).unwrap();
            assert!(
                err < 1e-5,
                "{name} trial {trial}: gradient error {err}"
            );
        }
    }
}

/// Kinked or domain-restricted primitives, probed away from their kinks.
#[test]
fn restricted_primitives_pass_grad_check() {
    let mut r = rng(2025);
    for trial in 0..20 {
        let relu_in = away_from(rand_tensor(&[6], -2.0, 2.0, &mut r), 0.0);
        let err = grad_check(
            |g, ids| {
                let y = g.relu(ids[0]);
                Ok(g.sum(y))
            },
            &[relu_in.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "relu trial {trial}: gradient error {err}");

        let err = grad_check(
            |g, ids| {
                let y = g.prelu(ids[0], 0.25)?;
                Ok(g.sum(y))
            },
            &[relu_in],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "prelu trial {trial}: gradient error {err}");

        let recip_in = rand_tensor(&[6], 0.5, 2.5, &mut r);
        let err = grad_check(
            |g, ids| {
                let y = g.recip(ids[0]);
                Ok(g.sum(y))
            },
            &[recip_in],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "recip trial {trial}: gradient error {err}");

        let clamp_in = away_from(away_from(rand_tensor(&[6], -2.0, 2.0, &mut r), -1.5), 1.5);
        let err = grad_check(
            |g, ids| {
                let y = g.clamp(ids[0], -1.5, 1.5);
                let y = g.mul(y, y)?;
                Ok(g.sum(y))
            },
            &[clamp_in],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "clamp trial {trial}: gradient error {err}");

        let cos_in = rand_tensor(&[6], -0.9, 0.9, &mut r);
        let err = grad_check(
            |g, ids| {
                let y = g.cos_angle_add(ids[0], 0.5);
                Ok(g.sum(y))
            },
            &[cos_in],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "cos_angle_add trial {trial}: gradient error {err}");

        let range = SigmoidRangeParams {
            gamma: 1.0,
            lo: 4.0,
            hi: 12.0,
        };
        let norm_in = rand_tensor(&[6], 0.1, 4.0, &mut r);
        let err = grad_check(
            move |g, ids| {
                let y = g.sigmoid_range(ids[0], range);
                Ok(g.sum(y))
            },
            &[norm_in],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "sigmoid_range trial {trial}: gradient error {err}");

        let logits = rand_tensor(&[4, 5], -2.0, 2.0, &mut r);
        let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
        let labels_clone = labels.clone();
        let err = grad_check(
            move |g, ids| {
                let (loss, _) = g.softmax_xent(ids[0], &labels_clone)?;
                Ok(loss)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "softmax_xent trial {trial}: gradient error {err}");
    }
}

#[test]
fn softmax_xent_rejects_out_of_range_label() {
    let mut g = Graph::new();
    let z = g.leaf(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        g.softmax_xent(z, &[0, 3]),
        Err(Error::Index(_))
    ));
}

proptest! {
    /// Shape algebra is total: any shape-valid forward produces gradients of
    /// matching shape on every leaf after backward.
    #[test]
    fn grads_match_value_shapes(n in 1usize..5, k in 1usize..5, p in 1usize..5, seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = rand_tensor(&[n, k], -2.0, 2.0, &mut r);
        let b = rand_tensor(&[k, p], -2.0, 2.0, &mut r);
        let mut g = Graph::new();
        let na = g.param(a);
        let nb = g.param(b);
        let y = g.matmul(na, nb).unwrap();
        let y = g.sigmoid(y);
        let s = g.sum(y);
        g.backward(s).unwrap();
        prop_assert_eq!(g.grad(na).unwrap().shape(), g.value(na).shape());
        prop_assert_eq!(g.grad(nb).unwrap().shape(), g.value(nb).shape());
        prop_assert_eq!(g.grad(y).unwrap().shape(), g.value(y).shape());
    }
}
