use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;

use super::*;

type G = Graph<f64>;

fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

fn t1(v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(vec![v.len()], v.to_vec()).unwrap()
}

/// Seeded tensor with entries bounded away from zero (safe for relu kinks).
fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn matmul_identity() {
    let mut g = G::new();
    let a = g.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let i = g.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let c = g.matmul(a, i).unwrap();
    assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_hand_case() {
    let mut g = G::new();
    let a = g.constant(t2(&[vec![1.0, 2.0]]));
    let b = g.constant(t2(&[vec![3.0], vec![4.0]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &[11.0]);
    assert_eq!(g.shape(c), &[1, 1]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = G::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn softmax_uniform_rows() {
    let mut g = G::new();
    let x = g.constant(t2(&[vec![0.0, 0.0, 0.0]]));
    let y = g.softmax_rows(x).unwrap();
    for &v in g.value(y) {
        assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
    }
}

#[test]
fn softmax_survives_huge_logits() {
    let mut g = G::new();
    let x = g.constant(t2(&[vec![1000.0, 0.0]]));
    let y = g.softmax_rows(x).unwrap();
    let v = g.value(y);
    assert!(v.iter().all(|x| x.is_finite()));
    assert_relative_eq!(v[0], 1.0, epsilon = 1e-12);
    assert!(v[1] >= 0.0 && v[1] < 1e-300);
}

#[test]
fn softmax_closed_form_ln2() {
    let mut g = G::new();
    let x = g.constant(t2(&[vec![2.0f64.ln(), 0.0]]));
    let y = g.softmax_rows(x).unwrap();
    let v = g.value(y);
    assert_relative_eq!(v[0], 2.0 / 3.0, epsilon = 1e-15);
    assert_relative_eq!(v[1], 1.0 / 3.0, epsilon = 1e-15);
}

#[test]
fn cross_entropy_uniform_two_class() {
    let mut g = G::new();
    let l = g.constant(t2(&[vec![0.0, 0.0]]));
    let ce = g.cross_entropy(l, &[0], None, true).unwrap();
    assert_relative_eq!(g.value(ce)[0], 2.0f64.ln(), epsilon = 1e-15);
}

#[test]
fn cross_entropy_confident_correct_tends_to_zero() {
    let mut g = G::new();
    let l = g.constant(t2(&[vec![50.0, 0.0, 0.0]]));
    let ce = g.cross_entropy(l, &[0], None, true).unwrap();
    assert!(g.value(ce)[0] < 1e-20);
}

#[test]
fn cross_entropy_direct_softmax_evaluation() {
    let mut g = G::new();
    let l = g.constant(t2(&[vec![1.0, 0.0, 0.0]]));
    let ce = g.cross_entropy(l, &[0], None, true).unwrap();
    assert_relative_eq!(g.value(ce)[0], 0.5514447139320511, epsilon = 1e-15);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut g = G::new();
    let l = g.constant(Tensor::zeros(vec![1, 4]));
    assert!(matches!(
        g.cross_entropy(l, &[4], None, true),
        Err(Error::Index(_))
    ));
}

#[test]
fn cross_entropy_excludes_padding_from_mean() {
    // two positions, one padding: mean must equal the non-pad position alone
    let mut g = G::new();
    let l = g.constant(t2(&[vec![1.0, 0.0, 0.0], vec![9.0, 9.0, 9.0]]));
    let with_pad = g.cross_entropy(l, &[0, 2], Some(2), true).unwrap();

    let mut g2 = G::new();
    let l2 = g2.constant(t2(&[vec![1.0, 0.0, 0.0]]));
    let alone = g2.cross_entropy(l2, &[0], None, true).unwrap();

    assert_eq!(g.value(with_pad)[0], g2.value(alone)[0]);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = G::new();
    let x = g.leaf(t1(&[5.0, -2.0, 7.0]).with_grad(true));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square_is_2x() {
    let mut g = G::new();
    let x = g.leaf(Tensor::scalar(3.0).with_grad(true));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = G::new();
    let x = g.leaf(t1(&[1.0, 2.0]).with_grad(true));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn second_backward_is_a_state_error() {
    let mut g = G::new();
    let x = g.leaf(Tensor::scalar(2.0).with_grad(true));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert!(matches!(g.backward(y), Err(Error::State(_))));
}

#[test]
fn grad_check_rejects_non_scalar_function() {
    let x = t1(&[1.0, 2.0]);
    let err = grad_check(|_g, v| Ok(v), &x, 1e-4).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn grad_check_square_is_nearly_exact() {
    let x = Tensor::scalar(3.0);
    let err = grad_check(|g, v| g.mul(v, v), &x, 1e-4).unwrap();
    assert!(err <= 1e-6, "error {err}");
}

#[test]
fn grad_check_cross_entropy() {
    let x = random_tensor(vec![2, 4], 11);
    let err = grad_check(|g, v| g.cross_entropy(v, &[1, 3], None, true), &x, 1e-4).unwrap();
    assert!(err <= 1e-5, "error {err}");
}

/// Every differentiable operation, checked against central differences at
/// seeded random points.
#[test]
fn grad_check_all_operations() {
    let eps = 1e-4;
    let tol = 1e-4;
    let check = |name: &str, err: f64| {
        assert!(err <= tol, "{name}: max relative error {err} > {tol}");
    };

    let x = random_tensor(vec![3, 4], 1);
    let w = random_tensor(vec![4, 3], 2);
    check(
        "matmul",
        grad_check(
            |g, v| {
                let c = g.constant(random_tensor(vec![4, 3], 2));
                let y = g.matmul(v, c)?;
                Ok(g.sum(y))
            },
            &x,
            eps,
        )
        .unwrap(),
    );
    check(
        "matmul-rhs",
        grad_check(
            |g, v| {
                let c = g.constant(random_tensor(vec![3, 4], 1));
                let y = g.matmul(c, v)?;
                Ok(g.sum(y))
            },
            &w,
            eps,
        )
        .unwrap(),
    );
    check(
        "transpose",
        grad_check(
            |g, v| {
                let t = g.transpose(v)?;
                let c = g.constant(random_tensor(vec![3, 2], 3));
                let y = g.matmul(t, c)?;
                Ok(g.sum(y))
            },
            &x,
            eps,
        )
        .unwrap(),
    );
    check(
        "add+mul",
        grad_check(
            |g, v| {
                let c = g.constant(random_tensor(vec![3, 4], 4));
                let a = g.add(v, c)?;
                let m = g.mul(a, v)?;
                Ok(g.sum(m))
            },
            &x,
            eps,
        )
        .unwrap(),
    );
    check(
        "add_row",
        grad_check(
            |g, v| {
                let c = g.constant(random_tensor(vec![3, 4], 5));
                let y = g.add_row(c, v)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &random_tensor(vec![4], 6),
            eps,
        )
        .unwrap(),
    );
    check(
        "scale",
        grad_check(
            |g, v| {
                let y = g.scale(v, -1.75);
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &x,
            eps,
        )
        .unwrap(),
    );
    check(
        "relu",
        grad_check(
            |g, v| {
                let y = g.relu(v);
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &x,
            eps,
        )
        .unwrap(),
    );
    check(
        "softmax_rows",
        grad_check(
            |g, v| {
                let y = g.softmax_rows(v)?;
                let c = g.constant(random_tensor(vec![3, 4], 7));
                let m = g.mul(y, c)?;
                Ok(g.sum(m))
            },
            &x,
            eps,
        )
        .unwrap(),
    );
    check(
        "layer_norm(x)",
        grad_check(
            |g, v| {
                let gamma = g.constant(random_tensor(vec![4], 8));
                let beta = g.constant(random_tensor(vec![4], 9));
                let y = g.layer_norm_rows(v, gamma, beta, 1e-5)?;
                let c = g.constant(random_tensor(vec![3, 4], 10));
                let m = g.mul(y, c)?;
                Ok(g.sum(m))
            },
            &x,
            eps,
        )
        .unwrap(),
    );
    check(
        "layer_norm(gamma)",
        grad_check(
            |g, v| {
                let xx = g.constant(random_tensor(vec![3, 4], 1));
                let beta = g.constant(random_tensor(vec![4], 9));
                let y = g.layer_norm_rows(xx, v, beta, 1e-5)?;
                let c = g.constant(random_tensor(vec![3, 4], 10));
                let m = g.mul(y, c)?;
                Ok(g.sum(m))
            },
            &random_tensor(vec![4], 8),
            eps,
        )
        .unwrap(),
    );
    check(
        "concat_rows+slice_cols",
        grad_check(
            |g, v| {
                let c = g.constant(random_tensor(vec![2, 4], 12));
                let cat = g.concat_rows(v, c)?;
                let sl = g.slice_cols(cat, 1, 2)?;
                let sq = g.mul(sl, sl)?;
                Ok(g.sum(sq))
            },
            &x,
            eps,
        )
        .unwrap(),
    );
    check(
        "concat_cols",
        grad_check(
            |g, v| {
                let c = g.constant(random_tensor(vec![3, 2], 13));
                let cat = g.concat_cols(v, c)?;
                let sq = g.mul(cat, cat)?;
                Ok(g.sum(sq))
            },
            &x,
            eps,
        )
        .unwrap(),
    );
    check(
        "gather_rows",
        grad_check(
            |g, v| {
                let y = g.gather_rows(v, &[2, 0, 2, 1])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &x,
            eps,
        )
        .unwrap(),
    );
    check(
        "cross_entropy",
        grad_check(
            |g, v| g.cross_entropy(v, &[0, 3, 1], Some(3), true),
            &x,
            eps,
        )
        .unwrap(),
    );
}

#[test]
fn identical_programs_are_bit_identical() {
    let run = || {
        let mut g = G::new();
        let a = g.leaf(random_tensor(vec![4, 4], 21).with_grad(true));
        let b = g.constant(random_tensor(vec![4, 4], 22));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax_rows(c).unwrap();
        let l = g.cross_entropy(s, &[0, 1, 2, 3], None, true).unwrap();
        g.backward(l).unwrap();
        (g.value(l).to_vec(), g.grad(a).unwrap().to_vec())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert!(l1.iter().zip(&l2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let mut g = G::new();
        let x = g.constant(Tensor::from_vec(vec![rows, cols], data).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let out = g.value(y);
        prop_assert!(out.iter().all(|v| v.is_finite() && *v >= 0.0));
        for i in 0..rows {
            let s: f64 = out[i * cols..(i + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn finite_inputs_give_finite_outputs(seed in 0u64..500) {
        let mut g = G::new();
        let a = g.constant(random_tensor(vec![3, 3], seed));
        let b = g.constant(random_tensor(vec![3, 3], seed.wrapping_add(1)));
        let c = g.matmul(a, b).unwrap();
        let gamma = g.constant(Tensor::from_vec(vec![3], vec![1.0; 3]).unwrap());
        let beta = g.constant(Tensor::zeros(vec![3]));
        let ln = g.layer_norm_rows(c, gamma, beta, 1e-5).unwrap();
        let sm = g.softmax_rows(ln).unwrap();
        let ce = g.cross_entropy(sm, &[0, 1, 2], None, true).unwrap();
        for v in [c, ln, sm, ce] {
            prop_assert!(g.value(v).iter().all(|x| x.is_finite()));
        }
    }
}

#[test]
fn from_vec_rejects_shape_mismatch() {
    let err = Tensor::from_vec(vec![2, 3], vec![1.0f64; 5]).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn bit_eq_distinguishes_signed_zero() {
    let a = Tensor::from_vec(vec![1], vec![0.0f64]).unwrap();
    let b = Tensor::from_vec(vec![1], vec![-0.0f64]).unwrap();
    assert_eq!(a.data()[0], b.data()[0]);
    assert!(!a.bit_eq(&b));
}

#[test]
fn detach_carries_gradient() {
    let mut g = G::new();
    let x = g.leaf(t1(&[2.0, 3.0]).with_grad(true));
    let s = g.sum(x);
    g.backward(s).unwrap();
    let t = g.detach(x);
    assert_eq!(t.grad().unwrap(), &[1.0, 1.0]);
    assert!(t.requires_grad());
}
