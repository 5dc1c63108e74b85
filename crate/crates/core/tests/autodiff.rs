use alnp3::autodiff::{finite_diff_grad, GradCheck, Graph, Tensor, Var};
use alnp3::{Error, Result};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let report = GradCheck::default().run(inputs, f).unwrap();
    assert!(
        report.passed(),
        "max rel error {:.3e} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

/// Reduces any tensor to a scalar through a random linear functional so the
/// upstream gradient is not all-ones.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let w = g.constant(randn(g.shape(x), seed ^ 0xabc));
    let p = g.mul(x, w)?;
    g.sum(p)
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_of_ln3_and_zero() {
    // exp(ln 3) / (exp(ln 3) + 1) = 3/4
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![3f64.ln(), 0.0]));
    let y = g.softmax(x).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 0.75).abs() < 1e-15);
    assert!((v[1] - 0.25).abs() < 1e-15);
}

#[test]
fn identity_matmul() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(2));
    let a_t = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
    let a = g.constant(a_t.clone());
    let out = g.matmul(i, a).unwrap();
    assert_eq!(g.value(out), &a_t);
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.square(x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.grad(x).data(), &[2.0, 4.0]);
}

#[test]
fn mean_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0, 0.5]));
    let loss = g.mean(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.grad(x).data(), &[0.25; 4]);
}

#[test]
fn softmax_pick_first_gradient_sums_to_zero() {
    for seed in 0..20 {
        let x0 = randn(&[1, 2], seed);
        let pick = |g: &mut Graph, x: Var| -> Result<Var> {
            let s = g.softmax(x)?;
            let mask = g.constant(Tensor::vector(vec![1.0, 0.0]));
            let p = g.mul(s, mask)?;
            g.sum(p)
        };
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let loss = pick(&mut g, x).unwrap();
        let analytic = g.backward(loss).unwrap().grad(x);
        assert!(analytic.data().iter().sum::<f64>().abs() < 1e-15);

        let numeric = finite_diff_grad(
            |t| {
                let mut g = Graph::new();
                let x = g.constant(t.clone());
                let l = pick(&mut g, x)?;
                Ok(g.value(l).item())
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(numeric.data().iter().sum::<f64>().abs() < 1e-9);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() < 1e-9);
        }
    }
}

#[test]
fn leaves_off_path_get_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = g.param(Tensor::vector(vec![3.0]));
    let loss = g.sum(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.grad(unused).data(), &[0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let y = g.tanh(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn non_finite_inputs_are_domain_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![f64::NAN, 1.0]));
    assert!(matches!(
        g.softmax(x),
        Err(Error::Domain { op: "softmax", .. })
    ));
    assert!(matches!(g.log(x), Err(Error::Domain { op: "log", .. })));
    let z = g.constant(Tensor::vector(vec![0.0, 1.0]));
    assert!(matches!(g.log(z), Err(Error::Domain { .. })));
}

#[test]
fn backward_is_bitwise_deterministic() {
    let build = || {
        let mut g = Graph::new();
        let x = g.param(randn(&[3, 4], 5));
        let w = g.param(randn(&[4, 2], 6));
        let h = g.matmul(x, w).unwrap();
        let s = g.softmax(h).unwrap();
        let l = g.log(s).unwrap();
        let loss = g.mean(l).unwrap();
        let grads = g.backward(loss).unwrap();
        (grads.grad(x), grads.grad(w))
    };
    let (a1, b1) = build();
    let (a2, b2) = build();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a1), bits(&a2));
    assert_eq!(bits(&b1), bits(&b2));
}

// One finite-difference sweep per primitive, 20 seeds each.

#[test]
fn gradcheck_binary_elementwise() {
    for seed in 0..20 {
        let ins = [randn(&[3, 4], seed), randn(&[3, 4], seed + 100)];
        check(&ins, |g, v| {
            let a = g.add(v[0], v[1])?;
            project(g, a, seed)
        });
        check(&ins, |g, v| {
            let a = g.sub(v[0], v[1])?;
            project(g, a, seed)
        });
        check(&ins, |g, v| {
            let a = g.mul(v[0], v[1])?;
            project(g, a, seed)
        });
    }
}

#[test]
fn gradcheck_scalar_ops_and_reductions() {
    for seed in 0..20 {
        let ins = [randn(&[2, 5], seed)];
        check(&ins, |g, v| {
            let a = g.scale(v[0], -1.7)?;
            let a = g.add_scalar(a, 0.3)?;
            project(g, a, seed)
        });
        check(&ins, |g, v| {
            let s = g.square(v[0])?;
            g.mean(s)
        });
        check(&ins, |g, v| {
            let s = g.tanh(v[0])?;
            g.sum(s)
        });
    }
}

#[test]
fn gradcheck_matmul_transpose_concat_reshape() {
    for seed in 0..20 {
        let ins = [randn(&[3, 4], seed), randn(&[4, 2], seed + 7)];
        check(&ins, |g, v| {
            let m = g.matmul(v[0], v[1])?;
            project(g, m, seed)
        });
        check(&ins, |g, v| {
            let t = g.transpose(v[0])?;
            let c = g.concat(&[t, v[1]])?;
            let r = g.reshape(c, &[5, 4])?;
            project(g, r, seed)
        });
    }
}

#[test]
fn gradcheck_relu_away_from_kink() {
    for seed in 0..20 {
        // keep inputs off the kink so the central difference is exact
        let x = randn(&[4, 3], seed).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        check(&[x], |g, v| {
            let r = g.relu(v[0])?;
            project(g, r, seed)
        });
    }
}

#[test]
fn gradcheck_softmax_log_exp() {
    for seed in 0..20 {
        let ins = [randn(&[3, 5], seed)];
        check(&ins, |g, v| {
            let s = g.softmax(v[0])?;
            let l = g.log(s)?;
            project(g, l, seed)
        });
        check(&ins, |g, v| {
            let s = g.log_softmax(v[0])?;
            project(g, s, seed)
        });
        check(&ins, |g, v| {
            let e = g.exp(v[0])?;
            project(g, e, seed)
        });
    }
}

#[test]
fn gradcheck_norms_gather_broadcasts() {
    for seed in 0..20 {
        let ins = [
            randn(&[4, 3], seed),
            randn(&[1, 3], seed + 1),
            randn(&[4, 1], seed + 2),
        ];
        check(&ins, |g, v| {
            let n = g.l2_norm(v[0])?;
            let r = g.recip(n)?;
            project(g, r, seed)
        });
        check(&ins, |g, v| {
            let a = g.add_row(v[0], v[1])?;
            let b = g.mul_col(a, v[2])?;
            let c = g.gather_rows(b, &[3, 0, 0, 2])?;
            project(g, c, seed)
        });
        check(&ins, |g, v| {
            let n = g.normalize_rows(v[0], 1e-12)?;
            let m = g.mean_rows(n)?;
            let j = g.concat_rows(&[m, v[1]])?;
            project(g, j, seed)
        });
    }
}

#[test]
fn gradcheck_masked_attention() {
    for seed in 0..20 {
        let ins = [
            randn(&[3, 4], seed),
            randn(&[3, 4], seed + 1),
            randn(&[3, 2], seed + 2),
        ];
        let mut mask = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            for j in (i + 1)..3 {
                mask.data_mut()[i * 3 + j] = -1e9;
            }
        }
        check(&ins, |g, v| {
            let m = g.constant(mask.clone());
            let a = g.attention(v[0], v[1], v[2], Some(m))?;
            project(g, a, seed)
        });
    }
}

proptest! {
    #[test]
    fn softmax_rows_on_simplex(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], data).unwrap());
        let s = g.softmax(x).unwrap();
        let t = g.value(s);
        for r in 0..3 {
            let row = t.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn grad_shape_matches_value(rows in 1usize..5, cols in 1usize..5, seed in 0u64..1000) {
        let mut g = Graph::new();
        let x = g.param(randn(&[rows, cols], seed));
        let t = g.tanh(x).unwrap();
        let loss = g.sum(t).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.grad(x);
        prop_assert_eq!(gx.shape(), &[rows, cols]);
    }
}
