use scmn::diagnostics::{op_grad_suite, pipeline_grad_check};
use scmn::tensor::{grad_check, Tape, Tensor};

#[test]
fn every_op_matches_central_differences() {
    for seed in [1, 2, 3] {
        for check in op_grad_suite(seed).unwrap() {
            assert!(
                check.max_rel_error <= 1e-4,
                "seed {seed} {}: {}",
                check.name,
                check.max_rel_error
            );
        }
    }
}

#[test]
fn full_loss_gradient() {
    for across in [false, true] {
        let check = pipeline_grad_check(11, across, 10).unwrap();
        println!("{} {:.3e}", check.name, check.max_rel_error);
        assert!(
            check.max_rel_error <= 1e-4,
            "{}: {}",
            check.name,
            check.max_rel_error
        );
    }
}

#[test]
fn shared_leaf_accumulates_both_uses() {
    // f(x) = sum(x * x) + sum(3x) has gradient 2x + 3
    let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let a = tape.sum_all(sq);
    let s = tape.scale(v, 3.0);
    let b = tape.sum_all(s);
    let y = tape.add(a, b).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(v).unwrap().data(), &[4.0, 1.0, 7.0]);
    let err = grad_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum_all(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8);
}
