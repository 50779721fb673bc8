use proptest::prelude::*;
use rand::Rng;
use scmn::matching::{
    cost_matrix, entropic_objective, exact_entropic_oracle, refine, sinkhorn, sinkhorn_on_tape,
    staircase, to_distribution, DiscreteDistribution, SinkhornConfig, StaircaseConfig,
};
use scmn::rng::seeded;
use scmn::tensor::{grad_check_many, Tape, Tensor};

fn dist(w: Vec<f64>) -> DiscreteDistribution {
    let s: f64 = w.iter().sum();
    DiscreteDistribution::new(Tensor::from_vec(w.into_iter().map(|v| v / s).collect())).unwrap()
}

fn random_instance(
    rng: &mut impl Rng,
    n: usize,
    m: usize,
) -> (Tensor, DiscreteDistribution, DiscreteDistribution) {
    let cost = Tensor::from_fn(&[n, m], |_| rng.gen_range(0.0..2.0));
    let a = dist((0..n).map(|_| rng.gen_range(0.05..1.0)).collect());
    let b = dist((0..m).map(|_| rng.gen_range(0.05..1.0)).collect());
    (cost, a, b)
}

#[test]
fn agrees_with_exhaustive_oracle() {
    let mut rng = seeded(11);
    for &(n, m) in &[(2, 2), (2, 3)] {
        for &eps in &[0.05, 0.1, 0.5] {
            for _ in 0..100 {
                let (cost, a, b) = random_instance(&mut rng, n, m);
                let cfg = SinkhornConfig {
                    epsilon: eps,
                    max_iters: 5000,
                    tol: 1e-10,
                };
                let plan = sinkhorn(&cost, &a, &b, &cfg).unwrap();
                let oracle =
                    exact_entropic_oracle(&cost, a.weights().data(), b.weights().data(), eps)
                        .unwrap();
                for (s, o) in plan.flow.data().iter().zip(oracle.data()) {
                    assert!((s - o).abs() <= 1e-3, "eps {eps}: {s} vs {o}");
                }
            }
        }
    }
}

#[test]
fn closed_form_two_by_two() {
    let cost = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let u = DiscreteDistribution::uniform(2).unwrap();
    let plan = sinkhorn(&cost, &u, &u, &SinkhornConfig::default()).unwrap();
    let a = 0.5 / (1.0 + (-10.0f64).exp());
    assert!((plan.flow.at(&[0, 0]) - a).abs() < 1e-9);
    assert!((plan.flow.at(&[1, 1]) - a).abs() < 1e-9);
    assert!((plan.flow.at(&[0, 1]) - (0.5 - a)).abs() < 1e-9);
    // one-parameter scan of the objective along the symmetric family
    let best = (1..500_000)
        .map(|k| k as f64 * 1e-6)
        .min_by(|x, y| {
            let f = |t: f64| {
                let p = Tensor::new(&[2, 2], vec![t, 0.5 - t, 0.5 - t, t]).unwrap();
                entropic_objective(&p, &cost, 0.1)
            };
            f(*x).total_cmp(&f(*y))
        })
        .unwrap();
    assert!((best - a).abs() < 2e-6);
}

#[test]
fn marginals_hold_up_to_sixteen() {
    let mut rng = seeded(5);
    for n in [1, 3, 7, 12, 16] {
        for m in [1, 4, 9, 16] {
            let (cost, a, b) = random_instance(&mut rng, n, m);
            let plan = sinkhorn(
                &cost,
                &a,
                &b,
                &SinkhornConfig {
                    max_iters: 5000,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(plan.converged, "{n}x{m}");
            assert!(
                plan.marginal_error <= 1e-6,
                "{n}x{m}: {}",
                plan.marginal_error
            );
            assert!(plan.flow.data().iter().all(|&t| t >= 0.0));
        }
    }
}

#[test]
fn unrolled_gradient_through_refine() {
    // scalar function of refine(O_p, O_h, sinkhorn(cost(O_p, O_h))) on a 2x2 grid
    let mut rng = seeded(3);
    let op = Tensor::from_fn(&[2, 2, 2], |_| rng.gen_range(-1.0..1.0));
    let oh = Tensor::from_fn(&[2, 2, 2], |_| rng.gen_range(-1.0..1.0));
    let a = dist(vec![0.1, 0.4, 0.3, 0.2]);
    let b = dist(vec![0.3, 0.2, 0.25, 0.25]);
    let cfg = SinkhornConfig {
        epsilon: 0.1,
        max_iters: 10,
        tol: 0.0,
    };
    let weights = Tensor::from_fn(&[2, 2, 2], |i| (i as f64 * 0.7).sin());
    let err = grad_check_many(
        |tape, v| {
            let gamma = scmn::matching::cost_matrix_on_tape(tape, v[0], v[1])?;
            let (flow, _) = sinkhorn_on_tape(tape, gamma, &a, &b, &cfg)?;
            let scaled = tape.scale(flow, 20.0);
            let (tp, th) = refine(tape, v[0], v[1], scaled)?;
            let w = tape.constant(weights.clone());
            let s = tape.add(tp, th)?;
            let s = tape.mul(s, w)?;
            Ok(tape.sum_all(s))
        },
        &[op, oh],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn sinkhorn_gradient_with_zero_mass() {
    let mut rng = seeded(8);
    let cost = Tensor::from_fn(&[3, 3], |_| rng.gen_range(0.0..2.0));
    let a = dist(vec![0.5, 0.0, 0.5]);
    let b = dist(vec![0.2, 0.3, 0.5]);
    let w = Tensor::from_fn(&[3, 3], |i| 1.0 + i as f64);
    let cfg = SinkhornConfig {
        epsilon: 0.2,
        max_iters: 25,
        tol: 0.0,
    };
    let err = grad_check_many(
        |tape, v| {
            let (t, _) = sinkhorn_on_tape(tape, v[0], &a, &b, &cfg)?;
            let w = tape.constant(w.clone());
            let p = tape.mul(t, w)?;
            let e = tape.exp(p)?;
            Ok(tape.sum_all(e))
        },
        &[cost],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn staircase_monotone_on_grid() {
    let cfg = StaircaseConfig::new(1.0).unwrap();
    let grid = Tensor::from_fn(&[256], |i| i as f64 / 255.0);
    let a = staircase(&grid, &cfg);
    let allowed = [0.0, 0.8, 1.7, 2.7];
    for w in a.data().windows(2) {
        assert!(w[0] <= w[1]);
    }
    for v in a.data() {
        assert!(allowed.iter().any(|x| (x - v).abs() < 1e-12), "{v}");
    }
}

#[test]
fn cost_of_identical_maps_has_zero_diagonal() {
    let o = Tensor::from_fn(&[3, 2, 2], |i| (i as f64 + 1.0).ln());
    let g = cost_matrix(&o, &o).unwrap();
    for k in 0..4 {
        assert!(g.at(&[k, k]).abs() < 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn plan_beats_independent_coupling(seed in any::<u64>(), n in 1usize..7, m in 1usize..7, eps in 0.05f64..1.0) {
        let mut rng = seeded(seed);
        let (cost, a, b) = random_instance(&mut rng, n, m);
        let cfg = SinkhornConfig { epsilon: eps, max_iters: 2000, tol: 1e-9 };
        let plan = sinkhorn(&cost, &a, &b, &cfg).unwrap();
        let indep = Tensor::from_fn(&[n, m], |k| a.weights().data()[k / m] * b.weights().data()[k % m]);
        prop_assert!(plan.objective() <= entropic_objective(&indep, &cost, eps) + 1e-8);
    }

    #[test]
    fn row_permutation_equivariance(seed in any::<u64>(), n in 2usize..6, m in 1usize..6) {
        let mut rng = seeded(seed);
        let (cost, a, b) = random_instance(&mut rng, n, m);
        let mut sigma: Vec<usize> = (0..n).collect();
        sigma.reverse();
        sigma.rotate_left(seed as usize % n);
        let pc = Tensor::from_fn(&[n, m], |k| cost.data()[sigma[k / m] * m + k % m]);
        let pa = DiscreteDistribution::new(Tensor::from_fn(&[n], |i| a.weights().data()[sigma[i]])).unwrap();
        let cfg = SinkhornConfig::default();
        let base = sinkhorn(&cost, &a, &b, &cfg).unwrap();
        let perm = sinkhorn(&pc, &pa, &b, &cfg).unwrap();
        for i in 0..n {
            for j in 0..m {
                prop_assert!((perm.flow.at(&[i, j]) - base.flow.at(&[sigma[i], j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn refined_features_stay_in_hull(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = seeded(seed);
        let op = Tensor::from_fn(&[3, 2, 3], |_| rng.gen_range(-2.0..2.0));
        let oh = Tensor::from_fn(&[3, 2, 3], |_| rng.gen_range(-2.0..2.0));
        let flow = Tensor::from_fn(&[6, 6], |_| rng.gen_range(0.0..scale));
        let mut tape = Tape::new();
        let (p, h, f) = (tape.constant(op.clone()), tape.constant(oh.clone()), tape.constant(flow));
        let (tp, th) = refine(&mut tape, p, h, f).unwrap();
        for (out, src) in [(tape.value(tp), &op), (tape.value(th), &oh)] {
            for ch in 0..3 {
                let s = &src.data()[ch * 6..ch * 6 + 6];
                let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for &v in &out.data()[ch * 6..ch * 6 + 6] {
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn distributions_are_valid(values in proptest::collection::vec(0.0f64..1.0, 1..40), mu in 0.3f64..1.5) {
        let cfg = StaircaseConfig::new(mu).unwrap();
        let m = Tensor::from_vec(values);
        let d = to_distribution(&staircase(&m, &cfg)).unwrap();
        prop_assert!((d.weights().sum() - 1.0).abs() < 1e-9);
        prop_assert!(d.weights().data().iter().all(|&w| w >= 0.0));
    }
}
