mod common;

use cmail::la::{zero_grads, Adam, Matrix, Mlp, Parameter, Tape};
use cmail::policy::Method;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{mlp_grad_check, policy_grad_check, random_matrix, random_mlp_case, random_policy_case};

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let (mut net, x, labels) = random_mlp_case(&mut rng);
        let err = mlp_grad_check(&mut net, &x, &labels);
        assert!(err <= 1e-4, "case {case}: relative error {err:e}");
    }
}

#[test]
fn policy_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..20 {
        let method = Method::ALL[case % Method::ALL.len()];
        let continuous = case % 2 == 1;
        let (mut policy, slot, x, actions) = random_policy_case(method, continuous, &mut rng);
        let err = policy_grad_check(&mut policy, slot, &x, &actions);
        assert!(
            err <= 1e-4,
            "case {case} ({method}, continuous {continuous}): relative error {err:e}"
        );
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut net, x, labels) = random_mlp_case(&mut rng);
    let run = |net: &mut Mlp| {
        zero_grads(net.params_mut());
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = net.forward(&mut tape, xv).unwrap();
        let loss = tape.cross_entropy_labels(out, &labels).unwrap();
        tape.backward(loss).unwrap().accumulate(net.params_mut());
        net.params()
            .iter()
            .flat_map(|p| p.grad.data().iter().map(|g| g.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<u64>>()
    };
    let a = run(&mut net);
    let b = run(&mut net);
    assert_eq!(a, b);
}

#[test]
fn zero_grads_clears_and_keeps_shapes() {
    let mut p = Parameter::new(Matrix::filled(2, 3, 1.0));
    p.grad = Matrix::filled(2, 3, 4.0);
    zero_grads([&mut p]);
    assert!(p.grad.data().iter().all(|&g| g == 0.0));
    assert_eq!(p.grad.shape(), p.value.shape());
}

#[test]
fn adam_counts_steps_and_leaves_gradients() {
    let mut p = Parameter::new(Matrix::filled(1, 2, 0.5));
    p.grad = Matrix::from_vec(1, 2, vec![0.3, -2.0]).unwrap();
    let mut adam = Adam::new(1e-3);
    for k in 1..=4 {
        adam.step(&mut [&mut p]);
        assert_eq!(adam.steps(), k);
    }
    assert_eq!(p.grad.data(), &[0.3, -2.0]);
}

#[test]
fn outputs_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (net, x, _) = random_mlp_case(&mut rng);
        let big = x.scale(1e3);
        assert!(net.forward_matrix(&big).unwrap().is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_chains_associate(seed in any::<u64>(), len in 2usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims: Vec<usize> = (0..=len).map(|_| rng.random_range(1..=5)).collect();
        let ms: Vec<Matrix> = dims.windows(2).map(|w| random_matrix(w[0], w[1], &mut rng)).collect();
        let left = ms[1..].iter().fold(ms[0].clone(), |acc, m| acc.matmul(m).unwrap());
        let right = ms[..ms.len() - 1]
            .iter()
            .rev()
            .fold(ms[ms.len() - 1].clone(), |acc, m| m.matmul(&acc).unwrap());
        prop_assert_eq!(left.shape(), right.shape());
        for (a, b) in left.data().iter().zip(right.data()) {
            prop_assert!((a - b).abs() <= 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn matmul_matches_sum_of_products(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k, m) = (rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6));
        let a = random_matrix(n, k, &mut rng);
        let b = random_matrix(k, m, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..n {
            for j in 0..m {
                let s: f64 = (0..k).map(|t| a.get(i, t) * b.get(t, j)).sum();
                prop_assert!((c.get(i, j) - s).abs() <= 1e-12);
            }
        }
    }
}
