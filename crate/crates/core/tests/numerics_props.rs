use gdesigner::numerics::{logit, mix_seed, nuclear_norm, sigmoid, svd, svt, Matrix, Rng};
use proptest::prelude::*;

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-1.0, 1.0))
}

fn relative_reconstruction_error(m: &Matrix) -> f64 {
    let dec = svd(m).expect("svd of a finite matrix");
    let norm = m.frobenius_norm();
    let err = dec.reconstruct().sub(m).frobenius_norm();
    if norm == 0.0 {
        err
    } else {
        err / norm
    }
}

#[test]
fn svd_reconstructs_one_thousand_seeded_matrices() {
    let mut worst: f64 = 0.0;
    for seed in 0..1000u64 {
        let mut rng = Rng::new(seed);
        let rows = 1 + rng.below(8);
        let cols = 1 + rng.below(8);
        let m = random_matrix(&mut rng, rows, cols);
        worst = worst.max(relative_reconstruction_error(&m));
    }
    assert!(worst < 1e-8, "worst relative error {worst:e}");
}

#[test]
fn svd_of_rank_deficient_products() {
    for seed in 0..200u64 {
        let mut rng = Rng::new(seed);
        let n = 2 + rng.below(7);
        let k = 1 + rng.below(n - 1);
        let m = random_matrix(&mut rng, n, k).matmul(&random_matrix(&mut rng, k, n));
        assert!(relative_reconstruction_error(&m) < 1e-8, "seed {seed}");
        let sv = svd(&m).unwrap().singular_values;
        let tail = sv[k..].iter().cloned().fold(0.0, f64::max);
        assert!(tail < 1e-9 * sv[0].max(1.0), "seed {seed}: tail {tail:e}");
    }
}

#[test]
fn rng_streams_repeat_for_ten_thousand_draws() {
    for seed in [0u64, 1, 42, u64::MAX] {
        let mut a = Rng::new(seed);
        let mut b = Rng::new(seed);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let (mut a, mut b) = (Rng::new(seed).child(3), Rng::new(seed).child(3));
        for _ in 0..10_000 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn singular_values_sorted_nonnegative_and_factors_orthonormal(
        seed in any::<u64>(), rows in 1usize..=8, cols in 1usize..=8,
    ) {
        let m = random_matrix(&mut Rng::new(seed), rows, cols);
        let dec = svd(&m).unwrap();
        let k = dec.singular_values.len();
        prop_assert_eq!(k, rows.min(cols));
        for w in dec.singular_values.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        prop_assert!(dec.singular_values.iter().all(|s| *s >= 0.0));
        let utu = dec.u.t_matmul(&dec.u);
        let vtv = dec.v.t_matmul(&dec.v);
        prop_assert!(utu.approx_eq(&Matrix::identity(k), 1e-9));
        prop_assert!(vtv.approx_eq(&Matrix::identity(k), 1e-9));
    }

    #[test]
    fn svt_never_increases_nuclear_norm(
        seed in any::<u64>(), rows in 1usize..=8, cols in 1usize..=8, t in 0.0f64..3.0,
    ) {
        let m = random_matrix(&mut Rng::new(seed), rows, cols);
        let before = nuclear_norm(&m).unwrap();
        let after = nuclear_norm(&svt(&m, t).unwrap()).unwrap();
        prop_assert!(after <= before + 1e-10, "{} > {}", after, before);
    }

    #[test]
    fn svt_shrinks_each_singular_value_by_the_threshold(
        seed in any::<u64>(), n in 1usize..=6, t in 0.0f64..1.0,
    ) {
        let m = random_matrix(&mut Rng::new(seed), n, n);
        let expected: Vec<f64> = svd(&m).unwrap().singular_values.iter().map(|s| (s - t).max(0.0)).collect();
        let got = svd(&svt(&m, t).unwrap()).unwrap().singular_values;
        for (e, g) in expected.iter().zip(&got) {
            prop_assert!((e - g).abs() < 1e-9, "{} vs {}", e, g);
        }
    }

    #[test]
    fn nuclear_norm_is_invariant_under_orthogonal_factors(seed in any::<u64>(), n in 1usize..=6) {
        let mut rng = Rng::new(seed);
        let m = random_matrix(&mut rng, n, n);
        let q = svd(&random_matrix(&mut rng, n, n)).unwrap().u;
        let a = nuclear_norm(&m).unwrap();
        let b = nuclear_norm(&q.matmul(&m).matmul_t(&q)).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn sigmoid_inverts_logit(p in 1e-9f64..(1.0 - 1e-9)) {
        prop_assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_bounded_and_symmetric(x in -800.0f64..800.0) {
        let s = sigmoid(x);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s + sigmoid(-x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_draws_stay_in_the_unit_interval(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        for _ in 0..1000 {
            let u = rng.uniform();
            prop_assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn mixed_seeds_separate_streams(seed in any::<u64>(), a in 0u64..8, b in 0u64..8) {
        prop_assume!(a != b);
        prop_assert_ne!(mix_seed(seed, a), mix_seed(seed, b));
    }
}
