use aftkm::quadform::{davies_tail, moment_match_tail, QuadFormSpec, TailMethod};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared as ChiSquaredDraw, Distribution};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn tail(lambdas: &[f64], x: f64) -> f64 {
    davies_tail(&QuadFormSpec::new(lambdas.to_vec(), x)).unwrap().p
}

fn monte_carlo(lambdas: &[f64], x: f64, draws: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chi = ChiSquaredDraw::new(1.0).unwrap();
    let hits = (0..draws)
        .filter(|_| lambdas.iter().map(|l| l * chi.sample(&mut rng)).sum::<f64>() >= x)
        .count();
    let p = hits as f64 / draws as f64;
    (p, (p * (1.0 - p) / draws as f64).sqrt())
}

#[test]
fn unit_weights_give_chi_square() {
    for k in [1usize, 2, 5, 10, 30] {
        let dist = ChiSquared::new(k as f64).unwrap();
        for x in [0.5, 1.0, k as f64, 2.0 * k as f64 + 3.0] {
            let got = tail(&vec![1.0; k], x);
            let want = dist.sf(x);
            assert!((got - want).abs() < 1e-5, "k={k} x={x}: {got} vs {want}");
        }
    }
}

#[test]
fn two_equal_weights_give_an_exponential() {
    for lambda in [0.3f64, 1.0, 7.5] {
        for x in [0.1, 1.0, 4.0] {
            let want = (-x / (2.0 * lambda)).exp();
            assert!((tail(&[lambda, lambda], x) - want).abs() < 1e-5);
        }
    }
}

#[test]
fn symmetric_difference_is_a_coin_flip() {
    assert!((tail(&[2.0, -2.0], 0.0) - 0.5).abs() < 1e-5);
    assert!((tail(&[1.0, 1.0, -1.0, -1.0], 0.0) - 0.5).abs() < 1e-5);
}

#[test]
fn mixed_signs_agree_with_simulation() {
    let cases: [(&[f64], f64); 4] = [
        (&[3.0, 1.0, -0.5], 2.0),
        (&[0.4, 0.3, 0.2, 0.1, -0.6], 0.0),
        (&[5.0, -1.0, -1.0, -1.0], 4.0),
        (&[1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1], 8.0),
    ];
    for (i, (lambdas, x)) in cases.iter().enumerate() {
        let (mc, se) = monte_carlo(lambdas, *x, 200_000, i as u64);
        let got = tail(lambdas, *x);
        assert!((got - mc).abs() <= 4.0 * se + 1e-4, "case {i}: {got} vs {mc} ± {se}");
    }
}

#[test]
fn moment_matching_is_exact_for_one_weight() {
    let p = moment_match_tail(&QuadFormSpec::new(vec![2.5], 3.0)).unwrap();
    let want = ChiSquared::new(1.0).unwrap().sf(3.0 / 2.5);
    assert!((p - want).abs() < 1e-8);
}

#[test]
fn all_zero_weights_are_degenerate() {
    assert!(davies_tail(&QuadFormSpec::new(vec![0.0, 0.0], 1.0)).is_err());
    assert!(davies_tail(&QuadFormSpec::new(vec![f64::NAN], 1.0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tail_is_a_probability_and_decreases(
        lambdas in prop::collection::vec(-3.0f64..6.0, 1..12),
        a in -5.0f64..20.0,
        b in -5.0f64..20.0,
    ) {
        prop_assume!(lambdas.iter().any(|l| l.abs() > 1e-3));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let p_lo = tail(&lambdas, lo);
        let p_hi = tail(&lambdas, hi);
        prop_assert!((0.0..=1.0).contains(&p_lo));
        prop_assert!(p_hi <= p_lo + 2e-6, "{p_hi} > {p_lo}");
    }

    #[test]
    fn tail_is_scale_free(
        lambdas in prop::collection::vec(0.05f64..4.0, 1..10),
        x in 0.0f64..15.0,
        c in 0.01f64..100.0,
    ) {
        let base = davies_tail(&QuadFormSpec::new(lambdas.clone(), x)).unwrap();
        let scaled: Vec<f64> = lambdas.iter().map(|l| l * c).collect();
        let other = davies_tail(&QuadFormSpec::new(scaled, x * c)).unwrap();
        prop_assume!(base.method == TailMethod::Davies && other.method == TailMethod::Davies);
        prop_assert!((base.p - other.p).abs() < 2e-6);
    }
}
