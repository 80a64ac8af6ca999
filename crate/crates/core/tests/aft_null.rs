mod common;

use aftkm::aft::{estimating_function, fit_beta, fit_null, martingale_residuals, nelson_aalen, FitOptions};
use aftkm::asymptotics::q_n;
use common::{random_dataset, shift_log_times, Shape};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn residual(r: &aftkm::SurvivalRecord, z: &DMatrix<f64>, i: usize, beta: &DVector<f64>) -> (f64, f64) {
    let lin = (0..beta.len()).map(|k| z[(i, k)] * beta[k]).sum::<f64>();
    let entry = if r.entry > 0.0 { r.entry.ln() - lin } else { f64::NEG_INFINITY };
    (entry, r.time.ln() - lin)
}

/// Nelson–Aalen by brute force: for every distinct event residual, count the
/// events there and every subject with `entry < s <= exit`.
fn textbook_nelson_aalen(data: &aftkm::Dataset, beta: &DVector<f64>) -> Vec<(f64, f64)> {
    let res: Vec<(f64, f64)> =
        data.survival().iter().enumerate().map(|(i, r)| residual(r, data.z(), i, beta)).collect();
    let mut times: Vec<f64> = data
        .survival()
        .iter()
        .zip(&res)
        .filter(|(r, _)| r.status == data.cause())
        .map(|(_, e)| e.1)
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
        .into_iter()
        .map(|s| {
            let d = data.survival().iter().zip(&res).filter(|(r, e)| r.status == data.cause() && e.1 == s).count();
            let y = res.iter().filter(|e| e.0 < s && s <= e.1).count();
            (s, d as f64 / y as f64)
        })
        .collect()
}

#[test]
fn nelson_aalen_matches_brute_force() {
    for seed in 0..40 {
        let data = random_dataset(seed, Shape::new(30, 2, 1));
        let beta = DVector::from_vec(vec![0.3, -0.2]);
        let na = nelson_aalen(&beta, &data).unwrap();
        let want = textbook_nelson_aalen(&data, &beta);
        assert_eq!(na.times().len(), want.len(), "seed {seed}");
        for (k, (s, jump)) in want.iter().enumerate() {
            assert!((na.times()[k] - s).abs() < 1e-12);
            assert!((na.jumps()[k] - jump).abs() < 1e-12, "seed {seed} t={s}");
        }
    }
}

#[test]
fn solver_matches_grid_search() {
    for seed in 0..30 {
        let n = 4 + (seed as usize % 5);
        let shape = Shape { n, q: 1, p: 1, truncation: false, censoring: false };
        let data = random_dataset(1000 + seed, shape);
        let objective = |b: f64| estimating_function(&DVector::from_vec(vec![b]), &data).norm_squared();
        let grid = (0..=6000).map(|k| objective(-3.0 + k as f64 * 1e-3)).fold(f64::INFINITY, f64::min);
        let fit = fit_beta(&data, &FitOptions::default());
        let found = fit.score_norm * fit.score_norm;
        assert!((found - grid).abs() <= 1e-6, "seed {seed}: solver {found}, grid {grid}");
    }
}

#[test]
fn constant_covariate_gives_zero_coefficient() {
    let mut data = random_dataset(3, Shape::new(25, 1, 1));
    let z = DMatrix::from_element(25, 1, 1.5);
    data = aftkm::Dataset::assemble(
        data.survival().to_vec(),
        aftkm::LabeledMatrix::unnamed("Z", z),
        data.markers().clone(),
        None,
        1,
    )
    .unwrap();
    let fit = fit_beta(&data, &FitOptions::default());
    assert!(fit.converged);
    assert_eq!(fit.beta[0], 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residuals_sum_to_zero(seed in any::<u64>(), n in 5usize..60, q in 0usize..3) {
        let data = random_dataset(seed, Shape::new(n, q, 2));
        let beta = DVector::from_fn(q, |k, _| 0.1 * (k as f64 + 1.0));
        let na = nelson_aalen(&beta, &data).unwrap();
        let m = martingale_residuals(&beta, &na, &data);
        prop_assert!(m.sum().abs() <= 1e-10 * n as f64);
        // delta - Lambda is at most one
        prop_assert!(m.iter().all(|&v| v <= 1.0 + 1e-12));
    }

    #[test]
    fn identity_factor_score_is_the_residual_vector(seed in any::<u64>(), n in 5usize..40) {
        let data = random_dataset(seed, Shape::new(n, 2, 2));
        let fit = fit_null(&data, &FitOptions::default()).unwrap();
        let q = q_n(&fit.beta, &DMatrix::identity(n, n), &data).unwrap();
        prop_assert_eq!(q.as_slice(), fit.residuals.as_slice());
    }

    #[test]
    fn score_ignores_a_common_log_time_shift(seed in any::<u64>(), n in 5usize..40, c in -2.0f64..2.0) {
        let data = random_dataset(seed, Shape::new(n, 2, 1));
        let shifted = shift_log_times(&data, c);
        let beta = DVector::from_vec(vec![0.2, -0.4]);
        let a = estimating_function(&beta, &data);
        let b = estimating_function(&beta, &shifted);
        prop_assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn cumulative_hazard_is_nondecreasing(seed in any::<u64>(), n in 3usize..50) {
        let data = random_dataset(seed, Shape::new(n, 1, 1));
        let na = nelson_aalen(&DVector::from_vec(vec![0.5]), &data).unwrap();
        prop_assert!(na.jumps().iter().all(|&j| j > 0.0 && j <= 1.0));
        prop_assert!(na.values().windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(na.times().windows(2).all(|w| w[0] < w[1]));
    }
}
