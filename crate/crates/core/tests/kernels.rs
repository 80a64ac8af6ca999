use aftkm::kernels::{build_kernel, heterogeneity_weight, KernelMatrix, KernelSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn genotypes() -> impl Strategy<Value = DMatrix<f64>> {
    (2usize..15, 1usize..8).prop_flat_map(|(n, p)| {
        prop::collection::vec(0u8..3, n * p).prop_map(move |v| DMatrix::from_fn(n, p, |i, k| v[i * p + k] as f64))
    })
}

fn specs() -> Vec<KernelSpec> {
    vec![
        KernelSpec::Linear,
        KernelSpec::Ibs,
        KernelSpec::Gaussian { rho: None },
        KernelSpec::Gaussian { rho: Some(0.7) },
        KernelSpec::Laplacian,
        KernelSpec::QUADRATIC,
        KernelSpec::Identity,
    ]
}

fn brute_force(spec: &KernelSpec, g: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = g.shape();
    DMatrix::from_fn(n, n, |i, j| {
        let (a, b) = (g.row(i), g.row(j));
        match spec {
            KernelSpec::Linear => a.dot(&b),
            KernelSpec::Ibs => (0..p).map(|k| 2.0 - (a[k] - b[k]).abs()).sum::<f64>() / (2.0 * p as f64),
            KernelSpec::Gaussian { rho } => {
                let rho = rho.unwrap_or(1.0 / p as f64);
                (-rho * (a - b).norm_squared()).exp()
            }
            KernelSpec::Polynomial { rho, degree } => (rho + a.dot(&b)).powi(*degree as i32),
            KernelSpec::Identity => f64::from(u8::from(a == b)),
            KernelSpec::Laplacian => unreachable!(),
        }
    })
}

#[test]
fn kernels_match_their_definitions() {
    let g = DMatrix::<f64>::from_row_slice(4, 3, &[0.0, 1.0, 2.0, 1.0, 1.0, 0.0, 2.0, 2.0, 2.0, 0.0, 1.0, 2.0]);
    for spec in specs().iter().filter(|s| !matches!(s, KernelSpec::Laplacian)) {
        let k = build_kernel(spec, &g).unwrap();
        let want = brute_force(spec, &g);
        assert!((k.matrix() - &want).amax() < 1e-12, "{spec}");
    }
}

#[test]
fn laplacian_uses_inverse_sd_weights() {
    let g = DMatrix::<f64>::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 2.0, 2.0, 1.0]);
    let k = build_kernel(&KernelSpec::Laplacian, &g).unwrap();
    let sd = |c: usize| {
        let col = g.column(c);
        let m = col.mean();
        (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 2.0).sqrt()
    };
    let w = [1.0 / sd(0), 1.0 / sd(1)];
    let d01 = (w[0] * 1.0 + w[1] * 2.0) / (w[0] + w[1]);
    assert!((k.matrix()[(0, 1)] - (-d01).exp()).abs() < 1e-12);
}

#[test]
fn heterogeneity_weight_is_elementwise() {
    let g = DMatrix::<f64>::from_row_slice(4, 2, &[0.0, 1.0, 1.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
    let x = DMatrix::<f64>::from_column_slice(4, 1, &[0.0, 1.0, 0.0, 1.0]);
    let k = build_kernel(&KernelSpec::Ibs, &g).unwrap();
    let h = build_kernel(&KernelSpec::Identity, &x).unwrap();
    let w = heterogeneity_weight(&k, &h).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let want = (1.0 + h.matrix()[(i, j)]) * k.matrix()[(i, j)];
            assert!((w.matrix()[(i, j)] - want).abs() < 1e-12);
        }
    }
}

fn check_factor(k: &KernelMatrix<f64>) -> Result<(), TestCaseError> {
    let rebuilt = k.factor().transpose() * k.factor();
    prop_assert!((rebuilt - k.matrix()).amax() < 1e-8 * k.matrix().amax().max(1.0));
    prop_assert!(k.eigenvalues().iter().all(|&v| v > 0.0));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kernels_are_symmetric_psd_and_factored(g in genotypes()) {
        for spec in specs() {
            let k = build_kernel(&spec, &g).unwrap();
            let m = k.matrix();
            prop_assert!((m - m.transpose()).amax() < 1e-12);
            check_factor(&k)?;
            let v = DVector::from_fn(m.nrows(), |i, _| (i as f64 * 0.37).sin());
            let direct = (v.transpose() * m * &v)[(0, 0)];
            prop_assert!((k.quadratic_form(&v) - direct).abs() < 1e-8 * (1.0 + direct.abs()));
            prop_assert!(direct >= -1e-8);
        }
    }

    #[test]
    fn ibs_is_a_similarity(g in genotypes()) {
        let k = build_kernel(&KernelSpec::Ibs, &g).unwrap();
        let m = k.matrix();
        prop_assert!(m.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        prop_assert!((0..m.nrows()).all(|i| (m[(i, i)] - 1.0).abs() < 1e-12));
    }

    #[test]
    fn scaling_scales_the_spectrum(g in genotypes(), c in 0.01f64..50.0) {
        let k = build_kernel(&KernelSpec::Ibs, &g).unwrap();
        let s = k.scaled(c);
        prop_assert!((s.matrix() - k.matrix() * c).amax() < 1e-10 * c.max(1.0));
        prop_assert_eq!(s.rank(), k.rank());
    }
}
