//! Large-sample null law of `E1 M`: the score vector `Q_n`, Monte-Carlo
//! least-squares slope matrices, the covariance estimator and its spectrum.
//!
//! `Q_n(beta; E1)` is linear in `E1` and equals `E1 M(beta)` where `M(beta)`
//! are the martingale residuals at `beta`. The slope of `Q_n` for any factor
//! is therefore `E1` times the slope of the residual vector, which is what
//! [`SlopeEstimates`] stores; [`estimate_b`] is the direct route for one `E1`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::aft::{
    estimating_function, hazard_jump, nelson_aalen_transformed, residuals_transformed, NullFit, RiskSetVisitor,
    TransformedData,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Largest accepted condition number of the estimated score slope.
pub const MAX_CONDITION: f64 = 1e12;

/// Perturbations summed per parallel task; fixed so results do not depend on
/// the number of worker threads.
const CHUNK: usize = 64;

const STREAM_B: u64 = 1;
const STREAM_A: u64 = 2;

/// `Q_n(beta) = sum_i int {E1_i - E1bar(beta, t)} dN_i(beta, t)` for an
/// `m x n` factor, in one sweep over event times.
pub fn q_n<T: Real>(beta: &DVector<T>, e1: &DMatrix<T>, data: &Dataset<T>) -> Result<DVector<T>> {
    if e1.ncols() != data.n() {
        return Err(Error::Dimension(format!("factor has {} columns, data has n={}", e1.ncols(), data.n())));
    }
    let td = TransformedData::new(data, beta);
    let m = e1.nrows();
    struct Sweep<'a, T: Real> {
        e1: &'a DMatrix<T>,
        sum: DVector<T>,
        observed: DVector<T>,
        compensator: DVector<T>,
    }
    impl<T: Real> RiskSetVisitor<T> for Sweep<'_, T> {
        fn enter(&mut self, i: usize) {
            self.sum += self.e1.column(i);
        }
        fn exit(&mut self, i: usize) {
            self.sum -= self.e1.column(i);
        }
        fn event(&mut self, _: T, events: &[usize], at_risk: usize) -> Result<()> {
            for &i in events {
                self.observed += self.e1.column(i);
            }
            let w: T = hazard_jump(events.len(), at_risk);
            for k in 0..self.sum.len() {
                self.compensator[k] += self.sum[k] * w;
            }
            Ok(())
        }
    }
    let mut s = Sweep { e1, sum: DVector::zeros(m), observed: DVector::zeros(m), compensator: DVector::zeros(m) };
    td.sweep(&mut s)?;
    Ok(s.observed - s.compensator)
}

/// Martingale residuals at an arbitrary `beta`, with the hazard re-estimated there.
pub fn residuals_at<T: Real>(beta: &DVector<T>, data: &Dataset<T>) -> Result<DVector<T>> {
    let td = TransformedData::new(data, beta);
    let lambda = nelson_aalen_transformed(&td)?;
    Ok(residuals_transformed(&td, &lambda))
}

/// `L x q` standard normal draws from stream `stream` of `seed`.
fn normal_draws<T: Real>(l: usize, q: usize, seed: u64, stream: u64) -> DMatrix<T> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut w = DMatrix::zeros(l, q);
    for r in 0..l {
        for c in 0..q {
            let z: f64 = StandardNormal.sample(&mut rng);
            w[(r, c)] = T::of(z);
        }
    }
    w
}

/// Least squares without intercept of the responses produced by `response`
/// on the rows of `draws`: returns `(sum_l y_l w_l') (W'W)^-1`.
fn regress<T: Real, F>(draws: &DMatrix<T>, rows: usize, response: F) -> Result<DMatrix<T>>
where
    F: Fn(&DVector<T>) -> Result<DVector<T>> + Sync,
{
    let (l, q) = draws.shape();
    if l < q {
        return Err(Error::Invalid(format!("{l} perturbations cannot identify {q} slopes")));
    }
    let chunks: Vec<Result<DMatrix<T>>> = (0..l.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = DMatrix::zeros(rows, q);
            for r in c * CHUNK..((c + 1) * CHUNK).min(l) {
                let w = draws.row(r).transpose();
                let y = response(&w)?;
                acc.ger(T::one(), &y, &w, T::one());
            }
            Ok(acc)
        })
        .collect();
    let mut cross = DMatrix::zeros(rows, q);
    for c in chunks {
        cross += c?;
    }
    let gram = draws.transpose() * draws;
    let inv = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Degenerate("perturbation design is singular".into()))?
        .inverse();
    Ok(cross * inv)
}

/// Slope of `n^-1 Q_n` for the factor `e1`, from `l` perturbations
/// `beta_hat + n^-1/2 W_l` (responses `n^-1/2 {Q_n(beta_l) - Q_n(beta_hat)}`).
pub fn estimate_b<T: Real>(fit: &NullFit<'_, T>, e1: &DMatrix<T>, l: usize, seed: u64) -> Result<DMatrix<T>> {
    let data = fit.data;
    let q = data.q();
    if q == 0 {
        return Ok(DMatrix::zeros(e1.nrows(), 0));
    }
    let root_n = T::of_usize(data.n()).sqrt();
    let base = q_n(&fit.beta, e1, data)?;
    let draws = normal_draws::<T>(l, q, seed, STREAM_B);
    regress(&draws, e1.nrows(), |w| {
        let beta = &fit.beta + w / root_n;
        Ok((q_n(&beta, e1, data)? - &base) / root_n)
    })
}

/// Slope of `U_n` at `beta_hat`, regressing `n^1/2 U_n(beta_hat + n^-1/2 S_l)` on `S_l`.
pub fn estimate_a<T: Real>(fit: &NullFit<'_, T>, l: usize, seed: u64) -> Result<DMatrix<T>> {
    let data = fit.data;
    let q = data.q();
    if q == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let root_n = T::of_usize(data.n()).sqrt();
    let draws = normal_draws::<T>(l, q, seed, STREAM_A);
    let a = regress(&draws, q, |s| {
        let beta = &fit.beta + s / root_n;
        Ok(estimating_function(&beta, data) * root_n)
    })?;
    let cond = condition_number(&a);
    if !(cond <= T::of(MAX_CONDITION)) {
        return Err(Error::IllConditioned(cond.to_f64_lossy()));
    }
    Ok(a)
}

fn condition_number<T: Real>(a: &DMatrix<T>) -> T {
    let sv = a.clone().singular_values();
    let max = sv.iter().copied().fold(T::zero(), |x, y| x.max(y));
    let min = sv.iter().copied().fold(T::max_value().unwrap(), |x, y| x.min(y));
    if min > T::zero() {
        max / min
    } else {
        T::max_value().unwrap()
    }
}

/// Monte-Carlo slope matrices shared by every factor tested against one fit.
#[derive(Debug, Clone)]
pub struct SlopeEstimates<T: Real> {
    /// Slope of `U_n` (`q x q`).
    pub a_hat: DMatrix<T>,
    /// Slope of `n^-1` times the residual vector (`n x q`); the slope of
    /// `n^-1 Q_n` for a factor `E1` is `E1 * residual_slope`.
    pub residual_slope: DMatrix<T>,
    pub l_b: usize,
    pub l_a: usize,
    pub seed: u64,
    pub condition: T,
}

impl<T: Real> SlopeEstimates<T> {
    /// Estimates both slopes with `l_b` and `l_a` perturbations drawn from
    /// independent streams of `seed`.
    pub fn estimate(fit: &NullFit<'_, T>, l_b: usize, l_a: usize, seed: u64) -> Result<Self> {
        let data = fit.data;
        let (n, q) = (data.n(), data.q());
        if q == 0 {
            return Ok(Self {
                a_hat: DMatrix::zeros(0, 0),
                residual_slope: DMatrix::zeros(n, 0),
                l_b,
                l_a,
                seed,
                condition: T::one(),
            });
        }
        if l_b < 10 * q || l_a < 10 * q {
            return Err(Error::Invalid(format!("need at least {} perturbations for q={q}", 10 * q)));
        }
        let a_hat = estimate_a(fit, l_a, seed)?;
        let root_n = T::of_usize(n).sqrt();
        let draws = normal_draws::<T>(l_b, q, seed, STREAM_B);
        let residual_slope = regress(&draws, n, |w| {
            let beta = &fit.beta + w / root_n;
            Ok((residuals_at(&beta, data)? - &fit.residuals) / root_n)
        })?;
        let condition = condition_number(&a_hat);
        Ok(Self { a_hat, residual_slope, l_b, l_a, seed, condition })
    }

    /// Slope of `n^-1 Q_n` for the factor `e1`.
    pub fn b_for(&self, e1: &DMatrix<T>) -> DMatrix<T> {
        e1 * &self.residual_slope
    }
}

/// Per-subject hazard quantities at `beta_hat`: cumulative hazard over each
/// subject's risk interval and normalized at-risk vectors per event time.
#[derive(Debug, Clone)]
pub struct HazardTerms<T: Real> {
    /// `Lambda_i = sum_t at_risk_i(t) dN(t) / Y(t)`
    pub cumulative: DVector<T>,
    /// `n x K`, column `t` is `V(t)`: at-risk indicators over the at-risk count.
    pub at_risk: DMatrix<T>,
    /// Number of events at each distinct event time.
    pub events: DVector<T>,
}

impl<T: Real> HazardTerms<T> {
    pub fn new(fit: &NullFit<'_, T>) -> Result<Self> {
        let td = fit.transformed();
        let n = td.n();
        struct Collect<T: Real> {
            members: Vec<bool>,
            columns: Vec<(Vec<usize>, usize, usize)>,
            _t: std::marker::PhantomData<T>,
        }
        impl<T: Real> RiskSetVisitor<T> for Collect<T> {
            fn enter(&mut self, i: usize) {
                self.members[i] = true;
            }
            fn exit(&mut self, i: usize) {
                self.members[i] = false;
            }
            fn event(&mut self, _: T, events: &[usize], at_risk: usize) -> Result<()> {
                let who = (0..self.members.len()).filter(|&i| self.members[i]).collect();
                self.columns.push((who, events.len(), at_risk));
                Ok(())
            }
        }
        let mut c = Collect::<T> { members: vec![false; n], columns: Vec::new(), _t: Default::default() };
        td.sweep(&mut c)?;
        let k = c.columns.len();
        let mut at_risk = DMatrix::zeros(n, k);
        let mut cumulative = DVector::zeros(n);
        let mut events = DVector::zeros(k);
        for (t, (who, count, total)) in c.columns.iter().enumerate() {
            let v = T::one() / T::of_usize(*total);
            let jump: T = hazard_jump(*count, *total);
            events[t] = T::of_usize(*count);
            for &i in who {
                at_risk[(i, t)] = v;
                cumulative[i] += jump;
            }
        }
        Ok(Self { cumulative, at_risk, events })
    }

    /// `C Omega C'` with `Omega = sum_t dN(t) {diag(V(t)) - V(t) V(t)'}`,
    /// computed as the difference of two Gram products.
    pub fn sandwich(&self, c: &DMatrix<T>) -> DMatrix<T> {
        let mut left = c.clone();
        for (j, mut col) in left.column_iter_mut().enumerate() {
            col *= self.cumulative[j].max(T::zero()).sqrt();
        }
        let mut right = c * &self.at_risk;
        for (t, mut col) in right.column_iter_mut().enumerate() {
            col *= self.events[t].sqrt();
        }
        let mut cov = &left * left.transpose();
        cov.gemm(-T::one(), &right, &right.transpose(), T::one());
        symmetrize(&mut cov);
        cov
    }
}

fn symmetrize<T: Real>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = (m[(i, j)] + m[(j, i)]) * T::of(0.5);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `E1 - B A^-1 Z'`, or `E1` when there are no covariates.
pub fn projected_factor<T: Real>(
    e1: &DMatrix<T>,
    z: &DMatrix<T>,
    a_hat: &DMatrix<T>,
    b_hat: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    if z.ncols() == 0 {
        return Ok(e1.clone());
    }
    let a_inv = a_hat
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("score slope matrix is singular".into()))?;
    Ok(e1 - b_hat * a_inv * z.transpose())
}

/// Estimated `Cov(E1 M)` and its eigenvalues, negatives clipped at zero.
#[derive(Debug, Clone)]
pub struct NullSpectrum<T: Real> {
    pub cov: DMatrix<T>,
    /// Descending.
    pub eigenvalues: DVector<T>,
}

impl<T: Real> NullSpectrum<T> {
    pub fn from_cov(cov: DMatrix<T>) -> Self {
        let mut values: Vec<T> = if cov.nrows() == 0 {
            Vec::new()
        } else {
            SymmetricEigen::new(cov.clone()).eigenvalues.iter().map(|&v| v.max(T::zero())).collect()
        };
        values.sort_by(|a, b| b.partial_cmp(a).unwrap());
        Self { cov, eigenvalues: DVector::from_vec(values) }
    }

    /// True when no eigenvalue is positive (e.g. no events, zero kernel).
    pub fn is_degenerate(&self) -> bool {
        self.eigenvalues.iter().all(|&v| v <= T::zero())
    }
}

/// Covariance estimator of `E1 M` at the fitted null and its spectrum.
pub fn null_spectrum<T: Real>(
    fit: &NullFit<'_, T>,
    e1: &DMatrix<T>,
    a_hat: &DMatrix<T>,
    b_hat: &DMatrix<T>,
) -> Result<NullSpectrum<T>> {
    let hazard = HazardTerms::new(fit)?;
    let c = projected_factor(e1, fit.data.z(), a_hat, b_hat)?;
    Ok(NullSpectrum::from_cov(hazard.sandwich(&c)))
}

/// Estimated `Cov(M)` (`n x n`) from shared slopes: [`null_spectrum`]'s
/// covariance with `E1 = I`, without the eigendecomposition.
pub fn residual_covariance<T: Real>(
    fit: &NullFit<'_, T>,
    hazard: &HazardTerms<T>,
    slopes: &SlopeEstimates<T>,
) -> Result<DMatrix<T>> {
    let n = fit.data.n();
    let c = projected_factor(&DMatrix::identity(n, n), fit.data.z(), &slopes.a_hat, &slopes.residual_slope)?;
    Ok(hazard.sandwich(&c))
}

/// Pivoted Cholesky `S ~ F F'` of a symmetric PSD matrix, stopping once the
/// largest remaining diagonal falls below `tol` times the largest diagonal.
/// Returns `F` (`n x r`).
pub fn pivoted_cholesky<T: Real>(s: &DMatrix<T>, tol: T) -> DMatrix<T> {
    let n = s.nrows();
    let mut diag: Vec<T> = (0..n).map(|i| s[(i, i)]).collect();
    let scale = diag.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let mut cols: Vec<DVector<T>> = Vec::new();
    let mut used = vec![false; n];
    if scale <= T::zero() {
        return DMatrix::zeros(n, 0);
    }
    loop {
        let mut best = None;
        for i in 0..n {
            if !used[i] && best.is_none_or(|b: usize| diag[i] > diag[b]) {
                best = Some(i);
            }
        }
        let Some(p) = best else { break };
        let d = diag[p];
        if d <= tol * scale {
            break;
        }
        let mut col: DVector<T> = s.column(p).into_owned();
        for prev in &cols {
            col.axpy(-prev[p], prev, T::one());
        }
        col /= d.sqrt();
        for i in 0..n {
            if used[i] {
                col[i] = T::zero();
            }
        }
        col[p] = d.sqrt();
        used[p] = true;
        for i in 0..n {
            if !used[i] {
                diag[i] -= col[i] * col[i];
            }
        }
        cols.push(col);
    }
    let mut f = DMatrix::zeros(n, cols.len());
    for (k, c) in cols.into_iter().enumerate() {
        f.set_column(k, &c);
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aft::{fit_null, FitOptions};
    use crate::data::{LabeledMatrix, SurvivalRecord};

    fn dataset(rows: &[(f64, f64, u32)], z: &[f64], q: usize) -> Dataset<f64> {
        let recs: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, &(a, t, s))| SurvivalRecord::new(format!("s{i}"), a, t, s).unwrap())
            .collect();
        let n = recs.len();
        let z = LabeledMatrix::unnamed("z", DMatrix::from_row_slice(n, q, z));
        let g = LabeledMatrix::unnamed("g", DMatrix::from_element(n, 1, 1.0));
        Dataset::assemble(recs, z, g, None, 1).unwrap()
    }

    fn three() -> Dataset<f64> {
        dataset(&[(0.0, 1.0, 1), (0.0, 2.0, 1), (0.0, 3.0, 1)], &[], 0)
    }

    #[test]
    fn q_n_row_of_ones_vanishes() {
        let ds = three();
        let q = q_n(&DVector::zeros(0), &DMatrix::from_element(1, 3, 1.0), &ds).unwrap();
        assert!(q[0].abs() < 1e-15);
    }

    #[test]
    fn q_n_first_subject_indicator() {
        // subject 1 fails first with 3 at risk: 1 - 1/3
        let q = q_n(&DVector::zeros(0), &DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]), &three()).unwrap();
        assert!((q[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn q_n_identity_is_residual_vector() {
        let ds = three();
        let fit = fit_null(&ds, &FitOptions::default()).unwrap();
        let q = q_n(&fit.beta, &DMatrix::identity(3, 3), &ds).unwrap();
        assert_eq!(q, fit.residuals);
    }

    #[test]
    fn all_ones_factor_has_zero_covariance() {
        let ds = three();
        let fit = fit_null(&ds, &FitOptions::default()).unwrap();
        let s = null_spectrum(&fit, &DMatrix::from_element(1, 3, 1.0), &DMatrix::zeros(0, 0), &DMatrix::zeros(1, 0))
            .unwrap();
        assert!(s.cov[(0, 0)].abs() < 1e-14, "{}", s.cov);
    }

    #[test]
    fn no_events_gives_zero_spectrum() {
        let ds = dataset(&[(0.0, 1.0, 0), (0.0, 2.0, 2), (0.0, 3.0, 0)], &[], 0);
        let fit = fit_null(&ds, &FitOptions::default()).unwrap();
        let s = null_spectrum(&fit, &DMatrix::identity(3, 3), &DMatrix::zeros(0, 0), &DMatrix::zeros(3, 0)).unwrap();
        assert!(s.is_degenerate());
        assert_eq!(s.cov, DMatrix::zeros(3, 3));
    }

    #[test]
    fn least_squares_recovers_linear_slope() {
        let slope = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.5]);
        let draws = normal_draws::<f64>(5, 2, 7, STREAM_B);
        let b = regress(&draws, 3, |w| Ok(&slope * w)).unwrap();
        assert!((b - slope).amax() < 1e-12);
    }

    #[test]
    fn regression_is_deterministic_and_seeded() {
        let a = normal_draws::<f64>(100, 2, 11, STREAM_A);
        assert_eq!(a, normal_draws::<f64>(100, 2, 11, STREAM_A));
        assert_ne!(a, normal_draws::<f64>(100, 2, 11, STREAM_B));
    }

    #[test]
    fn pivoted_cholesky_reconstructs_low_rank() {
        let b = DMatrix::from_fn(6, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let s = &b * b.transpose();
        let f = pivoted_cholesky(&s, 1e-12);
        assert_eq!(f.ncols(), 3);
        assert!((&f * f.transpose() - s).amax() < 1e-10);
    }
}
