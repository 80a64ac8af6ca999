//! The association statistics `R`, `R_het` and their small-sample corrected
//! versions, with p-values from the estimated null spectrum.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::aft::NullFit;
use crate::asymptotics::{pivoted_cholesky, projected_factor, residual_covariance, HazardTerms, NullSpectrum, SlopeEstimates};
use crate::error::{Error, Result};
use crate::kernels::{heterogeneity_weight, KernelMatrix};
use crate::quadform::{davies_tail, DaviesFault, QuadFormSpec};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    R,
    RHet,
    Rc,
    RcHet,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::R, Method::RHet, Method::Rc, Method::RcHet];

    pub fn needs_subpop(self) -> bool {
        matches!(self, Method::RHet | Method::RcHet)
    }

    pub fn corrected(self) -> bool {
        matches!(self, Method::Rc | Method::RcHet)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::R => "R",
            Method::RHet => "Rhet",
            Method::Rc => "Rc",
            Method::RcHet => "Rchet",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "").as_str() {
            "r" => Ok(Method::R),
            "rhet" => Ok(Method::RHet),
            "rc" => Ok(Method::Rc),
            "rchet" => Ok(Method::RcHet),
            _ => Err(Error::Invalid(format!("unknown method '{s}' (expected R, Rhet, Rc or Rchet)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestOptions {
    /// Perturbations for the residual slope (`L`).
    pub perturbations: usize,
    /// Perturbations for the score slope (`L~`).
    pub perturbations_score: usize,
    pub seed: u64,
    /// Target absolute error of Davies' method.
    pub accuracy: f64,
}

impl TestOptions {
    /// 10,000 perturbations of each kind: the setting for a single analysis.
    pub fn production(seed: u64) -> Self {
        Self { perturbations: 10_000, perturbations_score: 10_000, seed, accuracy: 1e-6 }
    }

    /// 1,000 perturbations of each kind, for simulation studies.
    pub fn calibration(seed: u64) -> Self {
        Self { perturbations: 1_000, perturbations_score: 1_000, seed, accuracy: 1e-6 }
    }
}

impl Default for TestOptions {
    fn default() -> Self {
        Self::production(1)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Flags {
    /// No positive (or, for corrected tests, nonzero) null eigenvalue; p is 1.
    pub degenerate: bool,
    /// Davies' method failed and the moment-matching approximation was used.
    pub fallback: bool,
    /// Davies' method reported possible round-off trouble.
    pub roundoff: bool,
    /// The null coefficient search did not meet its tolerance.
    pub not_converged: bool,
}

impl Flags {
    pub fn any(&self) -> bool {
        self.degenerate || self.fallback || self.roundoff || self.not_converged
    }
}

impl fmt::Display for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.degenerate, "degenerate_spectrum"),
            (self.fallback, "moment_match"),
            (self.roundoff, "roundoff"),
            (self.not_converged, "not_converged"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, name)| *name)
        .collect();
        if names.is_empty() {
            f.write_str("-")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub score_norm: f64,
    pub perturbations: usize,
    pub perturbations_score: usize,
    pub seed: u64,
    /// Condition number of the estimated score slope.
    pub condition: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub method: Method,
    pub statistic: f64,
    pub p_value: f64,
    /// Weights of the null chi-square mixture (signed for corrected tests).
    pub spectrum: Vec<f64>,
    /// Rank of the kernel factor.
    pub rank: usize,
    pub n_events: usize,
    pub flags: Flags,
    pub diagnostics: Diagnostics,
}

impl TestResult {
    pub const TSV_HEADER: &'static str = "set\tmethod\tstatistic\tp_value\tm\tn_events\tflags";

    pub fn tsv_row(&self, set: &str) -> String {
        format!(
            "{set}\t{}\t{:e}\t{:e}\t{}\t{}\t{}",
            self.method, self.statistic, self.p_value, self.rank, self.n_events, self.flags
        )
    }
}

/// Everything about a null fit that is shared across kernels: slope
/// estimates, hazard terms and, for corrected tests, a factor of `Cov(M)`.
pub struct NullContext<'f, 'd, T: Real> {
    fit: &'f NullFit<'d, T>,
    slopes: SlopeEstimates<T>,
    hazard: HazardTerms<T>,
    accuracy: f64,
    residual_factor: OnceLock<std::result::Result<ResidualFactor<T>, String>>,
}

struct ResidualFactor<T: Real> {
    /// `Cov(M) ~ F F'`
    f: DMatrix<T>,
    /// `F' F`
    gram: DMatrix<T>,
}

impl<'f, 'd, T: Real> NullContext<'f, 'd, T> {
    pub fn new(fit: &'f NullFit<'d, T>, opts: &TestOptions) -> Result<Self> {
        let slopes = SlopeEstimates::estimate(fit, opts.perturbations, opts.perturbations_score, opts.seed)?;
        let hazard = HazardTerms::new(fit)?;
        Ok(Self { fit, slopes, hazard, accuracy: opts.accuracy, residual_factor: OnceLock::new() })
    }

    pub fn fit(&self) -> &NullFit<'d, T> {
        self.fit
    }

    pub fn slopes(&self) -> &SlopeEstimates<T> {
        &self.slopes
    }

    fn base_result(&self, method: Method, rank: usize) -> TestResult {
        TestResult {
            method,
            statistic: 0.0,
            p_value: 1.0,
            spectrum: Vec::new(),
            rank,
            n_events: self.fit.n_events(),
            flags: Flags { not_converged: !self.fit.converged, ..Flags::default() },
            diagnostics: Diagnostics {
                score_norm: self.fit.score_norm.to_f64_lossy(),
                perturbations: self.slopes.l_b,
                perturbations_score: self.slopes.l_a,
                seed: self.slopes.seed,
                condition: self.slopes.condition.to_f64_lossy(),
            },
        }
    }

    /// Null spectrum of `E1 M` for a kernel factor.
    pub fn spectrum(&self, k: &KernelMatrix<T>) -> Result<NullSpectrum<T>> {
        let e1 = k.factor();
        let b = self.slopes.b_for(e1);
        let c = projected_factor(e1, self.fit.data.z(), &self.slopes.a_hat, &b)?;
        Ok(NullSpectrum::from_cov(self.hazard.sandwich(&c)))
    }

    fn uncorrected(&self, method: Method, k: &KernelMatrix<T>) -> Result<TestResult> {
        check_n(k, self.fit)?;
        let mut out = self.base_result(method, k.rank());
        out.statistic = k.quadratic_form(&self.fit.residuals).to_f64_lossy();
        let spec = self.spectrum(k)?;
        // eigenvalues this far below the kernel and hazard scales are rounding noise
        let largest_hazard = self.hazard.cumulative.iter().fold(0.0f64, |a, v| a.max(v.to_f64_lossy()));
        let largest_kernel = k.eigenvalues().iter().fold(0.0f64, |a, v| a.max(v.to_f64_lossy()));
        let floor = 1e-10 * largest_hazard * largest_kernel;
        out.spectrum = spec.eigenvalues.iter().map(|v| v.to_f64_lossy()).filter(|&v| v > floor).collect();
        if out.spectrum.is_empty() {
            out.flags.degenerate = true;
            return Ok(out);
        }
        let x = out.statistic;
        self.tail(&mut out, x)?;
        Ok(out)
    }

    fn tail(&self, out: &mut TestResult, x: f64) -> Result<()> {
        let tail = davies_tail(&QuadFormSpec { lambdas: out.spectrum.clone(), x, accuracy: self.accuracy })?;
        out.p_value = tail.p;
        out.flags.fallback = tail.fell_back();
        out.flags.roundoff = tail.fault == Some(DaviesFault::RoundOff);
        Ok(())
    }

    /// `R = M' K M`.
    pub fn test_r(&self, k: &KernelMatrix<T>) -> Result<TestResult> {
        self.uncorrected(Method::R, k)
    }

    /// `R_het = M' W M` with `W = (J + H) o K`.
    pub fn test_r_het(&self, k: &KernelMatrix<T>, h: &KernelMatrix<T>) -> Result<TestResult> {
        self.uncorrected(Method::RHet, &heterogeneity_weight(k, h)?)
    }

    fn residual_factor(&self) -> Result<&ResidualFactor<T>> {
        let cell = self.residual_factor.get_or_init(|| {
            let cov = residual_covariance(self.fit, &self.hazard, &self.slopes).map_err(|e| e.to_string())?;
            let f = pivoted_cholesky(&cov, T::of(1e-10));
            let gram = f.transpose() * &f;
            Ok(ResidualFactor { f, gram })
        });
        cell.as_ref().map_err(|e| Error::Degenerate(e.clone()))
    }

    fn corrected(&self, method: Method, k: &KernelMatrix<T>) -> Result<TestResult> {
        check_n(k, self.fit)?;
        let m = &self.fit.residuals;
        let mtm = m.norm_squared();
        if !(mtm > T::zero()) {
            return Err(Error::Degenerate("martingale residuals are all zero".into()));
        }
        let c = k.quadratic_form(m) / mtm;
        let mut out = self.base_result(method, k.rank());
        out.statistic = c.to_f64_lossy();
        let rf = self.residual_factor()?;
        // eigenvalues of F'(K - cI)F, which share the spectrum of S^1/2 (K - cI) S^1/2
        let p = k.factor() * &rf.f;
        let pp = p.transpose() * &p;
        let form = &pp - &rf.gram * c;
        let values: DVector<T> = if form.nrows() == 0 { DVector::zeros(0) } else { form.symmetric_eigenvalues() };
        let mut spectrum: Vec<f64> = values.iter().map(|v| v.to_f64_lossy()).collect();
        spectrum.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let scale = max_diag(&pp).max(c.abs().to_f64_lossy() * max_diag(&rf.gram));
        let largest = spectrum.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        out.spectrum = spectrum;
        if !(largest > 1e-10 * scale) {
            out.flags.degenerate = true;
            return Ok(out);
        }
        self.tail(&mut out, 0.0)?;
        Ok(out)
    }

    /// `R^c = M' K M / M' M`, with p-value `P(M'(K - R^c I)M >= 0)`.
    pub fn test_rc(&self, k: &KernelMatrix<T>) -> Result<TestResult> {
        self.corrected(Method::Rc, k)
    }

    /// Corrected heterogeneity test on `W = (J + H) o K`.
    pub fn test_rc_het(&self, k: &KernelMatrix<T>, h: &KernelMatrix<T>) -> Result<TestResult> {
        self.corrected(Method::RcHet, &heterogeneity_weight(k, h)?)
    }

    /// Runs `method`; `h` is required for the heterogeneity methods.
    pub fn run(&self, method: Method, k: &KernelMatrix<T>, h: Option<&KernelMatrix<T>>) -> Result<TestResult> {
        let need_h = || h.ok_or_else(|| Error::Invalid(format!("method {method} needs a sub-population kernel")));
        match method {
            Method::R => self.test_r(k),
            Method::RHet => self.test_r_het(k, need_h()?),
            Method::Rc => self.test_rc(k),
            Method::RcHet => self.test_rc_het(k, need_h()?),
        }
    }
}

fn max_diag<T: Real>(m: &DMatrix<T>) -> f64 {
    (0..m.nrows()).map(|i| m[(i, i)].to_f64_lossy().abs()).fold(0.0, f64::max)
}

fn check_n<T: Real>(k: &KernelMatrix<T>, fit: &NullFit<'_, T>) -> Result<()> {
    if k.n() != fit.data.n() {
        return Err(Error::Dimension(format!("kernel has n={}, data has n={}", k.n(), fit.data.n())));
    }
    Ok(())
}

pub fn test_r<T: Real>(fit: &NullFit<'_, T>, k: &KernelMatrix<T>, opts: &TestOptions) -> Result<TestResult> {
    NullContext::new(fit, opts)?.test_r(k)
}

pub fn test_r_het<T: Real>(
    fit: &NullFit<'_, T>,
    k: &KernelMatrix<T>,
    h: &KernelMatrix<T>,
    opts: &TestOptions,
) -> Result<TestResult> {
    NullContext::new(fit, opts)?.test_r_het(k, h)
}

pub fn test_r_corrected<T: Real>(fit: &NullFit<'_, T>, k: &KernelMatrix<T>, opts: &TestOptions) -> Result<TestResult> {
    NullContext::new(fit, opts)?.test_rc(k)
}

pub fn test_r_het_corrected<T: Real>(
    fit: &NullFit<'_, T>,
    k: &KernelMatrix<T>,
    h: &KernelMatrix<T>,
    opts: &TestOptions,
) -> Result<TestResult> {
    NullContext::new(fit, opts)?.test_rc_het(k, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aft::{fit_null, FitOptions};
    use crate::data::{Dataset, LabeledMatrix, SurvivalRecord};

    fn three() -> Dataset<f64> {
        let recs = (1..=3).map(|t| SurvivalRecord::new(format!("s{t}"), 0.0, t as f64, 1).unwrap()).collect();
        Dataset::assemble(
            recs,
            LabeledMatrix::empty(3),
            LabeledMatrix::unnamed("g", DMatrix::from_element(3, 1, 1.0)),
            None,
            1,
        )
        .unwrap()
    }

    #[test]
    fn identity_kernel_statistic_by_hand() {
        let ds = three();
        let fit = fit_null(&ds, &FitOptions::default()).unwrap();
        let k = KernelMatrix::from_matrix(DMatrix::identity(3, 3)).unwrap();
        let r = test_r(&fit, &k, &TestOptions::calibration(1)).unwrap();
        assert!((r.statistic - 7.0 / 6.0).abs() < 1e-14);
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
    }

    #[test]
    fn zero_kernel_is_degenerate() {
        let ds = three();
        let fit = fit_null(&ds, &FitOptions::default()).unwrap();
        let k = KernelMatrix::from_matrix(DMatrix::zeros(3, 3)).unwrap();
        let r = test_r(&fit, &k, &TestOptions::calibration(1)).unwrap();
        assert_eq!((r.statistic, r.p_value, r.flags.degenerate), (0.0, 1.0, true));
        assert_eq!(r.tsv_row("g"), "g\tR\t0e0\t1e0\t0\t3\tdegenerate_spectrum");
    }

    #[test]
    fn scaled_identity_corrected_is_degenerate() {
        let ds = three();
        let fit = fit_null(&ds, &FitOptions::default()).unwrap();
        let k = KernelMatrix::from_matrix(DMatrix::identity(3, 3) * 2.5).unwrap();
        let r = test_r_corrected(&fit, &k, &TestOptions::calibration(1)).unwrap();
        assert!((r.statistic - 2.5).abs() < 1e-14);
        assert_eq!(r.p_value, 1.0);
        assert!(r.flags.degenerate);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert_eq!("R_het".parse::<Method>().unwrap(), Method::RHet);
        assert!("Q".parse::<Method>().is_err());
    }
}
