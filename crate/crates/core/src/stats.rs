//! Diagnostics for collections of p-values: uniformity checks, Q-Q points and
//! multiple-testing thresholds.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    /// Asymptotic Kolmogorov tail probability.
    pub p_value: f64,
    pub n: usize,
}

fn check_unit(p: &[f64]) -> Result<()> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Invalid(format!("p-value {bad} outside [0, 1]")));
    }
    Ok(())
}

/// One-sample Kolmogorov-Smirnov test against `U(0, 1)`.
pub fn ks_uniform(p: &[f64]) -> Result<KsResult> {
    check_unit(p)?;
    ks_against(p, |x| x)
}

/// One-sample Kolmogorov-Smirnov test against a continuous CDF.
pub fn ks_against<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> Result<KsResult> {
    if sample.is_empty() {
        return Err(Error::Invalid("empty sample".into()));
    }
    if sample.iter().any(|v| v.is_nan()) {
        return Err(Error::Invalid("NaN in sample".into()));
    }
    let mut s = sample.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    let d = s.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n)
    });
    Ok(KsResult { statistic: d, p_value: kolmogorov_tail(d, s.len()), n: s.len() })
}

/// `P(D_n > d)` from the Kolmogorov limit law with Stephens' small-sample
/// adjustment of the argument.
pub fn kolmogorov_tail(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Sorted observed p-values paired with uniform quantiles `(i - 0.5) / N`.
pub fn qq_points(p: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_unit(p)?;
    let mut s = p.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    Ok(s.into_iter().enumerate().map(|(i, v)| ((i as f64 + 0.5) / n, v)).collect())
}

/// Step-up thresholds `alpha i / (m H_m)` for FDR control under arbitrary
/// dependence, `i = 1..m`.
pub fn fdr_thresholds(m: usize, alpha: f64) -> Vec<f64> {
    let harmonic: f64 = (1..=m).map(|k| 1.0 / k as f64).sum();
    (1..=m).map(|i| alpha * i as f64 / (m as f64 * harmonic)).collect()
}

/// Indices (into `p`) rejected by the step-up rule with [`fdr_thresholds`],
/// in increasing order of p-value.
pub fn fdr_discoveries(p: &[f64], alpha: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let thresholds = fdr_thresholds(p.len(), alpha);
    let last = order.iter().zip(&thresholds).rposition(|(&i, &t)| p[i] <= t);
    match last {
        Some(k) => order[..=k].to_vec(),
        None => Vec::new(),
    }
}

/// Rejection rate at `alpha` and its binomial standard error.
pub fn rejection_rate(p: &[f64], alpha: f64) -> (f64, f64) {
    if p.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = p.len() as f64;
    let rate = p.iter().filter(|&&v| v <= alpha).count() as f64 / n;
    (rate, (rate * (1.0 - rate) / n).sqrt())
}
