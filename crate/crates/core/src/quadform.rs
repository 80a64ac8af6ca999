//! Tail probabilities of `Q = sum_j lambda_j * chi2_1j` with weights of any sign.
//!
//! [`davies_tail`] inverts the characteristic function with Davies' algorithm
//! (error bounds, truncation point and convergence factor as in the original
//! AS 155 routine). [`moment_match_tail`] is the scaled noncentral chi-square
//! approximation used when the integrator fails.

use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};

/// Smallest p-value ever reported.
pub const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadFormSpec {
    pub lambdas: Vec<f64>,
    pub x: f64,
    /// Target absolute error of the tail probability.
    pub accuracy: f64,
}

impl QuadFormSpec {
    pub fn new(lambdas: Vec<f64>, x: f64) -> Self {
        Self { lambdas, x, accuracy: 1e-6 }
    }

    fn validate(&self) -> Result<Vec<f64>> {
        if self.lambdas.iter().any(|l| !l.is_finite()) || !self.x.is_finite() {
            return Err(Error::Invalid("quadratic form weights and threshold must be finite".into()));
        }
        let max = self.lambdas.iter().fold(0.0f64, |m, l| m.max(l.abs()));
        if max == 0.0 {
            return Err(Error::Degenerate("all quadratic form weights are zero".into()));
        }
        Ok(self.lambdas.iter().copied().filter(|l| l.abs() >= 1e-12 * max).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailMethod {
    Davies,
    MomentMatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tail {
    /// `P(Q >= x)`, clipped to `[P_FLOOR, 1]`.
    pub p: f64,
    pub method: TailMethod,
    /// Davies fault code when the integrator did not finish cleanly.
    pub fault: Option<DaviesFault>,
}

impl Tail {
    pub fn fell_back(&self) -> bool {
        self.method == TailMethod::MomentMatch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DaviesFault {
    /// Required accuracy not reached within the term limit.
    TermLimit,
    /// Round-off error possibly significant; the result is still returned.
    RoundOff,
    /// Too many calls of the error-bound routines.
    CallLimit,
}

/// `P(Q >= x)` by Davies' method, falling back to moment matching if the
/// integrator fails.
pub fn davies_tail(spec: &QuadFormSpec) -> Result<Tail> {
    let lambdas = spec.validate()?;
    let mut q = Davies::new(&lambdas, spec.x, 100_000);
    match q.run(spec.accuracy) {
        Ok((cdf, roundoff)) => Ok(Tail {
            p: clip(1.0 - cdf),
            method: TailMethod::Davies,
            fault: roundoff.then_some(DaviesFault::RoundOff),
        }),
        Err(fault) => {
            log::debug!("Davies integration failed ({fault:?}); using moment matching");
            let p = moment_match(&lambdas, spec.x)?;
            Ok(Tail { p: clip(p), method: TailMethod::MomentMatch, fault: Some(fault) })
        }
    }
}

/// Approximate `P(Q >= x)` by matching the skewness and kurtosis of `Q` to a
/// scaled noncentral chi-square. Exact for a single weight.
pub fn moment_match_tail(spec: &QuadFormSpec) -> Result<f64> {
    let lambdas = spec.validate()?;
    Ok(clip(moment_match(&lambdas, spec.x)?))
}

fn clip(p: f64) -> f64 {
    if p.is_nan() {
        1.0
    } else {
        p.clamp(P_FLOOR, 1.0)
    }
}

fn moment_match(lambdas: &[f64], x: f64) -> Result<f64> {
    let c = |k: i32| lambdas.iter().map(|l| l.powi(k)).sum::<f64>();
    let (c1, c2, c3, c4) = (c(1), c(2), c(3), c(4));
    if c2 <= 0.0 {
        return Err(Error::Degenerate("quadratic form has zero variance".into()));
    }
    let sd = (2.0 * c2).sqrt();
    let t = (x - c1) / sd;
    if c3 == 0.0 {
        return Ok(normal_upper(t));
    }
    if c3 < 0.0 {
        // P(Q >= x) = 1 - P(-Q > -x); -Q has positive skew
        let flipped: Vec<f64> = lambdas.iter().map(|l| -l).collect();
        return Ok(1.0 - moment_match(&flipped, -x)?);
    }
    let s1 = c3 / c2.powf(1.5);
    let s2 = c4 / (c2 * c2);
    let (a, delta, l) = if s1 * s1 > s2 {
        let a = 1.0 / (s1 - (s1 * s1 - s2).sqrt());
        let delta = s1 * a.powi(3) - a * a;
        (a, delta, a * a - 2.0 * delta)
    } else {
        (1.0 / s1, 0.0, 1.0 / (s1 * s1))
    };
    let y = t * std::f64::consts::SQRT_2 * a + l + delta;
    Ok(noncentral_chi2_upper(y, l, delta))
}

fn normal_upper(t: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(t / std::f64::consts::SQRT_2)
}

/// `P(chi2_df(ncp) > y)` as a Poisson mixture of central tails.
fn noncentral_chi2_upper(y: f64, df: f64, ncp: f64) -> f64 {
    if y <= 0.0 {
        return 1.0;
    }
    let central = |k: f64| gamma_ur(0.5 * df + k, 0.5 * y);
    if ncp <= 0.0 {
        return central(0.0);
    }
    let mu = 0.5 * ncp;
    // sum outward from the Poisson mode
    let mode = mu.floor();
    let log_w = |k: f64| -mu + k * mu.ln() - statrs::function::gamma::ln_gamma(k + 1.0);
    let mut total = 0.0;
    let mut k = mode;
    loop {
        let w = log_w(k).exp();
        total += w * central(k);
        if (w < 1e-17 && k > mode) || k > mode + 10_000.0 {
            break;
        }
        k += 1.0;
    }
    let mut k = mode - 1.0;
    while k >= 0.0 {
        let w = log_w(k).exp();
        total += w * central(k);
        if w < 1e-17 {
            break;
        }
        k -= 1.0;
    }
    total.min(1.0)
}

const LOG28: f64 = 0.0866; // ln(2) / 8
const PI: f64 = std::f64::consts::PI;

fn exp1(x: f64) -> f64 {
    if x < -50.0 {
        0.0
    } else {
        x.exp()
    }
}

/// `ln(1 + x)` when `first`, else `ln(1 + x) - x`, accurate for small `x`.
fn log1(x: f64, first: bool) -> f64 {
    if x.abs() > 0.1 {
        if first {
            (1.0 + x).ln()
        } else {
            (1.0 + x).ln() - x
        }
    } else {
        let mut y = x / (2.0 + x);
        let mut term = 2.0 * y * y * y;
        let mut k = 3.0;
        let mut s = if first { 2.0 } else { -x } * y;
        y *= y;
        let mut s1 = s + term / k;
        while s1 != s {
            k += 2.0;
            term *= y;
            s = s1;
            s1 = s + term / k;
        }
        s
    }
}

/// State of one Davies evaluation. All components are central chi-square(1)
/// with no extra normal term, so degrees of freedom are 1 and
/// noncentralities 0 throughout.
struct Davies<'a> {
    lb: &'a [f64],
    c: f64,
    sigsq: f64,
    lmax: f64,
    lmin: f64,
    mean: f64,
    intl: f64,
    ersm: f64,
    count: usize,
    lim: usize,
    order: Option<Vec<usize>>,
    fail: bool,
}

type Step<T> = std::result::Result<T, DaviesFault>;

impl<'a> Davies<'a> {
    fn new(lb: &'a [f64], c: f64, lim: usize) -> Self {
        Self {
            lb,
            c,
            sigsq: 0.0,
            lmax: 0.0,
            lmin: 0.0,
            mean: 0.0,
            intl: 0.0,
            ersm: 0.0,
            count: 0,
            lim,
            order: None,
            fail: false,
        }
    }

    fn counter(&mut self) -> Step<()> {
        self.count += 1;
        if self.count > self.lim {
            Err(DaviesFault::CallLimit)
        } else {
            Ok(())
        }
    }

    /// Indices of `lb` sorted by decreasing absolute value.
    fn ordered(&mut self) -> &[usize] {
        if self.order.is_none() {
            let mut idx: Vec<usize> = (0..self.lb.len()).collect();
            idx.sort_by(|&a, &b| self.lb[b].abs().partial_cmp(&self.lb[a].abs()).unwrap().then(a.cmp(&b)));
            self.order = Some(idx);
        }
        self.order.as_deref().unwrap()
    }

    /// Chernoff bound on a tail probability; returns (bound, cutoff).
    fn errbd(&mut self, u: f64) -> Step<(f64, f64)> {
        self.counter()?;
        let mut xconst = u * self.sigsq;
        let mut sum1 = u * xconst;
        let u2 = 2.0 * u;
        for &lj in self.lb.iter().rev() {
            let x = u2 * lj;
            let y = 1.0 - x;
            xconst += lj / y;
            sum1 += x * x / y + log1(-x, false);
        }
        Ok((exp1(-0.5 * sum1), xconst))
    }

    /// Cut-off beyond which the upper (`upn > 0`) or lower tail is below `accx`.
    fn ctff(&mut self, accx: f64, upn: &mut f64) -> Step<f64> {
        let mut u2 = *upn;
        let mut u1 = 0.0;
        let mut c1 = self.mean;
        let rb = 2.0 * if u2 > 0.0 { self.lmax } else { self.lmin };
        let mut c2;
        loop {
            let u = u2 / (1.0 + u2 * rb);
            let (bound, cx) = self.errbd(u)?;
            c2 = cx;
            if bound <= accx {
                break;
            }
            u1 = u2;
            c1 = c2;
            u2 *= 2.0;
        }
        let mut u = (c1 - self.mean) / (c2 - self.mean);
        while u < 0.9 {
            u = (u1 + u2) / 2.0;
            let (bound, xconst) = self.errbd(u / (1.0 + u * rb))?;
            if bound > accx {
                u1 = u;
                c1 = xconst;
            } else {
                u2 = u;
                c2 = xconst;
            }
            u = (c1 - self.mean) / (c2 - self.mean);
        }
        *upn = u2;
        Ok(c2)
    }

    /// Bound on the integration error from truncating at `u`.
    fn truncation(&mut self, u: f64, tausq: f64) -> Step<f64> {
        self.counter()?;
        let mut prod2 = 0.0;
        let mut prod3 = 0.0;
        let mut s = 0usize;
        let sum2 = (self.sigsq + tausq) * u * u;
        let mut prod1 = 2.0 * sum2;
        let u = 2.0 * u;
        for &lj in self.lb {
            let x = (u * lj) * (u * lj);
            if x > 1.0 {
                prod2 += x.ln();
                prod3 += log1(x, true);
                s += 1;
            } else {
                prod1 += log1(x, true);
            }
        }
        let prod2 = prod1 + prod2;
        let prod3 = prod1 + prod3;
        let x = exp1(-0.25 * prod2) / PI;
        let y = exp1(-0.25 * prod3) / PI;
        let mut err1 = if s == 0 { 1.0 } else { x * 2.0 / s as f64 };
        let err2 = if prod3 > 1.0 { 2.5 * y } else { 1.0 };
        if err2 < err1 {
            err1 = err2;
        }
        let x = 0.5 * sum2;
        let err2 = if x <= y { 1.0 } else { y / x };
        Ok(err1.min(err2))
    }

    /// Smallest truncation point (on a coarse grid) with error below `accx`.
    fn findu(&mut self, utx: &mut f64, accx: f64) -> Step<()> {
        const DIVIS: [f64; 4] = [2.0, 1.4, 1.2, 1.1];
        let mut ut = *utx;
        let mut u = ut / 4.0;
        if self.truncation(u, 0.0)? > accx {
            u = ut;
            while self.truncation(u, 0.0)? > accx {
                ut *= 4.0;
                u = ut;
            }
        } else {
            ut = u;
            u /= 4.0;
            while self.truncation(u, 0.0)? <= accx {
                ut = u;
                u /= 4.0;
            }
        }
        for d in DIVIS {
            let u = ut / d;
            if self.truncation(u, 0.0)? <= accx {
                ut = u;
            }
        }
        *utx = ut;
        Ok(())
    }

    fn integrate(&mut self, nterm: usize, interv: f64, tausq: f64, mainx: bool) {
        let inpi = interv / PI;
        for k in (0..=nterm).rev() {
            let u = (k as f64 + 0.5) * interv;
            let mut sum1 = -2.0 * u * self.c;
            let mut sum2 = sum1.abs();
            let mut sum3 = -0.5 * self.sigsq * u * u;
            for &lj in self.lb.iter().rev() {
                let x = 2.0 * lj * u;
                sum3 -= 0.25 * log1(x * x, true);
                let z = x.atan();
                sum1 += z;
                sum2 += z.abs();
            }
            let mut x = inpi * exp1(sum3) / u;
            if !mainx {
                x *= 1.0 - exp1(-0.5 * tausq * u * u);
            }
            self.intl += (0.5 * sum1).sin() * x;
            self.ersm += 0.5 * sum2 * x;
        }
    }

    /// Coefficient of `tausq` in the error from the convergence factor at `x`.
    fn cfe(&mut self, x: f64) -> Step<f64> {
        self.counter()?;
        let order = self.ordered().to_vec();
        let mut axl = x.abs();
        let sxl = if x > 0.0 { 1.0 } else { -1.0 };
        let mut sum1 = 0.0;
        for j in (0..order.len()).rev() {
            let t = order[j];
            if self.lb[t] * sxl > 0.0 {
                let lj = self.lb[t].abs();
                let axl1 = axl - lj;
                let axl2 = lj / LOG28;
                if axl1 > axl2 {
                    axl = axl1;
                } else {
                    if axl > axl2 {
                        axl = axl2;
                    }
                    sum1 = (axl - axl1) / lj + j as f64;
                    break;
                }
            }
        }
        if sum1 > 100.0 {
            self.fail = true;
            Ok(1.0)
        } else {
            Ok(2f64.powf(sum1 / 4.0) / (PI * axl * axl))
        }
    }

    /// Returns `P(Q < c)` and whether round-off may be significant.
    fn run(&mut self, acc: f64) -> Step<(f64, bool)> {
        let mut xlim = self.lim as f64;
        let mut acc1 = acc;
        let mut sd = 0.0;
        for &lj in self.lb {
            sd += lj * lj * 2.0;
            self.mean += lj;
            if self.lmax < lj {
                self.lmax = lj;
            } else if self.lmin > lj {
                self.lmin = lj;
            }
        }
        let sd = sd.sqrt();
        let almx = self.lmax.max(-self.lmin);

        let mut utx = 16.0 / sd;
        let mut up = 4.5 / sd;
        let mut un = -up;
        self.findu(&mut utx, 0.5 * acc1)?;
        if self.c != 0.0 && almx > 0.07 * sd {
            let tausq = 0.25 * acc1 / self.cfe(self.c)?;
            if self.fail {
                self.fail = false;
            } else if self.truncation(utx, tausq)? < 0.2 * acc1 {
                self.sigsq += tausq;
                self.findu(&mut utx, 0.25 * acc1)?;
            }
        }
        acc1 *= 0.5;

        let (intv, xnt) = loop {
            let d1 = self.ctff(acc1, &mut up)? - self.c;
            if d1 < 0.0 {
                return Ok((1.0, false));
            }
            let d2 = self.c - self.ctff(acc1, &mut un)?;
            if d2 < 0.0 {
                return Ok((0.0, false));
            }
            let intv = 2.0 * PI / d1.max(d2);
            let xnt = utx / intv;
            let xntm = 3.0 / acc1.sqrt();
            if xnt > xntm * 1.5 {
                if xntm > xlim {
                    return Err(DaviesFault::TermLimit);
                }
                let ntm = (xntm + 0.5).floor() as usize;
                let intv1 = utx / ntm as f64;
                let x = 2.0 * PI / intv1;
                if x <= self.c.abs() {
                    break (intv, xnt);
                }
                let tausq = 0.33 * acc1 / (1.1 * (self.cfe(self.c - x)? + self.cfe(self.c + x)?));
                if self.fail {
                    break (intv, xnt);
                }
                acc1 *= 0.67;
                self.integrate(ntm, intv1, tausq, false);
                xlim -= xntm;
                self.sigsq += tausq;
                self.findu(&mut utx, 0.25 * acc1)?;
                acc1 *= 0.75;
                continue;
            }
            break (intv, xnt);
        };

        if xnt > xlim {
            return Err(DaviesFault::TermLimit);
        }
        let nt = (xnt + 0.5).floor() as usize;
        self.integrate(nt, intv, 0.0, true);
        let qfval = 0.5 - self.intl;

        let up = self.ersm;
        let x = up + acc / 10.0;
        let roundoff = [1.0, 2.0, 4.0, 8.0].iter().any(|r| r * x == r * up);
        Ok((qfval, roundoff))
    }
}
