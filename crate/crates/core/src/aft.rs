//! Null accelerated-failure-time fit on the residual log-time scale.
//!
//! For coefficients `beta`, subject `i` has residual log-time
//! `e_i = log T_i - beta'Z_i` and residual log-entry `ea_i = log A_i - beta'Z_i`
//! (negative infinity when untruncated). Subject `i` is at risk at residual time
//! `s` when `ea_i < s <= e_i`; a subject whose observed time equals its entry
//! time is at risk only at `s = e_i`. Failures from the cause of interest are
//! the counting-process jumps; tied jumps are processed together.

use std::cell::Cell;
use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::scalar::Real;

/// Residual log-times, residual log-entry times and event indicators at one `beta`.
#[derive(Debug, Clone)]
pub struct TransformedData<T> {
    pub e: Vec<T>,
    pub e_a: Vec<T>,
    pub d: Vec<bool>,
}

impl<T: Real> TransformedData<T> {
    pub fn new(data: &Dataset<T>, beta: &DVector<T>) -> Self {
        assert_eq!(beta.len(), data.q(), "beta has wrong length");
        let z = data.z();
        let cause = data.cause();
        let n = data.n();
        let mut e = Vec::with_capacity(n);
        let mut e_a = Vec::with_capacity(n);
        let mut d = Vec::with_capacity(n);
        for (i, r) in data.survival().iter().enumerate() {
            let mut lin = T::zero();
            for k in 0..beta.len() {
                lin += beta[k] * z[(i, k)];
            }
            e.push(r.log_time() - lin);
            e_a.push(r.log_entry() - lin);
            d.push(r.status == cause);
        }
        Self { e, e_a, d }
    }

    pub fn n(&self) -> usize {
        self.e.len()
    }

    fn degenerate(&self, i: usize) -> bool {
        self.e_a[i] == self.e[i]
    }

    /// Whether subject `i` has entered the risk set by residual time `s`.
    pub fn entered(&self, i: usize, s: T) -> bool {
        self.e_a[i] < s || (self.degenerate(i) && self.e_a[i] <= s)
    }

    /// Whether subject `i` is at risk at residual time `s`.
    pub fn at_risk(&self, i: usize, s: T) -> bool {
        self.entered(i, s) && s <= self.e[i]
    }

    /// Distinct event times in increasing order with the subjects failing at each.
    pub fn event_groups(&self) -> Vec<(T, Vec<usize>)> {
        let mut ev: Vec<usize> = (0..self.n()).filter(|&i| self.d[i]).collect();
        ev.sort_by(|&a, &b| cmp(self.e[a], self.e[b]).then(a.cmp(&b)));
        let mut groups: Vec<(T, Vec<usize>)> = Vec::new();
        for i in ev {
            match groups.last_mut() {
                Some((t, members)) if *t == self.e[i] => members.push(i),
                _ => groups.push((self.e[i], vec![i])),
            }
        }
        groups
    }

    /// Walks the distinct event times in order, keeping the visitor's view of
    /// the risk set current: every subject is entered before it exits, and at
    /// each event time the visitor sees exactly the at-risk subjects.
    pub fn sweep<V: RiskSetVisitor<T>>(&self, visitor: &mut V) -> Result<()> {
        let n = self.n();
        // entry order: (ea, degenerate-first) so that "entered by s" is a prefix test
        let mut entries: Vec<usize> = (0..n).collect();
        entries.sort_by(|&a, &b| {
            cmp(self.e_a[a], self.e_a[b])
                .then((!self.degenerate(a)).cmp(&!self.degenerate(b)))
                .then(a.cmp(&b))
        });
        let mut exits: Vec<usize> = (0..n).collect();
        exits.sort_by(|&a, &b| cmp(self.e[a], self.e[b]).then(a.cmp(&b)));

        let (mut next_in, mut next_out, mut at_risk) = (0usize, 0usize, 0usize);
        for (s, members) in self.event_groups() {
            while next_in < n && self.entered(entries[next_in], s) {
                visitor.enter(entries[next_in]);
                next_in += 1;
                at_risk += 1;
            }
            while next_out < n && self.e[exits[next_out]] < s {
                visitor.exit(exits[next_out]);
                next_out += 1;
                at_risk -= 1;
            }
            if at_risk == 0 {
                return Err(Error::EmptyRiskSet { time: s.to_f64_lossy() });
            }
            visitor.event(s, &members, at_risk)?;
        }
        Ok(())
    }
}

fn cmp<T: Real>(a: T, b: T) -> Ordering {
    a.partial_cmp(&b).expect("residual times are never NaN")
}

/// Callbacks for [`TransformedData::sweep`].
pub trait RiskSetVisitor<T> {
    fn enter(&mut self, i: usize);
    fn exit(&mut self, i: usize);
    /// `events` fail at residual time `time`; `at_risk` subjects are at risk.
    fn event(&mut self, time: T, events: &[usize], at_risk: usize) -> Result<()>;
}

/// Right-continuous non-decreasing step function, zero before its first jump.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction<T> {
    times: Vec<T>,
    jumps: Vec<T>,
    values: Vec<T>,
}

impl<T: Real> StepFunction<T> {
    pub fn zero() -> Self {
        Self { times: Vec::new(), jumps: Vec::new(), values: Vec::new() }
    }

    /// Builds the function from strictly increasing jump locations and
    /// non-negative jump heights.
    pub fn from_jumps(times: Vec<T>, jumps: Vec<T>) -> Self {
        assert_eq!(times.len(), jumps.len());
        debug_assert!(times.windows(2).all(|w| w[0] < w[1]));
        let mut values = Vec::with_capacity(jumps.len());
        let mut acc = T::zero();
        for &j in &jumps {
            acc += j;
            values.push(acc);
        }
        Self { times, jumps, values }
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn jumps(&self) -> &[T] {
        &self.jumps
    }

    /// Cumulative values at (and after) each jump.
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.times.is_empty()
    }

    /// Value at `t`: the sum of jumps at locations `<= t`.
    pub fn eval(&self, t: T) -> T {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            T::zero()
        } else {
            self.values[k - 1]
        }
    }
}

/// `U_n(beta)`: the log-rank rank-based estimating function, computed in one
/// sweep over event times with incrementally updated at-risk sums.
pub fn estimating_function<T: Real>(beta: &DVector<T>, data: &Dataset<T>) -> DVector<T> {
    estimating_function_with_support(beta, data).0
}

/// `U_n(beta)` together with the number of events whose risk set contains
/// subjects with different covariate values.
pub fn estimating_function_with_support<T: Real>(beta: &DVector<T>, data: &Dataset<T>) -> (DVector<T>, usize) {
    let q = data.q();
    if q == 0 {
        return (DVector::zeros(0), data.events());
    }
    let td = TransformedData::new(data, beta);
    let mut v = ScoreSweep {
        z: data.z(),
        sum: DVector::zeros(q),
        sumsq: DVector::zeros(q),
        score: DVector::zeros(q),
        support: 0,
    };
    // An empty risk set cannot occur: every failing subject is at risk at its own time.
    td.sweep(&mut v).expect("risk set contains the failing subject");
    (v.score / T::of_usize(data.n()), v.support)
}

struct ScoreSweep<'a, T: Real> {
    z: &'a DMatrix<T>,
    sum: DVector<T>,
    sumsq: DVector<T>,
    score: DVector<T>,
    support: usize,
}

impl<T: Real> RiskSetVisitor<T> for ScoreSweep<'_, T> {
    fn enter(&mut self, i: usize) {
        for k in 0..self.sum.len() {
            let z = self.z[(i, k)];
            self.sum[k] += z;
            self.sumsq[k] += z * z;
        }
    }

    fn exit(&mut self, i: usize) {
        for k in 0..self.sum.len() {
            let z = self.z[(i, k)];
            self.sum[k] -= z;
            self.sumsq[k] -= z * z;
        }
    }

    fn event(&mut self, _time: T, events: &[usize], at_risk: usize) -> Result<()> {
        let count = T::of_usize(at_risk);
        let mut mixed = false;
        for k in 0..self.sum.len() {
            let mean = self.sum[k] / count;
            let second = self.sumsq[k] / count;
            // running sums leave rounding residue, hence the relative floor
            mixed |= second - mean * mean > T::of(1e-9) * second.max(T::machine_epsilon());
        }
        if mixed {
            self.support += events.len();
        }
        for &i in events {
            for k in 0..self.sum.len() {
                self.score[k] += self.z[(i, k)] - self.sum[k] / count;
            }
        }
        Ok(())
    }
}

/// Nelson–Aalen estimate of the residual cumulative hazard at `beta`: jumps of
/// `(#events)/(#at risk)` at each distinct event residual time.
pub fn nelson_aalen<T: Real>(beta: &DVector<T>, data: &Dataset<T>) -> Result<StepFunction<T>> {
    let td = TransformedData::new(data, beta);
    nelson_aalen_transformed(&td)
}

pub fn nelson_aalen_transformed<T: Real>(td: &TransformedData<T>) -> Result<StepFunction<T>> {
    struct Na<T> {
        times: Vec<T>,
        jumps: Vec<T>,
    }
    impl<T: Real> RiskSetVisitor<T> for Na<T> {
        fn enter(&mut self, _: usize) {}
        fn exit(&mut self, _: usize) {}
        fn event(&mut self, time: T, events: &[usize], at_risk: usize) -> Result<()> {
            self.times.push(time);
            self.jumps.push(hazard_jump(events.len(), at_risk));
            Ok(())
        }
    }
    let mut na = Na { times: Vec::new(), jumps: Vec::new() };
    td.sweep(&mut na)?;
    Ok(StepFunction::from_jumps(na.times, na.jumps))
}

/// Height of a hazard jump; shared so that every code path rounds identically.
#[inline]
pub(crate) fn hazard_jump<T: Real>(events: usize, at_risk: usize) -> T {
    T::of_usize(events) / T::of_usize(at_risk)
}

/// Martingale residuals `N_i(inf) - sum over jumps s of at_risk_i(s) dLambda(s)`.
/// Each subject's compensator is summed over its own jumps in time order.
pub fn martingale_residuals<T: Real>(
    beta: &DVector<T>,
    lambda: &StepFunction<T>,
    data: &Dataset<T>,
) -> DVector<T> {
    let td = TransformedData::new(data, beta);
    residuals_transformed(&td, lambda)
}

pub fn residuals_transformed<T: Real>(td: &TransformedData<T>, lambda: &StepFunction<T>) -> DVector<T> {
    let times = lambda.times();
    let jumps = lambda.jumps();
    DVector::from_iterator(
        td.n(),
        (0..td.n()).map(|i| {
            let start = if td.degenerate(i) {
                times.partition_point(|&s| s < td.e_a[i])
            } else {
                times.partition_point(|&s| s <= td.e_a[i])
            };
            let end = times.partition_point(|&s| s <= td.e[i]);
            let mut compensator = T::zero();
            for &j in &jumps[start..end.max(start)] {
                compensator += j;
            }
            let observed = if td.d[i] { T::one() } else { T::zero() };
            observed - compensator
        }),
    )
}

/// Options for the rank-based coefficient search.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions<T> {
    /// Convergence threshold on `||U_n||`; `None` means `1e-4 * events / n`.
    pub tol: Option<T>,
    pub max_evals: usize,
    pub starts: usize,
    pub start_offset: T,
    pub simplex_step: T,
    /// Points where fewer events than this share of those at `beta = 0` have
    /// a risk set that is not constant in `Z` are rejected. With left
    /// truncation, large `|beta|` makes the risk intervals of different
    /// covariate values disjoint and `U_n` vanishes trivially there.
    pub min_support: T,
    /// Axis line scans through the best point, `scan_points` steps on each
    /// side out to `scan_radius`, each followed by a fresh descent.
    pub scan_rounds: usize,
    pub scan_points: usize,
    pub scan_radius: T,
}

impl<T: Real> Default for FitOptions<T> {
    fn default() -> Self {
        Self {
            tol: None,
            max_evals: 2000,
            starts: 5,
            start_offset: T::of(0.5),
            simplex_step: T::of(0.25),
            min_support: T::of(0.5),
            scan_rounds: 3,
            scan_points: 300,
            scan_radius: T::of(3.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BetaFit<T: Real> {
    pub beta: DVector<T>,
    pub score_norm: T,
    pub converged: bool,
    pub evals: usize,
}

/// Deterministic start points: the origin, then `+offset` and `-offset` along
/// each axis in turn, without duplicates.
pub fn start_points<T: Real>(q: usize, starts: usize, offset: T) -> Vec<DVector<T>> {
    let mut out = vec![DVector::zeros(q)];
    let mut k = 0usize;
    while out.len() < starts && q > 0 && k < 2 * q {
        let mut v = DVector::zeros(q);
        v[k / 2] = if k.is_multiple_of(2) { offset } else { -offset };
        out.push(v);
        k += 1;
    }
    out
}

/// Minimises `||U_n(beta)||^2` by multi-start Nelder–Mead. Non-convergence is
/// reported through `converged`, never as an error.
pub fn fit_beta<T: Real>(data: &Dataset<T>, opts: &FitOptions<T>) -> BetaFit<T> {
    let q = data.q();
    if q == 0 {
        return BetaFit { beta: DVector::zeros(0), score_norm: T::zero(), converged: true, evals: 0 };
    }
    let events = data.events();
    let tol = opts
        .tol
        .unwrap_or_else(|| T::of(1e-4) * T::of_usize(events.max(1)) / T::of_usize(data.n()));
    let (_, origin_support) = estimating_function_with_support(&DVector::zeros(q), data);
    let needed = opts.min_support * T::of_usize(origin_support);
    let mut objective = |b: &DVector<T>| {
        let (u, support) = estimating_function_with_support(b, data);
        if T::of_usize(support) < needed {
            return -T::neg_infinity();
        }
        u.norm_squared()
    };
    let nm = NelderMeadOptions {
        step: opts.simplex_step,
        max_evals: opts.max_evals,
        target: tol * tol,
        xtol: T::of(1e-8),
    };

    let target = tol * tol;
    // Restarts from the best point with simplices of several sizes; the
    // objective is piecewise constant and a single run stalls on plateaus.
    let scales = [T::one(), T::of(4.0), T::of(0.1), T::of(0.01)];
    let descend = |from: (DVector<T>, T), objective: &mut dyn FnMut(&DVector<T>) -> T| {
        let (mut here, mut stalled, mut round, mut used) = (from, 0, 0usize, 0usize);
        while stalled < scales.len() && used < opts.max_evals && here.1 > target {
            let step = opts.simplex_step * scales[round % scales.len()];
            let budget = opts.max_evals - used;
            let m = nelder_mead(objective, &here.0, &NelderMeadOptions { step, max_evals: budget, ..nm });
            used += m.evals;
            round += 1;
            if m.value < here.1 {
                here = (m.x, m.value);
                stalled = 0;
            } else {
                stalled += 1;
            }
        }
        (here, used)
    };

    let mut best: Option<(DVector<T>, T)> = None;
    let mut evals = 0usize;
    for start in start_points(q, opts.starts.max(1), opts.start_offset) {
        let v = objective(&start);
        let (here, used) = descend((start, v), &mut objective);
        evals += used + 1;
        if best.as_ref().is_none_or(|(_, v)| here.1 < *v) {
            best = Some(here);
        }
        if best.as_ref().is_some_and(|(_, v)| *v <= target) {
            break;
        }
    }
    // Line scans through the best point along each axis, then descend again
    // from the best scanned point.
    for _ in 0..opts.scan_rounds {
        let (x, v) = best.clone().expect("at least one start");
        if v <= target {
            break;
        }
        let mut scanned = (x.clone(), v);
        for j in 0..q {
            for k in 0..=2 * opts.scan_points {
                let mut y = x.clone();
                y[j] += opts.scan_radius * T::of((k as f64 - opts.scan_points as f64) / opts.scan_points as f64);
                let fy = objective(&y);
                if fy < scanned.1 {
                    scanned = (y, fy);
                }
            }
        }
        evals += q * (2 * opts.scan_points + 1);
        let (here, used) = descend(scanned, &mut objective);
        evals += used;
        if here.1 < v {
            best = Some(here);
        } else {
            break;
        }
    }
    let (beta, value) = best.expect("at least one start");
    let score_norm = value.sqrt();
    BetaFit { beta, score_norm, converged: score_norm <= tol, evals }
}

/// Fitted null model: coefficients, residual cumulative hazard and martingale residuals.
#[derive(Debug, Clone)]
pub struct NullFit<'a, T: Real> {
    pub beta: DVector<T>,
    pub lambda: StepFunction<T>,
    pub residuals: DVector<T>,
    pub score_norm: T,
    pub converged: bool,
    pub data: &'a Dataset<T>,
}

impl<'a, T: Real> NullFit<'a, T> {
    /// Builds the fit at given coefficients.
    pub fn at(data: &'a Dataset<T>, beta: DVector<T>, score_norm: T, converged: bool) -> Result<Self> {
        let td = TransformedData::new(data, &beta);
        let lambda = nelson_aalen_transformed(&td)?;
        let residuals = residuals_transformed(&td, &lambda);
        Ok(Self { beta, lambda, residuals, score_norm, converged, data })
    }

    pub fn n_events(&self) -> usize {
        self.data.events()
    }

    pub fn transformed(&self) -> TransformedData<T> {
        TransformedData::new(self.data, &self.beta)
    }
}

thread_local! {
    static NULL_FITS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`fit_null`] calls made on the current thread.
pub fn null_fit_count() -> usize {
    NULL_FITS.with(Cell::get)
}

pub fn fit_null<'a, T: Real>(data: &'a Dataset<T>, opts: &FitOptions<T>) -> Result<NullFit<'a, T>> {
    NULL_FITS.with(|c| c.set(c.get() + 1));
    let fit = fit_beta(data, opts);
    if !fit.converged {
        log::debug!("rank estimating equation not solved: ||U|| = {}", fit.score_norm);
    }
    NullFit::at(data, fit.beta, fit.score_norm, fit.converged)
}

#[cfg(test)]
mod tests {
    use super::*;
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
        dataset(&[(0.0, 1.0, 1), (0.0, 2.0, 1), (0.0, 3.0, 1)], &[0.0, 1.0, 2.0], 1)
    }

    #[test]
    fn score_three_subject_hand_sweep() {
        let u = estimating_function(&DVector::from_vec(vec![0.0]), &three());
        assert!((u[0] + 0.5).abs() < 1e-15, "{u}");
    }

    #[test]
    fn score_vanishes_for_constant_covariate() {
        let ds = dataset(&[(0.0, 1.0, 1), (0.3, 2.0, 0), (0.0, 3.0, 1), (0.1, 0.5, 1)], &[2.0; 4], 1);
        for b in [-1.0, 0.0, 0.7] {
            assert_eq!(estimating_function(&DVector::from_vec(vec![b]), &ds)[0], 0.0);
        }
        let fit = fit_beta(&ds, &FitOptions::default());
        assert!(fit.converged);
        assert_eq!(fit.beta[0], 0.0);
    }

    #[test]
    fn no_events_gives_zero_score_hazard_and_residuals() {
        let ds = dataset(&[(0.0, 1.0, 0), (0.0, 2.0, 2), (0.0, 3.0, 0)], &[0.0, 1.0, 2.0], 1);
        let beta = DVector::from_vec(vec![0.3]);
        assert_eq!(estimating_function(&beta, &ds)[0], 0.0);
        let na = nelson_aalen(&beta, &ds).unwrap();
        assert!(na.is_zero());
        assert_eq!(na.eval(10.0), 0.0);
        let fit = fit_null(&ds, &FitOptions::default()).unwrap();
        assert!(fit.residuals.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn nelson_aalen_three_uncensored() {
        let ds = dataset(&[(0.0, 1.0, 1), (0.0, 2.0, 1), (0.0, 3.0, 1)], &[], 0);
        let na = nelson_aalen(&DVector::zeros(0), &ds).unwrap();
        let ln = |x: f64| x.ln();
        assert_eq!(na.times(), &[ln(1.0), ln(2.0), ln(3.0)]);
        assert_eq!(na.jumps(), &[1.0 / 3.0, 0.5, 1.0]);
        assert!((na.eval(ln(3.0)) - 11.0 / 6.0).abs() < 1e-15);
        assert_eq!(na.eval(-1.0), 0.0);
        assert_eq!(na.eval(100.0), na.eval(ln(3.0)));
    }

    #[test]
    fn residuals_three_subject_hand_values() {
        let ds = dataset(&[(0.0, 1.0, 1), (0.0, 2.0, 1), (0.0, 3.0, 1)], &[], 0);
        let fit = fit_null(&ds, &FitOptions::default()).unwrap();
        let expect = [2.0 / 3.0, 1.0 / 6.0, -5.0 / 6.0];
        for (m, e) in fit.residuals.iter().zip(expect) {
            assert!((m - e).abs() < 1e-15);
        }
        assert!(fit.residuals.sum().abs() < 1e-15);
    }

    #[test]
    fn single_subject() {
        let ds = dataset(&[(0.0, 2.0, 1)], &[], 0);
        let fit = fit_null(&ds, &FitOptions::default()).unwrap();
        assert_eq!(fit.lambda.jumps(), &[1.0]);
        assert_eq!(fit.residuals[0], 0.0);
    }

    #[test]
    fn ties_form_one_jump() {
        let ds = dataset(&[(0.0, 1.0, 1), (0.0, 1.0, 1), (0.0, 2.0, 0), (0.0, 3.0, 1)], &[], 0);
        let na = nelson_aalen(&DVector::zeros(0), &ds).unwrap();
        assert_eq!(na.jumps(), &[0.5, 1.0]);
    }

    #[test]
    fn truncation_and_entry_equal_to_exit() {
        // subject 1 enters at log 2 so is not at risk at log 1; subject 2 has T = A.
        let ds = dataset(&[(0.0, 1.0, 1), (2.0, 3.0, 0), (1.5, 1.5, 1), (0.0, 4.0, 0)], &[], 0);
        let na = nelson_aalen(&DVector::zeros(0), &ds).unwrap();
        // at log 1: subjects 0 and 3; at log 1.5: subjects 2 and 3
        assert_eq!(na.jumps(), &[0.5, 0.5]);
        let m = martingale_residuals(&DVector::zeros(0), &na, &ds);
        assert_eq!(m.as_slice(), &[0.5, 0.0, 0.5, -1.0]);
        assert_eq!(m.sum(), 0.0);
    }

    #[test]
    fn start_points_are_distinct() {
        let s = start_points::<f64>(1, 5, 0.5);
        assert_eq!(s.len(), 3);
        let s = start_points::<f64>(2, 5, 0.5);
        assert_eq!(s.len(), 5);
        assert_eq!(s[3].as_slice(), &[0.0, 0.5]);
        assert!(start_points::<f64>(0, 5, 0.5).len() == 1);
    }
}
