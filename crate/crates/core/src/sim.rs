//! Simulation of left-truncated competing-risks data with genetic markers, and
//! Monte Carlo size/power studies of the association tests.
//!
//! Event times come from two cause-specific hazards. Under the accelerated
//! failure time form a linear predictor `eta` rescales time by `exp(eta)`:
//! `h(t) = h0(t / exp(eta)) / exp(eta)` with baseline `h0(x) = x^2 + x`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Bernoulli, Beta, Distribution, Exp, Normal, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::aft::{fit_null, FitOptions};
use crate::assoc::{Method, NullContext, TestOptions};
use crate::data::{Dataset, LabeledMatrix, SurvivalRecord};
use crate::error::{Error, Result};
use crate::kernels::{build_kernel, build_subpop_kernel, KernelSpec};
use crate::stats::rejection_rate;

/// Rate of the exponential residual censoring time `C - A`.
pub const CENSORING_RATE: f64 = 0.1;
/// Lag-one latent correlation of simulated SNPs.
pub const SNP_CORRELATION: f64 = 0.5;
/// Lag-one noise correlation of simulated expression markers.
pub const EXPRESSION_CORRELATION: f64 = 0.1;
/// Width of the simulated genome profile in the individual-heterogeneity scenario.
pub const GENOME_PROFILE_SNPS: usize = 1000;
/// Number of sub-population columns in the twenty-group scenario.
pub const LATENT20_COLUMNS: usize = 25;
/// Standard deviation of the noise on sub-population columns.
pub const SUBPOP_NOISE_SD: f64 = 0.5;

const ROOT_TOL: f64 = 1e-10;
const MIN_ACCEPTANCE: f64 = 1e-3;

pub fn baseline_hazard(x: f64) -> f64 {
    x * x + x
}

pub fn baseline_cumulative(x: f64) -> f64 {
    x * x * x / 3.0 + x * x / 2.0
}

/// One cause-specific hazard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CauseHazard {
    /// `h0(t / exp(eta)) / exp(eta)`.
    Aft { eta: f64 },
    /// `scale (t + t^2) exp(eta)`.
    Cox { scale: f64, eta: f64 },
    /// Identically zero.
    Absent,
}

impl CauseHazard {
    pub fn hazard(&self, t: f64) -> f64 {
        match *self {
            CauseHazard::Aft { eta } => {
                let theta = eta.exp();
                baseline_hazard(t / theta) / theta
            }
            CauseHazard::Cox { scale, eta } => scale * baseline_hazard(t) * eta.exp(),
            CauseHazard::Absent => 0.0,
        }
    }

    pub fn cumulative(&self, t: f64) -> f64 {
        match *self {
            CauseHazard::Aft { eta } => baseline_cumulative(t / eta.exp()),
            CauseHazard::Cox { scale, eta } => scale * baseline_cumulative(t) * eta.exp(),
            CauseHazard::Absent => 0.0,
        }
    }
}

/// Solves `H1(t) + H2(t) = target` by bisection on a doubling bracket.
pub fn invert_total_hazard(hazards: &[CauseHazard; 2], target: f64) -> Result<f64> {
    if hazards.iter().all(|h| matches!(h, CauseHazard::Absent)) {
        return Err(Error::Simulation("both cause-specific hazards are absent".into()));
    }
    if !(target >= 0.0) || !target.is_finite() {
        return Err(Error::Simulation(format!("cannot invert total hazard at {target}")));
    }
    let total = |t: f64| hazards[0].cumulative(t) + hazards[1].cumulative(t);
    let mut hi = 1.0;
    while total(hi) < target {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Simulation("total hazard bracket overflowed".into()));
        }
    }
    let mut lo = 0.0;
    while hi - lo > ROOT_TOL {
        let mid = 0.5 * (lo + hi);
        if total(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if mid == lo && mid == hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Draws an event time and its cause from two cause-specific hazards.
pub fn gen_competing<R: Rng + ?Sized>(hazards: &[CauseHazard; 2], rng: &mut R) -> Result<(f64, u32)> {
    let u: f64 = 1.0 - rng.random::<f64>();
    let t = invert_total_hazard(hazards, -u.ln())?;
    let (h1, h2) = (hazards[0].hazard(t), hazards[1].hazard(t));
    let share = if h1 + h2 > 0.0 { h1 / (h1 + h2) } else { 0.5 };
    let cause = if rng.random::<f64>() < share { 1 } else { 2 };
    Ok((t, cause))
}

/// Competing AFT draw; an `eta2` of negative infinity switches cause 2 off.
pub fn gen_competing_aft<R: Rng + ?Sized>(eta1: f64, eta2: f64, rng: &mut R) -> Result<(f64, u32)> {
    let h2 = if eta2 == f64::NEG_INFINITY { CauseHazard::Absent } else { CauseHazard::Aft { eta: eta2 } };
    gen_competing(&[CauseHazard::Aft { eta: eta1 }, h2], rng)
}

/// Stationary Gaussian AR(1) vector: unit variances, correlation `rho^|k-l|`.
fn ar1_row<R: Rng + ?Sized>(p: usize, rho: f64, rng: &mut R) -> Vec<f64> {
    let innovation = (1.0 - rho * rho).sqrt();
    let mut out = Vec::with_capacity(p);
    let mut prev = 0.0;
    for k in 0..p {
        let z: f64 = rng.sample(StandardNormal);
        prev = if k == 0 { z } else { rho * prev + innovation * z };
        out.push(prev);
    }
    out
}

/// Genotypes by thresholding correlated normals at Hardy-Weinberg cut-offs.
#[derive(Debug, Clone, PartialEq)]
pub struct SnpModel {
    pub mafs: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    rho: f64,
}

impl SnpModel {
    pub fn from_mafs(mafs: Vec<f64>, rho: f64) -> Self {
        let std = NormalDist::standard();
        let lower = mafs.iter().map(|&q| std.inverse_cdf((1.0 - q) * (1.0 - q))).collect();
        let upper = mafs.iter().map(|&q| std.inverse_cdf(1.0 - q * q)).collect();
        Self { mafs, lower, upper, rho }
    }

    /// Minor allele frequencies from `Beta(2, 5)`.
    pub fn draw<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Self {
        let beta = Beta::new(2.0, 5.0).unwrap();
        Self::from_mafs((0..p).map(|_| beta.sample(rng)).collect(), SNP_CORRELATION)
    }

    pub fn p(&self) -> usize {
        self.mafs.len()
    }

    pub fn row<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        ar1_row(self.p(), self.rho, rng)
            .into_iter()
            .enumerate()
            .map(|(k, u)| {
                if u < self.lower[k] {
                    0.0
                } else if u > self.upper[k] {
                    2.0
                } else {
                    1.0
                }
            })
            .collect()
    }
}

/// `n x p` genotypes in `{0, 1, 2}` with latent correlation `0.5^|k-l|`.
pub fn gen_snps_mvn<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> DMatrix<f64> {
    let model = SnpModel::draw(p, rng);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| model.row(rng)).collect();
    DMatrix::from_fn(n, p, |i, k| rows[i][k])
}

/// Mean of every expression marker given two confounders.
pub fn confounded_mean(z1: f64, z2: f64) -> f64 {
    0.5 * z1 + 0.5 * z2 + 0.25 * z1 * z1 + 0.25 * z2 * z2 + 0.5 * z1 * z2
}

fn expression_row<R: Rng + ?Sized>(p: usize, z1: f64, z2: f64, rng: &mut R) -> Vec<f64> {
    let mean = confounded_mean(z1, z2);
    ar1_row(p, EXPRESSION_CORRELATION, rng).into_iter().map(|e| mean + e).collect()
}

/// Expression markers quadratic in the two columns of `z`, plus noise with
/// covariance `0.1^|k-l|`.
pub fn gen_expression_confounded<R: Rng + ?Sized>(
    n: usize,
    p: usize,
    z: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if z.nrows() != n || z.ncols() != 2 {
        return Err(Error::Dimension(format!("confounders must be {n} x 2, got {} x {}", z.nrows(), z.ncols())));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| expression_row(p, z[(i, 0)], z[(i, 1)], rng)).collect();
    Ok(DMatrix::from_fn(n, p, |i, k| rows[i][k]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    /// Common marker effect, no heterogeneity, two covariates.
    S1NoHet,
    /// Expression markers quadratically confounded by the covariates.
    Confound,
    /// Effects differ by an observed binary group (sex).
    ObsHet,
    /// Two latent groups inferred from one noisy column.
    Latent2,
    /// Twenty latent groups inferred from 25 noisy columns.
    Latent20,
    /// Subject-level effects tied to a simulated genome profile.
    GenomeHet,
    /// `S1NoHet` variant at small `n`.
    SmallNoHet,
    /// `ObsHet` variant at small `n`.
    SmallHet,
    /// Cox-type cause-specific hazards (misspecified null model).
    CoxGen,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 9] = [
        ScenarioKind::S1NoHet,
        ScenarioKind::Confound,
        ScenarioKind::ObsHet,
        ScenarioKind::Latent2,
        ScenarioKind::Latent20,
        ScenarioKind::GenomeHet,
        ScenarioKind::SmallNoHet,
        ScenarioKind::SmallHet,
        ScenarioKind::CoxGen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::S1NoHet => "S1_no_het",
            ScenarioKind::Confound => "S_confound",
            ScenarioKind::ObsHet => "S_obs_het",
            ScenarioKind::Latent2 => "S_latent2",
            ScenarioKind::Latent20 => "S_latent20",
            ScenarioKind::GenomeHet => "S_genome_het",
            ScenarioKind::SmallNoHet => "S_small_nohet",
            ScenarioKind::SmallHet => "S_small_het",
            ScenarioKind::CoxGen => "S_coxgen",
        }
    }

    pub fn is_heterogeneity(self) -> bool {
        matches!(
            self,
            ScenarioKind::ObsHet
                | ScenarioKind::SmallHet
                | ScenarioKind::Latent2
                | ScenarioKind::Latent20
                | ScenarioKind::GenomeHet
        )
    }

    fn sex_groups(self) -> bool {
        matches!(self, ScenarioKind::ObsHet | ScenarioKind::SmallHet)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name().to_ascii_lowercase() == key)
            .ok_or_else(|| {
                let names: Vec<&str> = ScenarioKind::ALL.iter().map(|k| k.name()).collect();
                Error::Invalid(format!("unknown scenario '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// A data-generating setting. Coefficients not used by `kind` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub n: usize,
    pub p: usize,
    /// Common marker effect on cause 1.
    pub beta: f64,
    /// Common marker effect on cause 2.
    pub alpha: f64,
    /// Group-varying effect `beta0 + beta1 * sex` on cause 1.
    pub beta0: f64,
    pub beta1: f64,
    /// Cause-1 marker effects in the two latent groups.
    pub group_effects: [f64; 2],
    /// Mean and standard deviation of uniformly drawn group or subject effects.
    pub mu_beta: f64,
    pub sigma_beta: f64,
    /// Covariate coefficients for cause 1 and cause 2.
    pub covariate_effects: [f64; 2],
    /// When false, every subject is followed until failure.
    pub censoring: bool,
}

impl Scenario {
    /// The size-assessment setting at its default `n` and `p`.
    pub fn new(kind: ScenarioKind) -> Self {
        let (n, p, alpha, covariate_effects) = match kind {
            ScenarioKind::S1NoHet => (400, 20, 0.16, [0.1, 0.2]),
            ScenarioKind::Confound => (400, 20, 0.1, [0.1, 0.2]),
            ScenarioKind::ObsHet => (400, 20, 0.2, [0.5, 1.0]),
            ScenarioKind::Latent2 | ScenarioKind::Latent20 | ScenarioKind::GenomeHet => (400, 3, 0.02, [0.1, 0.2]),
            ScenarioKind::SmallNoHet => (100, 15, 0.2, [0.1, 0.2]),
            ScenarioKind::SmallHet => (200, 10, 0.35, [0.5, 1.0]),
            ScenarioKind::CoxGen => (400, 3, 0.2, [0.05, 0.15]),
        };
        Self {
            kind,
            n,
            p,
            beta: 0.0,
            alpha,
            beta0: 0.0,
            beta1: 0.0,
            group_effects: [0.0, 0.0],
            mu_beta: 0.0,
            sigma_beta: 0.0,
            covariate_effects,
            censoring: true,
        }
    }

    /// The main power setting of each scenario.
    pub fn power(mut self) -> Self {
        match self.kind {
            ScenarioKind::S1NoHet => self.beta = 0.08,
            ScenarioKind::Confound => self.beta = 0.03,
            ScenarioKind::SmallNoHet | ScenarioKind::CoxGen => self.beta = 0.1,
            ScenarioKind::ObsHet => (self.beta0, self.beta1) = (0.002, 0.2),
            ScenarioKind::SmallHet => (self.beta0, self.beta1) = (0.002, 0.25),
            ScenarioKind::Latent2 => self.group_effects = [-0.05, 0.05],
            ScenarioKind::Latent20 => (self.mu_beta, self.sigma_beta) = (0.02, 0.04),
            ScenarioKind::GenomeHet => (self.mu_beta, self.sigma_beta) = (0.03, 0.02),
        }
        self
    }

    pub fn with_size(mut self, n: usize, p: usize) -> Self {
        self.n = n;
        self.p = p;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_group_effects(mut self, beta0: f64, beta1: f64) -> Self {
        self.beta0 = beta0;
        self.beta1 = beta1;
        self
    }

    pub fn with_censoring(mut self, censoring: bool) -> Self {
        self.censoring = censoring;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p < 1 {
            return Err(Error::Invalid(format!("scenario needs n >= 2 and p >= 1, got n={} p={}", self.n, self.p)));
        }
        let coefs = [
            self.beta,
            self.alpha,
            self.beta0,
            self.beta1,
            self.group_effects[0],
            self.group_effects[1],
            self.mu_beta,
            self.sigma_beta,
            self.covariate_effects[0],
            self.covariate_effects[1],
        ];
        if coefs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Invalid("scenario coefficients must be finite".into()));
        }
        if self.sigma_beta < 0.0 {
            return Err(Error::Invalid(format!("sigma_beta must be non-negative, got {}", self.sigma_beta)));
        }
        Ok(())
    }

    /// Default genetic kernel and sub-population kernel.
    pub fn default_kernels(&self) -> (KernelSpec, KernelSpec) {
        match self.kind {
            // about 1 / median ||g_i - g_j||^2 for this design; 1/p leaves the
            // kernel nearly diagonal
            ScenarioKind::Confound => {
                let rho = 1.0 / (3.0 * self.p as f64);
                (KernelSpec::Gaussian { rho: Some(rho) }, KernelSpec::Gaussian { rho: None })
            }
            ScenarioKind::ObsHet | ScenarioKind::SmallHet => (KernelSpec::Ibs, KernelSpec::Identity),
            ScenarioKind::GenomeHet => (KernelSpec::Ibs, KernelSpec::Ibs),
            _ => (KernelSpec::Ibs, KernelSpec::Gaussian { rho: None }),
        }
    }

    /// Effects drawn from a uniform law with mean `mu_beta` and sd `sigma_beta`.
    fn draw_effects<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<f64> {
        let half = 3f64.sqrt() * self.sigma_beta;
        (0..count).map(|_| self.mu_beta + half * (2.0 * rng.random::<f64>() - 1.0)).collect()
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} n={} p={} beta={} alpha={} beta0={} beta1={} group_effects={},{} mu_beta={} sigma_beta={} censoring={}",
            self.kind,
            self.n,
            self.p,
            self.beta,
            self.alpha,
            self.beta0,
            self.beta1,
            self.group_effects[0],
            self.group_effects[1],
            self.mu_beta,
            self.sigma_beta,
            self.censoring
        )
    }
}

/// A generated dataset and how many candidate subjects were drawn for it.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: Dataset<f64>,
    pub attempts: usize,
}

impl Simulated {
    pub fn acceptance_rate(&self) -> f64 {
        self.data.n() as f64 / self.attempts as f64
    }
}

/// Per-dataset quantities shared by all subjects.
struct Design {
    snps: Option<SnpModel>,
    /// Cause-1 marker effect per group (latent scenarios) or per slot.
    effects: Vec<f64>,
    /// Group centers of the 25 sub-population columns, one row per group.
    centers: Option<DMatrix<f64>>,
}

struct Subject {
    z: Vec<f64>,
    g: Vec<f64>,
    x: Vec<f64>,
    hazards: [CauseHazard; 2],
}

fn group_of(kind: ScenarioKind, slot: usize) -> usize {
    match kind {
        ScenarioKind::Latent20 => slot % 20,
        ScenarioKind::Latent2 | ScenarioKind::ObsHet | ScenarioKind::SmallHet => slot % 2,
        _ => 0,
    }
}

fn draw_subject<R: Rng + ?Sized>(s: &Scenario, design: &Design, slot: usize, rng: &mut R) -> Result<Subject> {
    let group = group_of(s.kind, slot);
    let z = if s.kind.sex_groups() {
        vec![group as f64]
    } else {
        let z1 = if Bernoulli::new(0.5).unwrap().sample(rng) { 1.0 } else { 0.0 };
        vec![z1, 2.0 * rng.random::<f64>()]
    };
    let g = match (&design.snps, s.kind) {
        (Some(model), _) => model.row(rng),
        (None, ScenarioKind::Confound) => expression_row(s.p, z[0], z[1], rng),
        _ => unreachable!("every scenario has a marker model"),
    };
    let noise = Normal::new(0.0, SUBPOP_NOISE_SD).unwrap();
    let x = match s.kind {
        ScenarioKind::Latent2 => vec![if group == 0 { 2.0 } else { 1.0 } + noise.sample(rng)],
        ScenarioKind::Latent20 => {
            let centers = design.centers.as_ref().unwrap();
            (0..centers.ncols()).map(|d| centers[(group, d)] + noise.sample(rng)).collect()
        }
        ScenarioKind::GenomeHet => Vec::new(),
        _ => z.clone(),
    };
    let gsum: f64 = g.iter().sum();
    let zsum: f64 = z.iter().sum();
    let effect = match s.kind {
        ScenarioKind::ObsHet | ScenarioKind::SmallHet => s.beta0 + s.beta1 * z[0],
        ScenarioKind::Latent2 => s.group_effects[group],
        ScenarioKind::Latent20 => design.effects[group],
        ScenarioKind::GenomeHet => design.effects[slot],
        _ => s.beta,
    };
    let eta1 = effect * gsum + s.covariate_effects[0] * zsum;
    let eta2 = s.alpha * gsum + s.covariate_effects[1] * zsum;
    let hazards = match s.kind {
        ScenarioKind::CoxGen => [CauseHazard::Cox { scale: 0.5, eta: eta1 }, CauseHazard::Cox { scale: 0.1, eta: eta2 }],
        _ => [CauseHazard::Aft { eta: eta1 }, CauseHazard::Aft { eta: eta2 }],
    };
    Ok(Subject { z, g, x, hazards })
}

fn make_design<R: Rng + ?Sized>(s: &Scenario, rng: &mut R) -> Design {
    let snps = (s.kind != ScenarioKind::Confound).then(|| SnpModel::draw(s.p, rng));
    let (effects, centers) = match s.kind {
        ScenarioKind::Latent20 => {
            let mut centers = DMatrix::zeros(20, LATENT20_COLUMNS);
            for d in 0..LATENT20_COLUMNS {
                let mut levels: Vec<f64> = (1..=20).map(f64::from).collect();
                levels.shuffle(rng);
                for (i, v) in levels.into_iter().enumerate() {
                    centers[(i, d)] = v;
                }
            }
            (s.draw_effects(20, rng), Some(centers))
        }
        ScenarioKind::GenomeHet => (s.draw_effects(s.n, rng), None),
        _ => (Vec::new(), None),
    };
    Design { snps, effects, centers }
}

/// Genome profile whose latent columns have correlation
/// `exp(-|b_i - b_j| / sigma)` across subjects (identity when `sigma` is 0),
/// cut by rank into Hardy-Weinberg proportions at a `Beta(1, 3)` frequency.
pub fn gen_genome_profile<R: Rng + ?Sized>(effects: &[f64], sigma: f64, columns: usize, rng: &mut R) -> DMatrix<f64> {
    let n = effects.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| effects[a].partial_cmp(&effects[b]).unwrap().then(a.cmp(&b)));
    let maf = Beta::new(1.0, 3.0).unwrap();
    let mut out = DMatrix::zeros(n, columns);
    let mut latent = vec![0.0; n];
    for d in 0..columns {
        // along sorted effects the exponential correlation is Markov, so the
        // column is an AR(1) path with gap-dependent coefficients
        let mut prev = 0.0;
        for (k, &i) in order.iter().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            let v = if k == 0 || sigma == 0.0 {
                e
            } else {
                let rho = (-(effects[i] - effects[order[k - 1]]).abs() / sigma).exp();
                rho * prev + (1.0 - rho * rho).sqrt() * e
            };
            latent[i] = v;
            prev = v;
        }
        let q: f64 = maf.sample(rng);
        let zeros = (n as f64 * (1.0 - q) * (1.0 - q)).round() as usize;
        let twos = ((n as f64 * q * q).round() as usize).min(n - zeros);
        let mut ranked: Vec<usize> = (0..n).collect();
        ranked.sort_by(|&a, &b| latent[a].partial_cmp(&latent[b]).unwrap());
        for (r, &i) in ranked.iter().enumerate() {
            out[(i, d)] = if r < zeros {
                0.0
            } else if r >= n - twos {
                2.0
            } else {
                1.0
            };
        }
    }
    out
}

/// Generates one dataset: subjects are redrawn until their event time
/// exceeds a `U(0, 1)` entry time, and censoring is `A + Exp(0.1)`.
pub fn gen_dataset<R: Rng + ?Sized>(s: &Scenario, rng: &mut R) -> Result<Simulated> {
    s.validate()?;
    let design = make_design(s, rng);
    let censor = Exp::new(CENSORING_RATE).unwrap();
    let mut records = Vec::with_capacity(s.n);
    let (mut zs, mut gs, mut xs) = (Vec::new(), Vec::new(), Vec::new());
    let mut attempts = 0usize;
    for slot in 0..s.n {
        loop {
            attempts += 1;
            if attempts > 1000 && (records.len() as f64) < MIN_ACCEPTANCE * attempts as f64 {
                return Err(Error::Simulation(format!(
                    "truncation acceptance below {MIN_ACCEPTANCE}: {} of {attempts} subjects accepted",
                    records.len()
                )));
            }
            let subject = draw_subject(s, &design, slot, rng)?;
            let (t, cause) = gen_competing(&subject.hazards, rng)?;
            let entry: f64 = rng.random();
            if t <= entry {
                continue;
            }
            let c = if s.censoring { entry + censor.sample(rng) } else { f64::INFINITY };
            let (time, status) = if t <= c { (t, cause) } else { (c, 0) };
            records.push(SurvivalRecord::new(format!("s{}", slot + 1), entry, time, status)?);
            zs.push(subject.z);
            gs.push(subject.g);
            xs.push(subject.x);
            break;
        }
    }
    let to_matrix = |rows: &[Vec<f64>]| DMatrix::from_fn(rows.len(), rows[0].len(), |i, k| rows[i][k]);
    let (z, z_names): (DMatrix<f64>, Vec<String>) = if s.kind.sex_groups() {
        (to_matrix(&zs), vec!["sex".into()])
    } else {
        (to_matrix(&zs), vec!["Z1".into(), "Z2".into()])
    };
    let x = match s.kind {
        ScenarioKind::GenomeHet => gen_genome_profile(&design.effects, s.sigma_beta, GENOME_PROFILE_SNPS, rng),
        _ => to_matrix(&xs),
    };
    let data = Dataset::assemble(
        records,
        LabeledMatrix { columns: z_names, values: z },
        LabeledMatrix::unnamed("G", to_matrix(&gs)),
        Some(LabeledMatrix::unnamed("X", x)),
        1,
    )?;
    Ok(Simulated { data, attempts })
}

/// [`gen_dataset`] restricted to the heterogeneity scenarios.
pub fn gen_heterogeneity_scenario<R: Rng + ?Sized>(s: &Scenario, rng: &mut R) -> Result<Simulated> {
    if !s.kind.is_heterogeneity() {
        return Err(Error::Invalid(format!("{} is not a heterogeneity scenario", s.kind)));
    }
    gen_dataset(s, rng)
}

/// Generator for replicate `index` of a study: the ChaCha20 stream `index`
/// of the key derived from `master`.
pub fn replicate_rng(master: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub alphas: Vec<f64>,
    pub seed: u64,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
    /// Perturbations for both slope estimates.
    pub perturbations: usize,
    pub kernel: KernelSpec,
    pub subpop_kernel: KernelSpec,
    pub fit: FitOptions<f64>,
}

impl StudyConfig {
    pub fn new(scenario: Scenario, methods: Vec<Method>, replicates: usize, seed: u64) -> Self {
        let (kernel, subpop_kernel) = scenario.default_kernels();
        Self {
            scenario,
            methods,
            replicates,
            alphas: vec![0.05],
            seed,
            workers: 0,
            perturbations: 1000,
            kernel,
            subpop_kernel,
            fit: FitOptions::default(),
        }
    }

    pub fn with_alphas(mut self, alphas: Vec<f64>) -> Self {
        self.alphas = alphas;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_perturbations(mut self, l: usize) -> Self {
        self.perturbations = l;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rate {
    pub alpha: f64,
    pub rate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub replicates: usize,
    /// Replicate indices that completed, in order.
    pub completed: Vec<usize>,
    /// `p_values[m][r]` for method `m` and the `r`-th completed replicate.
    pub p_values: Vec<Vec<f64>>,
    /// `rates[m][a]` for method `m` at `alphas[a]`.
    pub rates: Vec<Vec<Rate>>,
    pub failures: Vec<(usize, String)>,
    pub mean_acceptance: f64,
    pub kernel: String,
    pub subpop_kernel: String,
}

impl StudyReport {
    pub fn p_values_for(&self, method: Method) -> Option<&[f64]> {
        self.methods.iter().position(|&m| m == method).map(|i| self.p_values[i].as_slice())
    }

    pub fn rate(&self, method: Method, alpha: f64) -> Option<Rate> {
        let m = self.methods.iter().position(|&x| x == method)?;
        self.rates[m].iter().find(|r| r.alpha == alpha).copied()
    }

    pub const SUMMARY_HEADER: &'static str = "scenario\tmethod\talpha\trate\tstd_error\tcompleted\tfailed";

    pub fn summary_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        for (m, method) in self.methods.iter().enumerate() {
            for r in &self.rates[m] {
                rows.push(format!(
                    "{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}",
                    self.scenario.kind,
                    method,
                    r.alpha,
                    r.rate,
                    r.std_error,
                    self.completed.len(),
                    self.failures.len()
                ));
            }
        }
        rows
    }
}

struct ReplicateOutcome {
    p_values: Vec<f64>,
    acceptance: f64,
}

fn run_replicate(cfg: &StudyConfig, index: usize) -> Result<ReplicateOutcome> {
    let mut rng = replicate_rng(cfg.seed, index as u64);
    let test_seed = rng.next_u64();
    let sim = gen_dataset(&cfg.scenario, &mut rng)?;
    let data = &sim.data;
    let fit = fit_null(data, &cfg.fit)?;
    let opts = TestOptions {
        perturbations: cfg.perturbations,
        perturbations_score: cfg.perturbations,
        seed: test_seed,
        accuracy: 1e-6,
    };
    let ctx = NullContext::new(&fit, &opts)?;
    let k = build_kernel(&cfg.kernel, data.g())?;
    let h = if cfg.methods.iter().any(|m| m.needs_subpop()) {
        let x = data.x().ok_or_else(|| Error::Invalid("scenario has no sub-population matrix".into()))?;
        Some(build_subpop_kernel(&cfg.subpop_kernel, x)?)
    } else {
        None
    };
    let p_values = cfg
        .methods
        .iter()
        .map(|&m| ctx.run(m, &k, h.as_ref()).map(|r| r.p_value))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ReplicateOutcome { p_values, acceptance: sim.acceptance_rate() })
}

/// Runs a Monte Carlo study. Replicate `r` depends only on `(seed, r)`, so
/// the report does not depend on the number of workers.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    if cfg.replicates == 0 {
        return Err(Error::Invalid("a study needs at least one replicate".into()));
    }
    if cfg.methods.is_empty() {
        return Err(Error::Invalid("a study needs at least one method".into()));
    }
    if let Some(a) = cfg.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(Error::Invalid(format!("alpha {a} outside (0, 1)")));
    }
    cfg.scenario.validate()?;
    let work = || -> Vec<Result<ReplicateOutcome>> {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|r| {
                let out = run_replicate(cfg, r);
                if (r + 1) % 100 == 0 {
                    log::info!("{}: replicate {} of {}", cfg.scenario.kind, r + 1, cfg.replicates);
                }
                out
            })
            .collect()
    };
    let outcomes = if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))?
            .install(work)
    } else {
        work()
    };

    let mut completed = Vec::new();
    let mut failures = Vec::new();
    let mut p_values = vec![Vec::new(); cfg.methods.len()];
    let mut acceptance = 0.0;
    for (r, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(o) => {
                completed.push(r);
                acceptance += o.acceptance;
                for (m, p) in o.p_values.into_iter().enumerate() {
                    p_values[m].push(p);
                }
            }
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    if failures.len() as f64 > 0.05 * cfg.replicates as f64 {
        return Err(Error::Simulation(format!(
            "{} of {} replicates failed; first: {}",
            failures.len(),
            cfg.replicates,
            failures[0].1
        )));
    }
    let rates = p_values
        .iter()
        .map(|ps| {
            cfg.alphas
                .iter()
                .map(|&alpha| {
                    let (rate, std_error) = rejection_rate(ps, alpha);
                    Rate { alpha, rate, std_error }
                })
                .collect()
        })
        .collect();
    Ok(StudyReport {
        scenario: cfg.scenario.clone(),
        methods: cfg.methods.clone(),
        alphas: cfg.alphas.clone(),
        replicates: cfg.replicates,
        mean_acceptance: acceptance / completed.len() as f64,
        completed,
        p_values,
        rates,
        failures,
        kernel: cfg.kernel.resolved(cfg.scenario.p).to_string(),
        subpop_kernel: cfg.subpop_kernel.to_string(),
    })
}
