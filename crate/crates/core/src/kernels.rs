//! Similarity kernels over subjects and their low-rank factors `K = E1' E1`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Eigenvalues at or below this fraction of the largest are treated as zero.
pub const RANK_TOL: f64 = 1e-8;
/// Eigenvalues below `-NEG_TOL * largest` mean the matrix is not a valid kernel.
pub const NEG_TOL: f64 = 1e-6;

/// Column block width used when accumulating kernels over many markers.
const BLOCK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    /// `g_i' g_j`
    Linear,
    /// Identity by state, `sum_k (2 - |g_ik - g_jk|) / 2p`; entries must lie in `[0, 2]`.
    Ibs,
    /// `exp(-rho ||g_i - g_j||^2)`; `rho` defaults to `1/p`.
    Gaussian { rho: Option<f64> },
    /// `exp(-sum_k w_k |g_ik - g_jk| / sum_k w_k)` with `w_k` the reciprocal column sd.
    Laplacian,
    /// `(rho + g_i' g_j)^degree`
    Polynomial { rho: f64, degree: u32 },
    /// `1` when two rows are identical, `0` otherwise.
    Identity,
}

impl KernelSpec {
    pub const QUADRATIC: KernelSpec = KernelSpec::Polynomial { rho: 1.0, degree: 2 };

    fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian { rho: Some(r) } if !(r > 0.0 && r.is_finite()) => {
                Err(Error::Invalid(format!("gaussian kernel needs rho > 0, got {r}")))
            }
            KernelSpec::Polynomial { rho, degree } if !(rho > 0.0 && rho.is_finite()) || degree == 0 => Err(
                Error::Invalid(format!("polynomial kernel needs rho > 0 and d >= 1, got rho={rho} d={degree}")),
            ),
            _ => Ok(()),
        }
    }

    /// This kernel with defaults filled in for data with `p` columns.
    pub fn resolved(&self, p: usize) -> KernelSpec {
        match *self {
            KernelSpec::Gaussian { rho: None } => KernelSpec::Gaussian { rho: Some(1.0 / p.max(1) as f64) },
            other => other,
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Linear => write!(f, "linear"),
            KernelSpec::Ibs => write!(f, "ibs"),
            KernelSpec::Gaussian { rho: None } => write!(f, "gaussian"),
            KernelSpec::Gaussian { rho: Some(r) } => write!(f, "gaussian:rho={r}"),
            KernelSpec::Laplacian => write!(f, "laplacian"),
            KernelSpec::Polynomial { rho, degree } => write!(f, "polynomial:rho={rho},d={degree}"),
            KernelSpec::Identity => write!(f, "identity"),
        }
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    /// Parses `kind` or `kind:key=value,key=value`, e.g. `gaussian:rho=0.05`,
    /// `polynomial:rho=1,d=3`. `quadratic` is the degree-2 polynomial.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, params) = match s.split_once(':') {
            Some((k, p)) => (k.trim(), p.trim()),
            None => (s.trim(), ""),
        };
        let mut rho = None;
        let mut degree = None;
        for kv in params.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("kernel parameter '{kv}' is not key=value")))?;
            let bad = || Error::Invalid(format!("bad value in kernel parameter '{kv}'"));
            match k.trim() {
                "rho" => rho = Some(v.trim().parse::<f64>().map_err(|_| bad())?),
                "d" | "degree" => degree = Some(v.trim().parse::<u32>().map_err(|_| bad())?),
                other => return Err(Error::Invalid(format!("unknown kernel parameter '{other}'"))),
            }
        }
        let no_params = |spec: KernelSpec| {
            if rho.is_some() || degree.is_some() {
                Err(Error::Invalid(format!("kernel '{kind}' takes no parameters")))
            } else {
                Ok(spec)
            }
        };
        let spec = match kind.to_ascii_lowercase().as_str() {
            "linear" | "lin" => no_params(KernelSpec::Linear)?,
            "ibs" => no_params(KernelSpec::Ibs)?,
            "gaussian" | "gauss" => {
                if degree.is_some() {
                    return Err(Error::Invalid("gaussian kernel takes only rho".into()));
                }
                KernelSpec::Gaussian { rho }
            }
            "laplacian" | "lap" => no_params(KernelSpec::Laplacian)?,
            "polynomial" | "poly" => KernelSpec::Polynomial { rho: rho.unwrap_or(1.0), degree: degree.unwrap_or(2) },
            "quadratic" | "quad" => {
                if degree.is_some_and(|d| d != 2) {
                    return Err(Error::Invalid("quadratic kernel has degree 2".into()));
                }
                KernelSpec::Polynomial { rho: rho.unwrap_or(1.0), degree: 2 }
            }
            "identity" => no_params(KernelSpec::Identity)?,
            other => return Err(Error::Invalid(format!("unknown kernel '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Symmetric PSD similarity matrix with factor `E1` (`m x n`, `E1' E1 = matrix`).
/// Rows of the factor are orthogonal, ordered by decreasing squared norm, and
/// those squared norms are the retained eigenvalues.
#[derive(Debug, Clone)]
pub struct KernelMatrix<T: Real> {
    matrix: DMatrix<T>,
    factor: DMatrix<T>,
    eigenvalues: DVector<T>,
}

impl<T: Real> KernelMatrix<T> {
    /// Factorizes an arbitrary symmetric PSD matrix.
    pub fn from_matrix(matrix: DMatrix<T>) -> Result<Self> {
        let (factor, eigenvalues) = factorize(&matrix)?;
        Ok(Self { matrix, factor, eigenvalues })
    }

    /// Kernel `F F'` for an `n x r` feature matrix, factorized through the
    /// small `r x r` Gram matrix.
    pub fn from_features(features: &DMatrix<T>) -> Result<Self> {
        let matrix = features * features.transpose();
        let (factor, eigenvalues) = factor_features(features)?;
        Ok(Self { matrix, factor, eigenvalues })
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn rank(&self) -> usize {
        self.factor.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn factor(&self) -> &DMatrix<T> {
        &self.factor
    }

    pub fn eigenvalues(&self) -> &DVector<T> {
        &self.eigenvalues
    }

    /// `v' K v`
    pub fn quadratic_form(&self, v: &DVector<T>) -> T {
        (v.transpose() * &self.matrix * v)[(0, 0)]
    }

    /// `c K`, reusing the factorization.
    pub fn scaled(&self, c: T) -> Self {
        assert!(c > T::zero(), "kernel scale must be positive");
        Self {
            matrix: &self.matrix * c,
            factor: &self.factor * c.sqrt(),
            eigenvalues: &self.eigenvalues * c,
        }
    }
}

/// Symmetric eigendecomposition `M = G D G'`, keeping the components with
/// `d > RANK_TOL * d_max`, as `E1 = D^(1/2) G'` (rows by decreasing `d`).
pub fn factorize<T: Real>(m: &DMatrix<T>) -> Result<(DMatrix<T>, DVector<T>)> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("kernel matrix is {}x{}", m.nrows(), m.ncols())));
    }
    let n = m.nrows();
    let scale = m.amax().max(T::one());
    let asym = (m - m.transpose()).amax();
    if asym > T::of(1e-12) * scale {
        return Err(Error::NotSymmetric(asym.to_f64_lossy()));
    }
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), DVector::zeros(0)));
    }
    let eig = SymmetricEigen::new(m.clone());
    retain(&eig.eigenvalues, n, |k| eig.eigenvectors.column(k).transpose())
}

fn retain<T: Real, F>(values: &DVector<T>, n: usize, row: F) -> Result<(DMatrix<T>, DVector<T>)>
where
    F: Fn(usize) -> nalgebra::RowDVector<T>,
{
    let largest = values.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let smallest = values.iter().copied().fold(T::zero(), |a, b| a.min(b));
    let magnitude = largest.max(-smallest);
    if smallest < -T::of(NEG_TOL) * magnitude {
        return Err(Error::NotPsd { value: smallest.to_f64_lossy(), largest: largest.to_f64_lossy() });
    }
    let mut keep: Vec<usize> = (0..values.len()).filter(|&k| values[k] > T::of(RANK_TOL) * largest).collect();
    keep.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    let mut factor = DMatrix::zeros(keep.len(), n);
    for (r, &k) in keep.iter().enumerate() {
        factor.set_row(r, &(row(k) * values[k].sqrt()));
    }
    let retained = DVector::from_iterator(keep.len(), keep.iter().map(|&k| values[k]));
    Ok((factor, retained))
}

/// Factor of `F F'` from the eigenvectors `V` of `F' F`: `E1 = V' F'`.
fn factor_features<T: Real>(f: &DMatrix<T>) -> Result<(DMatrix<T>, DVector<T>)> {
    let n = f.nrows();
    if f.ncols() == 0 {
        return Ok((DMatrix::zeros(0, n), DVector::zeros(0)));
    }
    let gram = f.transpose() * f;
    let eig = SymmetricEigen::new(gram);
    let (factor, values) = retain(&eig.eigenvalues, n, |k| {
        let v = eig.eigenvectors.column(k);
        let norm = eig.eigenvalues[k].max(T::zero()).sqrt();
        (f * v).transpose() / norm
    })?;
    Ok((factor, values))
}

/// Builds a kernel over the rows of `g` (subjects by markers).
pub fn build_kernel<T: Real>(spec: &KernelSpec, g: &DMatrix<T>) -> Result<KernelMatrix<T>> {
    spec.validate()?;
    let (n, p) = g.shape();
    if g.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::Invalid("kernel input contains non-finite values".into()));
    }
    match spec.resolved(p) {
        KernelSpec::Linear => features_or_blocks(n, p, 1, |cols| g.columns(cols.start, cols.len()).into_owned()),
        KernelSpec::Ibs => ibs(g),
        KernelSpec::Gaussian { rho } => {
            let rho = T::of(rho.expect("resolved"));
            KernelMatrix::from_matrix(pairwise(g, |a, b| {
                let mut d = T::zero();
                for k in 0..p {
                    let x = a[k] - b[k];
                    d += x * x;
                }
                (-rho * d).exp()
            }))
        }
        KernelSpec::Laplacian => laplacian(g),
        KernelSpec::Polynomial { rho, degree } => {
            let rho = T::of(rho);
            let gram = g * g.transpose();
            let m = gram.map(|v| (rho + v).powi(degree as i32));
            KernelMatrix::from_matrix(m)
        }
        KernelSpec::Identity => identity(g),
    }
}

/// Builds a sub-population kernel over the rows of `x`. Same kernels as
/// [`build_kernel`]; `Identity` is the usual choice for categorical `x`.
pub fn build_subpop_kernel<T: Real>(spec: &KernelSpec, x: &DMatrix<T>) -> Result<KernelMatrix<T>> {
    build_kernel(spec, x)
}

/// `W = (J + H) o K`, elementwise.
pub fn heterogeneity_weight<T: Real>(k: &KernelMatrix<T>, h: &KernelMatrix<T>) -> Result<KernelMatrix<T>> {
    let n = k.n();
    if h.n() != n {
        return Err(Error::Dimension(format!("genetic kernel has n={n}, sub-population kernel n={}", h.n())));
    }
    if h.rank() == 0 {
        return Ok(k.clone());
    }
    let matrix = k.matrix.zip_map(&h.matrix, |kv, hv| (T::one() + hv) * kv);
    let (mk, mh) = (k.rank(), h.rank());
    if mk * (1 + mh) <= n {
        // features of W: those of K, and elementwise products of K's and H's
        let mut f = DMatrix::zeros(n, mk * (1 + mh));
        for a in 0..mk {
            f.set_column(a, &k.factor.row(a).transpose());
            for b in 0..mh {
                let col = k.factor.row(a).component_mul(&h.factor.row(b)).transpose();
                f.set_column(mk + a * mh + b, &col);
            }
        }
        let (factor, eigenvalues) = factor_features(&f)?;
        Ok(KernelMatrix { matrix, factor, eigenvalues })
    } else {
        KernelMatrix::from_matrix(matrix)
    }
}

fn pairwise<T: Real, F>(g: &DMatrix<T>, f: F) -> DMatrix<T>
where
    F: Fn(&[T], &[T]) -> T,
{
    let n = g.nrows();
    let rows: Vec<Vec<T>> = (0..n).map(|i| g.row(i).iter().copied().collect()).collect();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = if i == j { f(&rows[i], &rows[i]) } else { f(&rows[i], &rows[j]) };
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// A kernel that is a sum of `F_b F_b'` over column blocks of features:
/// factorized from features when they are few, otherwise accumulated blockwise
/// into an `n x n` matrix and eigendecomposed.
fn features_or_blocks<T: Real, F>(n: usize, p: usize, per_column: usize, block: F) -> Result<KernelMatrix<T>>
where
    F: Fn(std::ops::Range<usize>) -> DMatrix<T>,
{
    if p * per_column <= n {
        return KernelMatrix::from_features(&block(0..p));
    }
    let mut m = DMatrix::zeros(n, n);
    let mut start = 0;
    while start < p {
        let end = (start + BLOCK).min(p);
        let f = block(start..end);
        m.gemm(T::one(), &f, &f.transpose(), T::one());
        start = end;
    }
    symmetrize(&mut m);
    KernelMatrix::from_matrix(m)
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

fn ibs<T: Real>(g: &DMatrix<T>) -> Result<KernelMatrix<T>> {
    let (n, p) = g.shape();
    let two = T::of(2.0);
    if g.iter().any(|&v| v < T::zero() || v > two) {
        return Err(Error::Invalid("IBS kernel needs genotype values in [0, 2]".into()));
    }
    let integer = g.iter().all(|&v| v == T::zero() || v == T::one() || v == two);
    if integer {
        // 2 - |a - b| on {0,1,2} is the PSD matrix [[2,1,0],[1,2,1],[0,1,2]];
        // each genotype maps to a row of its Cholesky factor.
        let s = (two * T::of_usize(p)).sqrt();
        let r2 = two.sqrt();
        let r32 = T::of(1.5).sqrt();
        let rows = [
            [r2, T::zero(), T::zero()],
            [r2 / two, r32, T::zero()],
            [T::zero(), T::one() / r32, T::of(4.0 / 3.0).sqrt()],
        ];
        return features_or_blocks(n, p, 3, |cols| {
            let mut f = DMatrix::zeros(n, 3 * cols.len());
            for (c, k) in cols.enumerate() {
                for i in 0..n {
                    let code = g[(i, k)].to_f64_lossy() as usize;
                    for t in 0..3 {
                        f[(i, 3 * c + t)] = rows[code][t] / s;
                    }
                }
            }
            f
        });
    }
    let denom = two * T::of_usize(p);
    let mut m = pairwise(g, |a, b| {
        let mut s = T::zero();
        for k in 0..p {
            s += two - (a[k] - b[k]).abs();
        }
        s / denom
    });
    symmetrize(&mut m);
    KernelMatrix::from_matrix(m)
}

fn laplacian<T: Real>(g: &DMatrix<T>) -> Result<KernelMatrix<T>> {
    let (n, p) = g.shape();
    let mut cols = Vec::new();
    let mut weights = Vec::new();
    for k in 0..p {
        let col = g.column(k);
        let mean = col.sum() / T::of_usize(n);
        let var = if n > 1 {
            col.iter().map(|&v| (v - mean) * (v - mean)).fold(T::zero(), |a, b| a + b) / T::of_usize(n - 1)
        } else {
            T::zero()
        };
        if var > T::zero() {
            cols.push(k);
            weights.push(T::one() / var.sqrt());
        }
    }
    if cols.len() < p {
        log::warn!("laplacian kernel: dropped {} zero-variance column(s)", p - cols.len());
    }
    let total = weights.iter().fold(T::zero(), |a, &b| a + b);
    let m = pairwise(g, |a, b| {
        if cols.is_empty() {
            return T::one();
        }
        let mut s = T::zero();
        for (&k, &w) in cols.iter().zip(&weights) {
            s += w * (a[k] - b[k]).abs();
        }
        (-s / total).exp()
    });
    KernelMatrix::from_matrix(m)
}

fn identity<T: Real>(x: &DMatrix<T>) -> Result<KernelMatrix<T>> {
    let n = x.nrows();
    let mut groups: Vec<Vec<T>> = Vec::new();
    let mut label = vec![0usize; n];
    for (i, slot) in label.iter_mut().enumerate() {
        let row: Vec<T> = x.row(i).iter().copied().collect();
        *slot = match groups.iter().position(|gr| *gr == row) {
            Some(k) => k,
            None => {
                groups.push(row);
                groups.len() - 1
            }
        };
    }
    let mut f = DMatrix::zeros(n, groups.len());
    for i in 0..n {
        f[(i, label[i])] = T::one();
    }
    KernelMatrix::from_features(&f)
}
