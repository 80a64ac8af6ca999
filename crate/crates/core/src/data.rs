//! Survival tables, covariate/marker matrices and their tab-separated file formats.
//!
//! Every file is UTF-8, tab-delimited, with a header row. The survival table has
//! the header `id  entry  time  status`; matrix files start with an id column
//! followed by numeric columns. Matrices are re-ordered to follow the survival
//! table, which fixes the subject order of a [`Dataset`].

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const SURVIVAL_HEADER: [&str; 4] = ["id", "entry", "time", "status"];

/// One subject's observation: entry (left-truncation) time, observed time and
/// status, where status 0 is censored and `j >= 1` is a failure from cause `j`.
///
/// An entry time of exactly zero means the subject is not left-truncated.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord<T> {
    pub id: String,
    pub entry: T,
    pub time: T,
    pub status: u32,
}

impl<T: Real> SurvivalRecord<T> {
    pub fn new(id: impl Into<String>, entry: T, time: T, status: u32) -> Result<Self> {
        let id = id.into();
        if !entry.is_finite_value() || !time.is_finite_value() {
            return Err(Error::Invalid(format!("{id}: non-finite time")));
        }
        if entry < T::zero() {
            return Err(Error::Invalid(format!("{id}: negative entry_time")));
        }
        if time <= T::zero() {
            return Err(Error::Invalid(format!("{id}: observed_time must be positive")));
        }
        if time < entry {
            return Err(Error::Invalid(format!("{id}: observed_time < entry_time")));
        }
        Ok(Self { id, entry, time, status })
    }

    pub fn is_truncated(&self) -> bool {
        self.entry > T::zero()
    }

    /// `log A`, or negative infinity for an untruncated subject.
    pub fn log_entry(&self) -> T {
        if self.is_truncated() {
            self.entry.ln()
        } else {
            T::neg_infinity()
        }
    }

    pub fn log_time(&self) -> T {
        self.time.ln()
    }
}

/// A numeric matrix whose rows follow the survival table order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix<T: Real> {
    pub columns: Vec<String>,
    pub values: DMatrix<T>,
}

impl<T: Real> LabeledMatrix<T> {
    pub fn new(columns: Vec<String>, values: DMatrix<T>) -> Result<Self> {
        if columns.len() != values.ncols() {
            return Err(Error::Dimension(format!(
                "{} column names for {} columns",
                columns.len(),
                values.ncols()
            )));
        }
        Ok(Self { columns, values })
    }

    /// Default names `prefix1, prefix2, ...`.
    pub fn unnamed(prefix: &str, values: DMatrix<T>) -> Self {
        let columns = (1..=values.ncols()).map(|k| format!("{prefix}{k}")).collect();
        Self { columns, values }
    }

    pub fn empty(rows: usize) -> Self {
        Self { columns: Vec::new(), values: DMatrix::zeros(rows, 0) }
    }
}

/// Aligned analysis table: survival outcomes, adjustment covariates `Z`
/// (n x q, possibly q = 0), markers under test `G` (n x p) and an optional
/// sub-population matrix `X` (n x D).
#[derive(Debug, Clone)]
pub struct Dataset<T: Real> {
    survival: Vec<SurvivalRecord<T>>,
    covariates: LabeledMatrix<T>,
    markers: LabeledMatrix<T>,
    subpop: Option<LabeledMatrix<T>>,
    cause: u32,
}

impl<T: Real> Dataset<T> {
    /// Checks shapes and values and builds the dataset. A dataset without any
    /// failure from `cause` is accepted with a warning.
    pub fn assemble(
        survival: Vec<SurvivalRecord<T>>,
        covariates: LabeledMatrix<T>,
        markers: LabeledMatrix<T>,
        subpop: Option<LabeledMatrix<T>>,
        cause: u32,
    ) -> Result<Self> {
        let n = survival.len();
        if n == 0 {
            return Err(Error::Invalid("empty survival table".into()));
        }
        if cause == 0 {
            return Err(Error::Invalid("cause of interest must be >= 1".into()));
        }
        let check = |name: &str, m: &LabeledMatrix<T>| -> Result<()> {
            if m.values.nrows() != n {
                return Err(Error::Dimension(format!(
                    "{name} has {} rows, survival table has {n}",
                    m.values.nrows()
                )));
            }
            if m.values.iter().any(|v| !v.is_finite_value()) {
                return Err(Error::Invalid(format!("{name} contains non-finite values")));
            }
            Ok(())
        };
        check("covariate matrix", &covariates)?;
        check("marker matrix", &markers)?;
        if markers.values.ncols() == 0 {
            return Err(Error::Invalid("marker matrix has no columns".into()));
        }
        if let Some(x) = &subpop {
            check("sub-population matrix", x)?;
        }
        let mut seen = HashSet::with_capacity(n);
        for r in &survival {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate subject id {}", r.id)));
            }
        }
        if !survival.iter().any(|r| r.status == cause) {
            log::warn!("no failures from cause {cause} in the survival table");
        }
        Ok(Self { survival, covariates, markers, subpop, cause })
    }

    pub fn n(&self) -> usize {
        self.survival.len()
    }

    pub fn q(&self) -> usize {
        self.covariates.values.ncols()
    }

    pub fn p(&self) -> usize {
        self.markers.values.ncols()
    }

    pub fn survival(&self) -> &[SurvivalRecord<T>] {
        &self.survival
    }

    pub fn z(&self) -> &DMatrix<T> {
        &self.covariates.values
    }

    pub fn g(&self) -> &DMatrix<T> {
        &self.markers.values
    }

    pub fn x(&self) -> Option<&DMatrix<T>> {
        self.subpop.as_ref().map(|m| &m.values)
    }

    pub fn covariates(&self) -> &LabeledMatrix<T> {
        &self.covariates
    }

    pub fn markers(&self) -> &LabeledMatrix<T> {
        &self.markers
    }

    pub fn subpop(&self) -> Option<&LabeledMatrix<T>> {
        self.subpop.as_ref()
    }

    pub fn cause(&self) -> u32 {
        self.cause
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.survival.iter().map(|r| r.id.as_str())
    }

    /// Number of failures from the cause of interest.
    pub fn events(&self) -> usize {
        self.survival.iter().filter(|r| r.status == self.cause).count()
    }

    /// Marker columns selected by index, e.g. one gene set of a scan.
    pub fn marker_columns(&self, columns: &[usize]) -> DMatrix<T> {
        self.markers.values.select_columns(columns.iter())
    }

    /// Writes the survival table and the matrices as TSV files into `dir`
    /// (`survival.tsv`, `covariates.tsv`, `genotypes.tsv`, `subpop.tsv`).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_survival(&dir.join("survival.tsv"), &self.survival)?;
        let ids: Vec<&str> = self.ids().collect();
        write_matrix(&dir.join("covariates.tsv"), &ids, &self.covariates)?;
        write_matrix(&dir.join("genotypes.tsv"), &ids, &self.markers)?;
        if let Some(x) = &self.subpop {
            write_matrix(&dir.join("subpop.tsv"), &ids, x)?;
        }
        Ok(())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn parse_number<T: Real>(cell: &str, path: &Path, line: usize, what: &str) -> Result<T> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
        return Err(parse_err(path, line, format!("missing value in {what}")));
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_err(path, line, format!("non-numeric {what} '{cell}'")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite {what} '{cell}'")));
    }
    Ok(T::of(v))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| io_err(path, e))
}

/// Reads the survival table from a file.
pub fn read_survival<T: Real>(path: &Path) -> Result<Vec<SurvivalRecord<T>>> {
    parse_survival(open(path)?, path)
}

/// Parses a survival table; `path` is only used in error messages.
pub fn parse_survival<T: Real, R: BufRead>(reader: R, path: &Path) -> Result<Vec<SurvivalRecord<T>>> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| io_err(path, e))?,
        None => return Err(parse_err(path, 1, "empty file")),
    };
    let cols: Vec<&str> = header.trim_end_matches('\r').split('\t').map(str::trim).collect();
    if cols != SURVIVAL_HEADER {
        return Err(parse_err(path, 1, "header must be: id\tentry\ttime\tstatus"));
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != 4 {
            return Err(parse_err(path, lineno, format!("expected 4 fields, found {}", cells.len())));
        }
        let id = cells[0].trim();
        if id.is_empty() {
            return Err(parse_err(path, lineno, "empty subject id"));
        }
        let entry: T = parse_number(cells[1], path, lineno, "entry")?;
        let time: T = parse_number(cells[2], path, lineno, "time")?;
        let status: u32 = cells[3]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("invalid status '{}'", cells[3].trim())))?;
        if entry < T::zero() || time < T::zero() {
            return Err(parse_err(path, lineno, "negative time"));
        }
        if time < entry {
            return Err(parse_err(path, lineno, format!("observed_time < entry_time at line {lineno}")));
        }
        if time == T::zero() {
            return Err(parse_err(path, lineno, "observed_time must be positive"));
        }
        if !seen.insert(id.to_string()) {
            return Err(parse_err(path, lineno, format!("duplicate subject id '{id}'")));
        }
        records.push(SurvivalRecord { id: id.to_string(), entry, time, status });
    }
    if records.is_empty() {
        return Err(parse_err(path, 1, "no records"));
    }
    Ok(records)
}

/// Reads a matrix file and re-orders its rows to follow `survival`.
pub fn read_matrix<T: Real>(path: &Path, survival: &[SurvivalRecord<T>]) -> Result<LabeledMatrix<T>> {
    parse_matrix(open(path)?, path, survival)
}

pub fn parse_matrix<T: Real, R: BufRead>(
    reader: R,
    path: &Path,
    survival: &[SurvivalRecord<T>],
) -> Result<LabeledMatrix<T>> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| io_err(path, e))?,
        None => return Err(parse_err(path, 1, "empty file")),
    };
    let header = header.trim_end_matches('\r');
    let columns: Vec<String> = header.split('\t').skip(1).map(|s| s.trim().to_string()).collect();
    let k = columns.len();

    let position: HashMap<&str, usize> = survival.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let n = survival.len();
    let mut values = DMatrix::<T>::zeros(n, k);
    let mut filled = vec![false; n];
    let mut rows = 0usize;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != k + 1 {
            return Err(parse_err(path, lineno, format!("expected {} fields, found {}", k + 1, cells.len())));
        }
        let id = cells[0].trim();
        let row = *position.get(id).ok_or_else(|| {
            Error::Alignment(format!("{}: line {lineno}: id '{id}' not in survival table", path.display()))
        })?;
        if filled[row] {
            return Err(parse_err(path, lineno, format!("duplicate subject id '{id}'")));
        }
        for (j, cell) in cells[1..].iter().enumerate() {
            values[(row, j)] = parse_number(cell, path, lineno, &format!("column '{}'", columns[j]))?;
        }
        filled[row] = true;
        rows += 1;
    }
    if rows != n {
        return Err(Error::Alignment(format!(
            "{}: {rows} rows but the survival table has {n} subjects",
            path.display()
        )));
    }
    Ok(LabeledMatrix { columns, values })
}

pub fn write_survival<T: Real>(path: &Path, records: &[SurvivalRecord<T>]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "{}", SURVIVAL_HEADER.join("\t"))?;
        for r in records {
            writeln!(w, "{}\t{}\t{}\t{}", r.id, r.entry, r.time, r.status)?;
        }
        w.flush()
    };
    body().map_err(|e| io_err(path, e))
}

pub fn write_matrix<T: Real>(path: &Path, ids: &[&str], m: &LabeledMatrix<T>) -> Result<()> {
    if ids.len() != m.values.nrows() {
        return Err(Error::Dimension(format!("{} ids for {} rows", ids.len(), m.values.nrows())));
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        write!(w, "id")?;
        for c in &m.columns {
            write!(w, "\t{c}")?;
        }
        writeln!(w)?;
        for (i, id) in ids.iter().enumerate() {
            write!(w, "{id}")?;
            for j in 0..m.values.ncols() {
                write!(w, "\t{}", m.values[(i, j)])?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    body().map_err(|e| io_err(path, e))
}

/// Named marker sets, each a list of column indices into `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneSetMap {
    sets: Vec<(String, Vec<usize>)>,
}

impl GeneSetMap {
    pub fn new(sets: Vec<(String, Vec<usize>)>, n_markers: usize) -> Result<Self> {
        let mut names = HashSet::new();
        for (name, cols) in &sets {
            if !names.insert(name.as_str()) {
                return Err(Error::Invalid(format!("duplicate gene set '{name}'")));
            }
            if cols.is_empty() {
                return Err(Error::Invalid(format!("gene set '{name}' is empty")));
            }
            if let Some(&bad) = cols.iter().find(|&&c| c >= n_markers) {
                return Err(Error::Invalid(format!(
                    "gene set '{name}' refers to column {bad}, only {n_markers} markers"
                )));
            }
        }
        Ok(Self { sets })
    }

    /// Reads `set<TAB>marker,marker,...` lines (header `set  markers`),
    /// resolving marker names against the genotype matrix columns.
    pub fn read(path: &Path, marker_names: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> =
            marker_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let reader = open(path)?;
        let mut sets = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| io_err(path, e))?;
            let line = line.trim_end_matches('\r');
            if lineno == 1 {
                if line.split('\t').next().map(str::trim) != Some("set") {
                    return Err(parse_err(path, 1, "header must be: set\tmarkers"));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (name, markers) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(path, lineno, "expected two fields"))?;
            let cols = markers
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|m| {
                    index
                        .get(m)
                        .copied()
                        .ok_or_else(|| parse_err(path, lineno, format!("unknown marker '{m}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            sets.push((name.trim().to_string(), cols));
        }
        Self::new(sets, marker_names.len())
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.sets.iter().map(|(n, c)| (n.as_str(), c.as_slice()))
    }
}

/// Paths of the files that make up a dataset on disk.
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub survival: PathBuf,
    pub covariates: Option<PathBuf>,
    pub genotypes: PathBuf,
    pub subpop: Option<PathBuf>,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        let subpop = dir.join("subpop.tsv");
        let covariates = dir.join("covariates.tsv");
        Self {
            survival: dir.join("survival.tsv"),
            covariates: covariates.exists().then_some(covariates),
            genotypes: dir.join("genotypes.tsv"),
            subpop: subpop.exists().then_some(subpop),
        }
    }

    pub fn load<T: Real>(&self, cause: u32) -> Result<Dataset<T>> {
        let survival = read_survival::<T>(&self.survival)?;
        let covariates = match &self.covariates {
            Some(p) => read_matrix(p, &survival)?,
            None => LabeledMatrix::empty(survival.len()),
        };
        let markers = read_matrix(&self.genotypes, &survival)?;
        let subpop = match &self.subpop {
            Some(p) => Some(read_matrix(p, &survival)?),
            None => None,
        };
        Dataset::assemble(survival, covariates, markers, subpop, cause)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn survival(text: &str) -> Result<Vec<SurvivalRecord<f64>>> {
        parse_survival(Cursor::new(text), Path::new("surv.tsv"))
    }

    #[test]
    fn parses_fields_and_sentinel_entry() {
        let recs = survival("id\tentry\ttime\tstatus\ns1\t0.2\t1.7\t1\ns3\t0\t2.0\t2\n").unwrap();
        assert_eq!(recs[0], SurvivalRecord { id: "s1".into(), entry: 0.2, time: 1.7, status: 1 });
        assert!(recs[0].is_truncated());
        assert!(!recs[1].is_truncated());
        assert_eq!(recs[1].log_entry(), f64::NEG_INFINITY);
        assert_eq!(recs[1].status, 2);
    }

    #[test]
    fn rejects_time_before_entry_with_line_number() {
        let err = survival("id\tentry\ttime\tstatus\ns1\t0.2\t1.7\t1\ns2\t0.5\t0.4\t0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("observed_time < entry_time at line 3"), "{msg}");
    }

    #[test]
    fn rejects_negative_missing_duplicate_and_malformed() {
        assert!(survival("id\tentry\ttime\tstatus\ns1\t-0.1\t1\t1\n").is_err());
        assert!(survival("id\tentry\ttime\tstatus\ns1\tNA\t1\t1\n").is_err());
        assert!(survival("id\tentry\ttime\tstatus\ns1\t0\t1\t1\ns1\t0\t2\t0\n").is_err());
        assert!(survival("id\tentry\ttime\tstatus\ns1\t0\t1\n").is_err());
        assert!(survival("id\tstart\ttime\tstatus\ns1\t0\t1\t1\n").is_err());
        assert!(survival("id\tentry\ttime\tstatus\ns1\t0\t1\tx\n").is_err());
    }

    fn three() -> Vec<SurvivalRecord<f64>> {
        survival("id\tentry\ttime\tstatus\na\t0\t1\t1\nb\t0\t2\t0\nc\t0.5\t3\t2\n").unwrap()
    }

    #[test]
    fn matrix_rows_follow_survival_order() {
        let recs = three();
        let m = parse_matrix::<f64, _>(
            Cursor::new("id\tz1\tz2\nc\t5\t6\na\t1\t2\nb\t3\t4\n"),
            Path::new("z.tsv"),
            &recs,
        )
        .unwrap();
        assert_eq!(m.columns, vec!["z1", "z2"]);
        assert_eq!(m.values, DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    }

    #[test]
    fn matrix_alignment_errors() {
        let recs = three();
        let unknown = parse_matrix::<f64, _>(
            Cursor::new("id\tz1\na\t1\nb\t2\nsX\t3\n"),
            Path::new("z.tsv"),
            &recs,
        );
        assert!(matches!(unknown, Err(Error::Alignment(_))));
        let short = parse_matrix::<f64, _>(Cursor::new("id\tz1\na\t1\nb\t2\n"), Path::new("z.tsv"), &recs);
        assert!(matches!(short, Err(Error::Alignment(_))));
        let text = parse_matrix::<f64, _>(Cursor::new("id\tz1\na\t1\nb\tfoo\nc\t1\n"), Path::new("z.tsv"), &recs);
        assert!(matches!(text, Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn ids_only_matrix_is_empty_payload() {
        let recs = three();
        let m = parse_matrix::<f64, _>(Cursor::new("id\na\nb\nc\n"), Path::new("z.tsv"), &recs).unwrap();
        assert_eq!(m.values.shape(), (3, 0));
    }

    #[test]
    fn assemble_checks_shapes() {
        let recs = three();
        let z = LabeledMatrix::unnamed("z", DMatrix::from_element(3, 2, 0.5));
        let g = LabeledMatrix::unnamed("g", DMatrix::from_element(3, 5, 1.0));
        let ds = Dataset::assemble(recs.clone(), z.clone(), g.clone(), None, 1).unwrap();
        assert_eq!((ds.n(), ds.q(), ds.p()), (3, 2, 5));
        assert_eq!(ds.events(), 1);

        let g4 = LabeledMatrix::unnamed("g", DMatrix::from_element(4, 5, 1.0));
        assert!(Dataset::assemble(recs.clone(), z.clone(), g4, None, 1).is_err());
        let g0 = LabeledMatrix::unnamed("g", DMatrix::<f64>::zeros(3, 0));
        assert!(Dataset::assemble(recs.clone(), z.clone(), g0, None, 1).is_err());

        let x = LabeledMatrix::unnamed("x", DMatrix::from_element(3, 25, 0.0));
        let ds = Dataset::assemble(recs, z, g, Some(x), 1).unwrap();
        assert_eq!(ds.x().unwrap().ncols(), 25);
    }

    #[test]
    fn gene_set_validation() {
        assert!(GeneSetMap::new(vec![("a".into(), vec![0, 1])], 2).is_ok());
        assert!(GeneSetMap::new(vec![("a".into(), vec![2])], 2).is_err());
        assert!(GeneSetMap::new(vec![("a".into(), vec![])], 2).is_err());
        assert!(GeneSetMap::new(vec![("a".into(), vec![0]), ("a".into(), vec![1])], 2).is_err());
    }
}
