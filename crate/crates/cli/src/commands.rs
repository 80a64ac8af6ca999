//! The five subcommands. Each returns a [`Status`]; errors propagate.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use aftkm::aft::{fit_null, FitOptions};
use aftkm::assoc::{NullContext, TestOptions, TestResult};
use aftkm::data::{DatasetFiles, GeneSetMap, LabeledMatrix};
use aftkm::kernels::{build_kernel, build_subpop_kernel, KernelMatrix};
use aftkm::sim::{gen_dataset, gen_snps_mvn, replicate_rng, run_study, Scenario, ScenarioKind, StudyConfig, StudyReport};
use aftkm::stats::{fdr_discoveries, fdr_thresholds, ks_uniform, qq_points};
use aftkm::{Dataset, KernelSpec, Method};
use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::config::ScanConfig;
use crate::svg;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Clean,
    /// A result carries a diagnostic flag (e.g. degenerate spectrum).
    Flagged,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Clean => 0,
            Status::Flagged => 2,
        }
    }
}

fn with_pool<R: Send>(workers: usize, work: impl FnOnce() -> R + Send) -> Result<R> {
    if workers == 0 {
        return Ok(work());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    Ok(pool.install(work))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn load(cfg: &ScanConfig) -> Result<Dataset> {
    let files = DatasetFiles {
        survival: cfg.survival.clone(),
        covariates: cfg.covariates.clone(),
        genotypes: cfg.genotypes.clone(),
        subpop: cfg.subpop.clone(),
    };
    Ok(files.load::<f64>(cfg.cause)?)
}

fn subpop_kernel(cfg: &ScanConfig, data: &Dataset) -> Result<Option<KernelMatrix<f64>>> {
    match (&cfg.hkernel, data.x()) {
        (Some(spec), Some(x)) => Ok(Some(build_subpop_kernel(spec, x)?)),
        (Some(_), None) => bail!("method {} needs a sub-population matrix", cfg.method),
        (None, _) => Ok(None),
    }
}

fn test_options(cfg: &ScanConfig) -> TestOptions {
    TestOptions {
        perturbations: cfg.perturbations,
        perturbations_score: cfg.perturbations_score,
        seed: cfg.seed,
        accuracy: 1e-6,
    }
}

/// One test on all markers; writes provenance, header and one row.
pub fn cmd_test(cfg: &ScanConfig, out: &mut dyn Write) -> Result<Status> {
    let data = load(cfg)?;
    let result = with_pool(cfg.workers, || -> Result<TestResult> {
        let fit = fit_null(&data, &FitOptions::default())?;
        let ctx = NullContext::new(&fit, &test_options(cfg))?;
        let k = build_kernel(&cfg.kernel, data.g())?;
        let h = subpop_kernel(cfg, &data)?;
        Ok(ctx.run(cfg.method, &k, h.as_ref())?)
    })??;
    for line in cfg.provenance() {
        writeln!(out, "{line}")?;
    }
    writeln!(out, "{}", TestResult::TSV_HEADER)?;
    writeln!(out, "{}", result.tsv_row("all"))?;
    Ok(if result.flags.any() { Status::Flagged } else { Status::Clean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanSummary {
    pub sets: usize,
    pub failed: usize,
    pub flagged: usize,
    /// Names of the sets passing the step-up rule, by increasing p-value.
    pub discoveries: Vec<String>,
    pub null_fits: usize,
}

fn clean_message(e: &anyhow::Error) -> String {
    format!("{e:#}").replace(['\t', '\n'], " ")
}

/// Tests every gene set against one null fit and writes `results.tsv`,
/// `thresholds.tsv` and `significant.tsv` into the output directory.
pub fn cmd_scan(cfg: &ScanConfig) -> Result<ScanSummary> {
    let out = cfg.out.as_ref().ok_or_else(|| anyhow!("--out is required for scan"))?;
    let sets_path = cfg.genesets.as_ref().ok_or_else(|| anyhow!("--genesets is required for scan"))?;
    let data = load(cfg)?;
    let sets = GeneSetMap::read(sets_path, &data.markers().columns)?;
    if sets.is_empty() {
        bail!("{} lists no gene sets", sets_path.display());
    }
    let fits_before = aftkm::aft::null_fit_count();
    let fit = fit_null(&data, &FitOptions::default())?;
    let null_fits = aftkm::aft::null_fit_count() - fits_before;
    let ctx = NullContext::new(&fit, &test_options(cfg))?;
    let h = subpop_kernel(cfg, &data)?;
    let named: Vec<(&str, &[usize])> = sets.iter().collect();
    let results: Vec<Result<TestResult>> = with_pool(cfg.workers, || {
        named
            .par_iter()
            .map(|(_, cols)| {
                let k = build_kernel(&cfg.kernel, &data.marker_columns(cols))?;
                Ok(ctx.run(cfg.method, &k, h.as_ref())?)
            })
            .collect()
    })?;

    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut w = create(&out.join("results.tsv"))?;
    for line in cfg.provenance() {
        writeln!(w, "{line}")?;
    }
    writeln!(w, "# fdr={}", cfg.fdr)?;
    writeln!(w, "{}", TestResult::TSV_HEADER)?;
    let mut p_values = Vec::with_capacity(named.len());
    let (mut failed, mut flagged) = (0, 0);
    for ((name, _), r) in named.iter().zip(&results) {
        match r {
            Ok(r) => {
                writeln!(w, "{}", r.tsv_row(name))?;
                flagged += r.flags.any() as usize;
                p_values.push(r.p_value);
            }
            Err(e) => {
                log::warn!("gene set {name}: {e:#}");
                writeln!(w, "{name}\t{}\tNA\tNA\t0\t{}\terror:{}", cfg.method, fit.n_events(), clean_message(e))?;
                failed += 1;
                p_values.push(1.0);
            }
        }
    }
    w.flush()?;

    let thresholds = fdr_thresholds(named.len(), cfg.fdr);
    let mut w = create(&out.join("thresholds.tsv"))?;
    writeln!(w, "# fdr={} m={}", cfg.fdr, named.len())?;
    writeln!(w, "rank\tthreshold")?;
    for (i, t) in thresholds.iter().enumerate() {
        writeln!(w, "{}\t{t:e}", i + 1)?;
    }
    w.flush()?;

    let hits = fdr_discoveries(&p_values, cfg.fdr);
    let mut w = create(&out.join("significant.tsv"))?;
    for line in cfg.provenance() {
        writeln!(w, "{line}")?;
    }
    writeln!(w, "rank\tset\tp_value\tthreshold")?;
    for (rank, &i) in hits.iter().enumerate() {
        writeln!(w, "{}\t{}\t{:e}\t{:e}", rank + 1, named[i].0, p_values[i], thresholds[rank])?;
    }
    w.flush()?;

    Ok(ScanSummary {
        sets: named.len(),
        failed,
        flagged,
        discoveries: hits.iter().map(|&i| named[i].0.to_string()).collect(),
        null_fits,
    })
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// S1_no_het, S_confound, S_obs_het, S_latent2, S_latent20, S_genome_het,
    /// S_small_nohet, S_small_het or S_coxgen
    #[arg(long)]
    pub scenario: ScenarioKind,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    /// Use the scenario's power setting instead of its null setting
    #[arg(long)]
    pub power: bool,
    /// Common cause-1 marker effect
    #[arg(long)]
    pub beta: Option<f64>,
    /// Group-varying effect beta0 + beta1 * sex
    #[arg(long)]
    pub beta0: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Follow every subject to failure
    #[arg(long)]
    pub no_censoring: bool,
}

impl ScenarioArgs {
    pub fn scenario(&self) -> Scenario {
        let mut s = Scenario::new(self.scenario);
        if self.power {
            s = s.power();
        }
        let (n, p) = (self.n.unwrap_or(s.n), self.p.unwrap_or(s.p));
        s = s.with_size(n, p).with_censoring(!self.no_censoring);
        if let Some(b) = self.beta {
            s.beta = b;
        }
        if let Some(b) = self.beta0 {
            s.beta0 = b;
        }
        if let Some(b) = self.beta1 {
            s.beta1 = b;
        }
        s
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Extra marker sets of the same width, independent of the outcome
    #[arg(long, default_value_t = 0)]
    pub null_sets: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

/// Writes one simulated dataset plus `genesets.tsv` into a directory.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<Status> {
    let scenario = args.scenario.scenario();
    let mut rng = replicate_rng(args.seed, 0);
    let sim = gen_dataset(&scenario, &mut rng)?;
    let mut data = sim.data;
    let p = scenario.p;
    let mut sets = vec![("set1".to_string(), data.markers().columns.clone())];
    if args.null_sets > 0 {
        let n = data.n();
        let mut values = DMatrix::zeros(n, p * (1 + args.null_sets));
        values.columns_mut(0, p).copy_from(data.g());
        let mut columns = data.markers().columns.clone();
        for s in 0..args.null_sets {
            let block = gen_snps_mvn(n, p, &mut rng);
            values.columns_mut(p * (s + 1), p).copy_from(&block);
            let names: Vec<String> = (1..=p).map(|j| format!("N{}_{j}", s + 1)).collect();
            columns.extend(names.iter().cloned());
            sets.push((format!("set{}", s + 2), names));
        }
        data = Dataset::assemble(
            data.survival().to_vec(),
            data.covariates().clone(),
            LabeledMatrix::new(columns, values)?,
            data.subpop().cloned(),
            data.cause(),
        )?;
    }
    data.write_dir(&args.out)?;
    let mut w = create(&args.out.join("genesets.tsv"))?;
    writeln!(w, "set\tmarkers")?;
    for (name, markers) in &sets {
        writeln!(w, "{name}\t{}", markers.join(","))?;
    }
    w.flush()?;
    let mut w = create(&args.out.join("scenario.txt"))?;
    writeln!(w, "# aftkm {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(w, "scenario = {scenario}")?;
    writeln!(w, "seed = {}", args.seed)?;
    writeln!(w, "attempts = {}", sim.attempts)?;
    writeln!(w, "events = {}", data.events())?;
    w.flush()?;
    Ok(Status::Clean)
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<T>().map_err(|e| anyhow!("'{v}': {e}")))
        .collect()
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 500)]
    pub replicates: usize,
    /// Comma-separated methods
    #[arg(long, default_value = "R")]
    pub methods: String,
    /// Comma-separated significance levels
    #[arg(long, default_value = "0.05")]
    pub alphas: String,
    #[arg(long)]
    pub kernel: Option<KernelSpec>,
    #[arg(long)]
    pub hkernel: Option<KernelSpec>,
    #[arg(long, default_value_t = 1000)]
    pub perturbations: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs a size/power study; writes `pvalues.tsv`, `summary.tsv` and `report.txt`.
pub fn cmd_calibrate(args: &CalibrateArgs, stdout: &mut dyn Write) -> Result<StudyReport> {
    let methods: Vec<Method> = parse_list(&args.methods)?;
    let alphas: Vec<f64> = parse_list(&args.alphas)?;
    let mut cfg = StudyConfig::new(args.scenario.scenario(), methods, args.replicates, args.seed)
        .with_alphas(alphas)
        .with_workers(args.workers)
        .with_perturbations(args.perturbations);
    if let Some(k) = &args.kernel {
        cfg.kernel = *k;
    }
    if let Some(h) = &args.hkernel {
        cfg.subpop_kernel = *h;
    }
    let report = run_study(&cfg)?;
    let provenance = [
        format!("# aftkm {}", env!("CARGO_PKG_VERSION")),
        format!("# scenario={}", report.scenario),
        format!("# kernel={} hkernel={}", report.kernel, report.subpop_kernel),
        format!("# perturbations={} seed={}", args.perturbations, args.seed),
    ];

    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let mut w = create(&args.out.join("pvalues.tsv"))?;
    for line in &provenance {
        writeln!(w, "{line}")?;
    }
    let names: Vec<String> = report.methods.iter().map(|m| m.to_string()).collect();
    writeln!(w, "replicate\t{}", names.join("\t"))?;
    for (r, &rep) in report.completed.iter().enumerate() {
        let row: Vec<String> = report.p_values.iter().map(|ps| format!("{:e}", ps[r])).collect();
        writeln!(w, "{rep}\t{}", row.join("\t"))?;
    }
    w.flush()?;

    let mut w = create(&args.out.join("summary.tsv"))?;
    for line in &provenance {
        writeln!(w, "{line}")?;
    }
    writeln!(w, "{}", StudyReport::SUMMARY_HEADER)?;
    writeln!(stdout, "{}", StudyReport::SUMMARY_HEADER)?;
    for row in report.summary_rows() {
        writeln!(w, "{row}")?;
        writeln!(stdout, "{row}")?;
    }
    w.flush()?;

    let mut w = create(&args.out.join("report.txt"))?;
    writeln!(w, "version = {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(w, "scenario = {}", report.scenario.kind)?;
    writeln!(w, "settings = {}", report.scenario)?;
    writeln!(w, "kernel = {}", report.kernel)?;
    writeln!(w, "hkernel = {}", report.subpop_kernel)?;
    writeln!(w, "replicates = {}", report.replicates)?;
    writeln!(w, "completed = {}", report.completed.len())?;
    writeln!(w, "failed = {}", report.failures.len())?;
    writeln!(w, "mean_acceptance = {:.6}", report.mean_acceptance)?;
    writeln!(w, "perturbations = {}", args.perturbations)?;
    writeln!(w, "seed = {}", args.seed)?;
    for (r, msg) in &report.failures {
        writeln!(w, "failure.{r} = {}", msg.replace('\n', " "))?;
    }
    w.flush()?;
    Ok(report)
}

#[derive(Debug, Clone, Args)]
pub struct QqArgs {
    /// File of p-values: one column, or a TSV with a header
    #[arg(long)]
    pub pvalues: PathBuf,
    /// Column to read (default: p_value if present, else the last column)
    #[arg(long)]
    pub column: Option<String>,
    /// Q-Q table (default: standard output)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

/// Reads p-values from a column of a TSV; `NA` cells are skipped.
pub fn read_p_values(path: &Path, column: Option<&str>) -> Result<Vec<f64>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut col: Option<usize> = None;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        let line = line.trim_end_matches('\r');
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').map(str::trim).collect();
        let idx = match col {
            Some(c) => c,
            None => {
                let header = cells.iter().any(|c| c.parse::<f64>().is_err());
                let c = if header {
                    let want = column.unwrap_or("p_value");
                    match cells.iter().position(|c| *c == want) {
                        Some(c) => c,
                        None if column.is_some() => bail!("{}: no column '{want}'", path.display()),
                        None => cells.len() - 1,
                    }
                } else {
                    0
                };
                col = Some(c);
                if header {
                    continue;
                }
                c
            }
        };
        let cell = cells.get(idx).ok_or_else(|| anyhow!("{}:{}: missing column {}", path.display(), i + 1, idx + 1))?;
        if cell.eq_ignore_ascii_case("na") {
            continue;
        }
        let v: f64 = cell.parse().map_err(|_| anyhow!("{}:{}: not a number '{cell}'", path.display(), i + 1))?;
        if !(0.0..=1.0).contains(&v) {
            bail!("{}:{}: p-value {v} outside [0, 1]", path.display(), i + 1);
        }
        out.push(v);
    }
    Ok(out)
}

pub fn cmd_qq(args: &QqArgs, stdout: &mut dyn Write) -> Result<Status> {
    let p = read_p_values(&args.pvalues, args.column.as_deref())?;
    if p.len() < 10 {
        bail!("need at least 10 p-values, {} has {}", args.pvalues.display(), p.len());
    }
    let points = qq_points(&p)?;
    let ks = ks_uniform(&p)?;
    let mut table = String::new();
    table.push_str(&format!("# aftkm {}\n", env!("CARGO_PKG_VERSION")));
    table.push_str(&format!("# n={} ks_statistic={:.6} ks_p_value={:.6}\n", ks.n, ks.statistic, ks.p_value));
    table.push_str("expected\tobserved\n");
    for (e, o) in &points {
        table.push_str(&format!("{e:.6}\t{o:e}\n"));
    }
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(table.as_bytes())?;
            w.flush()?;
            writeln!(stdout, "n\tks_statistic\tks_p_value")?;
            writeln!(stdout, "{}\t{:.6}\t{:.6}", ks.n, ks.statistic, ks.p_value)?;
        }
        None => stdout.write_all(table.as_bytes())?,
    }
    if let Some(path) = &args.svg {
        let title = format!("n = {}, KS = {:.4}", ks.n, ks.statistic);
        let mut w = create(path)?;
        w.write_all(svg::qq_plot(&points, &title).as_bytes())?;
        w.flush()?;
    }
    Ok(Status::Clean)
}
