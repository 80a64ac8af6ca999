use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aftkm::{Method, ScenarioKind};
use aftkm_cli::commands::{QqArgs, ScenarioArgs, SimulateArgs};
use aftkm_cli::{cmd_qq, cmd_scan, cmd_simulate, DataArgs, ScanConfig};
use tempfile::TempDir;

fn aftkm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aftkm")).args(args).output().expect("binary runs")
}

fn simulate(dir: &Path, n: usize, p: usize, null_sets: usize, seed: u64) {
    let args = SimulateArgs {
        scenario: ScenarioArgs {
            scenario: ScenarioKind::S1NoHet,
            n: Some(n),
            p: Some(p),
            power: false,
            beta: None,
            beta0: None,
            beta1: None,
            no_censoring: false,
        },
        null_sets,
        seed,
        out: dir.to_path_buf(),
    };
    cmd_simulate(&args).unwrap();
}

fn data_args(dir: &Path) -> DataArgs {
    DataArgs {
        survival: Some(dir.join("survival.tsv")),
        covariates: Some(dir.join("covariates.tsv")),
        genotypes: Some(dir.join("genotypes.tsv")),
        genesets: Some(dir.join("genesets.tsv")),
        perturbations: Some(200),
        ..DataArgs::default()
    }
}

fn data_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn test_command_on_simulated_files() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = aftkm(&["simulate", "--scenario", "S1_no_het", "--n", "400", "--p", "5", "--seed", "3", "--out", path_str(d)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["survival.tsv", "covariates.tsv", "genotypes.tsv", "genesets.tsv", "scenario.txt"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let out = aftkm(&[
        "test",
        "--survival",
        path_str(&d.join("survival.tsv")),
        "--covariates",
        path_str(&d.join("covariates.tsv")),
        "--genotypes",
        path_str(&d.join("genotypes.tsv")),
        "--perturbations",
        "200",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# aftkm"));
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], aftkm::TestResult::TSV_HEADER);
    let cells: Vec<&str> = rows[1].split('\t').collect();
    assert_eq!(cells[1], "R");
    let p: f64 = cells[3].parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn missing_genotype_file_is_an_error() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), 60, 3, 0, 1);
    let missing = tmp.path().join("nope.tsv");
    let out = aftkm(&[
        "test",
        "--survival",
        path_str(&tmp.path().join("survival.tsv")),
        "--genotypes",
        path_str(&missing),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(path_str(&missing)));
}

#[test]
fn bad_flag_value_is_an_error() {
    let out = aftkm(&["test", "--method", "nonsense"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(aftkm(&["--help"]).status.code(), Some(0));
}

#[test]
fn monomorphic_markers_are_flagged() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, 80, 4, 0, 2);
    let text = fs::read_to_string(d.join("genotypes.tsv")).unwrap();
    let mut lines = text.lines();
    let mut flat = format!("{}\n", lines.next().unwrap());
    for line in lines {
        let id = line.split('\t').next().unwrap();
        flat.push_str(&format!("{id}\t1\t1\t1\t1\n"));
    }
    fs::write(d.join("genotypes.tsv"), flat).unwrap();
    let out = aftkm(&[
        "test",
        "--survival",
        path_str(&d.join("survival.tsv")),
        "--covariates",
        path_str(&d.join("covariates.tsv")),
        "--genotypes",
        path_str(&d.join("genotypes.tsv")),
        "--perturbations",
        "100",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("degenerate_spectrum"));
}

#[test]
fn scan_fits_the_null_once_and_writes_thresholds() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, 120, 4, 5, 4);
    let mut args = data_args(d);
    args.out = Some(d.join("scan"));
    args.fdr = Some(0.1);
    let cfg = ScanConfig::resolve(&args, Method::Rc).unwrap();
    let summary = cmd_scan(&cfg).unwrap();
    assert_eq!(summary.sets, 6);
    assert_eq!(summary.null_fits, 1);
    assert_eq!(summary.failed, 0);

    let results = data_rows(&d.join("scan/results.tsv"));
    assert_eq!(results.len(), 6);
    assert_eq!(results[0][0], "set1");
    assert!(results.iter().all(|r| r[1] == "Rc"));

    let thresholds = data_rows(&d.join("scan/thresholds.tsv"));
    let harmonic: f64 = (1..=6).map(|i| 1.0 / i as f64).sum();
    for (i, row) in thresholds.iter().enumerate() {
        let t: f64 = row[1].parse().unwrap();
        let want = 0.1 * (i + 1) as f64 / (6.0 * harmonic);
        assert!((t - want).abs() < 1e-12, "{t} vs {want}");
    }
    let significant = data_rows(&d.join("scan/significant.tsv"));
    assert_eq!(significant.len(), summary.discoveries.len());
}

#[test]
fn scan_output_does_not_depend_on_workers() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, 100, 3, 4, 5);
    let run = |workers: usize| -> String {
        let mut args = data_args(d);
        args.workers = Some(workers);
        args.out = Some(d.join(format!("w{workers}")));
        cmd_scan(&ScanConfig::resolve(&args, Method::R).unwrap()).unwrap();
        fs::read_to_string(d.join(format!("w{workers}/results.tsv"))).unwrap()
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, 60, 3, 0, 6);
    fs::write(
        d.join("run.cfg"),
        "survival = survival.tsv\ngenotypes = genotypes.tsv\nmethod = Rc\nperturbations = 300\nseed = 9\n",
    )
    .unwrap();
    let args = DataArgs { config: Some(d.join("run.cfg")), seed: Some(11), ..DataArgs::default() };
    let cfg = ScanConfig::resolve(&args, Method::R).unwrap();
    assert_eq!(cfg.method, Method::Rc);
    assert_eq!(cfg.perturbations, 300);
    assert_eq!(cfg.seed, 11);
    assert_eq!(cfg.survival, d.join("survival.tsv"));

    let args = DataArgs { config: Some(d.join("run.cfg")), method: Some(Method::RHet), ..DataArgs::default() };
    assert!(ScanConfig::resolve(&args, Method::R).is_err());
}

fn write_p(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn qq(path: PathBuf) -> anyhow::Result<String> {
    let mut out = Vec::new();
    cmd_qq(&QqArgs { pvalues: path, column: None, out: None, svg: None }, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

#[test]
fn qq_reports_ks_distance() {
    let tmp = TempDir::new().unwrap();
    let grid: String = (0..20).map(|i| format!("{}\n", (i as f64 + 0.5) / 20.0)).collect();
    let text = qq(write_p(tmp.path(), "grid.txt", &grid)).unwrap();
    assert!(text.contains("ks_statistic=0.025000"), "{text}");
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 21);

    // header detection, comment lines and NA cells
    let mut tsv = String::from("# produced elsewhere\nset\tp_value\n");
    for i in 0..12 {
        tsv.push_str(&format!("s{i}\t0.5\n"));
    }
    tsv.push_str("s12\tNA\n");
    let text = qq(write_p(tmp.path(), "flat.tsv", &tsv)).unwrap();
    assert!(text.contains("n=12 ks_statistic=0.500000"), "{text}");
}

#[test]
fn qq_rejects_bad_input() {
    let tmp = TempDir::new().unwrap();
    let few: String = (0..9).map(|i| format!("0.{i}\n")).collect();
    assert!(qq(write_p(tmp.path(), "few.txt", &few)).is_err());
    let bad: String = (0..12).map(|i| if i == 4 { "1.5\n".into() } else { format!("0.0{i}\n") }).collect();
    let err = qq(write_p(tmp.path(), "bad.txt", &bad)).unwrap_err();
    assert!(format!("{err:#}").contains("outside"), "{err:#}");
}

#[test]
fn qq_writes_svg() {
    let tmp = TempDir::new().unwrap();
    let grid: String = (0..15).map(|i| format!("{}\n", (i as f64 + 0.3) / 15.0)).collect();
    let p = write_p(tmp.path(), "p.txt", &grid);
    let out = aftkm(&[
        "qq",
        "--pvalues",
        path_str(&p),
        "--out",
        path_str(&tmp.path().join("qq.tsv")),
        "--svg",
        path_str(&tmp.path().join("qq.svg")),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let svg = fs::read_to_string(tmp.path().join("qq.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 15);
}

/// Under the global null the step-up rule at FDR 0.1 should almost never
/// report anything.
#[test]
fn global_null_scans_rarely_discover() {
    let tmp = TempDir::new().unwrap();
    let scans = 50;
    let mut quiet = 0;
    for s in 0..scans {
        let d = tmp.path().join(format!("d{s}"));
        simulate(&d, 100, 3, 9, 100 + s);
        let mut args = data_args(&d);
        args.fdr = Some(0.1);
        args.out = Some(d.join("scan"));
        args.seed = Some(s);
        let summary = cmd_scan(&ScanConfig::resolve(&args, Method::R).unwrap()).unwrap();
        assert_eq!(summary.sets, 10);
        quiet += summary.discoveries.is_empty() as usize;
    }
    assert!(quiet as f64 >= 0.9 * scans as f64, "{quiet} of {scans} scans without discoveries");
}
