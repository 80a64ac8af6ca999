//! Run configuration: a flat `key = value` file merged with command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use aftkm::{KernelSpec, Method};
use anyhow::{anyhow, bail, Context, Result};
use clap::Args;

/// Keys read from a configuration file; flags take precedence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
    path: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in config {}", path.display()))?;
        cfg.path = Some(path.to_path_buf());
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            let key = key.trim().replace('-', "_");
            if key.is_empty() {
                bail!("line {}: empty key", i + 1);
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values, path: None })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Paths in the file are relative to the file's directory.
    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = PathBuf::from(self.get(key)?);
        match (&self.path, v.is_relative()) {
            (Some(p), true) => Some(p.parent().unwrap_or(Path::new(".")).join(v)),
            _ => Some(v),
        }
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("config key {key}: {e}")))
            .transpose()
    }
}

/// Flags shared by `test` and `scan`.
#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// key = value file; flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub survival: Option<PathBuf>,
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    #[arg(long)]
    pub genotypes: Option<PathBuf>,
    #[arg(long)]
    pub genesets: Option<PathBuf>,
    /// Sub-population matrix X
    #[arg(long)]
    pub subpop: Option<PathBuf>,
    /// R, Rhet, Rc or Rchet
    #[arg(long)]
    pub method: Option<Method>,
    /// Genetic kernel, e.g. ibs, linear, gaussian:rho=0.05
    #[arg(long)]
    pub kernel: Option<KernelSpec>,
    /// Sub-population kernel for the heterogeneity methods
    #[arg(long)]
    pub hkernel: Option<KernelSpec>,
    #[arg(long)]
    pub cause: Option<u32>,
    /// Target FDR for scans
    #[arg(long)]
    pub fdr: Option<f64>,
    /// Perturbations for both slope estimates
    #[arg(long)]
    pub perturbations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0: all cores)
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanConfig {
    pub survival: PathBuf,
    pub covariates: Option<PathBuf>,
    pub genotypes: PathBuf,
    pub genesets: Option<PathBuf>,
    pub subpop: Option<PathBuf>,
    pub method: Method,
    pub kernel: KernelSpec,
    pub hkernel: Option<KernelSpec>,
    pub cause: u32,
    pub fdr: f64,
    pub perturbations: usize,
    pub perturbations_score: usize,
    pub seed: u64,
    pub workers: usize,
    pub out: Option<PathBuf>,
}

impl ScanConfig {
    /// Merges flags over the config file (if any) over defaults.
    pub fn resolve(args: &DataArgs, default_method: Method) -> Result<Self> {
        let file = match &args.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        Self::merge(args, &file, default_method)
    }

    pub fn merge(args: &DataArgs, file: &ConfigFile, default_method: Method) -> Result<Self> {
        let path = |flag: &Option<PathBuf>, key: &str| flag.clone().or_else(|| file.path(key));
        let perturbations = match args.perturbations {
            Some(l) => l,
            None => file.parsed("perturbations")?.unwrap_or(10_000),
        };
        let cfg = Self {
            survival: path(&args.survival, "survival").ok_or_else(|| anyhow!("--survival is required"))?,
            covariates: path(&args.covariates, "covariates"),
            genotypes: path(&args.genotypes, "genotypes").ok_or_else(|| anyhow!("--genotypes is required"))?,
            genesets: path(&args.genesets, "genesets"),
            subpop: path(&args.subpop, "subpop"),
            method: match args.method {
                Some(m) => m,
                None => file.parsed("method")?.unwrap_or(default_method),
            },
            kernel: match &args.kernel {
                Some(k) => *k,
                None => file.parsed("kernel")?.unwrap_or(KernelSpec::Ibs),
            },
            hkernel: match &args.hkernel {
                Some(k) => Some(*k),
                None => file.parsed("hkernel")?,
            },
            cause: match args.cause {
                Some(c) => c,
                None => file.parsed("cause")?.unwrap_or(1),
            },
            fdr: match args.fdr {
                Some(a) => a,
                None => file.parsed("fdr")?.unwrap_or(0.05),
            },
            perturbations,
            perturbations_score: match args.perturbations {
                Some(l) => l,
                None => file.parsed("perturbations_score")?.unwrap_or(perturbations),
            },
            seed: match args.seed {
                Some(s) => s,
                None => file.parsed("seed")?.unwrap_or(1),
            },
            workers: match args.workers {
                Some(w) => w,
                None => file.parsed("workers")?.unwrap_or(0),
            },
            out: path(&args.out, "out"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [Some(&self.survival), self.covariates.as_ref(), Some(&self.genotypes), self.genesets.as_ref(), self.subpop.as_ref()]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                bail!("file not found: {}", p.display());
            }
        }
        if !(self.fdr > 0.0 && self.fdr < 1.0) {
            bail!("fdr must be in (0, 1), got {}", self.fdr);
        }
        match (self.method.needs_subpop(), &self.hkernel) {
            (true, None) => bail!("method {} needs --hkernel", self.method),
            (false, Some(_)) => bail!("--hkernel is only used by Rhet and Rchet, not {}", self.method),
            _ => {}
        }
        if self.method.needs_subpop() && self.subpop.is_none() {
            bail!("method {} needs --subpop", self.method);
        }
        if self.cause == 0 {
            bail!("cause must be a positive integer");
        }
        Ok(())
    }

    /// `# key=value` lines written at the top of every output.
    pub fn provenance(&self) -> Vec<String> {
        let mut lines = vec![
            format!("# aftkm {}", env!("CARGO_PKG_VERSION")),
            format!("# method={}", self.method),
            format!("# kernel={}", self.kernel),
        ];
        if let Some(h) = &self.hkernel {
            lines.push(format!("# hkernel={h}"));
        }
        lines.push(format!("# cause={}", self.cause));
        lines.push(format!("# perturbations={} perturbations_score={}", self.perturbations, self.perturbations_score));
        lines.push(format!("# seed={}", self.seed));
        lines
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_file() {
        let f = ConfigFile::parse("# comment\nmethod = Rc\n kernel=gaussian:rho=0.5 # trailing\n\nperturbations-score = 200\n")
            .unwrap();
        assert_eq!(f.get("method"), Some("Rc"));
        assert_eq!(f.get("kernel"), Some("gaussian:rho=0.5"));
        assert_eq!(f.get("perturbations_score"), Some("200"));
        assert!(ConfigFile::parse("no equals sign").is_err());
    }
}
