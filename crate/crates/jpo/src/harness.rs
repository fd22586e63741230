//! Experiment orchestration: metrics, TOML config, the (seed, N, method)
//! sweep grid, and deterministic CSV emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{JpoError, Result};
use crate::methods::{refine, run_method, MethodKind, TrainConfig};
use crate::optim::OptimizerConfig;
use crate::problems::{generate, Family};

/// Fraction of examples where `method` beats `baseline`, ties credited half:
/// f_N = N_better/N + N_equal/(2N). Equality is judged by relative tolerance.
pub fn fraction_better(method: &[f64], baseline: &[f64], rel_tol: f64) -> Result<f64> {
    if method.len() != baseline.len() || method.is_empty() {
        return Err(JpoError::InvalidArg("loss lists must be nonempty and equal-length".into()));
    }
    let n = method.len() as f64;
    let mut better = 0usize;
    let mut equal = 0usize;
    for (&m, &b) in method.iter().zip(baseline) {
        if m.is_nan() {
            continue; // diverged method estimate loses outright
        }
        if b.is_nan() || (m - b).abs() <= rel_tol * m.abs().max(b.abs()) {
            if b.is_nan() {
                better += 1;
            } else {
                equal += 1;
            }
        } else if m < b {
            better += 1;
        }
    }
    Ok(better as f64 / n + equal as f64 / (2.0 * n))
}

/// Default relative equality tolerance for `fraction_better`.
pub const EQUALITY_REL_TOL: f64 = 1e-9;

/// Mean and error bar over per-seed fractions. The bar divides by the data
/// set size N, exactly as the source formula is written.
pub fn errorbar(fs: &[f64], n: usize) -> (f64, f64) {
    let mean = fs.iter().sum::<f64>() / fs.len() as f64;
    let ss: f64 = fs.iter().map(|f| (f - mean) * (f - mean)).sum();
    (mean, ss.sqrt() / n as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct ImprovementSplit {
    /// Mean over examples of (initial - pre) / (initial - post), clamped.
    pub fraction: f64,
    pub excluded: usize,
}

/// Share of the total per-example loss decrease achieved before refinement.
pub fn improvement_split(initial: &[f64], pre: &[f64], post: &[f64]) -> Result<ImprovementSplit> {
    if initial.len() != pre.len() || pre.len() != post.len() || initial.is_empty() {
        return Err(JpoError::InvalidArg("triple lists must be nonempty and equal-length".into()));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for i in 0..initial.len() {
        let denom = initial[i] - post[i];
        if !(denom > 0.0) || !pre[i].is_finite() {
            excluded += 1;
            continue;
        }
        sum += ((initial[i] - pre[i]) / denom).clamp(0.0, 1.0);
        used += 1;
    }
    if used == 0 {
        return Err(JpoError::InvalidArg("all examples excluded".into()));
    }
    Ok(ImprovementSplit { fraction: sum / used as f64, excluded })
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub clip_percentile: Option<f64>,
    pub synthetic_size: Option<usize>,
    pub minibatch: Option<usize>,
    pub adjoint_iterations: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub family: String,
    pub n_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
    pub output_dir: String,
    #[serde(default)]
    pub refine: bool,
    #[serde(default)]
    pub train: TrainOverrides,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| JpoError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(JpoError::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.validate()?;
        cfg.apply_env_overrides()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() || self.n_values.iter().any(|&n| n == 0) {
            return Err(JpoError::Config("n_values must be positive and nonempty".into()));
        }
        if self.seeds.is_empty() {
            return Err(JpoError::Config("at least one seed required".into()));
        }
        if self.methods.is_empty() {
            return Err(JpoError::Config("methods must be nonempty".into()));
        }
        Family::parse(&self.family)?;
        for m in &self.methods {
            MethodKind::parse(m)?;
        }
        Ok(())
    }

    fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(seeds) = std::env::var("JPO_SEEDS") {
            self.seeds = seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| JpoError::Config(format!("JPO_SEEDS: {e}")))?;
        }
        if let Ok(dir) = std::env::var("JPO_OUTPUT_DIR") {
            self.output_dir = dir;
        }
        Ok(())
    }

    fn train_config(&self, family: Family, seed: u64) -> TrainConfig {
        let mut t = TrainConfig::for_family(family, seed);
        if let Some(v) = self.train.iterations {
            t.iterations = v;
        }
        if let Some(v) = self.train.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.train.clip_percentile {
            t.clip_percentile = v;
        }
        if let Some(v) = self.train.synthetic_size {
            t.synthetic_size = v;
        }
        if let Some(v) = self.train.minibatch {
            t.minibatch = v;
        }
        if let Some(v) = self.train.adjoint_iterations {
            t.adjoint_iterations = v;
        }
        t
    }
}

/// Per-(seed, N, method) outcome digest.
#[derive(Debug, Clone)]
pub struct CellDigest {
    pub family: String,
    pub n: usize,
    pub seed: u64,
    pub method: String,
    /// (stage name, per-example losses); stages: initial, best, final, refined.
    pub stages: Vec<(String, Vec<f64>)>,
    pub curve: Vec<f64>,
    pub error: Option<String>,
}

impl CellDigest {
    pub fn stage(&self, name: &str) -> Option<&[f64]> {
        self.stages.iter().find(|(s, _)| s == name).map(|(_, l)| l.as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub cells: Vec<CellDigest>,
}

impl RunRecord {
    pub fn has_failures(&self) -> bool {
        self.cells.iter().any(|c| c.error.is_some())
    }
}

fn run_cell(config: &ExperimentConfig, n: usize, seed: u64, method: MethodKind) -> Result<CellDigest> {
    let family = Family::parse(&config.family)?;
    let set = generate(family, n, seed)?;
    let tcfg = config.train_config(family, seed);
    let result = run_method(&set, method, &tcfg)?;
    let initial = crate::methods::evaluate_losses(
        &set,
        &vec![crate::problems::neutral_start(family); n],
    )?;
    let mut stages = vec![
        ("initial".to_string(), initial),
        ("best".to_string(), result.best_loss.clone()),
        ("final".to_string(), result.final_loss.clone()),
    ];
    let mut curve = result.curve.clone();
    if config.refine && method != MethodKind::Bfgs && method != MethodKind::Gd {
        let refined = refine(&result, &set, &OptimizerConfig::default())?;
        let r = refined.refinement.as_ref().unwrap();
        stages.push(("refined".to_string(), r.losses.clone()));
        curve = refined.curve;
    }
    Ok(CellDigest {
        family: config.family.clone(),
        n,
        seed,
        method: method.tag().to_string(),
        stages,
        curve,
        error: None,
    })
}

/// Run the full (seed, N, method) grid. Partial failures are recorded per
/// cell; the sweep continues.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    let mut grid = Vec::new();
    for &seed in &config.seeds {
        for &n in &config.n_values {
            for m in &config.methods {
                grid.push((seed, n, MethodKind::parse(m)?));
            }
        }
    }
    let cells: Vec<CellDigest> = grid
        .par_iter()
        .map(|&(seed, n, method)| match run_cell(config, n, seed, method) {
            Ok(c) => c,
            Err(e) => CellDigest {
                family: config.family.clone(),
                n,
                seed,
                method: method.tag().to_string(),
                stages: Vec::new(),
                curve: Vec::new(),
                error: Some(e.to_string()),
            },
        })
        .collect();
    Ok(RunRecord { config: config.clone(), cells })
}

fn fmt_loss(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.17e}")
    }
}

/// Stage used when comparing a method against the BFGS baseline.
fn comparison_stage(record: &RunRecord) -> &'static str {
    if record.config.refine {
        "refined"
    } else {
        "best"
    }
}

pub fn metrics_csv(record: &RunRecord) -> String {
    let mut out = String::from("family,N,seed,method,stage,example_id,loss\n");
    let mut cells: Vec<&CellDigest> = record.cells.iter().collect();
    cells.sort_by_key(|c| (c.n, c.seed, c.method.clone()));
    for c in cells {
        for (stage, losses) in &c.stages {
            for (i, &l) in losses.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    c.family, c.n, c.seed, c.method, stage, i, fmt_loss(l)
                );
            }
        }
    }
    out
}

pub fn fractions_csv(record: &RunRecord) -> String {
    let mut out = String::from("family,N,method,f_mean,f_bar\n");
    let stage = comparison_stage(record);
    let mut methods: Vec<&String> =
        record.config.methods.iter().filter(|m| *m != "bfgs").collect();
    methods.sort();
    let mut ns = record.config.n_values.clone();
    ns.sort_unstable();
    for &n in &ns {
        for method in &methods {
            let mut fs = Vec::new();
            for &seed in &record.config.seeds {
                let find = |name: &str, st: &str| -> Option<Vec<f64>> {
                    record
                        .cells
                        .iter()
                        .find(|c| c.n == n && c.seed == seed && c.method == name)
                        .and_then(|c| c.stage(st).map(<[f64]>::to_vec))
                };
                let base = find("bfgs", "final");
                let meth = find(method, stage).or_else(|| find(method, "best"));
                if let (Some(b), Some(m)) = (base, meth) {
                    if let Ok(f) = fraction_better(&m, &b, EQUALITY_REL_TOL) {
                        fs.push(f);
                    }
                }
            }
            if !fs.is_empty() {
                let (mean, bar) = errorbar(&fs, n);
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    record.config.family,
                    n,
                    method,
                    fmt_loss(mean),
                    fmt_loss(bar)
                );
            }
        }
    }
    out
}

pub fn curves_csv(record: &RunRecord) -> String {
    let mut out = String::from("family,N,seed,method,iteration,mean_loss\n");
    let mut cells: Vec<&CellDigest> = record.cells.iter().collect();
    cells.sort_by_key(|c| (c.n, c.seed, c.method.clone()));
    for c in cells {
        for (t, &l) in c.curve.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.family, c.n, c.seed, c.method, t, fmt_loss(l)
            );
        }
    }
    out
}

/// Write all CSV artifacts into the record's output directory.
pub fn write_outputs(record: &RunRecord) -> Result<PathBuf> {
    let dir = PathBuf::from(&record.config.output_dir);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(record))?;
    fs::write(dir.join("fractions.csv"), fractions_csv(record))?;
    fs::write(dir.join("curves.csv"), curves_csv(record))?;
    Ok(dir)
}

/// Recompute fractions from an emitted metrics.csv (audit path for the
/// `report` subcommand). Returns the recomputed fractions.csv content.
pub fn report_from_metrics(run_dir: &Path, refined: bool) -> Result<String> {
    let text = fs::read_to_string(run_dir.join("metrics.csv"))?;
    // (family, n, seed, method, stage) -> losses by example id
    let mut table: std::collections::BTreeMap<(String, usize, u64, String, String), Vec<f64>> =
        std::collections::BTreeMap::new();
    for line in text.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(JpoError::Container(format!("bad metrics row: {line}")));
        }
        let key = (
            parts[0].to_string(),
            parts[1].parse::<usize>().map_err(|e| JpoError::Container(e.to_string()))?,
            parts[2].parse::<u64>().map_err(|e| JpoError::Container(e.to_string()))?,
            parts[3].to_string(),
            parts[4].to_string(),
        );
        let loss = if parts[6] == "nan" {
            f64::NAN
        } else {
            parts[6].parse::<f64>().map_err(|e| JpoError::Container(e.to_string()))?
        };
        table.entry(key).or_default().push(loss);
    }
    let stage = if refined { "refined" } else { "best" };
    let mut rows: std::collections::BTreeMap<(String, usize, String), Vec<f64>> =
        std::collections::BTreeMap::new();
    let keys: Vec<_> = table.keys().cloned().collect();
    for (family, n, seed, method, st) in keys {
        if method == "bfgs" || (st != stage && !(st == "best" && stage == "refined")) {
            continue;
        }
        // prefer the refined stage when present, fall back to best
        if st == "best"
            && stage == "refined"
            && table.contains_key(&(
                family.clone(),
                n,
                seed,
                method.clone(),
                "refined".to_string(),
            ))
        {
            continue;
        }
        let base = table.get(&(family.clone(), n, seed, "bfgs".to_string(), "final".to_string()));
        let meth = table.get(&(family.clone(), n, seed, method.clone(), st.clone()));
        if let (Some(b), Some(m)) = (base, meth) {
            let f = fraction_better(m, b, EQUALITY_REL_TOL)?;
            rows.entry((family, n, method)).or_default().push(f);
        }
    }
    let mut out = String::from("family,N,method,f_mean,f_bar\n");
    let mut sorted: Vec<_> = rows.into_iter().collect();
    sorted.sort_by(|a, b| (a.0 .1, &a.0 .2).cmp(&(b.0 .1, &b.0 .2)));
    for ((family, n, method), fs) in sorted {
        let (mean, bar) = errorbar(&fs, n);
        let _ = writeln!(out, "{family},{n},{method},{},{}", fmt_loss(mean), fmt_loss(bar));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_better_arithmetic() {
        assert_eq!(fraction_better(&[1.0, 1.0], &[2.0, 3.0], 1e-9).unwrap(), 1.0);
        assert_eq!(fraction_better(&[1.0, 2.0], &[1.0, 2.0], 1e-9).unwrap(), 0.5);
        // 3 better, 2 equal, 5 worse out of 10
        let m = [1.0, 1.0, 1.0, 5.0, 5.0, 9.0, 9.0, 9.0, 9.0, 9.0];
        let b = [2.0, 2.0, 2.0, 5.0, 5.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(fraction_better(&m, &b, 1e-9).unwrap(), 0.4);
    }

    #[test]
    fn fraction_better_nan_is_a_loss() {
        assert_eq!(fraction_better(&[f64::NAN], &[1.0], 1e-9).unwrap(), 0.0);
        assert_eq!(fraction_better(&[1.0], &[f64::NAN], 1e-9).unwrap(), 1.0);
    }

    #[test]
    fn errorbar_formula_verbatim() {
        let (mean, bar) = errorbar(&[0.5, 0.7], 10);
        assert!((mean - 0.6).abs() < 1e-15);
        assert!((bar - 0.02f64.sqrt() / 10.0).abs() < 1e-15);
        let (_, zero) = errorbar(&[0.4], 10);
        assert_eq!(zero, 0.0);
        let (_, same) = errorbar(&[0.3, 0.3, 0.3], 5);
        assert_eq!(same, 0.0);
    }

    #[test]
    fn improvement_split_extremes() {
        let s = improvement_split(&[1.0, 1.0], &[0.1, 0.2], &[0.1, 0.2]).unwrap();
        assert_eq!(s.fraction, 1.0); // refinement no-op
        let s = improvement_split(&[1.0], &[1.0], &[0.0]).unwrap();
        assert_eq!(s.fraction, 0.0); // network no-op
        let s = improvement_split(&[1.0], &[1.0], &[1.0]);
        assert!(s.is_err()); // nothing improved at all -> excluded
    }

    #[test]
    fn config_parses_and_validates() {
        let cfg = ExperimentConfig::from_toml(
            r#"
schema_version = 1
family = "arm"
n_values = [4]
seeds = [0]
methods = ["jpo", "bfgs"]
output_dir = "/tmp/x"
refine = true

[train]
iterations = 50
"#,
        )
        .unwrap();
        assert_eq!(cfg.train.iterations, Some(50));
        assert!(ExperimentConfig::from_toml("schema_version = 2\nfamily = \"arm\"\nn_values = [1]\nseeds = [0]\nmethods = [\"bfgs\"]\noutput_dir = \"x\"").is_err());
    }

    #[test]
    fn small_sweep_is_deterministic() {
        let cfg = ExperimentConfig {
            schema_version: 1,
            family: "arm".into(),
            n_values: vec![4],
            seeds: vec![0, 1],
            methods: vec!["bfgs".into(), "gd".into()],
            output_dir: String::new(),
            refine: false,
            train: TrainOverrides::default(),
        };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(metrics_csv(&a), metrics_csv(&b));
        assert_eq!(fractions_csv(&a), fractions_csv(&b));
        assert_eq!(curves_csv(&a), curves_csv(&b));
        assert!(!a.has_failures());
    }
}
