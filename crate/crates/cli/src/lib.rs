//! Experiment runners behind the `irm` binary. Each runner turns a
//! validated config into named output files; [`write_run`] stores them
//! atomically together with a manifest.

pub mod config;
pub mod synthetic;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use irm_core::baselines::icp_search;
use irm_core::cmnist::{self, write_calibration_csv, CmnistError, Mnist};
use irm_core::invariance::{landscape_sweep, write_landscape_csv, Variant};
use irm_core::numkit::Rng;
use irm_core::sem::{make_setup, sample_chain_sem, Dataset};
use irm_core::theory::run_suite;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use config::{CmnistRunConfig, IcpConfig, LandscapeConfig, TheoryConfig};
pub use synthetic::run_synthetic;

pub const MNIST_ENV: &str = "IRM_MNIST_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Cmnist(#[from] CmnistError),
    #[error("{0}")]
    Run(String),
}

/// Files produced by one subcommand, in write order.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub files: Vec<(String, Vec<u8>)>,
    /// Short machine-readable outcome copied into the manifest.
    pub summary: Value,
}

impl RunOutput {
    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    fn push(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Applies `f` to every item on up to `jobs` threads and returns results
/// in input order.
pub fn parallel_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                *slots[i].lock().expect("unpoisoned") = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().expect("unpoisoned").expect("every item ran")).collect()
}

pub fn run_landscape(config: &LandscapeConfig) -> Result<RunOutput, CliError> {
    let grid = config.grid();
    let mut rows = Vec::with_capacity(3 * grid.len());
    for v in Variant::ALL {
        rows.extend(landscape_sweep(config.sigma_sq, &grid, v, config.ridge).map_err(|e| CliError::Run(e.to_string()))?);
    }
    let mut out = RunOutput { summary: json!({ "rows": rows.len() }), ..Default::default() };
    out.push("landscape.csv", csv_bytes(|b| write_landscape_csv(&rows, b)));
    Ok(out)
}

/// Resolves the MNIST directory: config first, then `IRM_MNIST_DIR`.
pub fn mnist_dir(config: &CmnistRunConfig) -> Result<PathBuf, CliError> {
    config
        .mnist_dir
        .clone()
        .or_else(|| std::env::var_os(MNIST_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            CliError::Config(format!(
                "no MNIST location: set `mnist_dir` in the config or the {MNIST_ENV} environment variable \
                 (fetch the files with `npm pack mnist-data`)"
            ))
        })
}

pub fn run_cmnist(config: &CmnistRunConfig, jobs: usize) -> Result<RunOutput, CliError> {
    let dir = mnist_dir(config)?;
    let mnist = Mnist::load(&dir, &config.sha256)?;
    let progress = |r: &cmnist::RunResult| {
        eprintln!(
            "cmnist run {} {}: train {:.1}% test {:.1}%",
            r.run,
            r.method.name(),
            100.0 * r.train_accuracy,
            100.0 * r.test_accuracy
        );
    };
    let results = cmnist::run_experiment(&mnist, &config.core(), jobs, &progress)?;
    let mut out = RunOutput { summary: serde_json::to_value(&results.summary).expect("serializable"), ..Default::default() };
    out.push("cmnist_table.csv", csv_bytes(|b| results.write_table_csv(b)));
    out.push("cmnist_runs.csv", csv_bytes(|b| results.write_runs_csv(b)));
    for (method, rows) in &results.calibration {
        out.push(&format!("calibration_{method}.csv"), csv_bytes(|b| write_calibration_csv(rows, b)));
    }
    out.push("cmnist.json", json_bytes(&results));
    Ok(out)
}

pub fn run_theory(config: &TheoryConfig) -> Result<RunOutput, CliError> {
    let report = run_suite(config).map_err(|e| CliError::Run(e.to_string()))?;
    let mut out = RunOutput {
        summary: json!({
            "all_pass": report.all_pass(),
            "checks": report.checks.iter().map(|c| json!({ "name": c.name, "pass": c.pass })).collect::<Vec<_>>(),
        }),
        ..Default::default()
    };
    let mut csv = String::from("check,pass,detail\n");
    for c in &report.checks {
        let _ = writeln!(csv, "{},{},\"{}\"", c.name, c.pass, c.detail.replace('"', "'"));
    }
    out.push("theory_report.csv", csv.into_bytes());
    out.push("theory_report.json", json_bytes(&report));
    out.push("ellipsoids.csv", csv_bytes(|b| report.manifold.write_csv(b)));
    Ok(out)
}

pub fn icp_environments(config: &IcpConfig) -> Result<Vec<Dataset>, CliError> {
    let setup = make_setup(&config.setup, config.dim, config.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let mut rng = Rng::stream(config.seed, &format!("icp/{}", config.setup));
    config
        .envs
        .iter()
        .map(|&e| {
            let spec = setup.environment(e).map_err(|err| CliError::Config(err.to_string()))?;
            let mut d = sample_chain_sem(&spec, config.n_per_env, &mut rng);
            d.env = format!("e={e}");
            Ok(d)
        })
        .collect()
}

pub fn run_icp(config: &IcpConfig) -> Result<RunOutput, CliError> {
    let envs = icp_environments(config)?;
    let res = icp_search(&envs, config.alpha, config.max_dim).map_err(|e| CliError::Run(e.to_string()))?;
    let mut csv = String::from("subset,p_value,accepted\n");
    for t in &res.tested {
        let subset: Vec<String> = t.subset.iter().map(ToString::to_string).collect();
        let _ = writeln!(csv, "{},{},{}", subset.join(" "), t.p_value, t.p_value > res.alpha);
    }
    let mut out = RunOutput {
        summary: json!({ "intersection": res.intersection, "accepted": res.accepted_subsets.len() }),
        ..Default::default()
    };
    out.push("icp_subsets.csv", csv.into_bytes());
    out.push("icp.json", json_bytes(&res));
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: Value,
    pub files: Vec<String>,
    pub summary: Value,
    pub wall_time_seconds: f64,
}

impl Manifest {
    pub fn new<C: Serialize>(subcommand: &str, seed: u64, config: &C, output: &RunOutput, wall: Duration) -> Self {
        let config = serde_json::to_value(config).expect("serializable");
        Manifest {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_sha256: cmnist::sha256_hex(config.to_string().as_bytes()),
            config,
            files: output.files.iter().map(|(n, _)| n.clone()).collect(),
            summary: output.summary.clone(),
            wall_time_seconds: wall.as_secs_f64(),
        }
    }
}

/// Writes `bytes` next to `path` under a temporary name, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io { path: path.to_path_buf(), source };
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn write_run(dir: &Path, output: &RunOutput, manifest: &Manifest) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
    for (name, bytes) in &output.files {
        write_atomic(&dir.join(name), bytes)?;
    }
    write_atomic(&dir.join("manifest.json"), &json_bytes(manifest))
}
