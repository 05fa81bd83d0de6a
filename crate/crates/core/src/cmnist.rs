//! Colored MNIST: IDX ingestion, environment construction, the
//! ERM / IRM / grayscale comparison and calibration tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::learners::{fit_mlp_data, mlp, EnvData, LearnError, MlpModel, MlpObjective, TrainConfig, TrainReport};
use crate::numkit::{Matrix, Rng};
use crate::sem::Dataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 14;
pub const PIXELS: usize = SIDE * SIDE;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Number of training images split between the two training environments.
pub const TRAIN_SUBSET: usize = 50_000;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("truncated IDX data: need {needed} bytes at offset {offset}, have {available}")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("bad IDX magic 0x{found:08x} at offset 0 (expected 0x{expected:08x})")]
    BadMagic { found: u32, expected: u32 },
    #[error("label {value} at offset {offset} is not a digit")]
    InvalidLabel { offset: usize, value: u8 },
    #[error("trailing {extra} bytes after offset {offset}")]
    Trailing { offset: usize, extra: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum CmnistError {
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(
        "MNIST file {file} not found in {dir}; set `mnist_dir` in the config or the IRM_MNIST_DIR environment variable \
         (the files ship in the npm package `mnist-data`: `npm pack mnist-data`)"
    )]
    MissingFile { dir: PathBuf, file: String },
    #[error("sha256 mismatch for {file}: expected {expected}, found {found}")]
    Checksum { file: String, expected: String, found: String },
    #[error("images and labels disagree: {images} images, {labels} labels")]
    Misaligned { images: usize, labels: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.rows * self.cols;
        &self.pixels[i * sz..(i + 1) * sz]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Idx {
    Images(IdxImages),
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    let b = bytes.get(offset..offset + 4).ok_or(IdxError::Truncated { offset, needed: 4, available: bytes.len().saturating_sub(offset) })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Decodes an unsigned-byte IDX file of rank 1 (labels) or 3 (images).
pub fn parse_idx(bytes: &[u8]) -> Result<Idx, IdxError> {
    let magic = be_u32(bytes, 0)?;
    let dims: Vec<usize> = match magic {
        IMAGES_MAGIC => (0..3).map(|k| be_u32(bytes, 4 + 4 * k).map(|v| v as usize)).collect::<Result<_, _>>()?,
        LABELS_MAGIC => vec![be_u32(bytes, 4)? as usize],
        found => return Err(IdxError::BadMagic { found, expected: IMAGES_MAGIC }),
    };
    let offset = 4 + 4 * dims.len();
    let len: usize = dims.iter().product();
    let available = bytes.len() - offset.min(bytes.len());
    if available < len {
        return Err(IdxError::Truncated { offset, needed: len, available });
    }
    if available > len {
        return Err(IdxError::Trailing { offset: offset + len, extra: available - len });
    }
    let payload = bytes[offset..offset + len].to_vec();
    if magic == LABELS_MAGIC {
        if let Some(pos) = payload.iter().position(|&v| v > 9) {
            return Err(IdxError::InvalidLabel { offset: offset + pos, value: payload[pos] });
        }
        Ok(Idx::Labels(payload))
    } else {
        Ok(Idx::Images(IdxImages { count: dims[0], rows: dims[1], cols: dims[2], pixels: payload }))
    }
}

pub fn write_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io { path: path.to_path_buf(), source })
}

pub fn read_images(path: &Path) -> Result<IdxImages, IdxError> {
    match parse_idx(&read(path)?)? {
        Idx::Images(im) => Ok(im),
        Idx::Labels(_) => Err(IdxError::BadMagic { found: LABELS_MAGIC, expected: IMAGES_MAGIC }),
    }
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>, IdxError> {
    match parse_idx(&read(path)?)? {
        Idx::Labels(l) => Ok(l),
        Idx::Images(_) => Err(IdxError::BadMagic { found: IMAGES_MAGIC, expected: LABELS_MAGIC }),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// The four canonical MNIST files.
#[derive(Debug, Clone)]
pub struct Mnist {
    pub train_images: IdxImages,
    pub train_labels: Vec<u8>,
    pub test_images: IdxImages,
    pub test_labels: Vec<u8>,
}

impl Mnist {
    /// Loads the canonical files from `dir`, checking any digests given in
    /// `sha256` (file name → lowercase hex).
    pub fn load(dir: &Path, sha256: &BTreeMap<String, String>) -> Result<Mnist, CmnistError> {
        let get = |file: &str| -> Result<Vec<u8>, CmnistError> {
            let path = dir.join(file);
            if !path.is_file() {
                return Err(CmnistError::MissingFile { dir: dir.to_path_buf(), file: file.to_string() });
            }
            let bytes = read(&path)?;
            if let Some(expected) = sha256.get(file) {
                let found = sha256_hex(&bytes);
                if !found.eq_ignore_ascii_case(expected) {
                    return Err(CmnistError::Checksum { file: file.to_string(), expected: expected.clone(), found });
                }
            }
            Ok(bytes)
        };
        let images = |b: Vec<u8>| match parse_idx(&b)? {
            Idx::Images(im) => Ok(im),
            Idx::Labels(_) => Err(IdxError::BadMagic { found: LABELS_MAGIC, expected: IMAGES_MAGIC }),
        };
        let labels = |b: Vec<u8>| match parse_idx(&b)? {
            Idx::Labels(l) => Ok(l),
            Idx::Images(_) => Err(IdxError::BadMagic { found: IMAGES_MAGIC, expected: LABELS_MAGIC }),
        };
        let m = Mnist {
            train_images: images(get(TRAIN_IMAGES)?)?,
            train_labels: labels(get(TRAIN_LABELS)?)?,
            test_images: images(get(TEST_IMAGES)?)?,
            test_labels: labels(get(TEST_LABELS)?)?,
        };
        for (im, lb) in [(&m.train_images, &m.train_labels), (&m.test_images, &m.test_labels)] {
            if im.count != lb.len() {
                return Err(CmnistError::Misaligned { images: im.count, labels: lb.len() });
            }
        }
        Ok(m)
    }
}

/// 2×2 mean pooling of a `rows×cols` byte image into `[0, 1]` values.
pub fn downsample(image: &[u8], rows: usize, cols: usize) -> Vec<f64> {
    let (r2, c2) = (rows / 2, cols / 2);
    let mut out = vec![0.0; r2 * c2];
    for i in 0..r2 {
        for j in 0..c2 {
            let s: u32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|&(a, b)| image[(2 * i + a) * cols + 2 * j + b] as u32)
                .sum();
            out[i * c2 + j] = s as f64 / (4.0 * 255.0);
        }
    }
    out
}

/// Environment with its generative metadata.
#[derive(Debug, Clone)]
pub struct ColoredDataset {
    pub data: Dataset,
    pub flip_prob: f64,
    pub digits: Vec<u8>,
    /// Label before noise: 1 for digits 5–9.
    pub y_tilde: Vec<u8>,
    /// Color id: 1 is red (channel 0), 0 is green (channel 1).
    pub color: Vec<u8>,
    /// Position of each row's image in its source split.
    pub source: Vec<usize>,
    pub channels: usize,
}

impl ColoredDataset {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.data.y.iter().map(|&y| y as u8).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorConfig {
    pub env_flip_probs: [f64; 3],
    pub label_noise: f64,
}

impl Default for ColorConfig {
    fn default() -> Self {
        Self { env_flip_probs: [0.2, 0.1, 0.9], label_noise: 0.25 }
    }
}

pub const ENV_NAMES: [&str; 3] = ["train_0", "train_1", "test"];

/// Image indices of each environment: the first 50,000 training images in
/// a seeded random order, alternately assigned to the two training
/// environments, then the whole test split.
fn environment_indices(n_train: usize, n_test: usize, seed: u64) -> [Vec<usize>; 3] {
    let m = n_train.min(TRAIN_SUBSET);
    let mut order: Vec<usize> = (0..m).collect();
    Rng::stream(seed, "cmnist/split").shuffle(&mut order);
    [order.iter().step_by(2).copied().collect(), order.iter().skip(1).step_by(2).copied().collect(), (0..n_test).collect()]
}

fn build(mnist: &Mnist, cfg: &ColorConfig, seed: u64, colored: bool) -> Vec<ColoredDataset> {
    let idx = environment_indices(mnist.train_images.count, mnist.test_images.count, seed);
    let channels = if colored { 2 } else { 1 };
    ENV_NAMES
        .iter()
        .enumerate()
        .map(|(e, name)| {
            let (images, labels) =
                if e < 2 { (&mnist.train_images, &mnist.train_labels) } else { (&mnist.test_images, &mnist.test_labels) };
            let p = cfg.env_flip_probs[e];
            // label and color draws come from one stream so the colored and
            // grayscale variants share labels
            let mut rng = Rng::stream(seed, &format!("cmnist/{name}"));
            let n = idx[e].len();
            let side = (images.rows / 2) * (images.cols / 2);
            let mut x = Vec::with_capacity(n * side * channels);
            let (mut y, mut digits, mut y_tilde, mut color) =
                (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for &i in &idx[e] {
                let digit = labels[i];
                let yt = u8::from(digit >= 5);
                let yy = yt ^ u8::from(rng.bernoulli(cfg.label_noise));
                let z = yy ^ u8::from(rng.bernoulli(p));
                let img = downsample(images.image(i), images.rows, images.cols);
                if colored {
                    let zeros = vec![0.0; side];
                    let (red, green) = if z == 1 { (&img, &zeros) } else { (&zeros, &img) };
                    x.extend_from_slice(red);
                    x.extend_from_slice(green);
                } else {
                    x.extend_from_slice(&img);
                }
                digits.push(digit);
                y_tilde.push(yt);
                y.push(yy as f64);
                color.push(z);
            }
            let x = Matrix::new(n, side * channels, x).expect("row-major image block");
            let data = Dataset::new(x, y, *name).expect("aligned");
            ColoredDataset { data, flip_prob: p, digits, y_tilde, color, source: idx[e].clone(), channels }
        })
        .collect()
}

/// The two training environments and the test environment.
pub fn build_colored_mnist(mnist: &Mnist, cfg: &ColorConfig, seed: u64) -> Vec<ColoredDataset> {
    build(mnist, cfg, seed, true)
}

/// Same environments and labels as [`build_colored_mnist`] for the same
/// seed, with a single grayscale channel.
pub fn grayscale_oracle(mnist: &Mnist, cfg: &ColorConfig, seed: u64) -> Vec<ColoredDataset> {
    build(mnist, cfg, seed, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub env: String,
    pub h: f64,
    pub p: f64,
    pub n: usize,
    pub low_support: bool,
}

pub const LOW_SUPPORT: usize = 10;

/// Empirical `P(y = 1 | h)` over equal-width bins of the logit `h`, shared
/// across environments. Only occupied bins are reported.
pub fn calibration_curve(model: &MlpModel, envs: &[(String, &EnvData<f32>)], bins: usize) -> Vec<CalibrationRow> {
    assert!(bins >= 2, "calibration needs at least two bins");
    let logits: Vec<Vec<f64>> = envs.iter().map(|(_, e)| model.logits(&e.x, e.n).iter().map(|&v| v as f64).collect()).collect();
    let lo = logits.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = logits.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut rows = Vec::new();
    for ((name, env), h) in envs.iter().zip(&logits) {
        let mut count = vec![0usize; bins];
        let mut pos = vec![0usize; bins];
        for (hv, &y) in h.iter().zip(&env.y) {
            let b = (((hv - lo) / width) as usize).min(bins - 1);
            count[b] += 1;
            if y > 0.5 {
                pos[b] += 1;
            }
        }
        for b in 0..bins {
            if count[b] == 0 {
                continue;
            }
            let center = if hi > lo { lo + (b as f64 + 0.5) * width } else { lo };
            rows.push(CalibrationRow {
                env: name.clone(),
                h: center,
                p: pos[b] as f64 / count[b] as f64,
                n: count[b],
                low_support: count[b] < LOW_SUPPORT,
            });
        }
    }
    rows
}

pub fn write_calibration_csv<W: Write>(rows: &[CalibrationRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "env,h,p,n,low_support")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.env, r.h, r.p, r.n, r.low_support)?;
    }
    Ok(())
}

/// Largest gap between two environments' `P(y=1|h)` over bins where both
/// have at least `min_count` samples. `None` when no bin qualifies.
pub fn max_calibration_gap(rows: &[CalibrationRow], a: &str, b: &str, min_count: usize) -> Option<f64> {
    let pick = |name: &str| -> BTreeMap<u64, (f64, usize)> {
        rows.iter().filter(|r| r.env == name).map(|r| (r.h.to_bits(), (r.p, r.n))).collect()
    };
    let (ra, rb) = (pick(a), pick(b));
    ra.iter()
        .filter_map(|(k, &(pa, na))| rb.get(k).filter(|&&(_, nb)| na >= min_count && nb >= min_count).map(|&(pb, _)| (pa - pb).abs()))
        .fold(None, |m, g| Some(m.map_or(g, |m: f64| m.max(g))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Erm,
    Irm,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Erm, Method::Irm, Method::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Irm => "irm",
            Method::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmnistConfig {
    pub runs: usize,
    pub seed: u64,
    #[serde(default)]
    pub colors: ColorConfig,
    /// Training schedule shared by all methods. ERM and the oracle ignore λ.
    pub train: TrainConfig,
    #[serde(default = "default_bins")]
    pub calibration_bins: usize,
}

fn default_bins() -> usize {
    20
}

impl Default for CmnistConfig {
    fn default() -> Self {
        Self { runs: 3, seed: 0, colors: ColorConfig::default(), train: TrainConfig::mlp(1e4), calibration_bins: default_bins() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub run: usize,
    pub seed: u64,
    /// Accuracy over the pooled training environments.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub env_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub train_mean: f64,
    pub train_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmnistResults {
    pub runs: Vec<RunResult>,
    pub summary: Vec<MethodSummary>,
    /// Calibration of the first run's model per method.
    pub calibration: BTreeMap<String, Vec<CalibrationRow>>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// One training run of `method` on prebuilt environments.
pub fn train_method(
    method: Method,
    envs: &[ColoredDataset],
    config: &TrainConfig,
) -> Result<(MlpModel, TrainReport, Vec<EnvData<f32>>), CmnistError> {
    let data: Vec<EnvData<f32>> = envs.iter().map(|e| EnvData::from_dataset(&e.data)).collect();
    let names: Vec<String> = envs[..2].iter().map(|e| e.data.env.clone()).collect();
    let objective = if method == Method::Irm { MlpObjective::Irm } else { MlpObjective::Erm };
    let dim = envs[0].data.dim();
    let (model, report) = fit_mlp_data(&data[..2], &names, dim, objective, config)?;
    Ok((model, report, data))
}

struct TaskOutput {
    result: RunResult,
    calibration: Option<Vec<CalibrationRow>>,
}

fn run_task(mnist: &Mnist, config: &CmnistConfig, run: usize, method: Method) -> Result<TaskOutput, CmnistError> {
    let seed = config.seed.wrapping_add(run as u64);
    let envs = if method == Method::Oracle {
        grayscale_oracle(mnist, &config.colors, seed)
    } else {
        build_colored_mnist(mnist, &config.colors, seed)
    };
    let train = TrainConfig { seed, ..config.train.clone() };
    let (model, _, data) = train_method(method, &envs, &train)?;
    let env_accuracies: Vec<f64> = data.iter().map(|e| mlp::accuracy(&model, e)).collect();
    let (n0, n1) = (data[0].n as f64, data[1].n as f64);
    let result = RunResult {
        method,
        run,
        seed,
        train_accuracy: (env_accuracies[0] * n0 + env_accuracies[1] * n1) / (n0 + n1),
        test_accuracy: env_accuracies[2],
        env_accuracies,
    };
    let calibration = (run == 0).then(|| {
        let named: Vec<(String, &EnvData<f32>)> = ENV_NAMES.iter().map(|s| s.to_string()).zip(data.iter()).collect();
        calibration_curve(&model, &named, config.calibration_bins)
    });
    Ok(TaskOutput { result, calibration })
}

/// The full comparison, spread over `jobs` threads. Results do not depend
/// on `jobs`. `progress` sees each training as it finishes.
pub fn run_experiment(
    mnist: &Mnist,
    config: &CmnistConfig,
    jobs: usize,
    progress: &(dyn Fn(&RunResult) + Sync),
) -> Result<CmnistResults, CmnistError> {
    if config.runs == 0 {
        return Err(CmnistError::Config("runs must be positive".into()));
    }
    if config.calibration_bins < 2 {
        return Err(CmnistError::Config("calibration_bins must be at least 2".into()));
    }
    config.train.validate()?;
    let tasks: Vec<(usize, Method)> = (0..config.runs).flat_map(|r| Method::ALL.map(|m| (r, m))).collect();
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<TaskOutput, CmnistError>>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(run, method)) = tasks.get(i) else { break };
                let out = run_task(mnist, config, run, method);
                if let Ok(o) = &out {
                    progress(&o.result);
                }
                *slots[i].lock().expect("unpoisoned") = Some(out);
            });
        }
    });
    let mut runs = Vec::with_capacity(tasks.len());
    let mut calibration = BTreeMap::new();
    for slot in slots {
        let out = slot.into_inner().expect("unpoisoned").expect("every task ran")?;
        if let Some(rows) = out.calibration {
            calibration.insert(out.result.method.name().to_string(), rows);
        }
        runs.push(out.result);
    }
    let summary = Method::ALL
        .iter()
        .map(|&method| {
            let tr: Vec<f64> = runs.iter().filter(|r| r.method == method).map(|r| r.train_accuracy).collect();
            let te: Vec<f64> = runs.iter().filter(|r| r.method == method).map(|r| r.test_accuracy).collect();
            let (train_mean, train_std) = mean_std(&tr);
            let (test_mean, test_std) = mean_std(&te);
            MethodSummary { method, train_mean, train_std, test_mean, test_std }
        })
        .collect();
    Ok(CmnistResults { runs, summary, calibration })
}

impl CmnistResults {
    pub fn summary_for(&self, method: Method) -> &MethodSummary {
        self.summary.iter().find(|s| s.method == method).expect("every method is summarized")
    }

    /// Columns `method,train_mean,train_std,test_mean,test_std`, in percent.
    pub fn write_table_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "method,train_mean,train_std,test_mean,test_std")?;
        for s in &self.summary {
            writeln!(
                out,
                "{},{:.2},{:.2},{:.2},{:.2}",
                s.method.name(),
                100.0 * s.train_mean,
                100.0 * s.train_std,
                100.0 * s.test_mean,
                100.0 * s.test_std
            )?;
        }
        Ok(())
    }

    pub fn write_runs_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "method,run,seed,train_accuracy,test_accuracy")?;
        for r in &self.runs {
            writeln!(out, "{},{},{},{},{}", r.method.name(), r.run, r.seed, r.train_accuracy, r.test_accuracy)?;
        }
        Ok(())
    }
}
