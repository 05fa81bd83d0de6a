//! Environment generators for the two linear structural equation models:
//! the two-variable regression example and the confounded chain
//! `H → Z₁ → Y → Z₂` with optional scrambling of the observations.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{self, gaussian_matrix, random_orthogonal, LinalgError, Matrix, Rng};

/// Upper end of the noise-variance range an environment may use.
pub const DEFAULT_SIGMA_SQ_MAX: f64 = 100.0;

pub const DEFAULT_CHAIN_DIM: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemError {
    #[error("UnknownSetup: {0:?} (expected three letters from {{F,P}}{{O,E}}{{U,S}})")]
    UnknownSetup(String),
    #[error("invalid environment: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Samples from one environment. `latent` and `noise` are diagnostics for
/// tests and are never read by learners.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub env: String,
    pub latent: Option<Matrix>,
    pub noise: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<f64>, env: impl Into<String>) -> Result<Self, SemError> {
        if x.rows() != y.len() {
            return Err(SemError::InvalidSpec(format!("{} rows but {} targets", x.rows(), y.len())));
        }
        Ok(Self { x, y, env: env.into(), latent: None, noise: None })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn moments(&self) -> Moments {
        Moments::from_samples(&self.x, &self.y)
    }

    /// Rows at `idx`, in order. Diagnostics are carried along.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            env: self.env.clone(),
            latent: self.latent.as_ref().map(|z| z.select_rows(idx)),
            noise: self.noise.as_ref().map(|e| idx.iter().map(|&i| e[i]).collect()),
        }
    }

    /// Concatenates environments into one pooled sample.
    pub fn pool(envs: &[Dataset]) -> Result<Dataset, SemError> {
        let xs: Vec<&Matrix> = envs.iter().map(|e| &e.x).collect();
        let x = Matrix::vstack(&xs)?;
        let y = envs.iter().flat_map(|e| e.y.iter().copied()).collect();
        let name = envs.iter().map(|e| e.env.as_str()).collect::<Vec<_>>().join("+");
        Dataset::new(x, y, name)
    }

    /// CSV with header `x0..x{d-1},y,env`.
    pub fn write_csv<W: Write>(&self, mut out: W, with_header: bool) -> std::io::Result<()> {
        if with_header {
            let cols: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
            writeln!(out, "{},y,env", cols.join(","))?;
        }
        for i in 0..self.len() {
            let row: Vec<String> = self.x.row(i).iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{},{},{}", row.join(","), self.y[i], self.env)?;
        }
        Ok(())
    }
}

/// Second moments `E[xxᵀ]`, `E[xy]`, `E[y²]` of one environment, either
/// estimated from samples or known in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub sxx: Matrix,
    pub sxy: Vec<f64>,
    pub syy: f64,
}

impl Moments {
    pub fn from_samples(x: &Matrix, y: &[f64]) -> Moments {
        let n = x.rows().max(1) as f64;
        let sxx = x.gram().scale(1.0 / n);
        let sxy = x.tr_matvec(y).expect("aligned rows").into_iter().map(|v| v / n).collect();
        let syy = y.iter().map(|v| v * v).sum::<f64>() / n;
        Moments { sxx, sxy, syy }
    }

    pub fn dim(&self) -> usize {
        self.sxy.len()
    }

    /// Squared-loss risk `E[(vᵀx − y)²]`.
    pub fn risk(&self, v: &[f64]) -> f64 {
        let sv = self.sxx.matvec(v).expect("dimension");
        numkit::dot(v, &sv) - 2.0 * numkit::dot(v, &self.sxy) + self.syy
    }

    /// `∇R(v) = 2Σv − 2ρ`.
    pub fn risk_gradient(&self, v: &[f64]) -> Vec<f64> {
        let sv = self.sxx.matvec(v).expect("dimension");
        sv.iter().zip(&self.sxy).map(|(a, b)| 2.0 * (a - b)).collect()
    }

    /// Least-squares coefficients for these moments.
    pub fn regression(&self, ridge: f64) -> Result<Vec<f64>, LinalgError> {
        numkit::solve_spd(&self.sxx.add_diagonal(ridge), &self.sxy)
    }

    /// Weighted average; pooling equal-size samples is the uniform mix.
    pub fn mix(parts: &[Moments], weights: &[f64]) -> Moments {
        let d = parts[0].dim();
        let total: f64 = weights.iter().sum();
        let mut sxx = Matrix::zeros(d, d);
        let mut sxy = vec![0.0; d];
        let mut syy = 0.0;
        for (m, &w) in parts.iter().zip(weights) {
            let w = w / total;
            sxx = sxx.add(&m.sxx.scale(w)).expect("shared dimension");
            numkit::axpy(w, &m.sxy, &mut sxy);
            syy += w * m.syy;
        }
        Moments { sxx, sxy, syy }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example1Spec {
    pub sigma_sq: f64,
    pub n: usize,
}

impl Example1Spec {
    pub fn new(sigma_sq: f64, n: usize) -> Result<Self, SemError> {
        Self::with_max(sigma_sq, n, DEFAULT_SIGMA_SQ_MAX)
    }

    pub fn with_max(sigma_sq: f64, n: usize, sigma_sq_max: f64) -> Result<Self, SemError> {
        if !(sigma_sq > 0.0 && sigma_sq <= sigma_sq_max) {
            return Err(SemError::InvalidSpec(format!(
                "sigma_sq = {sigma_sq} outside (0, {sigma_sq_max}]"
            )));
        }
        if n == 0 {
            return Err(SemError::InvalidSpec("n must be positive".into()));
        }
        Ok(Self { sigma_sq, n })
    }
}

/// Draws `X₁ ~ N(0,σ²)`, `Y = X₁ + N(0,σ²)`, `X₂ = Y + N(0,1)`.
///
/// The three standard-normal draws per row come in a fixed order and are
/// scaled afterwards, so two environments sharing a seed differ only by the
/// σ scaling of the noise paths.
pub fn sample_example1(spec: &Example1Spec, rng: &mut Rng) -> Dataset {
    let s = spec.sigma_sq.sqrt();
    let mut x = Matrix::zeros(spec.n, 2);
    let mut y = Vec::with_capacity(spec.n);
    let mut eps = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let x1 = s * rng.standard_normal();
        let e = s * rng.standard_normal();
        let yi = x1 + e;
        let x2 = yi + rng.standard_normal();
        x.set(i, 0, x1);
        x.set(i, 1, x2);
        y.push(yi);
        eps.push(e);
    }
    let mut ds = Dataset::new(x, y, format!("sigma_sq={}", spec.sigma_sq)).expect("aligned");
    ds.noise = Some(eps);
    ds
}

/// Population moments of the two-variable example at noise variance `σ²`.
pub fn example1_moments(sigma_sq: f64) -> Moments {
    let s = sigma_sq;
    Moments {
        sxx: Matrix::from_rows(&[[s, s], [s, 2.0 * s + 1.0]]).expect("2x2"),
        sxy: vec![s, 2.0 * s],
        syy: 2.0 * s,
    }
}

/// `E[X ε]` for the two-variable example with `ε = Y − X₁`.
pub fn example1_cross_noise(sigma_sq: f64) -> Vec<f64> {
    vec![0.0, sigma_sq]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regressors {
    X1Only,
    X2Only,
    Both,
}

/// Closed-form least-squares coefficients `(α̂₁, α̂₂)` of the example.
pub fn example1_population_coeffs(sigma_sq: f64, which: Regressors) -> Vec<f64> {
    assert!(sigma_sq > 0.0, "sigma_sq must be positive");
    match which {
        Regressors::X1Only => vec![1.0, 0.0],
        Regressors::X2Only => vec![0.0, sigma_sq / (sigma_sq + 0.5)],
        Regressors::Both => vec![1.0 / (sigma_sq + 1.0), sigma_sq / (sigma_sq + 1.0)],
    }
}

/// One of the eight chain-SEM variants, e.g. `"PES"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SetupCode {
    pub partially_observed: bool,
    pub heteroskedastic: bool,
    pub scrambled: bool,
}

impl SetupCode {
    pub fn all() -> Vec<SetupCode> {
        let mut out = Vec::with_capacity(8);
        for p in [false, true] {
            for h in [false, true] {
                for s in [false, true] {
                    out.push(SetupCode { partially_observed: p, heteroskedastic: h, scrambled: s });
                }
            }
        }
        out
    }
}

impl fmt::Display for SetupCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}{}",
            if self.partially_observed { 'P' } else { 'F' },
            if self.heteroskedastic { 'E' } else { 'O' },
            if self.scrambled { 'S' } else { 'U' }
        )
    }
}

impl FromStr for SetupCode {
    type Err = SemError;

    fn from_str(code: &str) -> Result<Self, Self::Err> {
        let b = code.as_bytes();
        let bad = || SemError::UnknownSetup(code.to_string());
        if b.len() != 3 {
            return Err(bad());
        }
        let partially_observed = match b[0] {
            b'F' => false,
            b'P' => true,
            _ => return Err(bad()),
        };
        let heteroskedastic = match b[1] {
            b'O' => false,
            b'E' => true,
            _ => return Err(bad()),
        };
        let scrambled = match b[2] {
            b'U' => false,
            b'S' => true,
            _ => return Err(bad()),
        };
        Ok(SetupCode { partially_observed, heteroskedastic, scrambled })
    }
}

/// Mechanism weights shared by every environment of one experiment.
///
/// All `W` act on row vectors (`Y = Z₁ W_{1→y} + …`). The scramble acts on
/// column vectors: `x = S z` with `z = (Z₁, Z₂)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainWeights {
    pub w_1y: Matrix,
    pub w_y2: Matrix,
    pub w_h1: Matrix,
    pub w_hy: Matrix,
    pub w_h2: Matrix,
    pub scramble: Matrix,
}

#[derive(Debug, Clone)]
pub struct ChainSemSpec {
    pub env_scale: f64,
    pub dim: usize,
    pub code: SetupCode,
    pub weights: Arc<ChainWeights>,
}

impl ChainSemSpec {
    /// Noise variances `(σ²_y, σ²₂)`.
    pub fn noise_variances(&self) -> (f64, f64) {
        let e2 = self.env_scale * self.env_scale;
        if self.code.heteroskedastic {
            (1.0, e2)
        } else {
            (e2, 1.0)
        }
    }
}

/// Weights drawn once for a setup plus a constructor for its environments.
#[derive(Debug, Clone)]
pub struct ChainSetup {
    pub code: SetupCode,
    pub dim: usize,
    pub weights: Arc<ChainWeights>,
}

impl ChainSetup {
    pub fn environment(&self, env_scale: f64) -> Result<ChainSemSpec, SemError> {
        if !(env_scale > 0.0 && env_scale.is_finite()) {
            return Err(SemError::InvalidSpec(format!("environment scale {env_scale}")));
        }
        Ok(ChainSemSpec { env_scale, dim: self.dim, code: self.code, weights: Arc::clone(&self.weights) })
    }

    /// Coefficients of the causal predictor on `Z₁`: row sums of `W_{1→y}`.
    pub fn causal_coefficients(&self) -> Vec<f64> {
        let w = &self.weights.w_1y;
        (0..w.rows()).map(|i| w.row(i).iter().sum()).collect()
    }

    /// The invariant predictor in observed coordinates, `S (γ, 0)`.
    pub fn invariant_predictor(&self) -> Vec<f64> {
        let mut m = self.causal_coefficients();
        m.extend(std::iter::repeat_n(0.0, self.dim));
        self.weights.scramble.matvec(&m).expect("dimension")
    }

    /// Splits a predictor on observed `x` into `(M̂₁, M̂₂)` on the latent
    /// blocks: `M = Sᵀ v`.
    pub fn descramble(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.weights.scramble.tr_matvec(v).expect("dimension");
        let (a, b) = m.split_at(self.dim);
        (a.to_vec(), b.to_vec())
    }
}

/// Builds the setup named by `code`. Weight scales: `W_{1→y}` and
/// `W_{y→2}` have `N(0, 1/dim)` entries, hidden weights (P variants) too.
pub fn make_setup(code: &str, dim: usize, seed: u64) -> Result<ChainSetup, SemError> {
    let code: SetupCode = code.parse()?;
    if dim == 0 {
        return Err(SemError::InvalidSpec("dim must be positive".into()));
    }
    let mut rng = Rng::stream(seed, &format!("chain-weights/{code}/{dim}"));
    let std = 1.0 / (dim as f64).sqrt();
    let w_1y = gaussian_matrix(dim, dim, 0.0, std, &mut rng);
    let w_y2 = gaussian_matrix(dim, dim, 0.0, std, &mut rng);
    let (w_h1, w_hy, w_h2) = if code.partially_observed {
        (
            gaussian_matrix(dim, dim, 0.0, std, &mut rng),
            gaussian_matrix(dim, dim, 0.0, std, &mut rng),
            gaussian_matrix(dim, dim, 0.0, std, &mut rng),
        )
    } else {
        (Matrix::zeros(dim, dim), Matrix::zeros(dim, dim), Matrix::zeros(dim, dim))
    };
    let scramble = if code.scrambled { random_orthogonal(2 * dim, &mut rng) } else { Matrix::identity(2 * dim) };
    Ok(ChainSetup { code, dim, weights: Arc::new(ChainWeights { w_1y, w_y2, w_h1, w_hy, w_h2, scramble }) })
}

/// Exact second moments of `(x, y)` for one chain-SEM environment.
///
/// Every observed quantity is a linear map of the independent noise blocks
/// `u = (H, N₁, N_y, N₂)`, so `z = u M` and `y = u m` give
/// `Σ_zz = Mᵀ Λ M`, `Σ_zy = Mᵀ Λ m` with `Λ` the block-diagonal noise variances.
pub fn chain_population_moments(spec: &ChainSemSpec) -> Moments {
    let k = spec.dim;
    let w = &spec.weights;
    let e2 = spec.env_scale * spec.env_scale;
    let (var_y, var_2) = spec.noise_variances();
    let ones = vec![1.0; k];
    // Y = H (A B + C) + N₁ B + N_y
    let h_to_y = w.w_h1.matmul(&w.w_1y).and_then(|m| m.add(&w.w_hy)).expect("dim");
    // Z₂ = Y D + N₂ + H E
    let h_to_z2 = h_to_y.matmul(&w.w_y2).and_then(|m| m.add(&w.w_h2)).expect("dim");
    let n1_to_z2 = w.w_1y.matmul(&w.w_y2).expect("dim");
    let zero = Matrix::zeros(k, k);
    let eye = Matrix::identity(k);
    let m = Matrix::vstack(&[
        &Matrix::hstack(&[&w.w_h1, &h_to_z2]).expect("rows"),
        &Matrix::hstack(&[&eye, &n1_to_z2]).expect("rows"),
        &Matrix::hstack(&[&zero, &w.w_y2]).expect("rows"),
        &Matrix::hstack(&[&zero, &eye]).expect("rows"),
    ])
    .expect("cols");
    let mut my = h_to_y.matvec(&ones).expect("dim");
    my.extend(w.w_1y.matvec(&ones).expect("dim"));
    my.extend(ones.iter().copied());
    my.extend(std::iter::repeat_n(0.0, k));
    let lambda: Vec<f64> = [e2, e2, var_y, var_2].iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();
    let scaled_m = Matrix::from_fn(4 * k, 2 * k, |i, j| lambda[i] * m.get(i, j));
    let szz = m.transpose().matmul(&scaled_m).expect("dim");
    let lm: Vec<f64> = my.iter().zip(&lambda).map(|(a, b)| a * b).collect();
    let szy = m.tr_matvec(&lm).expect("dim");
    let syy = numkit::dot(&my, &lm);
    let s = &w.scramble;
    let sxx = s.matmul(&szz).and_then(|t| t.matmul(&s.transpose())).expect("dim");
    let sxy = s.matvec(&szy).expect("dim");
    Moments { sxx, sxy, syy }
}

/// Draws `n` rows of the chain SEM. The target is the coordinate sum of the
/// `Y` block; `latent` holds `(Z₁, Z₂)` and `noise` holds `y − Z₁·γ`.
pub fn sample_chain_sem(spec: &ChainSemSpec, n: usize, rng: &mut Rng) -> Dataset {
    let dim = spec.dim;
    let w = &spec.weights;
    let e = spec.env_scale;
    let (var_y, var_2) = spec.noise_variances();
    let h = gaussian_matrix(n, dim, 0.0, e, rng);
    let z1 = gaussian_matrix(n, dim, 0.0, e, rng).add(&h.matmul(&w.w_h1).expect("dim")).expect("dim");
    let yb = z1
        .matmul(&w.w_1y)
        .and_then(|m| m.add(&gaussian_matrix(n, dim, 0.0, var_y.sqrt(), rng)))
        .and_then(|m| m.add(&h.matmul(&w.w_hy)?))
        .expect("dim");
    let z2 = yb
        .matmul(&w.w_y2)
        .and_then(|m| m.add(&gaussian_matrix(n, dim, 0.0, var_2.sqrt(), rng)))
        .and_then(|m| m.add(&h.matmul(&w.w_h2)?))
        .expect("dim");
    let z = Matrix::hstack(&[&z1, &z2]).expect("rows");
    // x = S z for each row, i.e. X = Z Sᵀ
    let x = if spec.code.scrambled { z.matmul(&w.scramble.transpose()).expect("dim") } else { z.clone() };
    let y: Vec<f64> = (0..n).map(|i| yb.row(i).iter().sum()).collect();
    let gamma: Vec<f64> = (0..dim).map(|i| w.w_1y.row(i).iter().sum()).collect();
    let noise = (0..n).map(|i| y[i] - numkit::dot(z1.row(i), &gamma)).collect();
    Dataset {
        x,
        y,
        env: format!("{}:e={}", spec.code, e),
        latent: Some(z),
        noise: Some(noise),
    }
}
