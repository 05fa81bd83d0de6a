//! Empirical risk minimization, robust minimax, and the penalized
//! invariance objective with a fixed scalar classifier, for linear
//! predictors and a small rectifier network.

pub mod mlp;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::invariance::{Loss, Representation};
use crate::numkit::{self, LinalgError, Matrix, Rng};
use crate::sem::{Dataset, Moments};

pub use mlp::{EnvData, Mlp, MlpModel, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnError {
    #[error("non-finite objective at step {step}")]
    NonFinite { step: usize },
    #[error("robust objective diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("every grid point failed: {0}")]
    AllFailed(String),
}

pub type Result<T> = std::result::Result<T, LearnError>;

/// A linear predictor `x ↦ vᵀx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub v: Vec<f64>,
}

impl LinearModel {
    pub fn new(v: Vec<f64>) -> Self {
        Self { v }
    }

    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        x.matvec(&self.v).expect("input dimension")
    }

    /// Mean squared error on a sample.
    pub fn risk(&self, data: &Dataset) -> f64 {
        let pred = self.predict(&data.x);
        pred.iter().zip(&data.y).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / data.len().max(1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().all(|x| x.is_finite())
    }
}

impl Representation for LinearModel {
    fn outputs(&self, x: &Matrix) -> Matrix {
        Matrix::new(x.rows(), 1, self.predict(x)).expect("shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    Full,
    /// Two disjoint batches of this size per environment and step.
    Minibatch(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lambda_warmup_steps: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch: BatchMode,
    pub seed: u64,
    /// Width of both hidden layers; ignored by linear learners.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_hidden() -> usize {
    256
}

impl TrainConfig {
    /// Linear invariance training: 5·10⁴ full-batch adaptive-moment steps.
    pub fn linear(lambda: f64) -> Self {
        Self {
            lambda,
            lambda_warmup_steps: 0,
            steps: 50_000,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch: BatchMode::Full,
            seed: 0,
            hidden: default_hidden(),
        }
    }

    /// Network training on the colored digits.
    pub fn mlp(lambda: f64) -> Self {
        Self {
            lambda,
            lambda_warmup_steps: 100,
            steps: 500,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            batch: BatchMode::Full,
            seed: 0,
            hidden: default_hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LearnError::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite non-negative number");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch == BatchMode::Minibatch(0) {
            return bad("minibatch size must be at least 1");
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1");
        }
        Ok(())
    }

    /// Penalty weight in force at `step`: the full λ after the warm-up, at
    /// most 1 before it, and 0 throughout when λ = 0.
    pub fn penalty_weight(&self, step: usize) -> f64 {
        if step < self.lambda_warmup_steps {
            self.lambda.min(1.0)
        } else {
            self.lambda
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub penalty_weight: f64,
    pub loss: f64,
    pub risk: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSnapshot {
    Linear(LinearModel),
    Mlp(MlpModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: Objective,
    pub env_names: Vec<String>,
    pub env_risks: Vec<f64>,
    pub env_penalties: Vec<f64>,
    pub env_accuracies: Option<Vec<f64>>,
    /// One record per optimizer step, summed over environments.
    pub trajectory: Vec<StepRecord>,
    pub model: ModelSnapshot,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Final per-environment metrics.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "env,risk,penalty,accuracy")?;
        for (i, name) in self.env_names.iter().enumerate() {
            let acc = self.env_accuracies.as_ref().map(|a| a[i].to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", name, self.env_risks[i], self.env_penalties[i], acc)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Erm,
    Irm,
    Robust,
}

/// Adaptive moment estimation with coupled state, as used for every
/// iterative learner here.
pub(crate) struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    lr: f64,
}

impl<T: Scalar> Adam<T> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub(crate) fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0, lr }
    }

    pub(crate) fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut T>, grad: impl Iterator<Item = &'a T>) {
        self.t += 1;
        let b1 = T::of(Self::BETA1);
        let b2 = T::of(Self::BETA2);
        let c1 = T::of(1.0 - Self::BETA1.powi(self.t));
        let c2 = T::of(1.0 - Self::BETA2.powi(self.t));
        let lr = T::of(self.lr);
        let eps = T::of(Self::EPS);
        for (((p, &g), m), v) in params.zip(grad).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p = *p - lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

fn same_dim(envs: &[Dataset]) -> Result<usize> {
    let first = envs.first().ok_or_else(|| LearnError::InvalidConfig("no environments".into()))?;
    if envs.iter().any(|e| e.dim() != first.dim()) {
        return Err(LearnError::InvalidConfig("environments disagree on dimension".into()));
    }
    Ok(first.dim())
}

/// Least squares on the pooled sample.
pub fn fit_erm_linear(envs: &[Dataset], ridge: f64) -> Result<LinearModel> {
    same_dim(envs)?;
    let moments: Vec<Moments> = envs.iter().map(Dataset::moments).collect();
    let sizes: Vec<f64> = envs.iter().map(|e| e.len() as f64).collect();
    fit_erm_moments(&moments, &sizes, ridge)
}

/// Least squares for a mixture of environments with the given weights.
pub fn fit_erm_moments(moments: &[Moments], weights: &[f64], ridge: f64) -> Result<LinearModel> {
    Ok(LinearModel::new(Moments::mix(moments, weights).regression(ridge)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    pub steps: usize,
    /// Initial trial step of the backtracking line search.
    pub learning_rate: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub stages: usize,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self { steps: 20_000, learning_rate: 1.0, tau_start: 1.0, tau_end: 0.01, stages: 7 }
    }
}

/// `τ·log Σ_e exp((R^e(v) − r_e)/τ)` with its gradient and softmax weights.
fn smoothed_max(moments: &[Moments], baselines: &[f64], v: &[f64], tau: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let shifted: Vec<f64> = moments.iter().zip(baselines).map(|(m, r)| m.risk(v) - r).collect();
    let top = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = shifted.iter().map(|s| ((s - top) / tau).exp()).collect();
    let z: f64 = ex.iter().sum();
    let weights: Vec<f64> = ex.iter().map(|e| e / z).collect();
    let mut grad = vec![0.0; v.len()];
    for (m, &w) in moments.iter().zip(&weights) {
        numkit::axpy(w, &m.risk_gradient(v), &mut grad);
    }
    (top + tau * z.ln(), grad, weights)
}

/// Minimizes `max_e R^e(v) − r_e` through a log-sum-exp surrogate whose
/// temperature decays geometrically, by gradient descent with Armijo
/// backtracking. Starts from the pooled least-squares solution.
pub fn fit_robust_moments(moments: &[Moments], baselines: &[f64], config: &RobustConfig) -> Result<LinearModel> {
    if moments.is_empty() || moments.len() != baselines.len() {
        return Err(LearnError::InvalidConfig("one baseline per environment required".into()));
    }
    if baselines.iter().any(|b| !b.is_finite()) {
        return Err(LearnError::InvalidConfig("baselines must be finite".into()));
    }
    let d = moments[0].dim();
    let mut v = Moments::mix(moments, &vec![1.0; moments.len()]).regression(1e-12).unwrap_or_else(|_| vec![0.0; d]);
    let stages = config.stages.max(1);
    let per_stage = (config.steps / stages).max(1);
    let mut step = 0;
    for s in 0..stages {
        let frac = if stages == 1 { 1.0 } else { s as f64 / (stages - 1) as f64 };
        let tau = config.tau_start * (config.tau_end / config.tau_start).powf(frac);
        let mut lr = config.learning_rate;
        let (mut f, mut g, _) = smoothed_max(moments, baselines, &v, tau);
        for _ in 0..per_stage {
            step += 1;
            let gg = numkit::dot(&g, &g);
            if gg.sqrt() <= 1e-13 * (1.0 + f.abs()) {
                break;
            }
            loop {
                let trial: Vec<f64> = v.iter().zip(&g).map(|(a, b)| a - lr * b).collect();
                let (ft, gt, _) = smoothed_max(moments, baselines, &trial, tau);
                if !ft.is_finite() {
                    return Err(LearnError::Diverged { step });
                }
                if ft <= f - 0.5 * lr * gg {
                    v = trial;
                    f = ft;
                    g = gt;
                    lr *= 2.0;
                    break;
                }
                lr *= 0.5;
                if lr < 1e-300 {
                    break;
                }
            }
            if lr < 1e-300 {
                break;
            }
        }
    }
    let model = LinearModel::new(v);
    if !model.is_finite() {
        return Err(LearnError::Diverged { step });
    }
    Ok(model)
}

pub fn fit_robust_linear(envs: &[Dataset], baselines: &[f64], steps: usize, lr: f64) -> Result<LinearModel> {
    same_dim(envs)?;
    let moments: Vec<Moments> = envs.iter().map(Dataset::moments).collect();
    fit_robust_moments(&moments, baselines, &RobustConfig { steps, learning_rate: lr, ..RobustConfig::default() })
}

/// Value and gradient in `v` of
/// `(Σ_e R^e(v) + μ·Σ_e (2(vᵀΣ_e v − vᵀρ_e))² + wd·‖v‖²) / max(1, μ)`.
pub fn irm_linear_objective(v: &[f64], moments: &[Moments], penalty_weight: f64, weight_decay: f64) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / penalty_weight.max(1.0);
    let mut grad = vec![0.0; v.len()];
    let mut risks = Vec::with_capacity(moments.len());
    let mut penalties = Vec::with_capacity(moments.len());
    for m in moments {
        let sv = m.sxx.matvec(v).expect("dimension");
        let vsv = numkit::dot(v, &sv);
        let vr = numkit::dot(v, &m.sxy);
        let g = 2.0 * (vsv - vr);
        risks.push(vsv - 2.0 * vr + m.syy);
        penalties.push(g * g);
        for k in 0..v.len() {
            let d_risk = 2.0 * (sv[k] - m.sxy[k]);
            let d_g = 2.0 * (2.0 * sv[k] - m.sxy[k]);
            grad[k] += scale * (d_risk + penalty_weight * 2.0 * g * d_g);
        }
    }
    let mut total = risks.iter().sum::<f64>() + penalty_weight * penalties.iter().sum::<f64>();
    if weight_decay > 0.0 {
        total += weight_decay * numkit::dot(v, v);
        numkit::axpy(2.0 * weight_decay * scale, v, &mut grad);
    }
    (total * scale, grad, risks, penalties)
}

/// Minibatch version: risk from the union of two disjoint batches, penalty
/// from the product of their dummy gradients.
fn irm_linear_minibatch_objective(v: &[f64], batches: &[(Moments, Moments)], penalty_weight: f64, weight_decay: f64) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / penalty_weight.max(1.0);
    let mut grad = vec![0.0; v.len()];
    let mut risks = Vec::new();
    let mut penalties = Vec::new();
    for (a, b) in batches {
        let sa = a.sxx.matvec(v).expect("dimension");
        let sb = b.sxx.matvec(v).expect("dimension");
        let ga = 2.0 * (numkit::dot(v, &sa) - numkit::dot(v, &a.sxy));
        let gb = 2.0 * (numkit::dot(v, &sb) - numkit::dot(v, &b.sxy));
        risks.push(0.5 * (a.risk(v) + b.risk(v)));
        penalties.push(ga * gb);
        for k in 0..v.len() {
            let d_risk = (sa[k] - a.sxy[k]) + (sb[k] - b.sxy[k]);
            let dga = 2.0 * (2.0 * sa[k] - a.sxy[k]);
            let dgb = 2.0 * (2.0 * sb[k] - b.sxy[k]);
            grad[k] += scale * (d_risk + penalty_weight * (ga * dgb + gb * dga));
        }
    }
    let mut total = risks.iter().sum::<f64>() + penalty_weight * penalties.iter().sum::<f64>();
    if weight_decay > 0.0 {
        total += weight_decay * numkit::dot(v, v);
        numkit::axpy(2.0 * weight_decay * scale, v, &mut grad);
    }
    (total * scale, grad, risks, penalties)
}

/// Draws two disjoint batches of `b` rows (fewer if the environment is small).
fn disjoint_batches(n: usize, b: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let take = (2 * b).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..take {
        let j = i + rng.index(n - i);
        idx.swap(i, j);
    }
    let half = take / 2;
    (idx[..half].to_vec(), idx[half..2 * half].to_vec())
}

/// Penalized linear training from population or sample moments, starting
/// at `v = 1`. Minibatch mode needs the samples and is served by
/// [`fit_irm_linear`].
pub fn fit_irm_moments(moments: &[Moments], names: &[String], config: &TrainConfig) -> Result<(LinearModel, TrainReport)> {
    config.validate()?;
    if moments.is_empty() {
        return Err(LearnError::InvalidConfig("no environments".into()));
    }
    fit_irm_moments_from(moments, names, config, vec![1.0; moments[0].dim()])
}

/// [`fit_irm_moments`] from a chosen starting point.
pub fn fit_irm_moments_from(moments: &[Moments], names: &[String], config: &TrainConfig, init: Vec<f64>) -> Result<(LinearModel, TrainReport)> {
    config.validate()?;
    if moments.is_empty() || init.len() != moments[0].dim() {
        return Err(LearnError::InvalidConfig("initial point must match the environments' dimension".into()));
    }
    run_linear(init, names, config, |v, step, _| irm_linear_objective(v, moments, config.penalty_weight(step), config.weight_decay), moments)
}

fn run_linear(
    mut v: Vec<f64>,
    names: &[String],
    config: &TrainConfig,
    mut objective: impl FnMut(&[f64], usize, &mut Rng) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>),
    final_moments: &[Moments],
) -> Result<(LinearModel, TrainReport)> {
    let mut rng = Rng::stream(config.seed, "irm-linear/batches");
    let mut adam = Adam::<f64>::new(v.len(), config.learning_rate);
    let mut trajectory = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (loss, grad, risks, penalties) = objective(&v, step, &mut rng);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(LearnError::NonFinite { step });
        }
        trajectory.push(StepRecord {
            step,
            penalty_weight: config.penalty_weight(step),
            loss,
            risk: risks.iter().sum(),
            penalty: penalties.iter().sum(),
        });
        adam.step(v.iter_mut(), grad.iter());
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(LearnError::NonFinite { step: config.steps });
    }
    let (_, _, env_risks, env_penalties) = irm_linear_objective(&v, final_moments, 0.0, 0.0);
    let model = LinearModel::new(v);
    let report = TrainReport {
        objective: if config.lambda > 0.0 { Objective::Irm } else { Objective::Erm },
        env_names: names.to_vec(),
        env_risks,
        env_penalties,
        env_accuracies: None,
        trajectory,
        model: ModelSnapshot::Linear(model.clone()),
    };
    Ok((model, report))
}

/// Penalized linear training on samples.
pub fn fit_irm_linear_report(envs: &[Dataset], config: &TrainConfig) -> Result<(LinearModel, TrainReport)> {
    let d = same_dim(envs)?;
    let names: Vec<String> = envs.iter().map(|e| e.env.clone()).collect();
    let moments: Vec<Moments> = envs.iter().map(Dataset::moments).collect();
    match config.batch {
        BatchMode::Full => fit_irm_moments(&moments, &names, config),
        BatchMode::Minibatch(b) => {
            config.validate()?;
            let objective = |v: &[f64], step: usize, rng: &mut Rng| {
                let batches: Vec<(Moments, Moments)> = envs
                    .iter()
                    .map(|e| {
                        let (ia, ib) = disjoint_batches(e.len(), b, rng);
                        (e.subset(&ia).moments(), e.subset(&ib).moments())
                    })
                    .collect();
                irm_linear_minibatch_objective(v, &batches, config.penalty_weight(step), config.weight_decay)
            };
            run_linear(vec![1.0; d], &names, config, objective, &moments)
        }
    }
}

pub fn fit_irm_linear(envs: &[Dataset], config: &TrainConfig) -> Result<LinearModel> {
    fit_irm_linear_report(envs, config).map(|(m, _)| m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaEntry {
    pub lambda: f64,
    pub validation_risk: Option<f64>,
    pub error: Option<String>,
    pub model: Option<LinearModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub chosen: f64,
    pub model: LinearModel,
    pub entries: Vec<LambdaEntry>,
}

/// Grid entries in first-seen order with exact duplicates removed.
pub fn dedup_grid(grid: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &l in grid {
        if !out.iter().any(|&o| o == l) {
            out.push(l);
        }
    }
    out
}

/// Fits one model per λ on the training environments and keeps the one
/// with the smallest squared risk on the validation environment. Ties go to
/// the earlier grid entry.
pub fn select_lambda(envs_train: &[Dataset], env_val: &Dataset, lambda_grid: &[f64], config: &TrainConfig) -> Result<LambdaSelection> {
    let moments: Vec<Moments> = envs_train.iter().map(Dataset::moments).collect();
    let names: Vec<String> = envs_train.iter().map(|e| e.env.clone()).collect();
    select_lambda_moments(&moments, &names, &env_val.moments(), lambda_grid, config)
}

pub fn select_lambda_moments(
    train: &[Moments],
    names: &[String],
    val: &Moments,
    lambda_grid: &[f64],
    config: &TrainConfig,
) -> Result<LambdaSelection> {
    let grid = dedup_grid(lambda_grid);
    if grid.is_empty() {
        return Err(LearnError::InvalidConfig("empty lambda grid".into()));
    }
    let entries: Vec<LambdaEntry> = grid
        .iter()
        .map(|&lambda| match fit_irm_moments(train, names, &TrainConfig { lambda, ..config.clone() }) {
            Ok((model, _)) => LambdaEntry { lambda, validation_risk: Some(val.risk(&model.v)), error: None, model: Some(model) },
            Err(e) => LambdaEntry { lambda, validation_risk: None, error: Some(e.to_string()), model: None },
        })
        .collect();
    let best = entries
        .iter()
        .filter(|e| e.validation_risk.is_some_and(f64::is_finite))
        .fold(None::<&LambdaEntry>, |acc, e| match acc {
            Some(a) if a.validation_risk <= e.validation_risk => Some(a),
            _ => Some(e),
        });
    match best {
        Some(b) => Ok(LambdaSelection { chosen: b.lambda, model: b.model.clone().expect("fitted"), entries: entries.clone() }),
        None => Err(LearnError::AllFailed(entries.iter().filter_map(|e| e.error.clone()).collect::<Vec<_>>().join("; "))),
    }
}

/// Network objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpObjective {
    Erm,
    Irm,
}

/// Trains an `in → hidden → hidden → 1` rectifier network on binary
/// targets with the logistic loss. ERM is the same loop with the penalty
/// weight held at zero.
pub fn fit_mlp(envs: &[Dataset], objective: MlpObjective, config: &TrainConfig) -> Result<(MlpModel, TrainReport)> {
    config.validate()?;
    let dim = same_dim(envs)?;
    let data: Vec<EnvData<f32>> = envs.iter().map(EnvData::from_dataset).collect();
    let names: Vec<String> = envs.iter().map(|e| e.env.clone()).collect();
    fit_mlp_data(&data, &names, dim, objective, config)
}

pub fn fit_mlp_data(
    data: &[EnvData<f32>],
    names: &[String],
    dim: usize,
    objective: MlpObjective,
    config: &TrainConfig,
) -> Result<(MlpModel, TrainReport)> {
    config.validate()?;
    let mut init_rng = Rng::stream(config.seed, "mlp/init");
    let mut batch_rng = Rng::stream(config.seed, "mlp/batches");
    let mut model = MlpModel::new(&[dim, config.hidden, config.hidden, 1], &mut init_rng);
    let mut adam = Adam::<f32>::new(model.n_params(), config.learning_rate);
    let weight = |step: usize| match objective {
        MlpObjective::Erm => 0.0,
        MlpObjective::Irm => config.penalty_weight(step),
    };
    let mut trajectory = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let pw = weight(step);
        let (value, grad) = match config.batch {
            BatchMode::Full => mlp::full_batch_objective(&model, data, pw, config.weight_decay, Loss::Logistic),
            BatchMode::Minibatch(b) => {
                let batches: Vec<_> = data
                    .iter()
                    .map(|e| {
                        let (ia, ib) = disjoint_batches(e.n, b, &mut batch_rng);
                        (e.rows(&ia), e.rows(&ib))
                    })
                    .collect();
                mlp::minibatch_objective(&model, &batches, pw, config.weight_decay, Loss::Logistic)
            }
        };
        if !value.loss.is_finite() || !grad.is_finite() {
            return Err(LearnError::NonFinite { step });
        }
        trajectory.push(StepRecord {
            step,
            penalty_weight: pw,
            loss: value.loss,
            risk: value.risks.iter().sum(),
            penalty: value.penalties.iter().sum(),
        });
        adam.step(model.params_mut(), grad.params());
    }
    if !model.is_finite() {
        return Err(LearnError::NonFinite { step: config.steps });
    }
    let (final_value, _) = mlp::full_batch_objective(&model, data, 0.0, 0.0, Loss::Logistic);
    let accuracies = data.iter().map(|e| mlp::accuracy(&model, e)).collect();
    let report = TrainReport {
        objective: match objective {
            MlpObjective::Erm => Objective::Erm,
            MlpObjective::Irm => Objective::Irm,
        },
        env_names: names.to_vec(),
        env_risks: final_value.risks,
        env_penalties: final_value.penalties,
        env_accuracies: Some(accuracies),
        trajectory,
        model: ModelSnapshot::Mlp(model.clone()),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sem::example1_moments;

    #[test]
    fn penalty_weight_schedule() {
        let c = TrainConfig { lambda_warmup_steps: 3, ..TrainConfig::mlp(1e4) };
        assert_eq!((0..5).map(|s| c.penalty_weight(s)).collect::<Vec<_>>(), vec![1.0, 1.0, 1.0, 1e4, 1e4]);
        let zero = TrainConfig { lambda_warmup_steps: 3, ..TrainConfig::mlp(0.0) };
        assert!((0..5).all(|s| zero.penalty_weight(s) == 0.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig { steps: 0, ..TrainConfig::linear(1.0) }.validate().is_err());
        assert!(TrainConfig { lambda: -1.0, ..TrainConfig::linear(1.0) }.validate().is_err());
        assert!(TrainConfig { batch: BatchMode::Minibatch(0), ..TrainConfig::linear(1.0) }.validate().is_err());
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        assert_eq!(dedup_grid(&[10.0, 1.0, 10.0, 0.0, 1.0]), vec![10.0, 1.0, 0.0]);
    }

    #[test]
    fn robust_on_symmetric_quadratics() {
        let a = Moments { sxx: Matrix::identity(1), sxy: vec![1.0], syy: 1.0 };
        let b = Moments { sxx: Matrix::identity(1), sxy: vec![-1.0], syy: 1.0 };
        let m = fit_robust_moments(&[a.clone(), b.clone()], &[0.0, 0.0], &RobustConfig::default()).unwrap();
        assert!(m.v[0].abs() < 1e-8, "{:?}", m.v);
        assert!((a.risk(&m.v).max(b.risk(&m.v)) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn robust_single_environment_is_least_squares() {
        let m = example1_moments(3.0);
        let fit = fit_robust_moments(std::slice::from_ref(&m), &[0.0], &RobustConfig::default()).unwrap();
        let ls = m.regression(0.0).unwrap();
        assert!(numkit::norm(&numkit::sub(&fit.v, &ls)) < 1e-8);
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let good = serde_json::to_string(&TrainConfig::linear(2.0)).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&good).unwrap(), TrainConfig::linear(2.0));
        let bad = good.replacen('{', "{\"lamda\": 3,", 1);
        assert!(serde_json::from_str::<TrainConfig>(&bad).is_err());
    }
}
