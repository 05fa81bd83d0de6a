//! Invariance discrepancies for a representation `Φ` and classifier `w`:
//! the distance to the per-environment optimal classifier, the
//! normal-equation residual, and the squared gradient of the risk with
//! respect to a fixed scalar dummy classifier.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{self, LinalgError, Matrix};
use crate::sem::{example1_moments, Dataset, Moments};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvarianceError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch sizes differ: {a} vs {b}")]
    BatchSizeMismatch { a: usize, b: usize },
}

pub type Result<T> = std::result::Result<T, InvarianceError>;

/// A linear feature map `x ↦ Φx` with `Φ` of shape `p × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRepresentation {
    phi: Matrix,
}

impl LinearRepresentation {
    pub fn new(phi: Matrix) -> Result<Self> {
        if !phi.is_finite() {
            return Err(LinalgError::NonFinite("representation").into());
        }
        Ok(Self { phi })
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        Self::new(Matrix::diag(values))
    }

    /// The `1 × d` representation `vᵀ`.
    pub fn row(v: &[f64]) -> Result<Self> {
        Self::new(Matrix::row_vector(v))
    }

    pub fn phi(&self) -> &Matrix {
        &self.phi
    }

    pub fn out_dim(&self) -> usize {
        self.phi.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.phi.cols()
    }

    pub fn rank(&self) -> usize {
        numkit::numerical_rank(&self.phi, 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyValue {
    pub value: f64,
    pub gradient: Option<Vec<f64>>,
}

impl PenaltyValue {
    fn scalar(value: f64) -> Self {
        Self { value, gradient: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Squared,
    Logistic,
}

impl Loss {
    pub fn value(self, f: f64, y: f64) -> f64 {
        match self {
            Loss::Squared => (f - y) * (f - y),
            // log(1 + e^f) − y f, written to stay finite for large |f|
            Loss::Logistic => f.max(0.0) - f * y + (-f.abs()).exp().ln_1p(),
        }
    }

    /// `∂ℓ/∂f`.
    pub fn d1(self, f: f64, y: f64) -> f64 {
        match self {
            Loss::Squared => 2.0 * (f - y),
            Loss::Logistic => sigmoid(f) - y,
        }
    }

    /// `∂²ℓ/∂f²`.
    pub fn d2(self, f: f64) -> f64 {
        match self {
            Loss::Squared => 2.0,
            Loss::Logistic => {
                let p = sigmoid(f);
                p * (1.0 - p)
            }
        }
    }
}

pub fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// Anything producing per-example outputs `n × k` that a scalar dummy
/// classifier multiplies.
pub trait Representation {
    fn outputs(&self, x: &Matrix) -> Matrix;
}

impl Representation for LinearRepresentation {
    fn outputs(&self, x: &Matrix) -> Matrix {
        x.matmul(&self.phi.transpose()).expect("input dimension")
    }
}

/// Second moments of `Φx`: `(ΦΣΦᵀ, Φρ)`.
fn projected(phi: &Matrix, sxx: &Matrix, sxy: &[f64]) -> Result<(Matrix, Vec<f64>)> {
    if phi.cols() != sxy.len() {
        return Err(InvarianceError::Shape(format!("Φ has {} columns, moments have dim {}", phi.cols(), sxy.len())));
    }
    let gram = phi.matmul(sxx)?.matmul(&phi.transpose())?;
    let b = phi.matvec(sxy)?;
    Ok((gram, b))
}

/// Solves `(G + ridge·I) w = b`. Rows of `Φ` that are exactly zero carry no
/// information; they are dropped and their coordinates of `w` set to 0,
/// which is the minimum-norm solution.
fn solve_classifier(phi: &Matrix, gram: &Matrix, b: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let p = phi.rows();
    let live: Vec<usize> = (0..p).filter(|&i| phi.row(i).iter().any(|&v| v != 0.0)).collect();
    let mut w = vec![0.0; p];
    if live.is_empty() {
        return Ok(w);
    }
    let g = gram.select_rows(&live).select_columns(&live).add_diagonal(ridge);
    let rhs: Vec<f64> = live.iter().map(|&i| b[i]).collect();
    let sol = numkit::solve_spd(&g, &rhs)?;
    for (k, &i) in live.iter().enumerate() {
        w[i] = sol[k];
    }
    Ok(w)
}

/// The classifier on top of `Φ` that minimizes the squared risk of the
/// given moments, `(ΦΣΦᵀ + ridge·I)⁻¹ Φρ`.
pub fn optimal_classifier(phi: &LinearRepresentation, moments: &Moments, ridge: f64) -> Result<Vec<f64>> {
    let (gram, b) = projected(phi.phi(), &moments.sxx, &moments.sxy)?;
    solve_classifier(phi.phi(), &gram, &b, ridge)
}

pub fn optimal_classifier_for(phi: &LinearRepresentation, data: &Dataset, ridge: f64) -> Result<Vec<f64>> {
    optimal_classifier(phi, &data.moments(), ridge)
}

/// Like [`optimal_classifier`], but the ridge is added to the input
/// covariance: `(Φ(Σ + ridge·I)Φᵀ)⁻¹ Φρ`.
pub fn optimal_classifier_input_ridge(phi: &LinearRepresentation, moments: &Moments, ridge: f64) -> Result<Vec<f64>> {
    let (gram, b) = projected(phi.phi(), &moments.sxx.add_diagonal(ridge), &moments.sxy)?;
    solve_classifier(phi.phi(), &gram, &b, 0.0)
}

fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(InvarianceError::Shape(format!("w has length {}, Φ has {} rows", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `‖w − w_Φ‖²` with `w_Φ` the environment's optimal classifier.
pub fn d_dist(w: &[f64], phi: &LinearRepresentation, moments: &Moments, ridge: f64) -> Result<PenaltyValue> {
    let opt = optimal_classifier(phi, moments, ridge)?;
    Ok(PenaltyValue::scalar(squared_distance(w, &opt)?))
}

pub fn d_dist_input_ridge(w: &[f64], phi: &LinearRepresentation, moments: &Moments, ridge: f64) -> Result<PenaltyValue> {
    let opt = optimal_classifier_input_ridge(phi, moments, ridge)?;
    Ok(PenaltyValue::scalar(squared_distance(w, &opt)?))
}

/// `‖ΦΣΦᵀw − Φρ‖²`. The gradient is taken with respect to `Φ` and laid
/// out row-major like `Φ`.
pub fn d_lin(w: &[f64], phi: &LinearRepresentation, moments: &Moments) -> Result<PenaltyValue> {
    let phi = phi.phi();
    let (p, d) = phi.shape();
    if w.len() != p || moments.dim() != d {
        return Err(InvarianceError::Shape(format!("w len {}, Φ {p}×{d}, moments dim {}", w.len(), moments.dim())));
    }
    let u = phi.tr_matvec(w)?;
    let q = numkit::sub(&moments.sxx.matvec(&u)?, &moments.sxy);
    let r = phi.matvec(&q)?;
    let value = numkit::dot(&r, &r);
    let sr = moments.sxx.matvec(&phi.tr_matvec(&r)?)?;
    let mut grad = vec![0.0; p * d];
    for i in 0..p {
        for j in 0..d {
            grad[i * d + j] = 2.0 * (r[i] * q[j] + w[i] * sr[j]);
        }
    }
    Ok(PenaltyValue { value, gradient: Some(grad) })
}

/// Gradient of the squared risk with respect to the dummy scalar at 1.0
/// for the linear predictor `vᵀx`: `2(vᵀΣv − vᵀρ)`.
pub fn dummy_gradient_linear(v: &[f64], moments: &Moments) -> f64 {
    let sv = moments.sxx.matvec(v).expect("dimension");
    2.0 * (numkit::dot(v, &sv) - numkit::dot(v, &moments.sxy))
}

/// Squared-loss dummy penalty for `vᵀx` from second moments, with its
/// gradient in `v`.
pub fn irm_penalty_linear(v: &[f64], moments: &Moments) -> PenaltyValue {
    let sv = moments.sxx.matvec(v).expect("dimension");
    let g = 2.0 * (numkit::dot(v, &sv) - numkit::dot(v, &moments.sxy));
    let grad = sv.iter().zip(&moments.sxy).map(|(s, r)| 2.0 * g * 2.0 * (2.0 * s - r)).collect();
    PenaltyValue { value: g * g, gradient: Some(grad) }
}

/// Per-example derivative of `ℓ(w·f(x), y)` in `w` at `w = 1`, summed over
/// output coordinates.
pub fn dummy_gradients(outputs: &Matrix, y: &[f64], loss: Loss) -> Result<Vec<f64>> {
    if outputs.rows() != y.len() {
        return Err(InvarianceError::Shape(format!("{} outputs for {} targets", outputs.rows(), y.len())));
    }
    Ok((0..y.len())
        .map(|i| outputs.row(i).iter().map(|&f| loss.d1(f, y[i]) * f).sum())
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// `(∇_{w|w=1} R̂(w·f))²` from precomputed outputs.
pub fn irm_penalty_from_outputs(outputs: &Matrix, y: &[f64], loss: Loss) -> Result<PenaltyValue> {
    let g = mean(&dummy_gradients(outputs, y, loss)?);
    Ok(PenaltyValue::scalar(g * g))
}

pub fn irm_penalty<R: Representation + ?Sized>(model: &R, data: &Dataset, loss: Loss) -> Result<PenaltyValue> {
    irm_penalty_from_outputs(&model.outputs(&data.x), &data.y, loss)
}

/// Product of the dummy gradients on two independent batches. Its
/// expectation is the squared population gradient, so unlike the penalty
/// itself the estimate may be negative.
pub fn irm_penalty_minibatch_from_outputs(
    outputs_a: &Matrix,
    y_a: &[f64],
    outputs_b: &Matrix,
    y_b: &[f64],
    loss: Loss,
) -> Result<f64> {
    if y_a.len() != y_b.len() {
        return Err(InvarianceError::BatchSizeMismatch { a: y_a.len(), b: y_b.len() });
    }
    if y_a.is_empty() {
        return Err(InvarianceError::Shape("empty batch".into()));
    }
    let ga = mean(&dummy_gradients(outputs_a, y_a, loss)?);
    let gb = mean(&dummy_gradients(outputs_b, y_b, loss)?);
    Ok(ga * gb)
}

pub fn irm_penalty_minibatch<R: Representation + ?Sized>(
    model: &R,
    batch_a: &Dataset,
    batch_b: &Dataset,
    loss: Loss,
) -> Result<f64> {
    if batch_a.len() != batch_b.len() {
        return Err(InvarianceError::BatchSizeMismatch { a: batch_a.len(), b: batch_b.len() });
    }
    irm_penalty_minibatch_from_outputs(&model.outputs(&batch_a.x), &batch_a.y, &model.outputs(&batch_b.x), &batch_b.y, loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "d_dist")]
    DDist,
    #[serde(rename = "d_dist_ridged")]
    DDistRidged,
    #[serde(rename = "d_lin")]
    DLin,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::DDist, Variant::DDistRidged, Variant::DLin];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DDist => "d_dist",
            Variant::DDistRidged => "d_dist_ridged",
            Variant::DLin => "d_lin",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRow {
    pub c: f64,
    pub penalty: f64,
    pub variant: Variant,
    pub sigma_sq: f64,
}

/// Evaluates a penalty along `Φ = Diag(1, c)`, `w = (1, 0)` on the
/// population moments of the two-variable example.
pub fn landscape_sweep(sigma_sq: f64, c_grid: &[f64], which: Variant, ridge: f64) -> Result<Vec<LandscapeRow>> {
    let moments = example1_moments(sigma_sq);
    let w = [1.0, 0.0];
    c_grid
        .iter()
        .map(|&c| {
            let phi = LinearRepresentation::diag(&[1.0, c])?;
            let penalty = match which {
                Variant::DDist => d_dist(&w, &phi, &moments, 0.0)?,
                Variant::DDistRidged => d_dist_input_ridge(&w, &phi, &moments, ridge)?,
                Variant::DLin => d_lin(&w, &phi, &moments)?,
            };
            Ok(LandscapeRow { c, penalty: penalty.value, variant: which, sigma_sq })
        })
        .collect()
}

pub fn write_landscape_csv<W: Write>(rows: &[LandscapeRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "c,penalty,variant,sigma_sq")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.c, r.penalty, r.variant.name(), r.sigma_sq)?;
    }
    Ok(())
}
