//! Invariant Causal Prediction with residual two-sample tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};
use thiserror::Error;

use crate::numkit::{self, LinalgError, Matrix};
use crate::sem::Dataset;

/// Exhaustive subset search is used up to this many variables.
pub const EXHAUSTIVE_LIMIT: usize = 12;
pub const DEFAULT_MAX_DIM: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("no environments supplied")]
    NoEnvironments,
    #[error("environments disagree on dimension ({0} vs {1})")]
    Dimension(usize, usize),
    #[error("index {index} out of range for dimension {dim}")]
    Index { index: usize, dim: usize },
    #[error("{dim} variables exceed max_dim = {max_dim}")]
    TooManyVariables { dim: usize, max_dim: usize },
    #[error("alpha must lie in (0, 1), got {0}")]
    Alpha(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetTest {
    pub subset: Vec<usize>,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    pub alpha: f64,
    pub accepted_subsets: Vec<Vec<usize>>,
    pub intersection: Vec<usize>,
    pub coefficients: Vec<f64>,
    /// Every candidate in search order. Candidates whose regression was
    /// singular are recorded with p = 0.
    pub tested: Vec<SubsetTest>,
}

impl IcpResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("IcpResult serializes")
    }
}

fn check_envs(envs: &[Dataset]) -> Result<usize, BaselineError> {
    let first = envs.first().ok_or(BaselineError::NoEnvironments)?;
    let d = first.dim();
    for e in envs {
        if e.dim() != d {
            return Err(BaselineError::Dimension(d, e.dim()));
        }
    }
    Ok(d)
}

/// Pooled least-squares coefficients of y on the columns in `subset`.
pub fn pooled_regression(subset: &[usize], envs: &[Dataset]) -> Result<Vec<f64>, BaselineError> {
    let d = check_envs(envs)?;
    if let Some(&index) = subset.iter().find(|&&i| i >= d) {
        return Err(BaselineError::Index { index, dim: d });
    }
    if subset.is_empty() {
        return Ok(Vec::new());
    }
    let k = subset.len();
    let mut gram = Matrix::zeros(k, k);
    let mut rhs = vec![0.0; k];
    for e in envs {
        let xs = e.x.select_columns(subset);
        gram = gram.add(&xs.gram())?;
        numkit::axpy(1.0, &xs.tr_matvec(&e.y)?, &mut rhs);
    }
    Ok(numkit::solve_spd(&gram, &rhs)?)
}

fn sample_mean_var(r: &[f64]) -> (f64, f64) {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

/// Two-sided Welch t-test for equal means.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = sample_mean_var(a);
    let (mb, vb) = sample_mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 <= 0.0 {
        return if ma == mb { 1.0 } else { 0.0 };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// Two-sided F-test for equal variances.
pub fn f_test(a: &[f64], b: &[f64]) -> f64 {
    let (_, va) = sample_mean_var(a);
    let (_, vb) = sample_mean_var(b);
    if va == 0.0 || vb == 0.0 {
        return if va == vb { 1.0 } else { 0.0 };
    }
    let dist = FisherSnedecor::new(a.len() as f64 - 1.0, b.len() as f64 - 1.0).expect("positive degrees of freedom");
    let f = va / vb;
    (2.0 * dist.cdf(f).min(dist.sf(f))).min(1.0)
}

/// Regresses y on `X[subset]` over the pooled data and tests whether the
/// residuals share mean and variance across every pair of environments.
/// Returns the Bonferroni-combined p-value over pairs and both tests.
///
/// The empty subset is allowed: its residuals are y itself.
pub fn residual_invariance_test(subset: &[usize], envs: &[Dataset]) -> Result<f64, BaselineError> {
    let coef = pooled_regression(subset, envs)?;
    let residuals: Vec<Vec<f64>> = envs
        .iter()
        .map(|e| {
            if subset.is_empty() {
                return e.y.clone();
            }
            let pred = e.x.select_columns(subset).matvec(&coef).expect("shape checked");
            e.y.iter().zip(pred).map(|(y, p)| y - p).collect()
        })
        .collect();
    let mut p_min: f64 = 1.0;
    let mut tests = 0usize;
    for i in 0..residuals.len() {
        for j in i + 1..residuals.len() {
            p_min = p_min.min(welch_t_test(&residuals[i], &residuals[j]));
            p_min = p_min.min(f_test(&residuals[i], &residuals[j]));
            tests += 2;
        }
    }
    Ok((p_min * tests.max(1) as f64).min(1.0))
}

/// Candidate subsets in lexicographic order of their sorted index lists,
/// empty set first.
pub fn candidate_subsets(d: usize) -> Vec<Vec<usize>> {
    if d <= EXHAUSTIVE_LIMIT {
        let mut all: Vec<Vec<usize>> = (0u32..1 << d).map(|mask| (0..d).filter(|&i| mask >> i & 1 == 1).collect()).collect();
        all.sort();
        all
    } else {
        let half = d / 2;
        let first: Vec<usize> = (0..half).collect();
        let second: Vec<usize> = (half..d).collect();
        let mut all = vec![Vec::new(), first, second, (0..d).collect()];
        all.sort();
        all
    }
}

/// ICP: accept every candidate whose residual test gives p > α, intersect the
/// accepted sets, and refit on the intersection.
pub fn icp_search(envs: &[Dataset], alpha: f64, max_dim: usize) -> Result<IcpResult, BaselineError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BaselineError::Alpha(alpha));
    }
    let d = check_envs(envs)?;
    if d > max_dim {
        return Err(BaselineError::TooManyVariables { dim: d, max_dim });
    }
    let tested: Vec<SubsetTest> = candidate_subsets(d)
        .into_iter()
        .map(|subset| {
            let p_value = residual_invariance_test(&subset, envs).unwrap_or(0.0);
            SubsetTest { subset, p_value }
        })
        .collect();
    let accepted_subsets: Vec<Vec<usize>> = tested.iter().filter(|t| t.p_value > alpha).map(|t| t.subset.clone()).collect();
    let intersection: Vec<usize> = match accepted_subsets.split_first() {
        None => Vec::new(),
        Some((head, rest)) => head.iter().copied().filter(|i| rest.iter().all(|s| s.contains(i))).collect(),
    };
    let mut coefficients = vec![0.0; d];
    if !intersection.is_empty() {
        if let Ok(coef) = pooled_regression(&intersection, envs) {
            for (&i, c) in intersection.iter().zip(coef) {
                coefficients[i] = c;
            }
        }
    }
    Ok(IcpResult { alpha, accepted_subsets, intersection, coefficients, tested })
}
