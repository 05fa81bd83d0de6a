//! Executable checks for the linear theory: the orthogonality
//! characterisation of invariant predictors, linear general position, the
//! orthogonality ellipsoids, and the robust-learning stationarity condition.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{self, LinalgError, Matrix, Rng};
use crate::sem::Moments;

pub const ORTHOGONALITY_TOL: f64 = 1e-8;
pub const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("NotOrthogonal: |vᵀg| = {residual:e} for gradient {index}")]
    NotOrthogonal { index: usize, residual: f64 },
    #[error("invalid moments: {0}")]
    InvalidMoments(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("postcondition failed: {0}")]
    Postcondition(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, TheoryError>;

/// Second moments of one environment: `E[XXᵀ]` and `E[Xε]` for the
/// invariant noise ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentMoments {
    pub sigma_xx: Matrix,
    pub sigma_xeps: Vec<f64>,
}

impl EnvironmentMoments {
    pub fn new(sigma_xx: Matrix, sigma_xeps: Vec<f64>) -> Result<Self> {
        let m = EnvironmentMoments { sigma_xx, sigma_xeps };
        m.validate()?;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.sigma_xeps.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.sigma_xx.shape() != (d, d) {
            return Err(TheoryError::Shape(format!("sigma_xx {:?} for d = {d}", self.sigma_xx.shape())));
        }
        let asym = self.sigma_xx.sub(&self.sigma_xx.transpose())?.max_abs();
        if asym > 1e-10 {
            return Err(TheoryError::InvalidMoments(format!("asymmetry {asym:e}")));
        }
        let (vals, _) = numkit::symmetric_eigen(&self.sigma_xx);
        if vals.first().is_some_and(|&l| l < -1e-10) {
            return Err(TheoryError::InvalidMoments(format!("eigenvalue {:e}", vals[0])));
        }
        Ok(())
    }

    /// Moments of `(x, y)` with `ε = y − xᵀv_inv`: `E[Xε] = ρ − Σ v_inv`.
    pub fn from_moments(m: &Moments, invariant: &[f64]) -> Result<Self> {
        let sv = m.sxx.matvec(invariant)?;
        EnvironmentMoments::new(m.sxx.clone(), numkit::sub(&m.sxy, &sv))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityCheck {
    pub residuals: Vec<f64>,
    pub tolerance: f64,
    pub invariant_decomposable: bool,
}

/// `|vᵀ∇Rᵉ(v)|` per quadratic risk.
pub fn check_orthogonality(v: &[f64], risks: &[Moments]) -> OrthogonalityCheck {
    let residuals: Vec<f64> = risks.iter().map(|m| numkit::dot(v, &m.risk_gradient(v)).abs()).collect();
    let invariant_decomposable = residuals.iter().all(|&r| r <= ORTHOGONALITY_TOL);
    OrthogonalityCheck { residuals, tolerance: ORTHOGONALITY_TOL, invariant_decomposable }
}

/// Builds `Φ` whose kernel is the span of `gradients`, together with `w`
/// such that `Φᵀw = v`. Rows of `Φ` are an orthonormal basis of the
/// complement, each signed so its first non-negligible entry is positive.
pub fn construct_phi_from_v(v: &[f64], gradients: &[Vec<f64>]) -> Result<(Matrix, Vec<f64>)> {
    let d = v.len();
    for (index, g) in gradients.iter().enumerate() {
        if g.len() != d {
            return Err(TheoryError::Shape(format!("gradient {index} has length {}", g.len())));
        }
        let residual = numkit::dot(v, g).abs();
        if residual > ORTHOGONALITY_TOL {
            return Err(TheoryError::NotOrthogonal { index, residual });
        }
    }
    let nonzero: Vec<Vec<f64>> = gradients.iter().filter(|g| numkit::norm(g) > 0.0).cloned().collect();
    let mut phi = numkit::orthogonal_complement(&nonzero, d, RANK_TOL);
    for r in 0..phi.rows() {
        let lead = phi.row(r).iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(1.0);
        if lead < 0.0 {
            for c in 0..d {
                phi.set(r, c, -phi.get(r, c));
            }
        }
    }
    let w = phi.matvec(v)?;
    let back = phi.tr_matvec(&w)?;
    let err = numkit::norm(&numkit::sub(&back, v));
    if err > 1e-8 * numkit::norm(v).max(1.0) {
        return Err(TheoryError::Postcondition(format!("‖Φᵀw − v‖ = {err:e}")));
    }
    for (i, g) in gradients.iter().enumerate() {
        let pg = numkit::norm(&phi.matvec(g)?);
        if pg > 1e-8 * numkit::norm(g).max(1.0) {
            return Err(TheoryError::Postcondition(format!("‖Φ g_{i}‖ = {pg:e}")));
        }
    }
    Ok((phi, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Every sampled direction gave span dimension above `d − r`.
    Satisfied,
    /// A witness direction was found.
    Failed,
    /// Fewer than `d − r + d/r` environments.
    InsufficientEnvironments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralPositionReport {
    pub verdict: Verdict,
    pub min_span_dim: usize,
    pub required_above: usize,
    pub trials: usize,
    pub witness: Option<Vec<f64>>,
}

/// Dimension of `span{Σᵉx − Σᵉ_{Xε}}` over environments.
pub fn span_dimension(moments: &[EnvironmentMoments], x: &[f64]) -> usize {
    let rows: Vec<Vec<f64>> = moments
        .iter()
        .map(|m| numkit::sub(&m.sigma_xx.matvec(x).expect("dimension"), &m.sigma_xeps))
        .collect();
    if rows.is_empty() {
        return 0;
    }
    numkit::numerical_rank(&Matrix::from_rows(&rows).expect("shared dimension"), RANK_TOL)
}

/// Randomised check of linear general position of degree `r`. A failure
/// carries a witness direction; success is evidence over `trials` Gaussian
/// directions, not a proof.
pub fn general_position_degree(moments: &[EnvironmentMoments], r: usize, trials: usize, rng: &mut Rng) -> GeneralPositionReport {
    let d = moments.first().map_or(0, |m| m.dim());
    let required_above = d.saturating_sub(r);
    let mut min_span_dim = usize::MAX;
    let mut witness = None;
    for _ in 0..trials {
        let x: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let dim = span_dimension(moments, &x);
        if dim < min_span_dim {
            min_span_dim = dim;
            if dim <= required_above && witness.is_none() {
                witness = Some(x);
            }
        }
    }
    if trials == 0 {
        min_span_dim = 0;
    }
    let enough = r > 0 && moments.len() as f64 > d as f64 - r as f64 + d as f64 / r as f64;
    let verdict = if !enough {
        Verdict::InsufficientEnvironments
    } else if witness.is_some() {
        Verdict::Failed
    } else {
        Verdict::Satisfied
    };
    GeneralPositionReport { verdict, min_span_dim, required_above, trials, witness }
}

/// Moments with a Wishart `Σ = AAᵀ/k` (`A` is `d×k` standard Gaussian) and
/// a Gaussian `Σ_{Xε}`.
pub fn random_environment_moments(d: usize, rng: &mut Rng) -> EnvironmentMoments {
    let k = d + 2;
    let a = numkit::gaussian_matrix(d, k, 0.0, 1.0, rng);
    let mut sxx = a.matmul(&a.transpose()).expect("shape").scale(1.0 / k as f64);
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (sxx.get(i, j) + sxx.get(j, i));
            sxx.set(i, j, s);
            sxx.set(j, i, s);
        }
    }
    let eps = (0..d).map(|_| rng.standard_normal()).collect();
    EnvironmentMoments { sigma_xx: sxx, sigma_xeps: eps }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudPoint {
    /// Index of the risk, or `None` for an intersection point.
    pub risk: Option<usize>,
    pub v: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityManifold {
    pub dim: usize,
    pub clouds: Vec<Vec<CloudPoint>>,
    pub intersections: Vec<CloudPoint>,
    pub tolerance: f64,
}

fn orth_residual(m: &Moments, v: &[f64]) -> f64 {
    numkit::dot(v, &m.risk_gradient(v))
}

/// Point on the ellipsoid `vᵀ(Σv − ρ) = 0` along direction `u`: `t·u`
/// with `t = uᵀρ / uᵀΣu`.
fn ray_point(m: &Moments, u: &[f64]) -> Vec<f64> {
    let su = m.sxx.matvec(u).expect("dimension");
    let t = numkit::dot(u, &m.sxy) / numkit::dot(u, &su);
    u.iter().map(|x| t * x).collect()
}

fn direction(d: usize, theta: f64, phi: f64) -> Vec<f64> {
    if d == 2 {
        vec![theta.cos(), theta.sin()]
    } else {
        vec![phi.sin() * theta.cos(), phi.sin() * theta.sin(), phi.cos()]
    }
}

fn refine_root(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let mut fa = f(a);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if (fm < 0.0) == (fa < 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

fn refine_min_abs(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    for _ in 0..200 {
        if f(c).abs() < f(d).abs() {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    0.5 * (a + b)
}

/// Samples the orthogonality ellipsoid `vᵀ∇Rᵉ(v) = 0` of each risk (d ∈ {2, 3})
/// along `resolution` directions per angle, plus the origin, and locates
/// pairwise intersections. Intersections on ellipsoid `i` are found by
/// sign changes of risk `j`'s residual along each great circle, and by
/// local minima of its magnitude to catch tangencies.
pub fn sample_orthogonality_manifold(risks: &[Moments], resolution: usize, tolerance: f64) -> Result<OrthogonalityManifold> {
    let d = risks.first().map_or(0, |m| m.dim());
    if !(d == 2 || d == 3) || risks.iter().any(|m| m.dim() != d) {
        return Err(TheoryError::Shape(format!("ellipsoids need d in {{2, 3}}, got {d}")));
    }
    let resolution = resolution.max(8);
    let pi = std::f64::consts::PI;
    let phis: Vec<f64> = if d == 2 { vec![0.0] } else { (0..resolution).map(|k| pi * (k as f64 + 0.5) / resolution as f64).collect() };
    let theta_at = |k: usize| pi * k as f64 / resolution as f64;
    let mut clouds = Vec::with_capacity(risks.len());
    for (i, m) in risks.iter().enumerate() {
        let mut pts = vec![CloudPoint { risk: Some(i), v: vec![0.0; d], residual: 0.0 }];
        for &phi in &phis {
            // a ray through the origin meets the ellipsoid once besides 0, so θ ∈ [0, π) covers it in 2-D
            let span = if d == 2 { resolution } else { 2 * resolution };
            for k in 0..span {
                let v = ray_point(m, &direction(d, theta_at(k), phi));
                if v.iter().all(|x| x.is_finite()) {
                    let residual = orth_residual(m, &v).abs();
                    pts.push(CloudPoint { risk: Some(i), v, residual });
                }
            }
        }
        clouds.push(pts);
    }

    let mut intersections = vec![CloudPoint {
        risk: None,
        v: vec![0.0; d],
        residual: 0.0,
    }];
    for i in 0..risks.len() {
        for j in i + 1..risks.len() {
            let (mi, mj) = (&risks[i], &risks[j]);
            for &phi in &phis {
                let f = |theta: f64| orth_residual(mj, &ray_point(mi, &direction(d, theta, phi)));
                let n = 4 * resolution;
                let upper = if d == 2 { pi } else { 2.0 * pi };
                // one grid cell of overlap on each side so periodic endpoints are interior
                let grid: Vec<f64> = (0..=n + 2).map(|k| upper * (k as f64 - 1.0) / n as f64).collect();
                let vals: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
                let mut candidates = Vec::new();
                for k in 0..grid.len() - 1 {
                    if vals[k] == 0.0 {
                        candidates.push(grid[k]);
                    } else if (vals[k] < 0.0) != (vals[k + 1] < 0.0) {
                        candidates.push(refine_root(&f, grid[k], grid[k + 1]));
                    }
                    if k > 0 && vals[k].abs() <= vals[k - 1].abs() && vals[k].abs() <= vals[k + 1].abs() {
                        candidates.push(refine_min_abs(&f, grid[k - 1], grid[k + 1]));
                    }
                }
                for theta in candidates {
                    let v = ray_point(mi, &direction(d, theta, phi));
                    let residual = orth_residual(mi, &v).abs().max(orth_residual(mj, &v).abs());
                    let scale = 1.0 + numkit::dot(&v, &v) * mi.sxx.max_abs().max(mj.sxx.max_abs());
                    if residual <= tolerance * scale && v.iter().all(|x| x.is_finite()) {
                        let dup = intersections.iter().any(|p| numkit::norm(&numkit::sub(&p.v, &v)) <= 1e-6);
                        if !dup {
                            intersections.push(CloudPoint { risk: None, v, residual });
                        }
                    }
                }
            }
        }
    }
    Ok(OrthogonalityManifold { dim: d, clouds, intersections, tolerance })
}

impl OrthogonalityManifold {
    pub fn max_residual(&self) -> f64 {
        self.clouds.iter().flatten().map(|p| p.residual).fold(0.0, f64::max)
    }

    /// Columns `set,v0,…,residual`; `set` is `risk<i>` or `intersection`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let coords: Vec<String> = (0..self.dim).map(|i| format!("v{i}")).collect();
        writeln!(out, "set,{},residual", coords.join(","))?;
        for p in self.clouds.iter().flatten().chain(&self.intersections) {
            let set = p.risk.map_or_else(|| "intersection".to_string(), |i| format!("risk{i}"));
            let v: Vec<String> = p.v.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{set},{},{}", v.join(","), p.residual)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub weights: Vec<f64>,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Smallest `‖Σ λₑ gₑ‖` over the probability simplex. Exact for the small
/// environment counts used here: every support is tried and the
/// equality-constrained optimum kept when it is feasible.
pub fn simplex_min_norm(gradients: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let m = gradients.len();
    if m == 0 {
        return Err(TheoryError::Shape("no gradients".into()));
    }
    if m > 16 {
        return Err(TheoryError::Shape(format!("{m} environments exceed the exhaustive support search")));
    }
    let q = Matrix::from_fn(m, m, |i, j| numkit::dot(&gradients[i], &gradients[j]));
    let combo = |lam: &[f64]| {
        let mut g = vec![0.0; gradients[0].len()];
        for (l, gi) in lam.iter().zip(gradients) {
            numkit::axpy(*l, gi, &mut g);
        }
        numkit::norm(&g)
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mask in 1u32..(1 << m) {
        let support: Vec<usize> = (0..m).filter(|&i| mask >> i & 1 == 1).collect();
        let k = support.len();
        let kkt = Matrix::from_fn(k + 1, k + 1, |i, j| match (i < k, j < k) {
            (true, true) => q.get(support[i], support[j]),
            (false, false) => 0.0,
            _ => 1.0,
        });
        let mut rhs = vec![0.0; k + 1];
        rhs[k] = 1.0;
        let Ok(sol) = numkit::solve(&kkt, &rhs) else { continue };
        if sol[..k].iter().any(|&l| l < -1e-12) {
            continue;
        }
        let mut lam = vec![0.0; m];
        for (&s, &l) in support.iter().zip(&sol[..k]) {
            lam[s] = l.max(0.0);
        }
        let total: f64 = lam.iter().sum();
        lam.iter_mut().for_each(|l| *l /= total);
        let r = combo(&lam);
        if best.as_ref().is_none_or(|(_, b)| r < *b) {
            best = Some((lam, r));
        }
    }
    best.ok_or_else(|| TheoryError::Postcondition("no feasible support".into()))
}

/// First-order check that `v` is a stationary point of some convex
/// combination of the environment risks.
pub fn verify_robust_kkt(envs: &[Moments], v: &[f64], tolerance: f64) -> Result<KktReport> {
    let gradients: Vec<Vec<f64>> = envs.iter().map(|m| m.risk_gradient(v)).collect();
    let (weights, residual) = simplex_min_norm(&gradients)?;
    Ok(KktReport { weights, residual, tolerance, pass: residual <= tolerance })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Variances of the two-variable example used for the orthogonality,
    /// ellipsoid, general-position and stationarity checks.
    pub sigma_sq: Vec<f64>,
    /// Replace the configured environments by copies of the first one.
    pub identical_environments: bool,
    pub round_trip_instances: usize,
    pub round_trip_max_dim: usize,
    pub general_position_tuples: usize,
    pub general_position_dim: usize,
    pub general_position_directions: usize,
    pub ellipsoid_resolution: usize,
    pub kkt_tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sigma_sq: vec![10.0, 20.0],
            identical_environments: false,
            round_trip_instances: 1000,
            round_trip_max_dim: 8,
            general_position_tuples: 1000,
            general_position_dim: 3,
            general_position_directions: 10,
            ellipsoid_resolution: 200,
            kkt_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<SuiteCheck>,
    pub general_position: GeneralPositionReport,
    pub manifold: OrthogonalityManifold,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&SuiteCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Population moments of the two-variable example for `E[X₁²] = σ²`.
fn example_moments(s: f64) -> Moments {
    crate::sem::example1_moments(s)
}

fn random_vector(d: usize, rng: &mut Rng) -> Vec<f64> {
    (0..d).map(|_| rng.standard_normal()).collect()
}

fn orthogonal_to(v: &[f64], rng: &mut Rng) -> Vec<f64> {
    let mut g = random_vector(v.len(), rng);
    for _ in 0..2 {
        let c = numkit::dot(&g, v) / numkit::dot(v, v);
        numkit::axpy(-c, v, &mut g);
    }
    g
}

/// Quadratic risk with `∇R(v) = g`.
fn risk_with_gradient(v: &[f64], g: &[f64], rng: &mut Rng) -> Moments {
    let d = v.len();
    let a = numkit::gaussian_matrix(d, d, 0.0, 1.0, rng);
    let sxx = a.matmul(&a.transpose()).expect("square").add_diagonal(0.1);
    let sxx = Matrix::from_fn(d, d, |i, j| 0.5 * (sxx.get(i, j) + sxx.get(j, i)));
    let sv = sxx.matvec(v).expect("dimension");
    let sxy = sv.iter().zip(g).map(|(s, gi)| s - 0.5 * gi).collect();
    Moments { sxx, sxy, syy: 0.0 }
}

fn round_trip(config: &SuiteConfig, rng: &mut Rng) -> SuiteCheck {
    let max_dim = config.round_trip_max_dim.max(1);
    let mut failures = Vec::new();
    for trial in 0..config.round_trip_instances {
        let d = 1 + trial % max_dim;
        let v = random_vector(d, rng);
        let k = rng.index(d);
        let grads: Vec<Vec<f64>> = (0..k).map(|_| orthogonal_to(&v, rng)).collect();
        let ok = match construct_phi_from_v(&v, &grads) {
            Ok((phi, w)) => {
                let back = phi.tr_matvec(&w).expect("dimension");
                let risks: Vec<Moments> = grads.iter().map(|g| risk_with_gradient(&v, g, rng)).collect();
                numkit::norm(&numkit::sub(&back, &v)) <= 1e-8
                    && grads.iter().all(|g| numkit::norm(&phi.matvec(g).expect("dimension")) <= 1e-8)
                    && check_orthogonality(&back, &risks).invariant_decomposable
            }
            Err(_) => false,
        };
        if !ok {
            failures.push(trial);
        }
    }
    SuiteCheck {
        name: "phi_round_trip".into(),
        pass: failures.is_empty(),
        detail: format!("{}/{} instances (d ≤ {max_dim})", config.round_trip_instances - failures.len(), config.round_trip_instances),
    }
}

fn random_general_position(config: &SuiteConfig, rng: &mut Rng) -> SuiteCheck {
    let d = config.general_position_dim.max(1);
    let tuples = config.general_position_tuples;
    let satisfied = (0..tuples)
        .filter(|_| {
            let moments: Vec<EnvironmentMoments> = (0..d + 2).map(|_| random_environment_moments(d, rng)).collect();
            general_position_degree(&moments, d, config.general_position_directions, rng).verdict == Verdict::Satisfied
        })
        .count();
    // at least 999 in 1000
    let pass = tuples > 0 && 1000 * satisfied >= 999 * tuples;
    SuiteCheck {
        name: "general_position_random".into(),
        pass,
        detail: format!("{satisfied}/{tuples} tuples (d = {d}, m = {}, r = {d})", d + 2),
    }
}

/// Runs every verifier on its configured inputs. Checks that fail are
/// reported; only malformed configuration returns an error.
pub fn run_suite(config: &SuiteConfig) -> Result<SuiteReport> {
    if config.sigma_sq.len() < 2 || config.sigma_sq.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(TheoryError::Shape("need at least two positive variances".into()));
    }
    let mut rng = Rng::stream(config.seed, "theory-suite");
    let sigmas: Vec<f64> =
        if config.identical_environments { vec![config.sigma_sq[0]; config.sigma_sq.len()] } else { config.sigma_sq.clone() };
    let risks: Vec<Moments> = sigmas.iter().map(|&s| example_moments(s)).collect();
    let invariant = [1.0, 0.0];
    let mut checks = Vec::new();

    let orth = check_orthogonality(&invariant, &risks);
    checks.push(SuiteCheck {
        name: "orthogonality_invariant_rule".into(),
        pass: orth.invariant_decomposable,
        detail: format!("max residual {:e}", orth.residuals.iter().copied().fold(0.0, f64::max)),
    });

    checks.push(round_trip(config, &mut rng));

    let env_moments: Vec<EnvironmentMoments> =
        risks.iter().map(|m| EnvironmentMoments::from_moments(m, &invariant)).collect::<Result<_>>()?;
    let r = if env_moments.len() > 2 { 1 } else { 2 };
    let general_position = general_position_degree(&env_moments, r, 200, &mut rng);
    checks.push(SuiteCheck {
        name: "general_position_configured".into(),
        pass: general_position.verdict == Verdict::Satisfied,
        detail: format!("{:?} (r = {r}, min span {})", general_position.verdict, general_position.min_span_dim),
    });
    checks.push(random_general_position(config, &mut rng));

    let symmetric = [
        Moments { sxx: Matrix::identity(1), sxy: vec![1.0], syy: 1.0 },
        Moments { sxx: Matrix::identity(1), sxy: vec![-1.0], syy: 1.0 },
    ];
    let sym = verify_robust_kkt(&symmetric, &[0.0], config.kkt_tolerance)?;
    checks.push(SuiteCheck {
        name: "kkt_symmetric_quadratics".into(),
        pass: sym.pass && (sym.weights[0] - 0.5).abs() < 1e-12,
        detail: format!("residual {:e}, weights {:?}", sym.residual, sym.weights),
    });
    let robust = crate::learners::fit_robust_moments(&risks, &vec![0.0; risks.len()], &crate::learners::RobustConfig::default())
        .map_err(|e| TheoryError::Postcondition(e.to_string()))?;
    let kkt = verify_robust_kkt(&risks, &robust.v, config.kkt_tolerance)?;
    checks.push(SuiteCheck {
        name: "kkt_robust_fit".into(),
        pass: kkt.pass,
        detail: format!("residual {:e} at v = {:?}", kkt.residual, robust.v),
    });

    let manifold = sample_orthogonality_manifold(&risks, config.ellipsoid_resolution, ORTHOGONALITY_TOL)?;
    let contains_origin = manifold.clouds.iter().all(|c| c.iter().any(|p| p.v.iter().all(|&x| x == 0.0)));
    let within = manifold.max_residual() <= manifold.tolerance;
    checks.push(SuiteCheck {
        name: "ellipsoid_clouds".into(),
        pass: contains_origin && within,
        detail: format!(
            "{} points, {} intersections, max residual {:e}, origin on every cloud: {contains_origin}",
            manifold.clouds.iter().map(Vec::len).sum::<usize>(),
            manifold.intersections.len(),
            manifold.max_residual()
        ),
    });
    Ok(SuiteReport { checks, general_position, manifold })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_min_norm_on_segment() {
        let (lam, r) = simplex_min_norm(&[vec![2.0, 1.0], vec![-1.0, 1.0]]).unwrap();
        // min over t of ‖t(2,1) + (1−t)(−1,1)‖ at t = 1/3
        assert!((lam[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simplex_min_norm_at_vertex() {
        let (lam, r) = simplex_min_norm(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(lam, vec![1.0, 0.0]);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn moments_validation() {
        assert!(EnvironmentMoments::new(Matrix::from_rows(&[[1.0, 0.5], [0.4, 1.0]]).unwrap(), vec![0.0; 2]).is_err());
        assert!(EnvironmentMoments::new(Matrix::diag(&[1.0, -1.0]), vec![0.0; 2]).is_err());
        assert!(EnvironmentMoments::new(Matrix::identity(2), vec![0.0; 3]).is_err());
        assert!(EnvironmentMoments::new(Matrix::identity(2), vec![0.0; 2]).is_ok());
    }
}
