//! Fully connected rectifier network with hand-written backpropagation.
//!
//! Parameters and activations are generic over the float type so the same
//! code runs in `f32` for training and in `f64` for gradient checks.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::invariance::{Loss, Representation};
use crate::numkit::{Matrix, Rng};
use crate::sem::Dataset;

pub trait Scalar: Float + Default + Send + Sync + std::fmt::Debug + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C ← α·A·B + β·C` on strided storage.
    ///
    /// # Safety
    /// The strides and sizes must describe in-bounds views of the buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A row-major `rows × cols` view, optionally read transposed.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a, T> View<'a, T> {
    fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "view size");
        Self { data, rows, cols, transposed: false }
    }

    fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c ← a·b + β·c` with `c` row-major.
fn gemm<T: Scalar>(a: View<T>, b: View<T>, beta: T, c: &mut [T]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimension");
    assert_eq!(c.len(), m * n, "output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the views were size-checked on construction and the output
    // length is checked above, so every strided access stays in bounds.
    unsafe {
        T::gemm_raw(m, k, n, T::one(), a.data.as_ptr(), rsa, csa, b.data.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Inputs with at most this fraction of non-zeros take the sparse path.
const SPARSE_DENSITY: f64 = 0.3;

fn is_sparse<T: Scalar>(x: &[T]) -> bool {
    let nnz = x.iter().filter(|v| **v != T::zero()).count();
    (nnz as f64) <= SPARSE_DENSITY * x.len() as f64
}

/// `z += x·w` skipping zero entries of `x` (`n × k` times `k × m`).
fn sparse_matmul_acc<T: Scalar>(x: &[T], n: usize, k: usize, w: &[T], m: usize, z: &mut [T]) {
    for (row, out) in x.chunks_exact(k).zip(z.chunks_exact_mut(m)).take(n) {
        for (j, &v) in row.iter().enumerate() {
            if v != T::zero() {
                for (o, &wj) in out.iter_mut().zip(&w[j * m..(j + 1) * m]) {
                    *o = *o + v * wj;
                }
            }
        }
    }
}

/// `g = xᵀ·d` skipping zero entries of `x`.
fn sparse_tr_matmul<T: Scalar>(x: &[T], n: usize, k: usize, d: &[T], m: usize, g: &mut [T]) {
    g.iter_mut().for_each(|v| *v = T::zero());
    for (row, drow) in x.chunks_exact(k).zip(d.chunks_exact(m)).take(n) {
        for (j, &v) in row.iter().enumerate() {
            if v != T::zero() {
                for (o, &dj) in g[j * m..(j + 1) * m].iter_mut().zip(drow) {
                    *o = *o + v * dj;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub sizes: Vec<usize>,
    /// Layer `l` maps `sizes[l]` to `sizes[l+1]`, stored `in × out`.
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

pub type MlpModel = Mlp<f32>;

/// Activations kept for the backward pass.
pub struct Forward<T> {
    pub hidden: Vec<Vec<T>>,
    pub logits: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| T::of((2.0 * rng.uniform() - 1.0) * limit)).collect());
            biases.push(vec![T::zero(); fan_out]);
        }
        Self { sizes: sizes.to_vec(), weights, biases }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            sizes: self.sizes.clone(),
            weights: self.weights.iter().map(|w| vec![T::zero(); w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().expect("sizes")
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &T> {
        self.weights.iter().chain(&self.biases).flatten()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).flatten()
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        let conv = |v: &Vec<T>| v.iter().map(|&x| U::of(x.as_f64())).collect();
        Mlp { sizes: self.sizes.clone(), weights: self.weights.iter().map(conv).collect(), biases: self.biases.iter().map(conv).collect() }
    }

    /// `x` holds `n` rows of `in_dim` features.
    pub fn forward(&self, x: &[T], n: usize) -> Forward<T> {
        let mut hidden: Vec<Vec<T>> = Vec::with_capacity(self.layers() - 1);
        let mut logits = Vec::new();
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = if l == 0 { x } else { &hidden[l - 1] };
            let mut z: Vec<T> = self.biases[l].iter().copied().cycle().take(n * fan_out).collect();
            if l == 0 && is_sparse(input) {
                sparse_matmul_acc(input, n, fan_in, &self.weights[l], fan_out, &mut z);
            } else {
                gemm(View::new(input, n, fan_in), View::new(&self.weights[l], fan_in, fan_out), T::one(), &mut z);
            }
            if l + 1 < self.layers() {
                z.iter_mut().for_each(|v| *v = v.max(T::zero()));
                hidden.push(z);
            } else {
                logits = z;
            }
        }
        Forward { hidden, logits }
    }

    /// Parameter gradient given `∂J/∂logits`.
    pub fn backward(&self, x: &[T], n: usize, fwd: &Forward<T>, dlogits: Vec<T>) -> Mlp<T> {
        let mut grad = self.zeros_like();
        let mut delta = dlogits;
        for l in (0..self.layers()).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = if l == 0 { x } else { &fwd.hidden[l - 1] };
            if l == 0 && is_sparse(input) {
                sparse_tr_matmul(input, n, fan_in, &delta, fan_out, &mut grad.weights[l]);
            } else {
                gemm(View::new(input, n, fan_in).t(), View::new(&delta, n, fan_out), T::zero(), &mut grad.weights[l]);
            }
            let gb = &mut grad.biases[l];
            for row in delta.chunks_exact(fan_out) {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g = *g + d;
                }
            }
            if l > 0 {
                let mut prev = vec![T::zero(); n * fan_in];
                gemm(View::new(&delta, n, fan_out), View::new(&self.weights[l], fan_in, fan_out).t(), T::zero(), &mut prev);
                for (p, &a) in prev.iter_mut().zip(&fwd.hidden[l - 1]) {
                    if a <= T::zero() {
                        *p = T::zero();
                    }
                }
                delta = prev;
            }
        }
        grad
    }

    pub fn logits(&self, x: &[T], n: usize) -> Vec<T> {
        self.forward(x, n).logits
    }
}

impl<T: Scalar> Representation for Mlp<T> {
    fn outputs(&self, x: &Matrix) -> Matrix {
        let xs: Vec<T> = x.as_slice().iter().map(|&v| T::of(v)).collect();
        let out = self.logits(&xs, x.rows());
        Matrix::new(x.rows(), self.out_dim(), out.into_iter().map(Scalar::as_f64).collect()).expect("output shape")
    }
}

/// One environment's inputs converted to the network's float type.
#[derive(Debug, Clone)]
pub struct EnvData<T> {
    pub x: Vec<T>,
    pub y: Vec<f64>,
    pub n: usize,
    pub dim: usize,
}

impl<T: Scalar> EnvData<T> {
    pub fn from_dataset(data: &Dataset) -> Self {
        Self { x: data.x.as_slice().iter().map(|&v| T::of(v)).collect(), y: data.y.clone(), n: data.len(), dim: data.dim() }
    }

    pub fn rows(&self, idx: &[usize]) -> Self {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            x.extend_from_slice(&self.x[i * self.dim..(i + 1) * self.dim]);
        }
        Self { x, y: idx.iter().map(|&i| self.y[i]).collect(), n: idx.len(), dim: self.dim }
    }
}

/// Value of the penalized objective and its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub risks: Vec<f64>,
    pub penalties: Vec<f64>,
}

/// Per-example dummy-classifier statistics of one environment:
/// risk, `g = mean ℓ′(f)·f`, and the two output-gradient coefficients.
fn env_terms(logits: &[f64], y: &[f64], out: usize, loss: Loss) -> (f64, f64) {
    let n = y.len() as f64;
    let mut risk = 0.0;
    let mut g = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        for &f in &logits[i * out..(i + 1) * out] {
            risk += loss.value(f, yi);
            g += loss.d1(f, yi) * f;
        }
    }
    (risk / n, g / n)
}

/// Output gradient of `c_risk·R + c_pen·g` with `g` the dummy gradient.
fn output_gradient<T: Scalar>(logits: &[f64], y: &[f64], out: usize, loss: Loss, c_risk: f64, c_pen: f64) -> Vec<T> {
    let n = y.len() as f64;
    let mut d = Vec::with_capacity(logits.len());
    for (i, &yi) in y.iter().enumerate() {
        for &f in &logits[i * out..(i + 1) * out] {
            let l1 = loss.d1(f, yi);
            d.push(T::of((c_risk * l1 + c_pen * (loss.d2(f) * f + l1)) / n));
        }
    }
    d
}

fn add_into<T: Scalar>(acc: &mut Mlp<T>, g: &Mlp<T>) {
    for (a, b) in acc.params_mut().zip(g.params()) {
        *a = *a + *b;
    }
}

/// `(Σ_e R^e + μ·Σ_e (∇_{w|w=1} R^e)² + wd·‖θ‖²) / max(1, μ)` and its gradient.
pub fn full_batch_objective<T: Scalar>(
    model: &Mlp<T>,
    envs: &[EnvData<T>],
    penalty_weight: f64,
    weight_decay: f64,
    loss: Loss,
) -> (ObjectiveValue, Mlp<T>) {
    let scale = 1.0 / penalty_weight.max(1.0);
    let out = model.out_dim();
    let mut grad = model.zeros_like();
    let mut risks = Vec::with_capacity(envs.len());
    let mut penalties = Vec::with_capacity(envs.len());
    for env in envs {
        let fwd = model.forward(&env.x, env.n);
        let logits: Vec<f64> = fwd.logits.iter().map(|v| v.as_f64()).collect();
        let (risk, g) = env_terms(&logits, &env.y, out, loss);
        let dlogits = output_gradient(&logits, &env.y, out, loss, scale, scale * penalty_weight * 2.0 * g);
        add_into(&mut grad, &model.backward(&env.x, env.n, &fwd, dlogits));
        risks.push(risk);
        penalties.push(g * g);
    }
    let loss_value = finish(model, &mut grad, &risks, &penalties, penalty_weight, weight_decay, scale);
    (ObjectiveValue { loss: loss_value, risks, penalties }, grad)
}

/// Same objective with each environment's penalty replaced by the product
/// of dummy gradients on two disjoint batches `(a, b)`.
pub fn minibatch_objective<T: Scalar>(
    model: &Mlp<T>,
    batches: &[(EnvData<T>, EnvData<T>)],
    penalty_weight: f64,
    weight_decay: f64,
    loss: Loss,
) -> (ObjectiveValue, Mlp<T>) {
    let scale = 1.0 / penalty_weight.max(1.0);
    let out = model.out_dim();
    let mut grad = model.zeros_like();
    let mut risks = Vec::with_capacity(batches.len());
    let mut penalties = Vec::with_capacity(batches.len());
    for (a, b) in batches {
        let fa = model.forward(&a.x, a.n);
        let fb = model.forward(&b.x, b.n);
        let la: Vec<f64> = fa.logits.iter().map(|v| v.as_f64()).collect();
        let lb: Vec<f64> = fb.logits.iter().map(|v| v.as_f64()).collect();
        let (ra, ga) = env_terms(&la, &a.y, out, loss);
        let (rb, gb) = env_terms(&lb, &b.y, out, loss);
        // the risk is averaged over both halves
        let da = output_gradient(&la, &a.y, out, loss, 0.5 * scale, scale * penalty_weight * gb);
        let db = output_gradient(&lb, &b.y, out, loss, 0.5 * scale, scale * penalty_weight * ga);
        add_into(&mut grad, &model.backward(&a.x, a.n, &fa, da));
        add_into(&mut grad, &model.backward(&b.x, b.n, &fb, db));
        risks.push(0.5 * (ra + rb));
        penalties.push(ga * gb);
    }
    let loss_value = finish(model, &mut grad, &risks, &penalties, penalty_weight, weight_decay, scale);
    (ObjectiveValue { loss: loss_value, risks, penalties }, grad)
}

fn finish<T: Scalar>(
    model: &Mlp<T>,
    grad: &mut Mlp<T>,
    risks: &[f64],
    penalties: &[f64],
    penalty_weight: f64,
    weight_decay: f64,
    scale: f64,
) -> f64 {
    let mut sq = 0.0;
    if weight_decay > 0.0 {
        let c = T::of(2.0 * weight_decay * scale);
        for (g, &p) in grad.params_mut().zip(model.params()) {
            *g = *g + c * p;
            sq += p.as_f64() * p.as_f64();
        }
    }
    let total = risks.iter().sum::<f64>() + penalty_weight * penalties.iter().sum::<f64>() + weight_decay * sq;
    total * scale
}

/// Fraction of rows whose sign of the first logit matches the 0/1 target.
pub fn accuracy<T: Scalar>(model: &Mlp<T>, env: &EnvData<T>) -> f64 {
    let logits = model.logits(&env.x, env.n);
    let out = model.out_dim();
    let hits = env.y.iter().enumerate().filter(|(i, &y)| (logits[i * out] > T::zero()) == (y > 0.5)).count();
    hits as f64 / env.n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_and_dense_products_agree() {
        let mut rng = Rng::new(4);
        let (n, k, m) = (13, 9, 5);
        let x: Vec<f64> = (0..n * k).map(|_| if rng.bernoulli(0.2) { rng.standard_normal() } else { 0.0 }).collect();
        let w: Vec<f64> = (0..k * m).map(|_| rng.standard_normal()).collect();
        let d: Vec<f64> = (0..n * m).map(|_| rng.standard_normal()).collect();
        assert!(is_sparse(&x));

        let mut dense = vec![1.0; n * m];
        gemm(View::new(&x, n, k), View::new(&w, k, m), 1.0, &mut dense);
        let mut sparse = vec![1.0; n * m];
        sparse_matmul_acc(&x, n, k, &w, m, &mut sparse);
        assert!(dense.iter().zip(&sparse).all(|(a, b)| (a - b).abs() < 1e-12));

        let mut dense = vec![0.0; k * m];
        gemm(View::new(&x, n, k).t(), View::new(&d, n, m), 0.0, &mut dense);
        let mut sparse = vec![7.0; k * m];
        sparse_tr_matmul(&x, n, k, &d, m, &mut sparse);
        assert!(dense.iter().zip(&sparse).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
