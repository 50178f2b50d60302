//! Single-level problems `min_x (1/n) sum_i f_i(x)` and the adapter that
//! embeds them as bilevel problems with a trivial lower level.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BilevelProblem, Smoothness};
use crate::error::{config, Result};
use crate::seed;
use crate::stack::axpy;

pub trait SingleLevelProblem: Send + Sync {
    fn name(&self) -> &str;
    fn n(&self) -> usize;
    fn dim(&self) -> usize;
    fn value(&self, i: usize, x: &[f64]) -> f64;
    fn grad(&self, i: usize, x: &[f64]) -> Vec<f64>;
    fn optimal_x(&self) -> Option<Vec<f64>> {
        None
    }
}

impl<T: SingleLevelProblem + ?Sized> SingleLevelProblem for std::sync::Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn n(&self) -> usize {
        (**self).n()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, i: usize, x: &[f64]) -> f64 {
        (**self).value(i, x)
    }
    fn grad(&self, i: usize, x: &[f64]) -> Vec<f64> {
        (**self).grad(i, x)
    }
    fn optimal_x(&self) -> Option<Vec<f64>> {
        (**self).optimal_x()
    }
}

/// `grad F(x) = (1/n) sum_i grad f_i(x)`
pub fn mean_grad(p: &dyn SingleLevelProblem, x: &[f64]) -> Vec<f64> {
    let mut s = vec![0.0; p.dim()];
    for i in 0..p.n() {
        axpy(&mut s, 1.0, &p.grad(i, x));
    }
    s.iter_mut().for_each(|v| *v /= p.n() as f64);
    s
}

pub fn mean_value(p: &dyn SingleLevelProblem, x: &[f64]) -> f64 {
    (0..p.n()).map(|i| p.value(i, x)).sum::<f64>() / p.n() as f64
}

/// `f_i(x, y) = f_i(x)`, `g_i(x, y) = mu/2 ||y||^2` with `dy` lower coordinates.
pub struct Lifted<S> {
    pub inner: S,
    pub dy: usize,
    pub mu: f64,
}

impl<S: SingleLevelProblem> Lifted<S> {
    pub fn new(inner: S, dy: usize, mu: f64) -> Self {
        Self { inner, dy, mu }
    }
}

impl<S: SingleLevelProblem> BilevelProblem for Lifted<S> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn n(&self) -> usize {
        self.inner.n()
    }
    fn dx(&self) -> usize {
        self.inner.dim()
    }
    fn dy(&self) -> usize {
        self.dy
    }
    fn f(&self, i: usize, x: &[f64], _y: &[f64]) -> f64 {
        self.inner.value(i, x)
    }
    fn g(&self, _i: usize, _x: &[f64], y: &[f64]) -> f64 {
        0.5 * self.mu * crate::stack::norm_sq(y)
    }
    fn grad_f_x(&self, i: usize, x: &[f64], _y: &[f64]) -> Vec<f64> {
        self.inner.grad(i, x)
    }
    fn grad_f_y(&self, _i: usize, _x: &[f64], y: &[f64]) -> Vec<f64> {
        vec![0.0; y.len()]
    }
    fn grad_g_x(&self, _i: usize, x: &[f64], _y: &[f64]) -> Vec<f64> {
        vec![0.0; x.len()]
    }
    fn grad_g_y(&self, _i: usize, _x: &[f64], y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| self.mu * v).collect()
    }
    fn hvp_g_yy(&self, _i: usize, _x: &[f64], _y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(v.iter().map(|a| self.mu * a).collect())
    }
    fn jvp_g_xy(&self, _i: usize, x: &[f64], _y: &[f64], _v: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; x.len()])
    }
    fn hvp_f_yy(&self, _i: usize, _x: &[f64], _y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; v.len()])
    }
    fn lower_solution(&self, _x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.dy])
    }
    fn optimal_x(&self) -> Option<Vec<f64>> {
        self.inner.optimal_x()
    }
    fn smoothness(&self) -> Smoothness {
        Smoothness { mu: Some(self.mu), l_g1: Some(self.mu), ..Smoothness::default() }
    }
}

/// Strongly convex `f_i(x) = 1/2 x^T H_i x + b_i^T x`.
#[derive(Debug, Clone)]
pub struct QuadraticSingle {
    h: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    x_star: Vec<f64>,
}

impl QuadraticSingle {
    pub fn build(n: usize, dim: usize, seed: u64) -> Result<Self> {
        if n == 0 || dim == 0 {
            return config("single-level quadratic needs n, dim >= 1");
        }
        let mut rng = seed::rng_from(&[seed, 0x5351]);
        let mut g = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let base = g(dim, dim);
        let b_base = g(dim, 1);
        let mut h = Vec::new();
        let mut b = Vec::new();
        for _ in 0..n {
            let m = &base + g(dim, dim) * 0.5;
            h.push(&m * m.transpose() / dim as f64 + DMatrix::identity(dim, dim) * 0.5);
            b.push((&b_base + g(dim, 1)).column(0).into_owned());
        }
        let mut hs = DMatrix::zeros(dim, dim);
        let mut bs = DVector::zeros(dim);
        for (hi, bi) in h.iter().zip(&b) {
            hs += hi;
            bs += bi;
        }
        let x_star = hs.cholesky().expect("sum of positive definite blocks").solve(&(-bs));
        Ok(Self { h, b, x_star: x_star.as_slice().to_vec() })
    }
}

impl SingleLevelProblem for QuadraticSingle {
    fn name(&self) -> &str {
        "quadratic_single"
    }
    fn n(&self) -> usize {
        self.h.len()
    }
    fn dim(&self) -> usize {
        self.b[0].len()
    }
    fn value(&self, i: usize, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        0.5 * xv.dot(&(&self.h[i] * &xv)) + self.b[i].dot(&xv)
    }
    fn grad(&self, i: usize, x: &[f64]) -> Vec<f64> {
        (&self.h[i] * DVector::from_column_slice(x) + &self.b[i]).as_slice().to_vec()
    }
    fn optimal_x(&self) -> Option<Vec<f64>> {
        Some(self.x_star.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonconvexSpec {
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    /// Cosine amplitude or heterogeneity spread, depending on the benchmark.
    #[serde(default = "d_c")]
    pub c: f64,
}

fn d_n() -> usize {
    10
}
fn d_dim() -> usize {
    5
}
fn d_c() -> f64 {
    0.3
}

impl Default for NonconvexSpec {
    fn default() -> Self {
        Self { n: d_n(), dim: d_dim(), seed: 0, c: d_c() }
    }
}

/// `f_i(x) = ||x||^2 + a_i^T x + c sum_j cos(x_j)`
#[derive(Debug, Clone)]
pub struct CosineSingle {
    a: Vec<Vec<f64>>,
    c: f64,
}

impl CosineSingle {
    pub fn build(spec: &NonconvexSpec) -> Result<Self> {
        if spec.n == 0 || spec.dim == 0 {
            return config("benchmark needs n, dim >= 1");
        }
        let mut rng = seed::rng_from(&[spec.seed, 0x434F]);
        let a = (0..spec.n).map(|_| (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
        Ok(Self { a, c: spec.c })
    }
}

impl SingleLevelProblem for CosineSingle {
    fn name(&self) -> &str {
        "cosine"
    }
    fn n(&self) -> usize {
        self.a.len()
    }
    fn dim(&self) -> usize {
        self.a[0].len()
    }
    fn value(&self, i: usize, x: &[f64]) -> f64 {
        x.iter().zip(&self.a[i]).map(|(v, a)| v * v + a * v + self.c * v.cos()).sum()
    }
    fn grad(&self, i: usize, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.a[i]).map(|(v, a)| 2.0 * v + a - self.c * v.sin()).collect()
    }
}

/// `f_i(x) = sum_j (1 + x_j^2)^{-1/2} + (c_i / 2) ||x||^2` with `sum_i c_i = 0`.
/// The average has no minimizer, so gradient descent only reaches
/// stationarity at a sublinear rate.
#[derive(Debug, Clone)]
pub struct BumpSingle {
    c: Vec<f64>,
    dim: usize,
}

impl BumpSingle {
    pub fn build(spec: &NonconvexSpec) -> Result<Self> {
        if spec.n == 0 || spec.dim == 0 || !(spec.c >= 0.0) {
            return config("benchmark needs n, dim >= 1 and a nonnegative spread");
        }
        let mut rng = seed::rng_from(&[spec.seed, 0x4255]);
        let dist = Normal::new(0.0, spec.c).map_err(|e| crate::error::FabError::Config(e.to_string()))?;
        let mut c: Vec<f64> = (0..spec.n).map(|_| rng.sample(dist)).collect();
        let m = c.iter().sum::<f64>() / spec.n as f64;
        c.iter_mut().for_each(|v| *v -= m);
        Ok(Self { c, dim: spec.dim })
    }
}

impl SingleLevelProblem for BumpSingle {
    fn name(&self) -> &str {
        "bump"
    }
    fn n(&self) -> usize {
        self.c.len()
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, i: usize, x: &[f64]) -> f64 {
        x.iter().map(|v| (1.0 + v * v).powf(-0.5) + 0.5 * self.c[i] * v * v).sum()
    }
    fn grad(&self, i: usize, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| -v * (1.0 + v * v).powf(-1.5) + self.c[i] * v).collect()
    }
}
