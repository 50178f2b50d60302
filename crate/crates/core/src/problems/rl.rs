//! Distributed policy evaluation with linear value approximation.
//!
//! Upper level: `f_i(x, y) = c [ (1/2S) sum_s (phi_s^T x - y_s)^2 + tau/2 ||x||^2 ]`.
//! Lower level: `g_i(x, y) = c' sum_s (y_s - r_i(s) - gamma (P phi)_s^T x)^2`.
//! With `c = c' = 1` this is the textbook split; other positive scalings
//! leave `y*(x)` and `x*` unchanged.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::single::SingleLevelProblem;
use super::{BilevelProblem, Smoothness};
use crate::error::{config, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlSpec {
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_states")]
    pub states: usize,
    #[serde(default = "d_features")]
    pub features: usize,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub upper_scale: f64,
    #[serde(default = "one")]
    pub lower_scale: f64,
}

fn d_n() -> usize {
    10
}
fn d_states() -> usize {
    20
}
fn d_features() -> usize {
    5
}
fn d_gamma() -> f64 {
    0.9
}
fn d_tau() -> f64 {
    0.1
}
fn one() -> f64 {
    1.0
}

impl Default for RlSpec {
    fn default() -> Self {
        Self {
            n: d_n(),
            states: d_states(),
            features: d_features(),
            gamma: d_gamma(),
            tau: d_tau(),
            seed: 0,
            upper_scale: 1.0,
            lower_scale: 1.0,
        }
    }
}

impl RlSpec {
    /// Scaling used for the sensitivity study: `c = 6`, `c' = 0.3`, i.e. a
    /// state-averaged lower level weighted six times the textbook upper level.
    pub fn sensitivity(seed: u64) -> Self {
        Self { seed, upper_scale: 6.0, lower_scale: 0.3, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct RlProblem {
    spec: RlSpec,
    phi: DMatrix<f64>,
    /// `gamma P Phi`
    m: DMatrix<f64>,
    rewards: Vec<DVector<f64>>,
    r_bar: DVector<f64>,
    x_star: Vec<f64>,
    consts: Smoothness,
}

pub fn build_rl_problem(spec: &RlSpec) -> Result<RlProblem> {
    let RlSpec { n, states: s, features: d, gamma, tau, seed, upper_scale, lower_scale } = *spec;
    if n == 0 {
        return config("RL problem needs at least one agent");
    }
    if s <= d || d == 0 {
        return config(format!("need |S| > d >= 1, got |S| = {s}, d = {d}"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return config(format!("discount {gamma} outside (0, 1)"));
    }
    if !(tau > 0.0) || !(upper_scale > 0.0) || !(lower_scale > 0.0) {
        return config("tau and the objective scales must be positive");
    }
    let mut rng = seed::rng_from(&[seed, 0x524C]);
    let phi = DMatrix::from_fn(s, d, |_, _| rng.random::<f64>());
    let mut p = DMatrix::from_fn(s, s, |_, _| rng.random::<f64>());
    for mut row in p.row_iter_mut() {
        let t: f64 = row.sum();
        row /= t;
    }
    let rewards: Vec<_> = (0..n).map(|_| DVector::from_fn(s, |_, _| rng.random::<f64>())).collect();
    let mut r_bar = DVector::zeros(s);
    for r in &rewards {
        r_bar += r;
    }
    r_bar /= n as f64;
    let m = (&p * &phi) * gamma;
    let c = &phi - &m;
    let sf = s as f64;
    let normal = c.tr_mul(&c) / sf + DMatrix::identity(d, d) * tau;
    let rhs = c.tr_mul(&r_bar) / sf;
    let x_star = normal.cholesky().expect("regularized normal matrix is positive definite").solve(&rhs);

    let mut hf = DMatrix::zeros(d + s, d + s);
    hf.view_mut((0, 0), (d, d)).copy_from(&(phi.tr_mul(&phi) / sf + DMatrix::identity(d, d) * tau));
    hf.view_mut((0, d), (d, s)).copy_from(&(-phi.transpose() / sf));
    hf.view_mut((d, 0), (s, d)).copy_from(&(-&phi / sf));
    hf.view_mut((d, d), (s, s)).fill_with_identity();
    hf.view_mut((d, d), (s, s)).scale_mut(1.0 / sf);
    let l_f1 = upper_scale * SymmetricEigen::new(hf).eigenvalues.max();
    let mut hg = DMatrix::zeros(d + s, d + s);
    hg.view_mut((0, 0), (d, d)).copy_from(&m.tr_mul(&m));
    hg.view_mut((0, d), (d, s)).copy_from(&(-m.transpose()));
    hg.view_mut((d, 0), (s, d)).copy_from(&(-&m));
    hg.view_mut((d, d), (s, s)).fill_with_identity();
    let l_g1 = 2.0 * lower_scale * SymmetricEigen::new(hg).eigenvalues.max();

    Ok(RlProblem {
        spec: *spec,
        phi,
        m,
        rewards,
        r_bar,
        x_star: x_star.as_slice().to_vec(),
        consts: Smoothness {
            l_f0: None,
            l_f1: Some(l_f1),
            l_f2: Some(0.0),
            l_g1: Some(l_g1),
            l_g2: Some(0.0),
            mu: Some(2.0 * lower_scale),
        },
    })
}

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn out(v: DVector<f64>) -> Vec<f64> {
    v.as_slice().to_vec()
}

impl RlProblem {
    pub fn spec(&self) -> &RlSpec {
        &self.spec
    }

    fn sf(&self) -> f64 {
        self.spec.states as f64
    }

    /// `y - r_i - M x`
    fn bellman_residual(&self, i: usize, x: &[f64], y: &[f64]) -> DVector<f64> {
        dv(y) - &self.rewards[i] - &self.m * dv(x)
    }

    /// `Phi x - y`
    fn fit_residual(&self, x: &[f64], y: &[f64]) -> DVector<f64> {
        &self.phi * dv(x) - dv(y)
    }

    /// Same data viewed as the single-level regression
    /// `(c/2S) ||(Phi - gamma P Phi) x - r_i||^2 + (c tau/2) ||x||^2`.
    pub fn single_level(&self) -> RlSingle {
        RlSingle { inner: self.clone() }
    }
}

impl BilevelProblem for RlProblem {
    fn name(&self) -> &str {
        "rl"
    }
    fn n(&self) -> usize {
        self.rewards.len()
    }
    fn dx(&self) -> usize {
        self.spec.features
    }
    fn dy(&self) -> usize {
        self.spec.states
    }

    fn f(&self, _i: usize, x: &[f64], y: &[f64]) -> f64 {
        let c = self.spec.upper_scale;
        c * (self.fit_residual(x, y).norm_squared() / (2.0 * self.sf()) + 0.5 * self.spec.tau * dv(x).norm_squared())
    }

    fn g(&self, i: usize, x: &[f64], y: &[f64]) -> f64 {
        self.spec.lower_scale * self.bellman_residual(i, x, y).norm_squared()
    }

    fn grad_f_x(&self, _i: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        let c = self.spec.upper_scale;
        out((self.phi.tr_mul(&self.fit_residual(x, y)) / self.sf() + dv(x) * self.spec.tau) * c)
    }

    fn grad_f_y(&self, _i: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        out(self.fit_residual(x, y) * (-self.spec.upper_scale / self.sf()))
    }

    fn grad_g_x(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        out(self.m.tr_mul(&self.bellman_residual(i, x, y)) * (-2.0 * self.spec.lower_scale))
    }

    fn grad_g_y(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        out(self.bellman_residual(i, x, y) * (2.0 * self.spec.lower_scale))
    }

    fn observation_dim(&self) -> usize {
        self.rewards[0].len()
    }

    fn observation_shift_y(&self, _i: usize, eps: &[f64]) -> Result<Vec<f64>> {
        Ok(eps.iter().map(|e| -2.0 * self.spec.lower_scale * e).collect())
    }

    fn hvp_g_yy(&self, _i: usize, _x: &[f64], _y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(v.iter().map(|a| 2.0 * self.spec.lower_scale * a).collect())
    }

    fn jvp_g_xy(&self, _i: usize, _x: &[f64], _y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(out(self.m.tr_mul(&dv(v)) * (-2.0 * self.spec.lower_scale)))
    }

    fn hvp_f_yy(&self, _i: usize, _x: &[f64], _y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(v.iter().map(|a| self.spec.upper_scale * a / self.sf()).collect())
    }

    /// `y*(x)_s = rbar(s) + gamma (P phi)_s^T x`
    fn lower_solution(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(out(&self.r_bar + &self.m * dv(x)))
    }

    fn optimal_x(&self) -> Option<Vec<f64>> {
        Some(self.x_star.clone())
    }

    fn smoothness(&self) -> Smoothness {
        self.consts
    }
}

#[derive(Debug, Clone)]
pub struct RlSingle {
    inner: RlProblem,
}

impl RlSingle {
    fn residual(&self, i: usize, x: &[f64]) -> DVector<f64> {
        let p = &self.inner;
        (&p.phi - &p.m) * dv(x) - &p.rewards[i]
    }
}

impl SingleLevelProblem for RlSingle {
    fn name(&self) -> &str {
        "rl_single"
    }
    fn n(&self) -> usize {
        self.inner.rewards.len()
    }
    fn dim(&self) -> usize {
        self.inner.spec.features
    }
    fn value(&self, i: usize, x: &[f64]) -> f64 {
        let sp = &self.inner.spec;
        sp.upper_scale * (self.residual(i, x).norm_squared() / (2.0 * self.inner.sf()) + 0.5 * sp.tau * dv(x).norm_squared())
    }
    fn grad(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let p = &self.inner;
        let c = &p.phi - &p.m;
        out((c.tr_mul(&self.residual(i, x)) / p.sf() + dv(x) * p.spec.tau) * p.spec.upper_scale)
    }
    fn optimal_x(&self) -> Option<Vec<f64>> {
        Some(self.inner.x_star.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::fd::{grad, rel_err};
    use crate::problems::{hyper_objective, hypergradient, local_penalty_gradients, penalty_value, single};
    use crate::stack::norm;

    fn probe(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dimensions_and_validation() {
        let p = build_rl_problem(&RlSpec::default()).unwrap();
        assert_eq!((p.n(), p.dx(), p.dy()), (10, 5, 20));
        assert!(build_rl_problem(&RlSpec { states: 5, ..RlSpec::default() }).is_err());
        assert!(build_rl_problem(&RlSpec { gamma: 1.0, ..RlSpec::default() }).is_err());
    }

    #[test]
    fn lower_solution_closed_form() {
        let p = build_rl_problem(&RlSpec::default()).unwrap();
        let x = [0.1, -0.2, 0.3, 0.0, 1.0];
        let y = p.lower_solution(&x).unwrap();
        for s in 0..20 {
            let want = p.r_bar[s] + (0..5).map(|k| p.m[(s, k)] * x[k]).sum::<f64>();
            assert!((y[s] - want).abs() < 1e-15);
        }
        let mut tot = vec![0.0; 20];
        for i in 0..10 {
            crate::stack::axpy(&mut tot, 1.0, &p.grad_g_y(i, &x, &y));
        }
        assert!(norm(&tot) <= 1e-8 * 10.0);
    }

    #[test]
    fn stationary_at_least_squares_solution() {
        for spec in [RlSpec::default(), RlSpec::sensitivity(3)] {
            let p = build_rl_problem(&spec).unwrap();
            let xs = p.optimal_x().unwrap();
            assert!(norm(&hypergradient(&p, &xs).unwrap()) < 1e-7);
            assert!(norm(&single::mean_grad(&p.single_level(), &xs)) < 1e-12);
        }
    }

    #[test]
    fn oracles_match_finite_differences() {
        let p = build_rl_problem(&RlSpec::sensitivity(1)).unwrap();
        let mut rng = seed::rng_from(&[4]);
        for _ in 0..20 {
            let (x, y, z) = (probe(&mut rng, 5), probe(&mut rng, 20), probe(&mut rng, 20));
            let i = rng.random_range(0..10);
            assert!(rel_err(&p.grad_f_x(i, &x, &y), &grad(|a| p.f(i, a, &y), &x, 1e-6)) < 1e-5);
            assert!(rel_err(&p.grad_f_y(i, &x, &y), &grad(|a| p.f(i, &x, a), &y, 1e-6)) < 1e-5);
            assert!(rel_err(&p.grad_g_x(i, &x, &y), &grad(|a| p.g(i, a, &y), &x, 1e-6)) < 1e-5);
            assert!(rel_err(&p.grad_g_y(i, &x, &y), &grad(|a| p.g(i, &x, a), &y, 1e-6)) < 1e-5);
            // Penalty directions against the single-agent penalty objective.
            let lam = 3.0;
            let d = local_penalty_gradients(&p, i, &x, &y, &z, lam, None).unwrap();
            let li = |xx: &[f64], yy: &[f64], zz: &[f64]| p.f(i, xx, yy) + lam * (p.g(i, xx, yy) - p.g(i, xx, zz));
            assert!(rel_err(&d.dx, &grad(|a| li(a, &y, &z), &x, 1e-6)) < 1e-5);
            assert!(rel_err(&d.dy, &grad(|a| li(&x, a, &z), &y, 1e-6)) < 1e-5);
            let neg_dz: Vec<f64> = grad(|a| li(&x, &y, a), &z, 1e-6).iter().map(|v| -v).collect();
            assert!(rel_err(&d.dz, &neg_dz) < 1e-5);
            // Second-order products against differences of gradients.
            let v = probe(&mut rng, 20);
            let h = 1e-6;
            let yp: Vec<f64> = y.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let ym: Vec<f64> = y.iter().zip(&v).map(|(a, b)| a - h * b).collect();
            let fd_hv: Vec<f64> =
                p.grad_g_y(i, &x, &yp).iter().zip(p.grad_g_y(i, &x, &ym)).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            assert!(rel_err(&p.hvp_g_yy(i, &x, &y, &v).unwrap(), &fd_hv) < 1e-5);
            let fd_jv: Vec<f64> =
                p.grad_g_x(i, &x, &yp).iter().zip(p.grad_g_x(i, &x, &ym)).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            assert!(rel_err(&p.jvp_g_xy(i, &x, &y, &v).unwrap(), &fd_jv) < 1e-5);
        }
        let _ = penalty_value(&p, &[0.0; 5], &[0.0; 20], &[0.0; 20], 1.0);
    }

    #[test]
    fn hypergradient_at_zero_matches_finite_differences() {
        let p = build_rl_problem(&RlSpec::default()).unwrap();
        let x = vec![0.0; 5];
        let fd = grad(|a| hyper_objective(&p, a).unwrap(), &x, 1e-5);
        assert!(rel_err(&hypergradient(&p, &x).unwrap(), &fd) < 1e-5);
    }

    #[test]
    fn scaling_keeps_solution() {
        let a = build_rl_problem(&RlSpec::default()).unwrap();
        let b = build_rl_problem(&RlSpec::sensitivity(0)).unwrap();
        assert!(rel_err(&a.optimal_x().unwrap(), &b.optimal_x().unwrap()) < 1e-14);
    }

    #[test]
    fn observation_noise_matches_perturbed_rewards() {
        use crate::seed::{NoiseKind, NoiseSpec};
        let p = build_rl_problem(&RlSpec::sensitivity(3)).unwrap();
        let ns = NoiseSpec::new(9, 1.0).unwrap().with_kind(NoiseKind::Observation);
        let mut rng = crate::seed::rng_from(&[5]);
        let (x, y, z) = (probe(&mut rng, 5), probe(&mut rng, 20), probe(&mut rng, 20));
        let (i, k, lambda) = (4, 17, 60.0);
        let noisy = local_penalty_gradients(&p, i, &x, &y, &z, lambda, Some((&ns, k))).unwrap();
        let mut shifted = p.clone();
        shifted.rewards[i] += DVector::from_vec(ns.draw(20, i, k, 3));
        let want = local_penalty_gradients(&shifted, i, &x, &y, &z, lambda, None).unwrap();
        assert!(rel_err(&noisy.dy, &want.dy) < 1e-12);
        assert!(rel_err(&noisy.dz, &want.dz) < 1e-12);
        let clean = local_penalty_gradients(&p, i, &x, &y, &z, lambda, None).unwrap();
        assert_eq!(noisy.dx, clean.dx);
        assert!(rel_err(&want.dx, &clean.dx) < 1e-12);
        let soba = crate::problems::soba_directions(&p, i, &x, &y, &z, Some((&ns, k))).unwrap();
        let soba_want = crate::problems::soba_directions(&shifted, i, &x, &y, &z, None).unwrap();
        assert!(rel_err(&soba.dy, &soba_want.dy) < 1e-12);
        assert_eq!(soba.dx, soba_want.dx);
    }

    #[test]
    fn observation_noise_needs_observations() {
        use crate::seed::{NoiseKind, NoiseSpec};
        let q = crate::problems::quadratic::build_quadratic_problem(&crate::problems::quadratic::QuadraticSpec::new(2, 2, 2, 0)).unwrap();
        let ns = NoiseSpec::new(9, 1.0).unwrap().with_kind(NoiseKind::Observation);
        let v = [0.0, 0.0];
        assert!(local_penalty_gradients(&q, 0, &v, &v, &v, 1.0, Some((&ns, 0))).is_err());
    }
}
