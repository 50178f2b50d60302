//! Synthetic quadratic bilevel benchmark with closed-form oracles.
//!
//! `f_i(x, y) = 1/2 u^T H_i u + c_i^T u` with `u = (x, y)`,
//! `g_i(x, y) = 1/2 y^T Q_i y + y^T R_i x + s_i^T y + 1/2 x^T P_i x`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BilevelProblem, Smoothness};
use crate::error::{config, domain, FabError, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpec {
    pub n: usize,
    pub dx: usize,
    pub dy: usize,
    pub seed: u64,
    /// Lower bound on the smallest eigenvalue of every `Q_i`.
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Spread of the per-agent blocks around their shared mean.
    #[serde(default = "default_het")]
    pub heterogeneity: f64,
    /// Positive semidefinite `H_i` when set, indefinite otherwise.
    #[serde(default = "default_true")]
    pub convex_upper: bool,
}

fn default_mu() -> f64 {
    1.0
}
fn default_het() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}

impl QuadraticSpec {
    pub fn new(n: usize, dx: usize, dy: usize, seed: u64) -> Self {
        Self { n, dx, dy, seed, mu: default_mu(), heterogeneity: default_het(), convex_upper: true }
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    dx: usize,
    dy: usize,
    h: Vec<DMatrix<f64>>,
    c: Vec<DVector<f64>>,
    q: Vec<DMatrix<f64>>,
    r: Vec<DMatrix<f64>>,
    s: Vec<DVector<f64>>,
    p: Vec<DMatrix<f64>>,
    q_bar: DMatrix<f64>,
    r_bar: DMatrix<f64>,
    s_bar: DVector<f64>,
    x_star: Option<Vec<f64>>,
    consts: Smoothness,
}

fn gaussian(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn mean_of(ms: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut s = ms[0].clone() * 0.0;
    for m in ms {
        s += m;
    }
    s / ms.len() as f64
}

fn mean_vec(vs: &[DVector<f64>]) -> DVector<f64> {
    let mut s = vs[0].clone() * 0.0;
    for v in vs {
        s += v;
    }
    s / vs.len() as f64
}

fn eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let e = SymmetricEigen::new(m.clone()).eigenvalues;
    (e.min(), e.max())
}

pub fn build_quadratic_problem(spec: &QuadraticSpec) -> Result<QuadraticProblem> {
    let QuadraticSpec { n, dx, dy, seed, mu, heterogeneity: het, convex_upper } = *spec;
    if n == 0 || dx == 0 || dy == 0 {
        return config("quadratic problem dimensions must be at least 1");
    }
    if !(mu > 0.0) {
        return config(format!("conditioning floor mu = {mu} must be positive"));
    }
    let mut rng = seed::rng_from(&[seed, 0x71]);
    let du = dx + dy;
    let m_base = gaussian(&mut rng, du, du);
    let g_base = gaussian(&mut rng, dy, dy);
    let r_base = gaussian(&mut rng, dy, dx) / (dx as f64).sqrt();
    let c_base = gaussian(&mut rng, du, 1).column(0).into_owned();
    let s_base = gaussian(&mut rng, dy, 1).column(0).into_owned();
    let (mut h, mut c, mut q, mut r, mut s) = (vec![], vec![], vec![], vec![], vec![]);
    for _ in 0..n {
        let m = &m_base + gaussian(&mut rng, du, du) * het;
        let hi = if convex_upper {
            &m * m.transpose() / du as f64 + DMatrix::identity(du, du) * 0.1
        } else {
            (&m + m.transpose()) / (2.0 * (du as f64).sqrt())
        };
        h.push(hi);
        let gi = &g_base + gaussian(&mut rng, dy, dy) * het;
        q.push(&gi * gi.transpose() / dy as f64 + DMatrix::identity(dy, dy) * mu);
        r.push(&r_base + gaussian(&mut rng, dy, dx) * (het / (dx as f64).sqrt()));
        c.push(&c_base + gaussian(&mut rng, du, 1).column(0) * het);
        s.push(&s_base + gaussian(&mut rng, dy, 1).column(0) * het);
    }
    let p = vec![DMatrix::zeros(dx, dx); n];
    QuadraticProblem::from_parts(h, c, q, r, s, p)
}

impl QuadraticProblem {
    /// Assembles a problem from explicit per-agent blocks
    /// `(H_i, c_i, Q_i, R_i, s_i, P_i)` with `R_i` of shape `dy x dx`.
    pub fn from_parts(
        h: Vec<DMatrix<f64>>,
        c: Vec<DVector<f64>>,
        q: Vec<DMatrix<f64>>,
        r: Vec<DMatrix<f64>>,
        s: Vec<DVector<f64>>,
        p: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = h.len();
        if n == 0 || [c.len(), q.len(), r.len(), s.len(), p.len()].iter().any(|&l| l != n) {
            return config("per-agent block lists must be non-empty and equally long");
        }
        let (dy, dx) = r[0].shape();
        let du = dx + dy;
        let ok = (0..n).all(|i| {
            h[i].shape() == (du, du)
                && c[i].len() == du
                && q[i].shape() == (dy, dy)
                && r[i].shape() == (dy, dx)
                && s[i].len() == dy
                && p[i].shape() == (dx, dx)
        });
        if !ok {
            return config("inconsistent block shapes");
        }
        let q_bar = mean_of(&q);
        let r_bar = mean_of(&r);
        let s_bar = mean_vec(&s);
        let mu = q.iter().map(|qi| eig_range(qi).0).fold(f64::INFINITY, f64::min);
        let l_f1 = h.iter().map(|hi| eig_range(hi).1.abs().max(eig_range(hi).0.abs())).fold(0.0, f64::max);
        let l_g1 = (0..n)
            .map(|i| {
                let mut blk = DMatrix::zeros(du, du);
                blk.view_mut((0, 0), (dx, dx)).copy_from(&p[i]);
                blk.view_mut((0, dx), (dx, dy)).copy_from(&r[i].transpose());
                blk.view_mut((dx, 0), (dy, dx)).copy_from(&r[i]);
                blk.view_mut((dx, dx), (dy, dy)).copy_from(&q[i]);
                let (lo, hi) = eig_range(&blk);
                lo.abs().max(hi.abs())
            })
            .fold(0.0, f64::max);
        let mut out = Self {
            dx,
            dy,
            h,
            c,
            q,
            r,
            s,
            p,
            q_bar,
            r_bar,
            s_bar,
            x_star: None,
            consts: Smoothness {
                l_f0: None,
                l_f1: Some(l_f1),
                l_f2: Some(0.0),
                l_g1: Some(l_g1),
                l_g2: Some(0.0),
                mu: (mu > 0.0).then_some(mu),
            },
        };
        out.x_star = out.solve_optimal_x().ok();
        Ok(out)
    }

    fn q_bar_chol(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        self.q_bar
            .clone()
            .cholesky()
            .ok_or_else(|| FabError::Domain("average Q is not positive definite".into()))
    }

    /// `y*(x) = J x + o` with `J = -Qbar^{-1} Rbar`, `o = -Qbar^{-1} sbar`.
    fn lower_affine(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let ch = self.q_bar_chol()?;
        Ok((-ch.solve(&self.r_bar), -ch.solve(&self.s_bar)))
    }

    fn solve_optimal_x(&self) -> Result<Vec<f64>> {
        let (jy, oy) = self.lower_affine()?;
        let (dx, du) = (self.dx, self.dx + self.dy);
        let mut j = DMatrix::zeros(du, dx);
        j.view_mut((0, 0), (dx, dx)).fill_with_identity();
        j.view_mut((dx, 0), (self.dy, dx)).copy_from(&jy);
        let mut o = DVector::zeros(du);
        o.rows_mut(dx, self.dy).copy_from(&oy);
        let h_bar = mean_of(&self.h);
        let c_bar = mean_vec(&self.c);
        let hess = j.transpose() * &h_bar * &j;
        let rhs = -(j.transpose() * (&h_bar * &o + &c_bar));
        let ch = hess
            .cholesky()
            .ok_or_else(|| FabError::Domain("hyper-objective is not strongly convex".into()))?;
        Ok(ch.solve(&rhs).as_slice().to_vec())
    }

    pub fn average_q(&self) -> &DMatrix<f64> {
        &self.q_bar
    }

    fn u(&self, x: &[f64], y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.dx + self.dy, x.iter().chain(y).copied())
    }

    fn grad_u(&self, i: usize, x: &[f64], y: &[f64]) -> DVector<f64> {
        &self.h[i] * self.u(x, y) + &self.c[i]
    }
}

fn vec_of(v: DVector<f64>) -> Vec<f64> {
    v.as_slice().to_vec()
}

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

impl BilevelProblem for QuadraticProblem {
    fn name(&self) -> &str {
        "quadratic"
    }
    fn n(&self) -> usize {
        self.h.len()
    }
    fn dx(&self) -> usize {
        self.dx
    }
    fn dy(&self) -> usize {
        self.dy
    }

    fn f(&self, i: usize, x: &[f64], y: &[f64]) -> f64 {
        let u = self.u(x, y);
        0.5 * u.dot(&(&self.h[i] * &u)) + self.c[i].dot(&u)
    }

    fn g(&self, i: usize, x: &[f64], y: &[f64]) -> f64 {
        let (xv, yv) = (dv(x), dv(y));
        0.5 * yv.dot(&(&self.q[i] * &yv))
            + yv.dot(&(&self.r[i] * &xv))
            + self.s[i].dot(&yv)
            + 0.5 * xv.dot(&(&self.p[i] * &xv))
    }

    fn grad_f_x(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.grad_u(i, x, y).as_slice()[..self.dx].to_vec()
    }

    fn grad_f_y(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.grad_u(i, x, y).as_slice()[self.dx..].to_vec()
    }

    fn grad_g_x(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        vec_of(self.r[i].tr_mul(&dv(y)) + &self.p[i] * dv(x))
    }

    fn grad_g_y(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        vec_of(&self.q[i] * dv(y) + &self.r[i] * dv(x) + &self.s[i])
    }

    fn hvp_g_yy(&self, i: usize, _x: &[f64], _y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(vec_of(&self.q[i] * dv(v)))
    }

    fn jvp_g_xy(&self, i: usize, _x: &[f64], _y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(vec_of(self.r[i].tr_mul(&dv(v))))
    }

    fn hvp_f_yy(&self, i: usize, _x: &[f64], _y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let hyy = self.h[i].view((self.dx, self.dx), (self.dy, self.dy));
        Ok(vec_of(hyy * dv(v)))
    }

    fn lower_solution(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dx {
            return domain("x has the wrong dimension");
        }
        let (j, o) = self.lower_affine()?;
        Ok(vec_of(j * dv(x) + o))
    }

    fn optimal_x(&self) -> Option<Vec<f64>> {
        self.x_star.clone()
    }

    fn smoothness(&self) -> Smoothness {
        self.consts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::fd::{grad, rel_err};
    use crate::problems::{hyper_objective, hypergradient, lower_value, upper_value};
    use proptest::prelude::*;

    fn probe(rng: &mut impl rand::Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_blocks_single_agent() {
        let (dx, dy) = (2, 2);
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let s = DVector::from_vec(vec![0.5, -1.0]);
        let p = QuadraticProblem::from_parts(
            vec![DMatrix::identity(4, 4)],
            vec![DVector::zeros(4)],
            vec![DMatrix::identity(dy, dy)],
            vec![r.clone()],
            vec![s.clone()],
            vec![DMatrix::zeros(dx, dx)],
        )
        .unwrap();
        let x = [1.0, -2.0];
        let want = -(&r * dv(&x) + &s);
        assert_eq!(p.lower_solution(&x).unwrap(), want.as_slice());
    }

    #[test]
    fn average_q_respects_floor() {
        let p = build_quadratic_problem(&QuadraticSpec { mu: 0.7, ..QuadraticSpec::new(10, 3, 4, 0) }).unwrap();
        assert!(eig_range(p.average_q()).0 >= 0.7 - 1e-12);
        assert!(p.smoothness().mu.unwrap() >= 0.7 - 1e-12);
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(build_quadratic_problem(&QuadraticSpec { mu: 0.0, ..QuadraticSpec::new(2, 2, 2, 0) }).is_err());
        assert!(build_quadratic_problem(&QuadraticSpec::new(2, 0, 2, 0)).is_err());
    }

    #[test]
    fn stationary_at_optimum() {
        for seed in 0..5 {
            let p = build_quadratic_problem(&QuadraticSpec::new(10, 4, 6, seed)).unwrap();
            let xs = p.optimal_x().unwrap();
            let g = hypergradient(&p, &xs).unwrap();
            assert!(crate::stack::norm(&g) <= 1e-8, "seed {seed}: {g:?}");
        }
    }

    #[test]
    fn lower_solution_is_stationary() {
        let p = build_quadratic_problem(&QuadraticSpec::new(6, 3, 5, 2)).unwrap();
        let mut rng = seed::rng_from(&[9]);
        for _ in 0..20 {
            let x = probe(&mut rng, 3);
            let y = p.lower_solution(&x).unwrap();
            let mut s = vec![0.0; 5];
            for i in 0..6 {
                crate::stack::axpy(&mut s, 1.0, &p.grad_g_y(i, &x, &y));
            }
            assert!(crate::stack::norm(&s) <= 1e-8 * 6.0);
        }
    }

    #[test]
    fn oracles_match_finite_differences() {
        for convex in [true, false] {
            let p = build_quadratic_problem(&QuadraticSpec { convex_upper: convex, ..QuadraticSpec::new(3, 3, 4, 5) })
                .unwrap();
            let mut rng = seed::rng_from(&[1]);
            for _ in 0..20 {
                let (x, y) = (probe(&mut rng, 3), probe(&mut rng, 4));
                for i in 0..3 {
                    let fx = grad(|xx| p.f(i, xx, &y), &x, 1e-6);
                    let fy = grad(|yy| p.f(i, &x, yy), &y, 1e-6);
                    let gx = grad(|xx| p.g(i, xx, &y), &x, 1e-6);
                    let gy = grad(|yy| p.g(i, &x, yy), &y, 1e-6);
                    assert!(rel_err(&p.grad_f_x(i, &x, &y), &fx) < 1e-4);
                    assert!(rel_err(&p.grad_f_y(i, &x, &y), &fy) < 1e-4);
                    assert!(rel_err(&p.grad_g_x(i, &x, &y), &gx) < 1e-4);
                    assert!(rel_err(&p.grad_g_y(i, &x, &y), &gy) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn hypergradient_matches_finite_differences() {
        let p = build_quadratic_problem(&QuadraticSpec::new(5, 3, 4, 11)).unwrap();
        let mut rng = seed::rng_from(&[2]);
        for _ in 0..20 {
            let x = probe(&mut rng, 3);
            let fd = grad(|xx| hyper_objective(&p, xx).unwrap(), &x, 1e-5);
            assert!(rel_err(&hypergradient(&p, &x).unwrap(), &fd) < 1e-4);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn lower_level_strongly_convex(s in any::<u64>(), a in prop::collection::vec(-2.0f64..2.0, 9)) {
            let p = build_quadratic_problem(&QuadraticSpec { mu: 0.5, ..QuadraticSpec::new(4, 3, 3, s) }).unwrap();
            let (x, y1, y2) = (&a[0..3], &a[3..6], &a[6..9]);
            let mu = p.smoothness().mu.unwrap();
            let avg = |y: &[f64]| {
                let mut s = vec![0.0; 3];
                for i in 0..4 { crate::stack::axpy(&mut s, 0.25, &p.grad_g_y(i, x, y)); }
                s
            };
            let dg = crate::stack::sub(&avg(y1), &avg(y2));
            let dyv = crate::stack::sub(y1, y2);
            prop_assert!(crate::stack::dot(&dg, &dyv) >= mu * crate::stack::norm_sq(&dyv) - 1e-10);
            prop_assert!(upper_value(&p, x, y1).is_finite() && lower_value(&p, x, y1).is_finite());
        }
    }
}
