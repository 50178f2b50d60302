//! Bilevel problems, their oracles, and the benchmark builders.
//!
//! Aggregates are agent averages: `F = (1/n) sum_i f_i`, `G = (1/n) sum_i g_i`.

use nalgebra::{DMatrix, DVector};

use crate::error::{domain, FabError, Result};
use crate::seed::{NoiseKind, NoiseSpec};
use crate::stack::{axpy, norm_sq};

pub mod classification;
pub mod idx;
pub mod quadratic;
pub mod rl;
pub mod single;

pub use classification::{build_hpo_problem, build_hypercleaning_problem, ClassData, ClassificationSpec};
pub use quadratic::{build_quadratic_problem, QuadraticProblem, QuadraticSpec};
pub use rl::{build_rl_problem, RlProblem, RlSpec};
pub use single::{Lifted, SingleLevelProblem};

/// Analytic smoothness data, each entry present only when known.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Smoothness {
    pub l_f0: Option<f64>,
    pub l_f1: Option<f64>,
    pub l_f2: Option<f64>,
    pub l_g1: Option<f64>,
    pub l_g2: Option<f64>,
    pub mu: Option<f64>,
}

fn unsupported<T>(what: &str) -> Result<T> {
    Err(FabError::Unsupported(what.to_string()))
}

pub trait BilevelProblem: Send + Sync {
    fn name(&self) -> &str;
    fn n(&self) -> usize;
    fn dx(&self) -> usize;
    fn dy(&self) -> usize;

    fn f(&self, i: usize, x: &[f64], y: &[f64]) -> f64;
    fn g(&self, i: usize, x: &[f64], y: &[f64]) -> f64;
    fn grad_f_x(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64>;
    fn grad_f_y(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64>;
    fn grad_g_x(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64>;
    fn grad_g_y(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64>;

    /// `grad^2_yy g_i(x, y) v`
    fn hvp_g_yy(&self, _i: usize, _x: &[f64], _y: &[f64], _v: &[f64]) -> Result<Vec<f64>> {
        unsupported("hvp_g_yy")
    }

    /// `grad^2_xy g_i(x, y) v`, a vector in the x space.
    fn jvp_g_xy(&self, _i: usize, _x: &[f64], _y: &[f64], _v: &[f64]) -> Result<Vec<f64>> {
        unsupported("jvp_g_xy")
    }

    /// `grad^2_yy f_i(x, y) v`
    fn hvp_f_yy(&self, _i: usize, _x: &[f64], _y: &[f64], _v: &[f64]) -> Result<Vec<f64>> {
        unsupported("hvp_f_yy")
    }

    /// `y*(x) = argmin_y G(x, y)`
    /// Number of noisy observations behind `g_i`; 0 when `g_i` has none.
    fn observation_dim(&self) -> usize {
        0
    }
    /// Shift of `grad_y g_i` when agent `i`'s observations move by `eps`.
    /// Only meaningful when `f_i` and `grad^2 g_i` do not depend on the
    /// observations and the shift of `grad_x g_i` is independent of `y`.
    fn observation_shift_y(&self, _i: usize, _eps: &[f64]) -> Result<Vec<f64>> {
        unsupported("observation noise")
    }
    fn lower_solution(&self, _x: &[f64]) -> Result<Vec<f64>> {
        unsupported("lower_solution")
    }

    fn optimal_x(&self) -> Option<Vec<f64>> {
        None
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::default()
    }

    /// Problem-specific summary numbers (accuracy, losses) at the mean iterate.
    fn extra_metrics(&self, _x: &[f64], _y: &[f64]) -> Vec<(String, f64)> {
        Vec::new()
    }
}

fn check_dims(p: &dyn BilevelProblem, x: &[f64], ys: &[&[f64]]) -> Result<()> {
    if x.len() != p.dx() || ys.iter().any(|y| y.len() != p.dy()) {
        return domain(format!(
            "dimension mismatch: expected dx = {}, dy = {}, got {} and {:?}",
            p.dx(),
            p.dy(),
            x.len(),
            ys.iter().map(|y| y.len()).collect::<Vec<_>>()
        ));
    }
    Ok(())
}

fn average(p: &dyn BilevelProblem, dim: usize, mut each: impl FnMut(usize) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let mut s = vec![0.0; dim];
    for i in 0..p.n() {
        axpy(&mut s, 1.0, &each(i)?);
    }
    let inv = 1.0 / p.n() as f64;
    s.iter_mut().for_each(|v| *v *= inv);
    Ok(s)
}

pub fn upper_value(p: &dyn BilevelProblem, x: &[f64], y: &[f64]) -> f64 {
    (0..p.n()).map(|i| p.f(i, x, y)).sum::<f64>() / p.n() as f64
}

pub fn lower_value(p: &dyn BilevelProblem, x: &[f64], y: &[f64]) -> f64 {
    (0..p.n()).map(|i| p.g(i, x, y)).sum::<f64>() / p.n() as f64
}

/// Penalty objective `F(x, y) + lambda (G(x, y) - G(x, z))`.
pub fn penalty_value(p: &dyn BilevelProblem, x: &[f64], y: &[f64], z: &[f64], lambda: f64) -> f64 {
    upper_value(p, x, y) + lambda * (lower_value(p, x, y) - lower_value(p, x, z))
}

/// Local descent directions of agent `i` on the penalty objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Directions {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub dz: Vec<f64>,
}

impl Directions {
    fn perturb(&mut self, noise: Option<(&NoiseSpec, usize, u64)>) {
        if let Some((ns, i, k)) = noise {
            ns.perturb(&mut self.dx, i, k, 0);
            ns.perturb(&mut self.dy, i, k, 1);
            ns.perturb(&mut self.dz, i, k, 2);
        }
    }
}

/// Observation shift of `grad_y g_i` for this call, or `None` under gradient noise.
fn observation_shift(p: &dyn BilevelProblem, i: usize, noise: Option<(&NoiseSpec, u64)>) -> Result<Option<Vec<f64>>> {
    match noise {
        Some((ns, k)) if ns.kind == NoiseKind::Observation => {
            let eps = ns.draw(p.observation_dim(), i, k, 3);
            p.observation_shift_y(i, &eps).map(Some)
        }
        _ => Ok(None),
    }
}

/// `d_z = lambda grad_y g_i(x, z)`,
/// `d_y = grad_y f_i(x, y) + lambda grad_y g_i(x, y)`,
/// `d_x = grad_x f_i(x, y) + lambda (grad_x g_i(x, y) - grad_x g_i(x, z))`,
/// plus optional noise keyed by `(agent, iteration)`. Observation noise
/// shifts `d_y` and `d_z` by the same amount and cancels in `d_x`.
pub fn local_penalty_gradients(
    p: &dyn BilevelProblem,
    i: usize,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    lambda: f64,
    noise: Option<(&NoiseSpec, u64)>,
) -> Result<Directions> {
    check_dims(p, x, &[y, z])?;
    let gy_y = p.grad_g_y(i, x, y);
    let gy_z = p.grad_g_y(i, x, z);
    let gx_y = p.grad_g_x(i, x, y);
    let gx_z = p.grad_g_x(i, x, z);
    let mut dx = p.grad_f_x(i, x, y);
    for ((d, a), b) in dx.iter_mut().zip(&gx_y).zip(&gx_z) {
        *d += lambda * (a - b);
    }
    let mut dy = p.grad_f_y(i, x, y);
    axpy(&mut dy, lambda, &gy_y);
    let mut dz: Vec<f64> = gy_z.iter().map(|v| lambda * v).collect();
    if let Some(shift) = observation_shift(p, i, noise)? {
        axpy(&mut dy, lambda, &shift);
        axpy(&mut dz, lambda, &shift);
        return Ok(Directions { dx, dy, dz });
    }
    let mut out = Directions { dx, dy, dz };
    out.perturb(noise.map(|(ns, k)| (ns, i, k)));
    Ok(out)
}

/// `d_y = grad_y g_i`, `d_v = grad^2_yy g_i v - grad_y f_i`,
/// `d_x = grad_x f_i - grad^2_xy g_i v`. Returned as `(dx, dy, dz = d_v)`.
pub fn soba_directions(
    p: &dyn BilevelProblem,
    i: usize,
    x: &[f64],
    y: &[f64],
    v: &[f64],
    noise: Option<(&NoiseSpec, u64)>,
) -> Result<Directions> {
    check_dims(p, x, &[y, v])?;
    let hv = p.hvp_g_yy(i, x, y, v)?;
    let jv = p.jvp_g_xy(i, x, y, v)?;
    let mut dx = p.grad_f_x(i, x, y);
    axpy(&mut dx, -1.0, &jv);
    let mut dy = p.grad_g_y(i, x, y);
    let mut dz = hv;
    axpy(&mut dz, -1.0, &p.grad_f_y(i, x, y));
    if let Some(shift) = observation_shift(p, i, noise)? {
        axpy(&mut dy, 1.0, &shift);
        return Ok(Directions { dx, dy, dz });
    }
    let mut out = Directions { dx, dy, dz };
    out.perturb(noise.map(|(ns, k)| (ns, i, k)));
    Ok(out)
}

/// Dense averaged lower-level Hessian `grad^2_yy G(x, y)` built column by column.
pub fn lower_hessian(p: &dyn BilevelProblem, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
    let dy = p.dy();
    let mut h = DMatrix::zeros(dy, dy);
    let mut e = vec![0.0; dy];
    for c in 0..dy {
        e[c] = 1.0;
        let col = average(p, dy, |i| p.hvp_g_yy(i, x, y, &e))?;
        h.set_column(c, &DVector::from_vec(col));
        e[c] = 0.0;
    }
    Ok(h)
}

/// `grad F*(x) = grad_x F - grad^2_xy G (grad^2_yy G)^{-1} grad_y F` at `y*(x)`.
pub fn hypergradient(p: &dyn BilevelProblem, x: &[f64]) -> Result<Vec<f64>> {
    check_dims(p, x, &[])?;
    let y = p.lower_solution(x)?;
    let h = lower_hessian(p, x, &y)?;
    let chol = h
        .cholesky()
        .ok_or_else(|| FabError::Domain("lower-level Hessian is not positive definite".into()))?;
    let fy = average(p, p.dy(), |i| Ok(p.grad_f_y(i, x, &y)))?;
    let u = chol.solve(&DVector::from_vec(fy));
    let mut out = average(p, p.dx(), |i| Ok(p.grad_f_x(i, x, &y)))?;
    let cross = average(p, p.dx(), |i| p.jvp_g_xy(i, x, &y, u.as_slice()))?;
    axpy(&mut out, -1.0, &cross);
    Ok(out)
}

/// `F*(x) = F(x, y*(x))`
pub fn hyper_objective(p: &dyn BilevelProblem, x: &[f64]) -> Result<f64> {
    let y = p.lower_solution(x)?;
    Ok(upper_value(p, x, &y))
}

/// `y*_lambda(x) = argmin_y F(x, y) + lambda G(x, y)` by Newton steps with
/// conjugate-gradient solves; exact in one step for quadratics.
pub fn penalty_lower_solution(p: &dyn BilevelProblem, x: &[f64], lambda: f64, y0: &[f64]) -> Result<Vec<f64>> {
    let dy = p.dy();
    let grad = |y: &[f64]| -> Result<Vec<f64>> {
        average(p, dy, |i| {
            let mut g = p.grad_f_y(i, x, y);
            axpy(&mut g, lambda, &p.grad_g_y(i, x, y));
            Ok(g)
        })
    };
    let hvp = |y: &[f64], v: &[f64]| -> Result<Vec<f64>> {
        average(p, dy, |i| {
            let mut h = p.hvp_f_yy(i, x, y, v)?;
            axpy(&mut h, lambda, &p.hvp_g_yy(i, x, y, v)?);
            Ok(h)
        })
    };
    let mut y = y0.to_vec();
    for _ in 0..100 {
        let g = grad(&y)?;
        if norm_sq(&g).sqrt() <= 1e-10 {
            break;
        }
        let step = conjugate_gradient(|v| hvp(&y, v), &g, 1e-14, 10 * dy.max(1))?;
        axpy(&mut y, -1.0, &step);
    }
    Ok(y)
}

/// Solves `H s = b` for symmetric positive definite `H` given as an operator.
pub fn conjugate_gradient(
    mut h: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    rtol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let mut s = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut d = r.clone();
    let mut rr = norm_sq(&r);
    let stop = rtol * rtol * rr;
    for _ in 0..max_iter {
        if rr <= stop || rr == 0.0 {
            break;
        }
        let hd = h(&d)?;
        let curv = crate::stack::dot(&d, &hd);
        if curv <= 0.0 {
            return domain("operator is not positive definite");
        }
        let a = rr / curv;
        axpy(&mut s, a, &d);
        axpy(&mut r, -a, &hd);
        let rr_new = norm_sq(&r);
        let beta = rr_new / rr;
        for (di, ri) in d.iter_mut().zip(&r) {
            *di = ri + beta * *di;
        }
        rr = rr_new;
    }
    Ok(s)
}

/// Warning text when `lambda` is below `2 L_f1 / mu`.
pub fn lambda_warning(p: &dyn BilevelProblem, lambda: f64) -> Option<String> {
    let s = p.smoothness();
    let (l, mu) = (s.l_f1?, s.mu?);
    (lambda < 2.0 * l / mu).then(|| format!("lambda = {lambda} is below 2 L_f1 / mu = {:.4}", 2.0 * l / mu))
}

#[cfg(test)]
pub(crate) mod fd {
    //! Central finite differences used by the oracle tests.

    pub fn grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|k| {
                let orig = xp[k];
                xp[k] = orig + h;
                let fp = f(&xp);
                xp[k] = orig - h;
                let fm = f(&xp);
                xp[k] = orig;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    /// `max_k |a_k - b_k| / max(1, max_k |b_k|)`
    pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::quadratic::QuadraticProblem;

    /// f = ||y||^2 / 2, g = ||y - x||^2 / 2 on a single agent.
    fn toy(d: usize) -> QuadraticProblem {
        let dd = 2 * d;
        let mut h = DMatrix::zeros(dd, dd);
        for k in d..dd {
            h[(k, k)] = 1.0;
        }
        QuadraticProblem::from_parts(
            vec![h],
            vec![DVector::zeros(dd)],
            vec![DMatrix::identity(d, d)],
            vec![-DMatrix::identity(d, d)],
            vec![DVector::zeros(d)],
            vec![DMatrix::identity(d, d)],
        )
        .unwrap()
    }

    #[test]
    fn penalty_gradients_hand_example() {
        let p = toy(1);
        let d = local_penalty_gradients(&p, 0, &[0.0], &[1.0], &[3.0], 2.0, None).unwrap();
        assert_eq!(d.dy, vec![3.0]);
        assert_eq!(d.dz, vec![6.0]);
        assert_eq!(d.dx, vec![4.0]);
    }

    #[test]
    fn penalty_terms_cancel_when_y_equals_z() {
        let p = toy(2);
        let (x, y) = ([0.3, -1.0], [2.0, 0.5]);
        let d = local_penalty_gradients(&p, 0, &x, &y, &y, 7.0, None).unwrap();
        assert_eq!(d.dx, p.grad_f_x(0, &x, &y));
    }

    #[test]
    fn dimension_mismatch_is_domain_error() {
        let p = toy(2);
        let e = local_penalty_gradients(&p, 0, &[0.0], &[0.0, 0.0], &[0.0, 0.0], 1.0, None).unwrap_err();
        assert!(matches!(e, FabError::Domain(_)));
    }

    #[test]
    fn toy_hypergradient() {
        let p = toy(2);
        let g = hypergradient(&p, &[2.0, -1.0]).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-14 && (g[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn soba_with_zero_v() {
        let p = toy(2);
        let (x, y) = ([0.5, 1.0], [1.5, -2.0]);
        let d = soba_directions(&p, 0, &x, &y, &[0.0, 0.0], None).unwrap();
        assert_eq!(d.dx, p.grad_f_x(0, &x, &y));
        assert_eq!(d.dz, p.grad_f_y(0, &x, &y).iter().map(|v| -v).collect::<Vec<_>>());
    }

    #[test]
    fn soba_at_lower_solution_gives_hypergradient() {
        let p = toy(2);
        let x = [2.0, -1.0];
        let y = p.lower_solution(&x).unwrap();
        let h = lower_hessian(&p, &x, &y).unwrap();
        let v = h.cholesky().unwrap().solve(&DVector::from_vec(p.grad_f_y(0, &x, &y)));
        let d = soba_directions(&p, 0, &x, &y, v.as_slice(), None).unwrap();
        assert_eq!(d.dx, hypergradient(&p, &x).unwrap());
    }

    #[test]
    fn noise_is_deterministic_and_keyed() {
        let p = toy(2);
        let ns = NoiseSpec::new(4, 0.5).unwrap();
        let (x, y, z) = ([0.0, 0.0], [1.0, 1.0], [2.0, 2.0]);
        let a = local_penalty_gradients(&p, 0, &x, &y, &z, 1.0, Some((&ns, 3))).unwrap();
        let b = local_penalty_gradients(&p, 0, &x, &y, &z, 1.0, Some((&ns, 3))).unwrap();
        let c = local_penalty_gradients(&p, 0, &x, &y, &z, 1.0, Some((&ns, 4))).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn unsupported_without_second_order() {
        struct Bare;
        impl BilevelProblem for Bare {
            fn name(&self) -> &str {
                "bare"
            }
            fn n(&self) -> usize {
                1
            }
            fn dx(&self) -> usize {
                1
            }
            fn dy(&self) -> usize {
                1
            }
            fn f(&self, _: usize, _: &[f64], _: &[f64]) -> f64 {
                0.0
            }
            fn g(&self, _: usize, _: &[f64], _: &[f64]) -> f64 {
                0.0
            }
            fn grad_f_x(&self, _: usize, _: &[f64], _: &[f64]) -> Vec<f64> {
                vec![0.0]
            }
            fn grad_f_y(&self, _: usize, _: &[f64], _: &[f64]) -> Vec<f64> {
                vec![0.0]
            }
            fn grad_g_x(&self, _: usize, _: &[f64], _: &[f64]) -> Vec<f64> {
                vec![0.0]
            }
            fn grad_g_y(&self, _: usize, _: &[f64], y: &[f64]) -> Vec<f64> {
                y.to_vec()
            }
        }
        assert!(matches!(hypergradient(&Bare, &[0.0]), Err(FabError::Unsupported(_))));
        assert!(matches!(soba_directions(&Bare, 0, &[0.0], &[0.0], &[0.0], None), Err(FabError::Unsupported(_))));
    }

    #[test]
    fn cg_solves_spd_system() {
        let a = nalgebra::dmatrix![4.0, 1.0; 1.0, 3.0];
        let s = conjugate_gradient(|v| Ok((&a * DVector::from_column_slice(v)).as_slice().to_vec()), &[1.0, 2.0], 1e-15, 10)
            .unwrap();
        assert!((4.0 * s[0] + s[1] - 1.0).abs() < 1e-12 && (s[0] + 3.0 * s[1] - 2.0).abs() < 1e-12);
    }
}
