//! Row-/column-stochastic mixing matrices and the stochastic weight-vector
//! recursions associated with them.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::digraph::{Digraph, TopologySchedule};
use crate::error::{config, domain, Result};

pub const SUM_TOL: f64 = 1e-12;
const DRIFT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum WeightScheme {
    /// Equal weight on every neighbor and self.
    #[default]
    Uniform,
    /// Self keeps `w_self`; the rest is split evenly over neighbors.
    SelfWeighted { w_self: f64 },
    /// Ring only: even agents put `eps` on their edge, odd agents 0.5.
    Alternating { eps: f64 },
}

impl WeightScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightScheme::Uniform => Ok(()),
            WeightScheme::SelfWeighted { w_self } if !(w_self > 0.0 && w_self < 1.0) => {
                config(format!("self weight {w_self} outside (0, 1)"))
            }
            WeightScheme::Alternating { eps } if !(eps > 0.0 && eps < 1.0) => {
                config(format!("alternating edge weight {eps} outside (0, 1)"))
            }
            _ => Ok(()),
        }
    }
}

/// Weights for `self` followed by `nbrs` (one entry each), before repair.
fn local_weights(i: usize, nbrs: &[usize], scheme: WeightScheme) -> Vec<f64> {
    let m = nbrs.len();
    if m == 0 {
        return vec![1.0];
    }
    let (own, edge) = match scheme {
        WeightScheme::Uniform => (1.0 / (m as f64 + 1.0), 1.0 / (m as f64 + 1.0)),
        WeightScheme::SelfWeighted { w_self } => (w_self, (1.0 - w_self) / m as f64),
        WeightScheme::Alternating { eps } => {
            let e = if i.is_multiple_of(2) { eps } else { 0.5 };
            (1.0 - e * m as f64, e)
        }
    };
    std::iter::once(own).chain(std::iter::repeat_n(edge, m)).collect()
}

/// Adds `1 - sum` to the largest entry.
fn repair(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    let (imax, _) = w
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
    w[imax] += 1.0 - s;
}

fn check_scheme(g: &Digraph, scheme: WeightScheme) -> Result<()> {
    scheme.validate()?;
    if matches!(scheme, WeightScheme::Alternating { .. }) && g.n() > 1 && !g.is_ring() {
        return config("alternating weights are defined on ring topologies only");
    }
    Ok(())
}

/// `A[i][j] > 0` iff `j` is an in-neighbor of `i` or `j == i`.
pub fn row_stochastic_from(g: &Digraph, scheme: WeightScheme) -> Result<DMatrix<f64>> {
    check_scheme(g, scheme)?;
    let n = g.n();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let nbrs = g.in_neighbors(i);
        let mut w = local_weights(i, nbrs, scheme);
        repair(&mut w);
        a[(i, i)] = w[0];
        for (&j, &v) in nbrs.iter().zip(&w[1..]) {
            a[(i, j)] = v;
        }
    }
    Ok(a)
}

/// `B[j][i] > 0` iff `j` is an out-neighbor of `i` or `j == i`.
pub fn column_stochastic_from(g: &Digraph, scheme: WeightScheme) -> Result<DMatrix<f64>> {
    check_scheme(g, scheme)?;
    let n = g.n();
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        let nbrs = g.out_neighbors(i);
        let mut w = local_weights(i, nbrs, scheme);
        repair(&mut w);
        b[(i, i)] = w[0];
        for (&j, &v) in nbrs.iter().zip(&w[1..]) {
            b[(j, i)] = v;
        }
    }
    Ok(b)
}

fn min_positive(m: &DMatrix<f64>) -> f64 {
    m.iter().copied().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingPair {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub a_min: f64,
    pub b_min: f64,
}

impl MixingPair {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        let (a_min, b_min) = (min_positive(&a), min_positive(&b));
        Self { a, b, a_min, b_min }
    }

    pub fn from_graph(g: &Digraph, scheme: WeightScheme) -> Result<Self> {
        Ok(Self::new(row_stochastic_from(g, scheme)?, column_stochastic_from(g, scheme)?))
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n), DMatrix::identity(n, n))
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Keeps only entries whose message travels along an edge of `g`
    /// (or the diagonal). Sums are left unrepaired.
    pub fn masked_by(&self, g: &Digraph) -> Self {
        let n = self.n();
        let mut a = self.a.clone();
        let mut b = self.b.clone();
        for i in 0..n {
            for j in 0..n {
                if i != j && !g.has_edge(j, i) {
                    a[(i, j)] = 0.0;
                    b[(i, j)] = 0.0;
                }
            }
        }
        Self::new(a, b)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub max_row_deviation: f64,
    pub max_col_deviation: f64,
    pub violations: Vec<String>,
    pub a_min: f64,
    pub b_min: f64,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.max_row_deviation <= SUM_TOL && self.max_col_deviation <= SUM_TOL && self.violations.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "row_sum_dev {:.3e}\ncol_sum_dev {:.3e}\na_min {}\nb_min {}\nviolations {}\n",
            self.max_row_deviation,
            self.max_col_deviation,
            self.a_min,
            self.b_min,
            self.violations.len()
        );
        for v in &self.violations {
            let _ = writeln!(s, "  {v}");
        }
        let _ = writeln!(s, "status {}", if self.passed() { "pass" } else { "fail" });
        s
    }
}

pub fn validate_pair(p: &MixingPair, g: &Digraph) -> Result<ValidationReport> {
    let n = g.n();
    if p.a.shape() != (n, n) || p.b.shape() != (n, n) {
        return domain(format!("mixing matrices are not {n}x{n}"));
    }
    let mut rep = ValidationReport { a_min: p.a_min, b_min: p.b_min, ..Default::default() };
    for i in 0..n {
        let rs: f64 = (0..n).map(|j| p.a[(i, j)]).sum();
        let cs: f64 = (0..n).map(|j| p.b[(j, i)]).sum();
        rep.max_row_deviation = rep.max_row_deviation.max((rs - 1.0).abs());
        rep.max_col_deviation = rep.max_col_deviation.max((cs - 1.0).abs());
    }
    for i in 0..n {
        for j in 0..n {
            // A[i][j] needs j -> i; B[j][i] needs i -> j.
            let a_edge = i == j || g.has_edge(j, i);
            let b_edge = i == j || g.has_edge(i, j);
            let (av, bv) = (p.a[(i, j)], p.b[(j, i)]);
            if (av > 0.0) != a_edge || av < 0.0 {
                rep.violations.push(format!("A[{i}][{j}] = {av} but edge {j}->{i} present = {a_edge}"));
            }
            if (bv > 0.0) != b_edge || bv < 0.0 {
                rep.violations.push(format!("B[{j}][{i}] = {bv} but edge {i}->{j} present = {b_edge}"));
            }
        }
    }
    Ok(rep)
}

/// Graph and mixing pair used at iteration `k`.
pub fn mixing_at(s: &TopologySchedule, scheme: WeightScheme, k: u64) -> Result<(Digraph, MixingPair)> {
    let g = s.graph_at(k)?;
    let p = MixingPair::from_graph(&g, scheme)?;
    Ok((g, p))
}

/// Dense CSV, one matrix row per line.
pub fn to_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

fn stochastic_dev(v: &[f64]) -> f64 {
    (v.iter().sum::<f64>() - 1.0).abs()
}

fn check_stochastic(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|&x| !(x >= 0.0)) || stochastic_dev(v) > DRIFT_TOL {
        return domain(format!("{what} is not a stochastic vector"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVectors {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl WeightVectors {
    pub fn uniform(n: usize) -> Self {
        Self { alpha: vec![1.0 / n as f64; n], beta: vec![1.0 / n as f64; n] }
    }

    /// `alpha' = alpha^T A`, `beta' = B beta`.
    pub fn advance(&self, p: &MixingPair) -> Result<Self> {
        let n = p.n();
        if self.alpha.len() != n || self.beta.len() != n {
            return domain("weight vector length does not match mixing pair");
        }
        check_stochastic(&self.alpha, "alpha")?;
        check_stochastic(&self.beta, "beta")?;
        let alpha: Vec<f64> = (0..n).map(|j| (0..n).map(|i| self.alpha[i] * p.a[(i, j)]).sum()).collect();
        let beta: Vec<f64> = (0..n).map(|i| (0..n).map(|j| p.b[(i, j)] * self.beta[j]).sum()).collect();
        if stochastic_dev(&alpha) > DRIFT_TOL || stochastic_dev(&beta) > DRIFT_TOL {
            return domain("weight recursion drifted off the simplex");
        }
        Ok(Self { alpha, beta })
    }
}

/// Absolute-probability sequence for `A^0, ..., A^{K-1}`: returns
/// `alpha_0, ..., alpha_K` with `alpha_K` uniform and
/// `alpha_k^T = alpha_{k+1}^T A^k`.
pub fn backward_alpha(mats: &[DMatrix<f64>]) -> Vec<Vec<f64>> {
    let n = mats.first().map_or(1, |m| m.nrows());
    let mut out = vec![vec![1.0 / n as f64; n]; mats.len() + 1];
    for k in (0..mats.len()).rev() {
        let next = &out[k + 1];
        out[k] = (0..n).map(|j| (0..n).map(|i| next[i] * mats[k][(i, j)]).sum()).collect();
    }
    out
}
